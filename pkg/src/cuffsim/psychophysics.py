"""
Method-of-constant-stimuli tooling: session design, synthetic probit
observers, probit GLM / GLMM fitting, cluster bootstrap and the three-way
cylinder discrimination task.

Psychometric model::

    P(comparison judged larger) = Phi(beta0 + beta1 * x)
    PSE = -beta0 / beta1,   JND = Phi^-1(0.75) / beta1
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special, stats

__all__ = [
    "Z75",
    "CHANNELS",
    "BLOCKS",
    "StimulusSpec",
    "TrialRecord",
    "ObserverTruth",
    "PsychometricFit",
    "FitError",
    "SeparationError",
    "GLMMConvergenceError",
    "BootstrapError",
    "BootstrapResult",
    "TrialTable",
    "ComparisonResult",
    "build_session",
    "response_probability",
    "synthetic_observer",
    "simulate_block",
    "fit_probit_glm",
    "fit_glmm",
    "bootstrap_ci",
    "compare_conditions",
    "load_trials",
    "save_trials",
    "DiscriminationObserver",
    "DiscriminationMatrix",
    "DiscriminationResult",
    "Stimulus",
    "discrimination_sets",
    "perceptual_units",
    "stimulus_commands",
    "run_discrimination",
]

Z75 = float(stats.norm.ppf(0.75))  # 0.6745
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHANNELS = ("tangential_mm", "force_N")
BLOCKS = {"rightward": "tangential_mm", "leftward": "tangential_mm", "force": "force_N"}
ORDERS = ("ref-first", "ref-second")


class FitError(ValueError):
    pass


class SeparationError(FitError):
    pass


class GLMMConvergenceError(FitError):
    def __init__(self, msg: str, trajectory: list[float]):
        super().__init__(f"{msg}; last log-likelihoods: {[round(v, 6) for v in trajectory[-5:]]}")
        self.trajectory = trajectory


class BootstrapError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True)
class StimulusSpec:
    channel: str
    reference: float
    comparisons: tuple
    trials_per_session: int = 100
    inter_stimulus_interval: float = 2.0
    stimulus_duration: float = 1.0

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        comps = tuple(float(c) for c in self.comparisons)
        object.__setattr__(self, "comparisons", comps)
        if len(comps) < 2:
            raise ValueError("need at least two comparison values")
        steps = np.diff(comps)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
            raise ValueError("comparisons must be increasing and equally spaced")
        if self.trials_per_session < 1:
            raise ValueError("trials_per_session must be positive")

    @classmethod
    def tangential(cls, **kw) -> "StimulusSpec":
        return cls("tangential_mm", 17.91, (5.97, 11.94, 17.91, 23.88, 29.85), **kw)

    @classmethod
    def force(cls, **kw) -> "StimulusSpec":
        return cls("force_N", 9.0, (3.0, 6.0, 9.0, 12.0, 15.0), **kw)


@dataclass
class TrialRecord:
    subject_id: str
    block: str
    comparison_value: float
    presentation_order: str
    response: int | None = None

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {tuple(BLOCKS)}")
        if self.presentation_order not in ORDERS:
            raise ValueError(f"presentation_order must be one of {ORDERS}")
        if self.response is not None and self.response not in (0, 1):
            raise ValueError("response must be 0, 1 or None")

    @property
    def channel(self) -> str:
        return BLOCKS[self.block]


def build_session(spec: StimulusSpec, seed: int | np.random.Generator | None = 0, subject_id: str = "s01",
                  block: str | None = None) -> list[TrialRecord]:
    """Balanced comparisons x presentation orders in a seeded random order."""
    block = block or ("rightward" if spec.channel == "tangential_mm" else "force")
    if BLOCKS.get(block) != spec.channel:
        raise ValueError(f"block {block!r} does not belong to channel {spec.channel}")
    cells = [(c, o) for c in spec.comparisons for o in ORDERS]
    if spec.trials_per_session % len(cells):
        raise ValueError(f"{spec.trials_per_session} trials do not divide into {len(cells)} design cells")
    reps = spec.trials_per_session // len(cells)
    design = cells * reps
    order = np.random.default_rng(seed).permutation(len(design))
    return [TrialRecord(subject_id, block, design[i][0], design[i][1]) for i in order]


# ---------------------------------------------------------------------------
# observers


@dataclass(frozen=True)
class ObserverTruth:
    pse: float
    jnd: float

    def __post_init__(self):
        if not self.jnd > 0:
            raise ValueError("jnd must be positive")

    @property
    def beta1(self) -> float:
        return Z75 / self.jnd if math.isfinite(self.jnd) else 0.0

    @property
    def beta0(self) -> float:
        return -self.beta1 * self.pse


def response_probability(comparison, truth: ObserverTruth, intercept_shift: float = 0.0):
    """Phi(beta1 x + beta0 + shift)."""
    return special.ndtr(truth.beta1 * np.asarray(comparison, dtype=float) + truth.beta0 + intercept_shift)


def synthetic_observer(comparison, reference, truth: ObserverTruth, rng: np.random.Generator,
                       intercept_shift: float = 0.0):
    """Binary 'comparison larger' responses drawn from the probit model.

    ``reference`` is part of the trial but the model is expressed directly
    in comparison units, so it only labels the trial.
    """
    p = response_probability(comparison, truth, intercept_shift)
    r = (rng.random(np.shape(p)) < p).astype(int)
    return int(r) if np.ndim(r) == 0 else r


def simulate_block(spec: StimulusSpec, truth: ObserverTruth, n_subjects: int = 11,
                   seed: int | None = 0, block: str | None = None, intercept_sd: float = 0.0,
                   slope_sd: float = 0.0) -> list[TrialRecord]:
    """Sessions for ``n_subjects`` synthetic observers, one substream each.

    Subjects differ by a probit-scale intercept offset (SD ``intercept_sd``)
    and a relative slope factor (SD ``slope_sd``).
    """
    block = block or ("rightward" if spec.channel == "tangential_mm" else "force")
    ss = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(ss.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        sid = f"s{i + 1:02d}"
        trials = build_session(spec, rng, sid, block)
        shift = intercept_sd * rng.standard_normal()
        scale = max(1e-3, 1.0 + slope_sd * rng.standard_normal())
        t_i = ObserverTruth(truth.pse, truth.jnd / scale)
        x = np.array([t.comparison_value for t in trials])
        r = synthetic_observer(x, spec.reference, t_i, rng, shift)
        for t, ri in zip(trials, r):
            t.response = int(ri)
        out.extend(trials)
    return out


# ---------------------------------------------------------------------------
# fits


@dataclass(frozen=True)
class PsychometricFit:
    beta0: float
    beta1: float
    model: str = "per_subject_glm"
    channel: str | None = None
    ci95_pse: tuple | None = None
    ci95_jnd: tuple | None = None
    random_effect_sd: float | tuple | None = None
    loglik: float = float("nan")
    n_trials: int = 0
    n_subjects: int = 1
    iterations: int = 0
    converged: bool = True
    loglik_trace: tuple = field(default=(), repr=False, compare=False)

    @property
    def pse(self) -> float:
        return -self.beta0 / self.beta1

    @property
    def jnd(self) -> float:
        return Z75 / self.beta1

    def probability(self, x):
        return special.ndtr(self.beta0 + self.beta1 * np.asarray(x, dtype=float))

    def with_ci(self, boot: "BootstrapResult") -> "PsychometricFit":
        return replace(self, ci95_pse=boot.pse_ci, ci95_jnd=boot.jnd_ci)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("loglik_trace")
        d.update(pse=self.pse, jnd=self.jnd)
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "PsychometricFit":
        d = {k: v for k, v in d.items() if k not in ("pse", "jnd")}
        for k in ("ci95_pse", "ci95_jnd"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if isinstance(d.get("random_effect_sd"), list):
            d["random_effect_sd"] = tuple(d["random_effect_sd"])
        return cls(**d)


@dataclass(frozen=True)
class TrialTable:
    """Column view of responded trials; ``subject`` holds integer cluster codes."""

    x: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    channel: str
    subject_ids: tuple = ()

    @classmethod
    def from_records(cls, trials: Sequence[TrialRecord]) -> "TrialTable":
        if isinstance(trials, TrialTable):
            return trials
        if not trials:
            raise FitError("no trials")
        if any(t.response is None for t in trials):
            raise FitError("trials without responses")
        chans = {t.channel for t in trials}
        if len(chans) != 1:
            raise FitError(f"trials mix channels {sorted(chans)}")
        ids = tuple(dict.fromkeys(t.subject_id for t in trials))
        code = {s: i for i, s in enumerate(ids)}
        return cls(np.array([t.comparison_value for t in trials], dtype=float),
                   np.array([t.response for t in trials], dtype=int),
                   np.array([code[t.subject_id] for t in trials], dtype=int), chans.pop(), ids)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_subjects(self) -> int:
        return len(np.unique(self.subject))

    def clusters(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.subject == c) for c in np.unique(self.subject)]

    def take_clusters(self, clusters: list[np.ndarray], idx) -> "TrialTable":
        """Concatenate the chosen clusters, each draw becoming its own subject."""
        rows = np.concatenate([clusters[i] for i in idx])
        sub = np.concatenate([np.full(len(clusters[i]), j) for j, i in enumerate(idx)])
        return TrialTable(self.x[rows], self.y[rows], sub, self.channel)


def _channel_of(trials) -> str:
    return TrialTable.from_records(trials).channel


def _arrays(trials):
    t = TrialTable.from_records(trials)
    return t.x, t.y, t.subject


def _aggregate(x, y):
    levels, inv = np.unique(x, return_inverse=True)
    n = np.bincount(inv).astype(float)
    k = np.bincount(inv, weights=y).astype(float)
    return levels, k, n


def _loglik(eta, k, n) -> float:
    return float(np.sum(k * special.log_ndtr(eta) + (n - k) * special.log_ndtr(-eta)))


def _check_separation(x, y) -> None:
    if y.min() == y.max():
        raise SeparationError(f"all responses are {int(y[0])}; the slope is not identifiable")
    x0, x1 = x[y == 0], x[y == 1]
    if x0.max() <= x1.min():
        raise SeparationError(
            f"complete separation: every response at x <= {x0.max():g} is 0 and every response at "
            f"x >= {x1.min():g} is 1")
    if x1.max() <= x0.min():
        raise SeparationError(
            f"complete separation: every response at x <= {x1.max():g} is 1 and every response at "
            f"x >= {x0.min():g} is 0")


def _irls(levels, k, n, tol: float = 1e-8, max_iter: int = 100):
    """Probit IRLS with step halving. Returns (beta, loglik trajectory, iterations, converged)."""
    X = np.column_stack([np.ones_like(levels), levels])
    beta = np.zeros(2)
    ll = _loglik(X @ beta, k, n)
    traj = [ll]
    p_obs = k / n
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = np.clip(special.ndtr(eta), 1e-15, 1 - 1e-15)
        phi = np.maximum(np.exp(-0.5 * eta * eta - _HALF_LOG_2PI), 1e-300)
        w = n * phi**2 / (mu * (1 - mu))
        z = eta + (p_obs - mu) / phi
        XtW = X.T * w
        new = np.linalg.solve(XtW @ X, XtW @ z)
        ll_new = _loglik(X @ new, k, n)
        halvings = 0
        while ll_new < ll - 1e-12 and halvings < 40:
            new = 0.5 * (beta + new)
            ll_new = _loglik(X @ new, k, n)
            halvings += 1
        step = np.max(np.abs(new - beta))
        beta, ll = new, ll_new
        traj.append(ll)
        if step < tol:
            return beta, traj, it, True
    return beta, traj, max_iter, False


def fit_probit_glm(trials: Sequence[TrialRecord] | None = None, *, x=None, y=None) -> PsychometricFit:
    """Maximum-likelihood probit fit by IRLS (pooled over all given trials)."""
    channel = None
    if trials is not None:
        table = TrialTable.from_records(trials)
        channel, x, y = table.channel, table.x, table.y
        n_subj = table.n_subjects
    else:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=int)
        n_subj = 1
    _check_separation(x, y)
    levels, k, n = _aggregate(x, y)
    center = float(np.mean(x))
    beta, traj, its, ok = _irls(levels - center, k, n)
    b1 = float(beta[1])
    if not b1 > 0:
        raise FitError(f"non-positive slope {b1:g}: responses do not increase with the stimulus")
    b0 = float(beta[0] - b1 * center)
    return PsychometricFit(b0, b1, "per_subject_glm", channel, loglik=traj[-1], n_trials=len(x),
                           n_subjects=n_subj, iterations=its, converged=ok, loglik_trace=tuple(traj))


# ---------------------------------------------------------------------------
# GLMM


def _dlog_ndtr(t):
    """d/dt log Phi(t) (inverse Mills ratio), stable in both tails."""
    return np.exp(-0.5 * t * t - _HALF_LOG_2PI - special.log_ndtr(t))


class _GLMMData:
    """Per-subject aggregated counts, padded to a rectangle."""

    def __init__(self, x, y, subj):
        ids = list(dict.fromkeys(subj.tolist()))
        self.ids = ids
        self.center = float(np.mean(x))
        groups = [_aggregate(x[subj == s] - self.center, y[subj == s]) for s in ids]
        L = max(len(g[0]) for g in groups)
        S = len(ids)
        self.x = np.zeros((S, L))
        self.k = np.zeros((S, L))
        self.n = np.zeros((S, L))
        for i, (lv, k, n) in enumerate(groups):
            self.x[i, :len(lv)] = lv
            self.k[i, :len(lv)] = k
            self.n[i, :len(lv)] = n


def _chol(params, dim):
    L = np.zeros((dim, dim))
    if dim == 1:
        L[0, 0] = params[0]
    else:
        L[0, 0], L[1, 0], L[1, 1] = params
    return L


def _marginal_loglik(theta, data: _GLMMData, dim: int, nodes, weights, newton_iter: int = 50):
    """Adaptive Gauss-Hermite log marginal likelihood, summed over subjects."""
    b0, b1 = theta[0], theta[1]
    L = _chol(theta[2:], dim)
    S, Lv = data.x.shape
    V = np.stack([np.ones_like(data.x), data.x], axis=-1)[..., :dim]  # S x L x d
    A = V @ L  # d eta / d z, S x L x d
    base = b0 + b1 * data.x
    k, n = data.k, data.n

    def g_parts(z):
        eta = base + np.einsum("sld,sd->sl", A, z)
        ll = k * special.log_ndtr(eta) + (n - k) * special.log_ndtr(-eta)
        val = ll.sum(axis=1) - 0.5 * np.sum(z * z, axis=1)
        lp, lm = _dlog_ndtr(eta), _dlog_ndtr(-eta)
        a = k * lp - (n - k) * lm
        c = -k * lp * (eta + lp) - (n - k) * lm * (-eta + lm)
        grad = np.einsum("sl,sld->sd", a, A) - z
        hess = np.einsum("sl,sld,sle->sde", c, A, A) - np.eye(dim)
        return val, grad, hess

    z = np.zeros((S, dim))
    val, grad, hess = g_parts(z)
    for _ in range(newton_iter):
        step = np.linalg.solve(hess, grad[..., None])[..., 0]
        t = np.ones(S)
        for _h in range(30):
            z_try = z - t[:, None] * step
            v_try, g_try, h_try = g_parts(z_try)
            bad = v_try < val - 1e-12
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        z, val, grad, hess = z_try, v_try, g_try, h_try
        if np.max(np.abs(step * t[:, None])) < 1e-10:
            break
    # scale from the curvature at the mode: C C^T = (-H)^-1
    C = np.linalg.cholesky(np.linalg.inv(-hess))
    if dim == 1:
        T = nodes[:, None]
        W = weights
    else:
        T = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), -1).reshape(-1, 2)
        W = np.outer(weights, weights).ravel()
    pts = z[:, None, :] + math.sqrt(2.0) * np.einsum("sde,qe->sqd", C, T)  # S x Q x d
    eta = base[:, None, :] + np.einsum("sld,sqd->sql", A, pts)
    ll = (k[:, None, :] * special.log_ndtr(eta) + (n - k)[:, None, :] * special.log_ndtr(-eta)).sum(-1)
    g = ll - 0.5 * np.sum(pts * pts, axis=-1) + np.sum(T * T, axis=-1)[None, :]
    logdet = np.log(np.abs(np.prod(np.diagonal(C, axis1=1, axis2=2), axis=1)))
    lse = special.logsumexp(g, b=W[None, :], axis=1)
    # (2 pi)^(-d/2) from the standard-normal prior, 2^(d/2) |C| from the change of variables
    return float(np.sum(lse + logdet + 0.5 * dim * math.log(2.0) - 0.5 * dim * math.log(2 * math.pi)))


def fit_glmm(trials: Sequence[TrialRecord], n_nodes: int = 15, random_slope: bool = False,
             max_iter: int = 500, start: PsychometricFit | None = None) -> PsychometricFit:
    """Probit GLMM with subject random intercept (and optionally slope).

    The marginal likelihood is integrated by adaptive Gauss-Hermite
    quadrature and maximized with L-BFGS-B. ``random_effect_sd`` is the
    intercept SD, or (intercept SD, slope SD, correlation) with a random
    slope; the intercept refers to the stimulus centred at its mean.
    """
    table = TrialTable.from_records(trials)
    channel, x, y, subj = table.channel, table.x, table.y, table.subject
    data = _GLMMData(x, y, subj)
    if len(data.ids) < 2:
        raise FitError("a mixed model needs at least two subjects")
    _check_separation(x, y)
    dim = 2 if random_slope else 1
    nodes, weights = special.roots_hermite(n_nodes)
    pooled = start if start is not None else fit_probit_glm(table)
    b0c = pooled.beta0 + pooled.beta1 * data.center
    theta0 = np.array([b0c, pooled.beta1] + ([0.2] if dim == 1 else [0.2, 0.0, 0.02]))
    bounds = [(None, None), (1e-8, None)] + ([(0.0, None)] if dim == 1 else [(0.0, None), (None, None), (0.0, None)])
    traj: list[float] = []

    def objective(theta):
        v = -_marginal_loglik(theta, data, dim, nodes, weights)
        traj.append(-v)
        return v

    res = optimize.minimize(objective, theta0, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-7})
    if not res.success and res.nit >= max_iter:
        raise GLMMConvergenceError(f"GLMM did not converge in {max_iter} iterations ({res.message})", traj)
    b0c, b1 = float(res.x[0]), float(res.x[1])
    if not b1 > 0:
        raise FitError(f"non-positive slope {b1:g}")
    if dim == 1:
        re_sd = float(res.x[2])
    else:
        L = _chol(res.x[2:], 2)
        cov = L @ L.T
        sd0, sd1 = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
        corr = cov[0, 1] / (sd0 * sd1) if sd0 > 0 and sd1 > 0 else 0.0
        re_sd = (sd0, sd1, corr)
    return PsychometricFit(b0c - b1 * data.center, b1, "glmm", channel, random_effect_sd=re_sd,
                           loglik=float(-res.fun), n_trials=len(x), n_subjects=len(data.ids),
                           iterations=int(res.nit), converged=bool(res.success))


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    pse_ci: tuple
    jnd_ci: tuple
    pse: np.ndarray
    jnd: np.ndarray
    n_failed: int
    B: int

    def to_dict(self) -> dict:
        return {"pse_ci": list(self.pse_ci), "jnd_ci": list(self.jnd_ci), "B": self.B,
                "n_failed": self.n_failed}


def _percentile(v) -> tuple:
    lo, hi = np.percentile(v, [2.5, 97.5])
    return (float(lo), float(hi))


def bootstrap_ci(trials: Sequence[TrialRecord], fitter: Callable = fit_glmm, B: int = 1000,
                 seed: int | None = 0, max_fail: float = 0.2) -> BootstrapResult:
    """Cluster bootstrap: resample subjects with replacement and refit."""
    if B < 100:
        raise ValueError("B must be at least 100")
    table = TrialTable.from_records(trials)
    groups = table.clusters()
    rng = np.random.default_rng(seed)
    pse, jnd, failed = [], [], 0
    for _ in range(B):
        idx = rng.integers(0, len(groups), len(groups))
        try:
            f = fitter(table.take_clusters(groups, idx))
        except (FitError, np.linalg.LinAlgError):
            failed += 1
            continue
        pse.append(f.pse)
        jnd.append(f.jnd)
    if failed > max_fail * B:
        raise BootstrapError(f"{failed} of {B} bootstrap refits failed")
    pse, jnd = np.array(pse), np.array(jnd)
    return BootstrapResult(_percentile(pse), _percentile(jnd), pse, jnd, failed, B)


@dataclass(frozen=True)
class ComparisonResult:
    diff_pse: float
    diff_jnd: float
    pse_ci: tuple
    jnd_ci: tuple
    n_failed: int
    B: int

    @property
    def pse_includes_zero(self) -> bool:
        return self.pse_ci[0] <= 0.0 <= self.pse_ci[1]

    @property
    def jnd_includes_zero(self) -> bool:
        return self.jnd_ci[0] <= 0.0 <= self.jnd_ci[1]

    def to_dict(self) -> dict:
        return {"diff_pse": self.diff_pse, "diff_jnd": self.diff_jnd, "pse_ci": list(self.pse_ci),
                "jnd_ci": list(self.jnd_ci), "pse_includes_zero": self.pse_includes_zero,
                "jnd_includes_zero": self.jnd_includes_zero, "B": self.B, "n_failed": self.n_failed}


def compare_conditions(trials_a: Sequence[TrialRecord], trials_b: Sequence[TrialRecord],
                       fitter: Callable = fit_glmm, B: int = 1000, seed: int | None = 0,
                       max_fail: float = 0.2) -> ComparisonResult:
    """Bootstrap of (a - b) for PSE and JND.

    Subjects present in both conditions are resampled jointly (paired
    design); otherwise each condition is resampled independently.
    """
    ta, tb = TrialTable.from_records(trials_a), TrialTable.from_records(trials_b)
    if ta.channel != tb.channel:
        raise ValueError(f"conditions come from different channels ({ta.channel} vs {tb.channel})")
    fa, fb = fitter(ta), fitter(tb)
    paired = set(ta.subject_ids) == set(tb.subject_ids) and len(ta.subject_ids) > 0
    la = ta.clusters()
    if paired:
        # align b's clusters to a's subject order
        order = [tb.subject_ids.index(s) for s in ta.subject_ids]
        lb = [np.flatnonzero(tb.subject == c) for c in order]
    else:
        lb = tb.clusters()
    rng = np.random.default_rng(seed)
    dp, dj, failed = [], [], 0
    for _ in range(B):
        ia = rng.integers(0, len(la), len(la))
        ib = ia if paired else rng.integers(0, len(lb), len(lb))
        try:
            a = fitter(ta.take_clusters(la, ia))
            b = fitter(tb.take_clusters(lb, ib))
        except (FitError, np.linalg.LinAlgError):
            failed += 1
            continue
        dp.append(a.pse - b.pse)
        dj.append(a.jnd - b.jnd)
    if failed > max_fail * B:
        raise BootstrapError(f"{failed} of {B} bootstrap refits failed")
    return ComparisonResult(fa.pse - fb.pse, fa.jnd - fb.jnd, _percentile(dp), _percentile(dj), failed, B)


# ---------------------------------------------------------------------------
# CSV

TRIAL_COLUMNS = ("subject", "block", "comparison", "order", "response")


def save_trials(trials: Sequence[TrialRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for t in trials:
            w.writerow([t.subject_id, t.block, repr(float(t.comparison_value)), t.presentation_order,
                        "" if t.response is None else t.response])


def load_trials(path) -> list[TrialRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRIAL_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(TRIAL_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRIAL_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(TRIAL_COLUMNS)} fields")
            try:
                resp = None if row[4] == "" else int(row[4])
                out.append(TrialRecord(row[0], row[1], float(row[2]), row[3], resp))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# three-way cylinder discrimination

RESPONSES = ("smaller", "equal", "bigger")


@dataclass(frozen=True)
class DiscriminationObserver:
    """Observer judging whether the second stimulus is smaller, equal or bigger.

    Each perceived channel difference carries Gaussian noise with SD
    ``jnd / Z75``. Channels are combined in JND units, scaled by 1/sqrt(k)
    so the combined noise keeps the single-channel SD. The answer is
    'equal' when the combined difference lies within ``equality`` JNDs.
    A JND of zero means exact perception.
    """

    jnd_mm: float = 2.91
    jnd_N: float = 2.21
    equality: float = 1.2

    def __post_init__(self):
        if self.jnd_mm < 0 or self.jnd_N < 0 or self.equality < 0:
            raise ValueError("jnd and equality window must be non-negative")
        if (self.jnd_mm == 0) != (self.jnd_N == 0):
            raise ValueError("either both channels are exact (jnd 0) or neither is")

    @property
    def exact(self) -> bool:
        return self.jnd_mm == 0

    @classmethod
    def noiseless(cls) -> "DiscriminationObserver":
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class Stimulus:
    """One item of a discrimination set: an object grasped at a closure command.

    ``rank`` orders the set (the correct answer compares ranks).
    """

    label: str
    obj: object
    closure_cmd: float
    rank: float


# sign of each CUFF channel relative to object size: bigger objects stop the
# hand earlier (less slide) and are squeezed harder (more squeeze)
_MODALITY_CHANNELS = {
    "proprioception": ((-1.0, "slide"),),
    "force": ((1.0, "squeeze"),),
    "combined": ((-1.0, "slide"), (1.0, "squeeze")),
}


def discrimination_sets(p_SHmax: float = 19000.0) -> dict[str, tuple[str, list[Stimulus]]]:
    """Default sets: modality name -> (channel group, stimuli)."""
    from .softhand import GraspObject

    none = GraspObject.empty()
    prop = [Stimulus("none", none, p_SHmax, 0.0)] + [
        Stimulus(f"{d}", GraspObject.rigid(d), p_SHmax, d) for d in (40.0, 60.0, 80.0)]
    force = [Stimulus("none", none, 18000.0, 0.0)] + [
        Stimulus(f"60@{c:g}", GraspObject.rigid(60.0), c, c) for c in (15000.0, 16500.0, 18000.0)]
    rigid = [Stimulus("none", none, 18000.0, 0.0)] + [
        Stimulus(f"{d}", GraspObject.rigid(d), 18000.0, d) for d in (40.0, 60.0, 80.0)]
    soft = [Stimulus("none", none, 18000.0, 0.0)] + [
        Stimulus(f"{d}", GraspObject.soft(d), 18000.0, d) for d in (40.0, 60.0, 80.0)]
    return {
        "proprioception": ("proprioception", prop),
        "force": ("force", force),
        "combined_rigid": ("combined", rigid),
        "combined_soft": ("combined", soft),
    }


@dataclass
class DiscriminationMatrix:
    modality: str
    labels: list
    success: np.ndarray  # empirical rate, both presentation orders pooled
    expected: np.ndarray  # model probability of a correct answer
    equal_rate: np.ndarray
    n_trials: int  # per cell
    commands: dict  # label -> (slide, squeeze) CUFF commands

    @property
    def mean_offdiag(self) -> float:
        mask = ~np.eye(len(self.labels), dtype=bool)
        return float(self.success[mask].mean())

    @property
    def expected_offdiag(self) -> float:
        mask = ~np.eye(len(self.labels), dtype=bool)
        return float(self.expected[mask].mean())


@dataclass
class DiscriminationResult:
    matrices: dict
    position_map: str
    force_map: str
    seed: int | None

    @property
    def mean_success(self) -> float:
        return float(np.mean([m.mean_offdiag for m in self.matrices.values()]))

    def rows(self):
        for name, m in self.matrices.items():
            for i, a in enumerate(m.labels):
                for j, b in enumerate(m.labels):
                    yield (name, a, b, float(m.success[i, j]), float(m.expected[i, j]),
                           float(m.equal_rate[i, j]), m.n_trials)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modality", "first", "second", "success", "expected", "equal_rate", "n_trials"])
            for r in self.rows():
                w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4]), repr(r[5]), r[6]])

    def summary(self) -> dict:
        return {"position_map": self.position_map, "force_map": self.force_map, "seed": self.seed,
                "mean_success": self.mean_success,
                "modalities": {k: {"mean_offdiag": m.mean_offdiag, "expected_offdiag": m.expected_offdiag}
                               for k, m in self.matrices.items()}}


def perceptual_units(slide_ticks, squeeze_ticks, plant_cfg=None, load=None) -> tuple[float, float]:
    """CUFF commands in perceived units: slide in mm, squeeze in N."""
    from .plant import ArmLoadModel, PlantConfig, belt_displacement, invert_curve

    mm = float(belt_displacement(slide_ticks, plant_cfg or PlantConfig()))
    newton, _ = invert_curve(float(squeeze_ticks), load or ArmLoadModel())
    return mm, newton


def stimulus_commands(stim: Stimulus, mapping_cfg, position_map: str = "linear",
                      force_map: str = "linear", softhand_cfg=None, seed: int | None = 0,
                      duration: float = 1.5) -> tuple[float, float]:
    """Grasp, then map the settled SoftHand signals to (slide, squeeze) commands."""
    from .mapping import combined_schedule
    from .softhand import simulate_grasp

    sig = simulate_grasp(stim.obj, stim.closure_cmd, duration, softhand_cfg, seed)
    tail = max(1, len(sig) // 10)
    p = float(np.mean(sig.p_SHmeas[-tail:]))
    rc = float(np.mean(sig.rc_SHmeas[-tail:]))
    cmd = combined_schedule(p, rc, mapping_cfg, position_map, force_map)
    return cmd.slide, cmd.squeeze


def _answer_probabilities(mu, w):
    """P(smaller), P(equal), P(bigger) for a combined difference mu (JND units)."""
    s = 1.0 / Z75
    p_small = special.ndtr((-w - mu) / s)
    p_big = special.ndtr((mu - w) / s)
    return p_small, 1.0 - p_small - p_big, p_big


def run_discrimination(mapping_cfg, observer: DiscriminationObserver = DiscriminationObserver(),
                       seed: int | None = 0, position_map: str = "linear", force_map: str = "linear",
                       sets: dict | None = None, repeats: int = 2, softhand_cfg=None, plant_cfg=None,
                       load=None) -> DiscriminationResult:
    """Pairwise three-way discrimination over every ordered pair of each set.

    Each unordered pair is presented ``repeats`` times in each order; the
    cell value is the fraction of correct answers over those presentations.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    sets = sets if sets is not None else discrimination_sets(mapping_cfg.p_SHmax)
    ss = np.random.SeedSequence(seed)
    grasp_ss, obs_ss = ss.spawn(2)
    grasp_seeds = grasp_ss.generate_state(1)[0]
    out = {}
    for name, (group, stimuli) in sets.items():
        if not any(getattr(s.obj, "kind", None) == "none" for s in stimuli):
            raise ValueError(f"set {name!r} must include the closed-hand case")
        channels = _MODALITY_CHANNELS[group]
        k = len(stimuli)
        # every stimulus grasped with the same seed so pairs share the noise stream
        units = {}
        commands = {}
        for s in stimuli:
            slide, squeeze = stimulus_commands(s, mapping_cfg, position_map, force_map, softhand_cfg,
                                               int(grasp_seeds))
            commands[s.label] = (slide, squeeze)
            mm, newton = perceptual_units(slide, squeeze, plant_cfg, load)
            units[s.label] = {"slide": mm, "squeeze": newton}
        jnd = {"slide": observer.jnd_mm, "squeeze": observer.jnd_N}
        rng = np.random.default_rng(obs_ss.spawn(1)[0])
        success = np.zeros((k, k))
        expected = np.zeros((k, k))
        equal = np.zeros((k, k))
        n = 2 * repeats
        for i, a in enumerate(stimuli):
            for j, b in enumerate(stimuli):
                if j < i:
                    continue
                truth = np.sign(b.rank - a.rank)
                # mu: second minus first, in JND units, for order (a, b)
                if observer.exact:
                    mu = sum(sgn * (units[b.label][c] - units[a.label][c]) for sgn, c in channels)
                    w = 0.0
                else:
                    mu = sum(sgn * (units[b.label][c] - units[a.label][c]) / jnd[c]
                             for sgn, c in channels) / math.sqrt(len(channels))
                    w = observer.equality
                mus = np.array([mu] * repeats + [-mu] * repeats)
                truths = np.array([truth] * repeats + [-truth] * repeats)
                if observer.exact:
                    d = mus
                else:
                    d = mus + rng.standard_normal(n) / Z75
                resp = np.where(np.abs(d) <= w, 0.0, np.sign(d))
                if w == 0.0:
                    resp = np.sign(d)
                ok = resp == truths
                success[i, j] = success[j, i] = ok.mean()
                equal[i, j] = equal[j, i] = np.mean(resp == 0)
                if observer.exact:
                    exp_ok = float(np.mean(np.sign(mus) == truths))
                else:
                    ps, pe, pb = _answer_probabilities(mu, w)
                    exp_ok = pe if truth == 0 else (pb if truth > 0 else ps)
                expected[i, j] = expected[j, i] = exp_ok
        out[name] = DiscriminationMatrix(name, [s.label for s in stimuli], success, expected, equal, n,
                                         commands)
    return DiscriminationResult(out, position_map, force_map, seed)
