import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cuffsim.mapping import MappingConfig
from cuffsim.psychophysics import (
    Z75,
    BootstrapError,
    DiscriminationObserver,
    FitError,
    GLMMConvergenceError,
    ObserverTruth,
    PsychometricFit,
    SeparationError,
    StimulusSpec,
    Stimulus,
    TrialRecord,
    bootstrap_ci,
    build_session,
    compare_conditions,
    fit_glmm,
    fit_probit_glm,
    load_trials,
    response_probability,
    run_discrimination,
    save_trials,
    simulate_block,
    synthetic_observer,
)
from cuffsim.softhand import GraspObject

TAN = StimulusSpec.tangential()
TRUTH = ObserverTruth(17.42, 2.91)


def draw(truth, n, seed, lo=5.97, hi=29.85):
    rng = np.random.default_rng(seed)
    x = np.repeat(np.linspace(lo, hi, 5), n // 5)
    return x, synthetic_observer(x, 17.91, truth, rng)


# --- design -----------------------------------------------------------------


def test_session_balanced():
    trials = build_session(TAN, 0)
    assert len(trials) == 100
    cells = {}
    for t in trials:
        cells[(t.comparison_value, t.presentation_order)] = cells.get((t.comparison_value, t.presentation_order), 0) + 1
    assert len(cells) == 10 and set(cells.values()) == {10}


def test_session_deterministic():
    a, b = build_session(TAN, 7), build_session(TAN, 7)
    assert [(t.comparison_value, t.presentation_order) for t in a] == \
        [(t.comparison_value, t.presentation_order) for t in b]
    c = build_session(TAN, 8)
    assert [t.comparison_value for t in a] != [t.comparison_value for t in c]


def test_session_divisibility():
    with pytest.raises(ValueError):
        build_session(StimulusSpec.tangential(trials_per_session=7), 0)


def test_stimulus_specs():
    assert TAN.comparisons == (5.97, 11.94, 17.91, 23.88, 29.85)
    assert StimulusSpec.force().reference == 9.0
    with pytest.raises(ValueError):
        StimulusSpec("force_N", 9.0, (3.0, 6.0, 10.0))


# --- observer ---------------------------------------------------------------


def test_observer_examples():
    assert response_probability(TRUTH.pse, TRUTH) == pytest.approx(0.5, abs=1e-15)
    b1 = 0.6745 / 2.91
    assert TRUTH.beta1 == pytest.approx(b1, rel=1e-4)
    assert response_probability(29.85, TRUTH) == pytest.approx(stats.norm.cdf(b1 * 29.85 - 17.42 * b1), abs=1e-4)
    assert response_probability(29.85, TRUTH) == pytest.approx(0.998, abs=1e-3)
    flat = ObserverTruth(17.42, 1e12)
    assert np.allclose(response_probability(np.array([0.0, 17.0, 30.0]), flat), 0.5, atol=1e-9)
    with pytest.raises(ValueError):
        ObserverTruth(1.0, 0.0)


def test_observer_frequency():
    rng = np.random.default_rng(0)
    r = synthetic_observer(np.full(200_000, 20.0), 17.91, TRUTH, rng)
    assert r.mean() == pytest.approx(response_probability(20.0, TRUTH), abs=0.005)


# --- GLM --------------------------------------------------------------------


def test_glm_large_sample_recovery():
    x, y = draw(TRUTH, 100_000, 1)
    fit = fit_probit_glm(x=x, y=y)
    assert abs(fit.pse - 17.42) < 0.1 and abs(fit.jnd - 2.91) < 0.1
    assert fit.converged


def test_glm_shrinking_error():
    errs = []
    for n in (1_000, 10_000, 100_000):
        e = []
        for s in range(8):
            fit = fit_probit_glm(x=draw(TRUTH, n, 100 + s)[0], y=draw(TRUTH, n, 100 + s)[1])
            e.append(abs(fit.pse - 17.42) + abs(fit.jnd - 2.91))
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_glm_separation():
    x = np.repeat(TAN.comparisons, 10)
    y = (x > 17.91).astype(int)
    with pytest.raises(SeparationError, match="separation"):
        fit_probit_glm(x=x, y=y)
    with pytest.raises(SeparationError, match="all responses"):
        fit_probit_glm(x=x, y=np.ones_like(y))


def test_glm_symmetric_responses():
    x = np.repeat(TAN.comparisons, 40)
    p = {5.97: 0.1, 11.94: 0.3, 17.91: 0.5, 23.88: 0.7, 29.85: 0.9}
    y = np.concatenate([np.r_[np.ones(int(p[c] * 40)), np.zeros(40 - int(p[c] * 40))] for c in TAN.comparisons])
    assert fit_probit_glm(x=x, y=y.astype(int)).pse == pytest.approx(17.91, abs=1e-6)


def test_glm_loglik_monotone():
    x, y = draw(TRUTH, 500, 3)
    trace = np.array(fit_probit_glm(x=x, y=y).loglik_trace)
    assert np.all(np.diff(trace) >= -1e-9)


def test_glm_matches_scipy_optimizer():
    x, y = draw(TRUTH, 1000, 4)
    fit = fit_probit_glm(x=x, y=y)

    def nll(b):
        eta = b[0] + b[1] * x
        return -np.sum(y * stats.norm.logcdf(eta) + (1 - y) * stats.norm.logcdf(-eta))

    from scipy.optimize import minimize

    ref = minimize(nll, [-4.0, 0.2], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert fit.beta0 == pytest.approx(ref.x[0], rel=1e-4)
    assert fit.beta1 == pytest.approx(ref.x[1], rel=1e-4)


@given(st.floats(-5.0, 5.0), st.floats(0.05, 5.0))
def test_pse_jnd_identities(b0, b1):
    fit = PsychometricFit(b0, b1)
    assert abs(stats.norm.cdf(b1 * fit.pse + b0) - 0.5) < 1e-10
    assert abs(stats.norm.cdf(b1 * (fit.pse + fit.jnd) + b0) - 0.75) < 1e-10
    assert fit.jnd == pytest.approx(0.6745 / b1, rel=1e-4)


@pytest.mark.parametrize("c", [0.1, 3.0, 25.4])
def test_scale_equivariance(c):
    x, y = draw(TRUTH, 2000, 5)
    a = fit_probit_glm(x=x, y=y)
    b = fit_probit_glm(x=c * x, y=y)
    assert b.pse == pytest.approx(c * a.pse, rel=1e-7)
    assert b.jnd == pytest.approx(c * a.jnd, rel=1e-7)
    assert np.allclose(b.probability(c * x), a.probability(x), atol=1e-9)


def test_fit_json_round_trip(tmp_path):
    fit = fit_glmm(simulate_block(TAN, TRUTH, seed=0))
    path = tmp_path / "f.json"
    fit.to_json(path)
    import json

    back = PsychometricFit.from_dict(json.loads(path.read_text()))
    assert back == fit


# --- GLMM -------------------------------------------------------------------


def test_glmm_needs_two_subjects():
    with pytest.raises(FitError):
        fit_glmm(simulate_block(TAN, TRUTH, n_subjects=1, seed=0))


def test_glmm_degenerate_matches_pooled():
    data = simulate_block(TAN, TRUTH, seed=2, intercept_sd=0.0)
    g, p = fit_glmm(data), fit_probit_glm(data)
    assert g.random_effect_sd < 0.1
    assert g.beta0 == pytest.approx(p.beta0, rel=0.01)
    assert g.beta1 == pytest.approx(p.beta1, rel=0.01)


def test_glmm_recovers_between_subject_sd():
    sds = [fit_glmm(simulate_block(TAN, TRUTH, seed=s, intercept_sd=0.6)).random_effect_sd for s in range(10)]
    assert 0.4 < np.mean(sds) < 0.8


def test_glmm_quadrature_stability():
    data = simulate_block(TAN, TRUTH, seed=3, intercept_sd=0.3)
    a, b = fit_glmm(data, n_nodes=3), fit_glmm(data, n_nodes=25)
    assert abs(a.beta0 / b.beta0 - 1) < 0.005
    assert abs(a.beta1 / b.beta1 - 1) < 0.005


def test_glmm_quadrature_matches_brute_force():
    from cuffsim.psychophysics import TrialTable, _GLMMData, _marginal_loglik
    from scipy import integrate, special

    data = simulate_block(TAN, TRUTH, n_subjects=3, seed=4, intercept_sd=0.4)
    t = TrialTable.from_records(data)
    d = _GLMMData(t.x, t.y, t.subject)
    theta = np.array([0.1, 0.25, 0.5])
    nodes, weights = special.roots_hermite(15)
    got = _marginal_loglik(theta, d, 1, nodes, weights)
    total = 0.0
    for s in range(3):
        def integrand(u, s=s):
            eta = theta[0] + theta[1] * d.x[s] + theta[2] * u
            ll = np.sum(d.k[s] * stats.norm.logcdf(eta) + (d.n[s] - d.k[s]) * stats.norm.logcdf(-eta))
            return math.exp(ll) * stats.norm.pdf(u)
        total += math.log(integrate.quad(integrand, -10, 10, epsabs=0, epsrel=1e-11, limit=200)[0])
    assert got == pytest.approx(total, abs=1e-6)


def test_glmm_random_slope_runs():
    data = simulate_block(TAN, TRUTH, seed=5, intercept_sd=0.3, slope_sd=0.2)
    fit = fit_glmm(data, random_slope=True, n_nodes=7)
    assert len(fit.random_effect_sd) == 3
    assert abs(fit.jnd - 2.91) < 0.6


def test_glmm_non_convergence_diagnostic():
    data = simulate_block(TAN, TRUTH, seed=6, intercept_sd=0.3)
    with pytest.raises(GLMMConvergenceError) as info:
        fit_glmm(data, max_iter=1)
    assert info.value.trajectory
    assert "log-likelihoods" in str(info.value)


def test_glmm_recovery_with_between_subject_sd():
    """Intercept SD 0.3: JND coverage holds; PSE spread follows the added subject variance."""
    pse, jnd = [], []
    for s in range(50):
        f = fit_glmm(simulate_block(TAN, TRUTH, seed=s, intercept_sd=0.3))
        pse.append(f.pse)
        jnd.append(f.jnd)
    pse, jnd = np.array(pse), np.array(jnd)
    assert np.mean((jnd >= 2.6) & (jnd <= 3.2)) >= 0.9
    # per-subject PSE SD is 0.3 / beta1; the population estimate averages 11 of them
    expected_sd = math.hypot(0.3 / TRUTH.beta1 / math.sqrt(11), 0.25)
    assert abs(pse.mean() - 17.42) < 3 * expected_sd / math.sqrt(50)
    assert 0.7 * expected_sd < pse.std() < 1.4 * expected_sd


# --- bootstrap --------------------------------------------------------------


def _identical_subjects(n=11):
    base = simulate_block(TAN, TRUTH, n_subjects=1, seed=9)
    out = []
    for i in range(n):
        out += [TrialRecord(f"s{i:02d}", t.block, t.comparison_value, t.presentation_order, t.response) for t in base]
    return out


def test_bootstrap_zero_width_on_degenerate_data():
    res = bootstrap_ci(_identical_subjects(), fit_probit_glm, B=100, seed=0)
    assert res.pse_ci[1] - res.pse_ci[0] < 1e-9
    assert res.jnd_ci[1] - res.jnd_ci[0] < 1e-9


def test_bootstrap_minimum_B():
    with pytest.raises(ValueError):
        bootstrap_ci(simulate_block(TAN, TRUTH, seed=0), fit_probit_glm, B=99)


def test_bootstrap_deterministic():
    data = simulate_block(TAN, TRUTH, seed=0)
    a = bootstrap_ci(data, fit_probit_glm, B=200, seed=4)
    b = bootstrap_ci(data, fit_probit_glm, B=200, seed=4)
    assert a.pse_ci == b.pse_ci and a.jnd_ci == b.jnd_ci


def test_bootstrap_jnd_width_order():
    res = bootstrap_ci(simulate_block(TAN, TRUTH, seed=1), fit_glmm, B=200, seed=1)
    width = res.jnd_ci[1] - res.jnd_ci[0]
    assert 0.3 < width < 1.2


def test_bootstrap_failure_budget():
    # one informative subject among many separated ones makes most refits fail
    good = simulate_block(TAN, TRUTH, n_subjects=1, seed=3)
    bad = []
    for i in range(10):
        bad += [TrialRecord(f"b{i}", "rightward", c, "ref-first", int(c > 17.91)) for c in TAN.comparisons * 4]
    with pytest.raises(BootstrapError):
        bootstrap_ci(good + bad, fit_probit_glm, B=100, seed=0)


def test_compare_identical_centered():
    data = simulate_block(TAN, TRUTH, seed=2)
    res = compare_conditions(data, data, fit_probit_glm, B=200, seed=0)
    assert res.diff_pse == 0 and res.diff_jnd == 0
    assert res.pse_ci == (0.0, 0.0) and res.jnd_includes_zero


def test_compare_mismatched_channels():
    a = simulate_block(TAN, TRUTH, seed=0)
    b = simulate_block(StimulusSpec.force(), ObserverTruth(9.75, 2.21), seed=0)
    with pytest.raises(ValueError, match="channel"):
        compare_conditions(a, b, fit_probit_glm, B=100)


@pytest.mark.slow
def test_compare_power_for_pse_offset():
    hits = 0
    n = 40
    for s in range(n):
        a = simulate_block(TAN, ObserverTruth(17.42, 2.8), seed=s, block="rightward")
        b = simulate_block(TAN, ObserverTruth(18.27, 2.8), seed=10_000 + s, block="leftward")
        hits += not compare_conditions(a, b, fit_probit_glm, B=1000, seed=s).pse_includes_zero
    assert hits > n / 2


def test_trials_csv_round_trip(tmp_path):
    data = simulate_block(TAN, TRUTH, n_subjects=2, seed=0)
    path = tmp_path / "t.csv"
    save_trials(data, path)
    back = load_trials(path)
    assert back == data


def test_trials_csv_errors(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("subject,block,comparison,order,response\ns01,rightward,5.97,ref-first,1\ns01,upward,1,ref-first,0\n")
    with pytest.raises(ValueError, match=":3:"):
        load_trials(path)


# --- discrimination ---------------------------------------------------------

MAP = MappingConfig(rc_SHmax=1500.0)


def test_identical_pair_equal_rate():
    obs = DiscriminationObserver()
    # perceived difference ~ N(0, 1/Z75) in JND units; equal when within the window
    oracle = math.erf(obs.equality * Z75 / math.sqrt(2))
    assert oracle > 0.5
    res = run_discrimination(MAP, obs, seed=0, repeats=2000)
    m = res.matrices["proprioception"]
    for i in range(len(m.labels)):
        assert m.expected[i, i] == pytest.approx(oracle, abs=1e-12)
        assert m.equal_rate[i, i] == pytest.approx(oracle, abs=0.03)


def test_projected_exponential_beats_linear_on_40_80():
    pair = {"rigid": ("proprioception", [Stimulus("none", GraspObject.empty(), 19000.0, 0.0),
                                        Stimulus("40", GraspObject.rigid(40), 19000.0, 40.0),
                                        Stimulus("80", GraspObject.rigid(80), 19000.0, 80.0)])}
    for seed in range(5):
        lin = run_discrimination(MAP, seed=seed, sets=pair, repeats=50).matrices["rigid"]
        exp = run_discrimination(MAP, seed=seed, sets=pair, position_map="exponential", repeats=50).matrices["rigid"]
        assert exp.expected[1, 2] >= lin.expected[1, 2]
        assert exp.success[1, 2] >= lin.success[1, 2] - 0.1


def test_noiseless_observer_perfect():
    res = run_discrimination(MAP, DiscriminationObserver.noiseless(), seed=0, position_map="exponential",
                             force_map="logarithmic")
    for m in res.matrices.values():
        assert np.all(m.success == 1.0)


def test_discrimination_requires_closed_hand():
    sets = {"x": ("force", [Stimulus("40", GraspObject.rigid(40), 18000.0, 40.0)])}
    with pytest.raises(ValueError, match="closed-hand"):
        run_discrimination(MAP, seed=0, sets=sets)


def test_discrimination_matrix_shape_and_csv(tmp_path):
    res = run_discrimination(MAP, seed=1)
    m = res.matrices["proprioception"]
    assert m.success.shape == (4, 4) and m.labels[0] == "none"
    assert np.allclose(m.success, m.success.T)
    path = tmp_path / "m.csv"
    res.to_csv(path)
    assert len(path.read_text().splitlines()) == 1 + sum(len(x.labels) ** 2 for x in res.matrices.values())


def test_discrimination_deterministic():
    a = run_discrimination(MAP, seed=3)
    b = run_discrimination(MAP, seed=3)
    assert list(a.rows()) == list(b.rows())
