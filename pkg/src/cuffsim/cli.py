"""
``cuffsim`` command line.

Every subcommand writes its artifacts, the resolved ``config.ini`` and a
``manifest.json`` into ``--out`` and nowhere else.

Exit codes: 0 success, 1 I/O (missing or malformed input files),
2 usage (bad arguments or configuration), 3 runtime failure (fit,
simulation or link error).
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class InputError(Exception):
    """Unreadable or malformed input file (exit code 1)."""


def substream(seed: int, name: str) -> int:
    """Seed for the named module stream derived from the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _read(loader, path):
    try:
        return loader(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        raise InputError(msg if str(path) in msg else f"{path}: {msg}") from None


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# argument types


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _bootstrap_count(text: str) -> int:
    v = int(text)
    if v < 100:
        raise argparse.ArgumentTypeError(f"B must be at least 100, got {text}")
    return v


def _grasp_object(text: str):
    from .softhand import GraspObject

    t = text.strip().lower()
    if t == "none":
        return GraspObject.empty()
    kind = "rigid"
    for prefix in ("rigid", "soft"):
        if t.startswith(prefix):
            kind, t = prefix, t[len(prefix):]
    try:
        d = float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"object must be none, <mm>, rigid<mm> or soft<mm>, got {text}") from None
    return GraspObject.rigid(d) if kind == "rigid" else GraspObject.soft(d)


MAPPING_PRESETS = {"linear": ("linear", "linear"), "nonlinear": ("exponential", "logarithmic")}


# ---------------------------------------------------------------------------
# subcommands


def cmd_characterize(args, cfg: Config, out: Path) -> dict:
    from .calibration import run_characterization, save_dataset

    reps = args.reps if args.reps is not None else cfg.calibration.reps
    data = run_characterization(cfg.plant, sizes=args.sizes, reps=reps, noise=cfg.calibration.noise(),
                                seed=substream(args.seed, "calibration"), target=cfg.calibration.target,
                                base_load=cfg.load, gains=cfg.gains)
    save_dataset(data, out / "dataset.csv")
    print(f"{len(data)} samples from {len(args.sizes) * reps - len(data.invalid)} trials "
          f"({len(data.invalid)} invalid) -> {out / 'dataset.csv'}")
    return {"outputs": ["dataset.csv"]}


def cmd_fit(args, cfg: Config, out: Path) -> dict:
    from .calibration import fit_force_to_position, load_dataset, validate_fit

    data = _read(load_dataset, args.data)
    reps = np.unique(data.repetition)
    n_hold = max(1, int(round(args.holdout_frac * len(reps))))
    if n_hold >= len(reps):
        raise ConfigError(f"holdout fraction {args.holdout_frac} leaves no training repetitions")
    train, hold = data.split_by_repetition(set(reps[-n_hold:].tolist()))
    fit = fit_force_to_position(train, tighten_only=args.tighten_only)
    val = validate_fit(fit, hold)
    fit = fit.with_rmse(val.rmse)
    fit.to_json(out / "fit.json")
    order = np.argsort(val.predicted)
    with open(out / "validation.csv", "w") as fh:
        fh.write("force_measured_N,force_predicted_N,clamped\n")
        for i in order:
            fh.write(f"{hold.force[i]!r},{val.predicted[i]!r},{int(val.clamped[i])}\n")
    print(f"p = {fit.c3:.6g} F^3 + {fit.c2:.6g} F^2 + {fit.c1:.6g} F; adjusted R2 = {fit.adjusted_r2:.4f}; "
          f"RMSE = {val.rmse:.3f} N on {len(hold)} holdout samples")
    return {"outputs": ["fit.json", "validation.csv"]}


def cmd_psycho_run(args, cfg: Config, out: Path) -> dict:
    from .psychophysics import StimulusSpec, ObserverTruth, save_trials, simulate_block

    ps = cfg.psychophysics
    if args.channel == "tangential":
        spec, block = StimulusSpec.tangential(), f"{args.direction}ward"
    else:
        if args.direction is not None:
            raise ConfigError("--direction applies to the tangential channel only")
        spec, block = StimulusSpec.force(), "force"
    base = ps.truth(spec.channel)
    truth = ObserverTruth(args.pse if args.pse is not None else base.pse,
                          args.jnd if args.jnd is not None else base.jnd)
    trials = simulate_block(spec, truth, args.subjects or ps.n_subjects, substream(args.seed, "psychophysics"),
                            block, ps.intercept_sd, ps.slope_sd)
    save_trials(trials, out / "trials.csv")
    print(f"{len(trials)} trials ({block}) -> {out / 'trials.csv'}")
    return {"outputs": ["trials.csv"], "truth": {"pse": truth.pse, "jnd": truth.jnd}}


def _fitter(model: str, cfg: Config):
    from .psychophysics import fit_glmm, fit_probit_glm

    if model == "glm":
        return fit_probit_glm
    return lambda t: fit_glmm(t, n_nodes=cfg.psychophysics.glmm_nodes)


def cmd_psycho_fit(args, cfg: Config, out: Path) -> dict:
    from .psychophysics import load_trials

    trials = _read(load_trials, args.data)
    fit = _fitter(args.model, cfg)(trials)
    fit.to_json(out / "fit.json")
    xs = sorted({t.comparison_value for t in trials})
    grid = np.linspace(xs[0], xs[-1], 101)
    with open(out / "curve.csv", "w") as fh:
        fh.write("stimulus,p_fit\n")
        for x, p in zip(grid, fit.probability(grid)):
            fh.write(f"{x!r},{float(p)!r}\n")
    print(f"pse = {fit.pse:.4f}, jnd = {fit.jnd:.4f} ({fit.model}, {fit.n_trials} trials)")
    return {"outputs": ["fit.json", "curve.csv"]}


def cmd_psycho_bootstrap(args, cfg: Config, out: Path) -> dict:
    from .psychophysics import bootstrap_ci, load_trials

    trials = _read(load_trials, args.data)
    res = bootstrap_ci(trials, _fitter(args.model, cfg), args.B, substream(args.seed, "bootstrap"))
    _dump(res.to_dict(), out / "bootstrap.json")
    print(f"pse 95% CI [{res.pse_ci[0]:.4f}, {res.pse_ci[1]:.4f}], "
          f"jnd 95% CI [{res.jnd_ci[0]:.4f}, {res.jnd_ci[1]:.4f}]")
    return {"outputs": ["bootstrap.json"]}


def cmd_psycho_compare(args, cfg: Config, out: Path) -> dict:
    from .psychophysics import compare_conditions, load_trials

    a, b = _read(load_trials, args.a), _read(load_trials, args.b)
    res = compare_conditions(a, b, _fitter(args.model, cfg), args.B, substream(args.seed, "bootstrap"))
    _dump(res.to_dict(), out / "compare.json")
    print(f"pse diff {res.diff_pse:.4f} CI [{res.pse_ci[0]:.4f}, {res.pse_ci[1]:.4f}]; "
          f"jnd diff {res.diff_jnd:.4f} CI [{res.jnd_ci[0]:.4f}, {res.jnd_ci[1]:.4f}]")
    return {"outputs": ["compare.json"]}


def _mapping(args, cfg: Config):
    return cfg.mapping(rc_SHmax=args.rc_shmax, variant=args.variant)


def _maps(args, cfg: Config) -> tuple[str, str]:
    pm, fm = MAPPING_PRESETS[args.mapping] if args.mapping else (cfg.teleop.position_map, cfg.teleop.force_map)
    return args.position_map or pm, args.force_map or fm


def cmd_teleop(args, cfg: Config, out: Path) -> dict:
    from .teleop import run_teleop

    pm, fm = _maps(args, cfg)
    t = cfg.teleop
    res = run_teleop(_mapping(args, cfg), args.object, mode=args.mode, duration=args.duration, period=t.period,
                     closure_cmd=args.closure if args.closure is not None else t.closure_cmd,
                     position_map=pm, force_map=fm, seed=substream(args.seed, "teleop"), plant_cfg=cfg.plant,
                     load=cfg.load, gains=cfg.gains, softhand_cfg=cfg.softhand, corrupt_prob=t.corrupt_prob,
                     timeout_ticks=t.timeout_ticks)
    res.to_csv(out / "trace.csv")
    (out / "link_stats.json").write_text(res.stats.to_json() + "\n")
    last = res.trace[-1]
    print(f"{res.stats.exchanges} exchanges, final slide ref {last[6]:.2f}, squeeze ref {last[7]:.2f}, "
          f"force {last[14]:.3f} N")
    return {"outputs": ["trace.csv", "link_stats.json"], "position_map": pm, "force_map": fm}


def cmd_discriminate(args, cfg: Config, out: Path) -> dict:
    from .psychophysics import run_discrimination

    pm, fm = _maps(args, cfg)
    res = run_discrimination(_mapping(args, cfg), cfg.observer, substream(args.seed, "discrimination"), pm, fm,
                             repeats=args.repeats, softhand_cfg=cfg.softhand, plant_cfg=cfg.plant, load=cfg.load)
    res.to_csv(out / "success_matrix.csv")
    _dump(res.summary(), out / "summary.json")
    for name, m in res.matrices.items():
        print(f"{name:16s} mean off-diagonal success {m.mean_offdiag:.3f}")
    return {"outputs": ["success_matrix.csv", "summary.json"]}


def cmd_mapping(args, cfg: Config, out: Path) -> dict:
    from .mapping import write_mapping_table

    write_mapping_table(_mapping(args, cfg), out / "mapping_table.csv", args.n)
    print(f"{args.n} rows -> {out / 'mapping_table.csv'}")
    return {"outputs": ["mapping_table.csv"]}


def cmd_hysteresis(args, cfg: Config, out: Path) -> dict:
    from .control import hysteresis_loops

    loops = hysteresis_loops(cfg.plant, cfg.load, cfg.gains, rise=args.rise, fall=args.rise)
    with open(out / "hysteresis.csv", "w") as fh:
        fh.write("mode,reference,reference_norm,force_N\n")
        for name, lp in loops.items():
            peak = lp.reference.max()
            for r, f in zip(lp.reference, lp.force):
                fh.write(f"{name},{float(r)!r},{float(r / peak)!r},{float(f)!r}\n")
    areas = {name: lp.area for name, lp in loops.items()}
    _dump(areas, out / "areas.json")
    print(", ".join(f"{k} loop area {v:.4f}" for k, v in areas.items()))
    return {"outputs": ["hysteresis.csv", "areas.json"]}


def cmd_config(args, cfg: Config, out: Path) -> dict:
    print(f"resolved configuration -> {out / 'config.ini'}")
    return {"outputs": ["config.ini"]}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0, help="run seed; module streams derive from it")
    common.add_argument("--out", required=True, help="output directory (created if missing)")

    mapping = argparse.ArgumentParser(add_help=False)
    mapping.add_argument("--rc-shmax", type=float, help="SoftHand residual current full scale, mA")
    mapping.add_argument("--variant", choices=("verbatim", "projected"), help="nonlinear mapping variant")

    maps = argparse.ArgumentParser(add_help=False)
    maps.add_argument("--mapping", choices=tuple(MAPPING_PRESETS),
                      help="linear: both maps linear; nonlinear: exponential position + logarithmic force")
    maps.add_argument("--position-map", choices=("linear", "exponential"))
    maps.add_argument("--force-map", choices=("linear", "logarithmic"))

    p = argparse.ArgumentParser(prog="cuffsim", description="Belt haptic device simulation and analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("characterize", parents=[common], help="simulate the tighten-release characterization")
    s.add_argument("--sizes", "--radii", type=float, nargs="+", default=[80.0, 85.0, 90.0, 100.0, 115.0],
                   help="fixture sizes, mm")
    s.add_argument("--reps", type=_positive_int, help="repetitions per size")
    s.set_defaults(func=cmd_characterize)

    s = sub.add_parser("fit", parents=[common], help="fit the force-position cubic and validate it")
    s.add_argument("--data", required=True)
    s.add_argument("--holdout-frac", type=_fraction, default=0.2,
                   help="fraction of repetitions (the last ones) kept for validation")
    s.add_argument("--tighten-only", action="store_true")
    s.set_defaults(func=cmd_fit)

    ps = sub.add_parser("psycho", help="psychophysics sessions and fits")
    psub = ps.add_subparsers(dest="psycho_command", required=True)
    s = psub.add_parser("run", parents=[common], help="simulate one block for all subjects")
    s.add_argument("--channel", choices=("tangential", "force"), default="tangential")
    s.add_argument("--direction", choices=("right", "left"))
    s.add_argument("--subjects", type=_positive_int)
    s.add_argument("--pse", type=float)
    s.add_argument("--jnd", type=float)
    s.set_defaults(func=cmd_psycho_run)
    for name, func, help_ in (("fit", cmd_psycho_fit, "fit a psychometric function"),
                              ("bootstrap", cmd_psycho_bootstrap, "cluster bootstrap CIs")):
        s = psub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", required=True)
        s.add_argument("--model", choices=("glmm", "glm"), default="glmm")
        if name == "bootstrap":
            s.add_argument("--B", type=_bootstrap_count, default=1000)
        s.set_defaults(func=func)
    s = psub.add_parser("compare", parents=[common], help="bootstrap difference between two conditions")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--model", choices=("glmm", "glm"), default="glmm")
    s.add_argument("--B", type=_bootstrap_count, default=1000)
    s.set_defaults(func=cmd_psycho_compare)

    s = sub.add_parser("teleop", parents=[common, mapping, maps], help="end-to-end hand-to-belt pipeline")
    s.add_argument("--object", type=_grasp_object, default="none", help="none, <mm>, rigid<mm> or soft<mm>")
    s.add_argument("--mode", choices=("lockstep", "realtime"), default="lockstep")
    s.add_argument("--duration", type=float, default=1.0, help="seconds")
    s.add_argument("--closure", type=float, help="hand closure command, ticks")
    s.set_defaults(func=cmd_teleop)

    s = sub.add_parser("discriminate", parents=[common, mapping, maps], help="three-way cylinder discrimination")
    s.add_argument("--repeats", type=_positive_int, default=2, help="presentations per pair and order")
    s.set_defaults(func=cmd_discriminate)

    s = sub.add_parser("mapping", help="mapping utilities")
    msub = s.add_subparsers(dest="mapping_command", required=True)
    s = msub.add_parser("table", parents=[common, mapping], help="sample every mapping over its domain")
    s.add_argument("--n", type=_positive_int, default=101)
    s.set_defaults(func=cmd_mapping)

    s = sub.add_parser("hysteresis", parents=[common], help="tighten-release loops in both control modes")
    s.add_argument("--rise", type=float, default=60.0, help="ramp duration each way, s")
    s.set_defaults(func=cmd_hysteresis)

    s = sub.add_parser("config", parents=[common], help="write the resolved configuration")
    s.set_defaults(func=cmd_config)
    return p


def _command_name(args) -> str:
    parts = [args.command]
    for extra in ("psycho_command", "mapping_command"):
        if getattr(args, extra, None):
            parts.append(getattr(args, extra))
    return " ".join(parts)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is cmd_psycho_run and args.direction is None and args.channel == "tangential":
        args.direction = "right"
    out = Path(args.out)
    try:
        cfg = _read(load_config, args.config) if args.config else load_config()
        out.mkdir(parents=True, exist_ok=True)
        info = args.func(args, cfg, out)
        (out / "config.ini").write_text(cfg.to_ini())
        manifest = {
            "subcommand": _command_name(args),
            "config": str(Path(args.config).resolve()) if args.config else None,
            "seed": args.seed,
            "out": str(out.resolve()),
            "version": __version__,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
            "argv": list(sys.argv[1:] if argv is None else argv),
            **info,
        }
        _dump(manifest, out / "manifest.json")
    except InputError as exc:
        print(f"cuffsim: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"cuffsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cuffsim: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # module failures: fits, simulation, link
        print(f"cuffsim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
