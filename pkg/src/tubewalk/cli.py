"""Command-line pipeline: terrain -> fit -> calibrate -> synth -> plan, plus simulate and campaign.

Each stage reads the files written by earlier stages and leaves a
``*.manifest.json`` next to its outputs with input/output digests. Exit codes:
0 success, 1 infeasible or failed run, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .conformal import CPThreshold, cp_threshold, empirical_coverage, interval_width_comparison, nonconformity_scores
from .contraction import CCMData, SynthesisError, synthesize_ccm
from .planner import MPCConfig, SolverConfig, UncertifiableError, plan
from .rom import GlobalState, InfeasibleBoundError, RobotParams, terrain_disturbance_bound
from .sim import TrialConfig, aggregate, emit_artifacts, run_trial, trial_configs
from .terrain import (
    STYLES,
    ConfigurationError,
    GPFitError,
    KernelConfig,
    Observations,
    TerrainGrid,
    TerrainSpec,
    fit_gp,
    generate_terrain,
    held_out_observations,
    load_gp,
    sample_observations,
    save_gp,
    split_observations,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
SEED_ENV = "TUBEWALK_SEED"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# config files


def load_config(path) -> dict:
    """Read a TOML or JSON config file (chosen by suffix) into a dict."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib
            return tomllib.loads(text.decode())
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc


def _build(cls, section: dict | None, where: str, **extra):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    kwargs = {k: _tuplify(v) for k, v in section.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{where}] section: {exc}") from exc


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


_TOP_KEYS = {"seed", "trials", "jitter", "terrain", "trial", "kernel", "robot", "mpc", "solver"}


def trial_config_from_mapping(cfg: dict) -> TrialConfig:
    """Assemble a TrialConfig from the documented sections (see docs/config.md)."""
    unknown = sorted(set(cfg) - _TOP_KEYS)
    if unknown:
        raise UsageError(f"unknown top-level config keys: {', '.join(unknown)}")
    solver = _build(SolverConfig, cfg.get("solver", {"restarts": 1}), "solver")
    mpc = _build(MPCConfig, cfg.get("mpc"), "mpc", solver=solver)
    trial = dict(cfg.get("trial") or {})
    for key in ("terrain", "kernel", "params", "mpc", "seed"):
        if key in trial:
            raise UsageError(f"[trial] may not set {key!r}; use its own section")
    return _build(
        TrialConfig, trial, "trial",
        terrain=_build(TerrainSpec, cfg.get("terrain"), "terrain"),
        kernel=_build(KernelConfig, cfg.get("kernel"), "kernel"),
        params=_build(RobotParams, cfg.get("robot"), "robot"),
        mpc=mpc,
        seed=int(cfg.get("seed", 0)),
    )


# ----------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    seed: int | None
    version: str
    inputs: dict
    outputs: dict
    started: str
    finished: str
    exit_code: int

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _digests(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths if p is not None and Path(p).is_file()}


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _finite(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


# ----------------------------------------------------------------------------
# seed handling


def resolve_seed(value) -> int:
    """Explicit flag first, then $TUBEWALK_SEED, then 0."""
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from exc


# ----------------------------------------------------------------------------
# stages. Each returns (result dict, inputs, outputs, manifest path, exit code).


def cmd_terrain(args):
    seed = resolve_seed(args.seed)
    spec = TerrainSpec(style=args.style, extent=tuple(args.extent), resolution=tuple(args.resolution),
                       height_band=tuple(args.band), seed=seed)
    grid = generate_terrain(spec)
    meta, csv_path = grid.save(args.out)
    result = grid.metadata() | {"json": str(meta), "csv": str(csv_path)}
    return result, [], [meta, csv_path], Path(args.out).with_suffix(".manifest.json"), EXIT_OK, seed


def _kernel_from_args(args) -> KernelConfig:
    if args.length_scales is None:
        return KernelConfig(sigma_f2=args.sigma_f2) if args.kernel == "mixture-rbf" else KernelConfig.single(1.5, args.sigma_f2)
    ls = tuple(args.length_scales)
    return KernelConfig(args.kernel, args.sigma_f2, ls, tuple([1.0 / len(ls)] * len(ls)))


def cmd_fit(args):
    seed = resolve_seed(args.seed)
    grid = TerrainGrid.load(args.terrain)
    out = Path(args.out)
    obs = sample_observations(grid, args.n_obs, args.noise, seed)
    train, cal = split_observations(obs, args.train_fraction, seed)
    n_test = min(args.n_test, grid.n_cells - len(obs))
    test = held_out_observations(grid, obs, n_test, args.noise, seed + 1) if n_test > 0 else None
    gp = fit_gp(train, _kernel_from_args(args), args.noise_var)
    outputs = [obs.to_csv(out / "observations.csv"), train.to_csv(out / "train.csv"), cal.to_csv(out / "cal.csv")]
    if test is not None:
        outputs.append(test.to_csv(out / "test.csv"))
    outputs.append(save_gp(gp, out / "gp.json"))
    result = {"n_obs": len(obs), "n_train": len(train), "n_cal": len(cal), "n_test": 0 if test is None else len(test),
              "gp": str(out / "gp.json"), "jitter": gp.jitter}
    inputs = [Path(args.terrain).with_suffix(".json"), Path(args.terrain).with_suffix(".csv")]
    return result, inputs, outputs, out / "fit.manifest.json", EXIT_OK, seed


def cmd_calibrate(args):
    gp = load_gp(args.gp)
    cal_path = Path(args.cal) if args.cal else Path(args.gp).parent / "cal.csv"
    cal = Observations.from_csv(cal_path)
    thr = cp_threshold(nonconformity_scores(gp, cal), args.delta)
    test_path = Path(args.test) if args.test else cal_path.parent / "test.csv"
    coverage = None
    inputs = [Path(args.gp), cal_path]
    if test_path.is_file():
        coverage = empirical_coverage(gp, thr, Observations.from_csv(test_path))
        inputs.append(test_path)
    doc = thr.report(coverage)
    if args.terrain:
        grid = TerrainGrid.load(args.terrain)
        wc = interval_width_comparison(gp, thr, grid.cell_centers())
        doc["width_comparison"] = {"cp_width": _finite(wc.cp_width), "gp_width": wc.gp_width,
                                   "z_score": wc.z_score, "sigma_avg": wc.sigma_avg}
        inputs.append(Path(args.terrain).with_suffix(".json"))
    out = _write_json(args.out, doc)
    return doc, inputs, [out], out.with_suffix(".manifest.json"), EXIT_OK, None


def _robot_from_config(path) -> RobotParams:
    if not path:
        return RobotParams()
    return _build(RobotParams, load_config(path).get("robot"), "robot")


def cmd_synth(args):
    params = _robot_from_config(args.config)
    try:
        ccm = synthesize_ccm(params, args.lam, args.rho, tuple(args.x_box), tuple(args.tau_box),
                             n_starts=args.starts, seed=resolve_seed(args.seed))
    except SynthesisError as exc:
        return {"error": str(exc), "margin": _finite(exc.margin)}, [], [], Path(args.out).with_suffix(".manifest.json"), EXIT_FAILED, None
    out = ccm.save(args.out)
    doc = ccm.report()
    inputs = [Path(args.config)] if args.config else []
    return doc, inputs, [out], out.with_suffix(".manifest.json"), EXIT_OK, None


def cmd_plan(args):
    seed = resolve_seed(args.seed)
    grid = TerrainGrid.load(args.terrain)
    gp = load_gp(args.gp)
    cal = json.loads(Path(args.calibration).read_text())
    if cal.get("c") is None:
        raise UncertifiableError("calibration threshold is unbounded; cannot certify footsteps")
    thr = CPThreshold(c=float(cal["c"]), delta=float(cal["delta"]), k=int(cal["k"]),
                      quantile_index=int(cal["quantile_index"]))
    ccm = CCMData.load(args.ccm)
    if ccm.x_box is None or ccm.tau_box is None:
        raise UsageError("ccm file lacks x_box/tau_box needed for the disturbance bound")
    bound = terrain_disturbance_bound(thr.c, ccm.params, ccm.x_box, ccm.tau_box)
    solver = SolverConfig(restarts=args.restarts)
    margin = 0.3
    pos = ((grid.origin[0] + margin, grid.origin[0] + grid.extent[0] - margin),
           (grid.origin[1] + margin, grid.origin[1] + grid.extent[1] - margin))
    cfg = MPCConfig(horizon=args.horizon, goal=tuple(args.goal), x_box=ccm.x_box, position_bounds=pos,
                    delta_h_max=args.delta_h_max, solver=solver)
    sx, sy = args.start
    heading = args.heading
    if heading is None:
        heading = math.atan2(args.goal[1] - sy, args.goal[0] - sx)
    z0 = float(grid.height_at([sx, sy]))
    x0 = GlobalState(sx, sy, z0, args.speed, heading)
    pl = plan(x0, z0, gp, thr, ccm, bound.w_bar, cfg, seed=seed)
    out = pl.save(args.out)
    csv_out = pl.to_csv(Path(args.out).with_suffix(".csv"))
    doc = pl.to_dict() | {"feasible": pl.feasible, "w_bar": bound.w_bar}
    inputs = [Path(args.terrain).with_suffix(".json"), Path(args.gp), Path(args.calibration), Path(args.ccm)]
    code = EXIT_OK if pl.feasible else EXIT_FAILED
    return doc, inputs, [out, csv_out], out.with_suffix(".manifest.json"), code, seed


def _trial_from_args(args) -> tuple[TrialConfig, dict]:
    raw = load_config(args.config) if args.config else {}
    cfg = trial_config_from_mapping(raw)
    seed = resolve_seed(args.seed if args.seed is not None else raw.get("seed"))
    changes = {"seed": seed}
    if args.delta is not None:
        changes["delta"] = args.delta
    if args.max_steps is not None:
        changes["max_steps"] = args.max_steps
    if args.no_torque:
        changes["torque_enabled"] = False
    if args.style is not None:
        changes["terrain"] = dataclasses.replace(cfg.terrain, style=args.style)
    if args.horizon is not None:
        changes["mpc"] = dataclasses.replace(cfg.mpc, horizon=args.horizon)
    try:
        return dataclasses.replace(cfg, **changes), raw
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate(args):
    cfg, _ = _trial_from_args(args)
    report, records = run_trial(cfg)
    out = Path(args.out)
    files = emit_artifacts(report, records, out, cfg.params, max_panels=args.max_panels)
    doc = report.to_dict()
    inputs = [Path(args.config)] if args.config else []
    return doc, inputs, files, out / "manifest.json", EXIT_FAILED if report.failed else EXIT_OK, cfg.seed


def cmd_campaign(args):
    base, raw = _trial_from_args(args)
    trials = args.trials if args.trials is not None else int(raw.get("trials", 15))
    jitter = args.jitter if args.jitter is not None else float(raw.get("jitter", 0.5))
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    reports = [run_trial(cfg)[0] for cfg in trial_configs(base, trials, base.seed, jitter)]
    summary = aggregate(reports)
    doc = summary.to_dict() | {
        "delta": base.delta,
        "style": base.terrain.style,
        "seed": base.seed,
        "trials": [r.to_dict() for r in reports],
    }
    out = Path(args.out)
    path = _write_json(out / "summary.json", doc)
    inputs = [Path(args.config)] if args.config else []
    code = EXIT_FAILED if summary.all_failed else EXIT_OK
    brief = {k: doc[k] for k in ("p_tube", "cp_coverage", "ane", "whole_invariance_rate", "fail_count", "n_steps")}
    return brief | {"summary": str(path)}, inputs, [path], out / "manifest.json", code, base.seed


# ----------------------------------------------------------------------------
# argument parsing


def _add_trial_flags(p):
    p.add_argument("--config", help="TOML or JSON trial config (schema in docs/config.md)")
    p.add_argument("--style", choices=STYLES)
    p.add_argument("--delta", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--no-torque", action="store_true", help="ablation: disable the tracking torque")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tubewalk", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--json", action="store_true", help="print a JSON result to stdout")
    sub = ap.add_subparsers(dest="command", required=True)
    # --json is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print a JSON result to stdout")

    p = sub.add_parser("terrain", parents=[common], help="generate a synthetic terrain grid")
    p.add_argument("--style", choices=STYLES, default="hilly")
    p.add_argument("--extent", type=float, nargs=2, default=(10.0, 10.0), metavar=("X", "Y"))
    p.add_argument("--resolution", type=int, nargs=2, default=(50, 50), metavar=("NX", "NY"))
    p.add_argument("--band", type=float, nargs=2, default=(0.0, 0.7), metavar=("LO", "HI"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output stem; writes <stem>.json and <stem>.csv")
    p.set_defaults(func=cmd_terrain)

    p = sub.add_parser("fit", parents=[common], help="sample observations and fit the GP map")
    p.add_argument("--terrain", required=True, help="terrain JSON written by 'terrain'")
    p.add_argument("--n-obs", type=int, default=700)
    p.add_argument("--noise", type=float, default=0.01, help="observation noise std (m)")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--n-test", type=int, default=500, help="held-out test cells for coverage")
    p.add_argument("--kernel", choices=("mixture-rbf", "single-rbf"), default="mixture-rbf")
    p.add_argument("--length-scales", type=float, nargs="+")
    p.add_argument("--sigma-f2", type=float, default=0.05)
    p.add_argument("--noise-var", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", parents=[common], help="split-conformal threshold from calibration data")
    p.add_argument("--gp", required=True)
    p.add_argument("--cal", help="calibration CSV (default: cal.csv next to the GP)")
    p.add_argument("--test", help="test CSV for empirical coverage (default: test.csv if present)")
    p.add_argument("--terrain", help="terrain JSON; adds the CP vs GP width comparison")
    p.add_argument("--delta", type=float, default=0.15)
    p.add_argument("--out", required=True, help="calibration JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", parents=[common], help="synthesize the contraction metric")
    p.add_argument("--lambda", dest="lam", type=float, default=12.0)
    p.add_argument("--rho", type=float)
    p.add_argument("--x-box", type=float, nargs=2, default=(-0.25, 0.25))
    p.add_argument("--tau-box", type=float, nargs=2, default=(-20.0, 20.0))
    p.add_argument("--starts", type=int, default=64)
    p.add_argument("--config", help="config with a [robot] section")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="ccm JSON path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", parents=[common], help="solve one footstep MPC problem")
    p.add_argument("--terrain", required=True)
    p.add_argument("--gp", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--ccm", required=True)
    p.add_argument("--start", type=float, nargs=2, required=True, metavar=("X", "Y"))
    p.add_argument("--goal", type=float, nargs=2, required=True, metavar=("X", "Y"))
    p.add_argument("--heading", type=float)
    p.add_argument("--speed", type=float, default=0.8)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--delta-h-max", type=float, default=0.15)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="plan JSON path (a CSV is written alongside)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="run one closed-loop trial and emit artifacts")
    _add_trial_flags(p)
    p.add_argument("--max-panels", type=int, help="cap on the number of phase-portrait SVGs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("campaign", parents=[common], help="run a seeded Monte-Carlo campaign")
    _add_trial_flags(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--jitter", type=float, help="start/goal jitter half-width (m)")
    p.set_defaults(func=cmd_campaign)
    return ap


def _print(result: dict, as_json: bool, stream=None):
    stream = stream or sys.stdout
    if as_json:
        stream.write(json.dumps(result, sort_keys=True, default=str) + "\n")
        return
    for k, v in result.items():
        if isinstance(v, (dict, list)):
            continue
        stream.write(f"{k}: {v}\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    started = _now()
    try:
        result, inputs, outputs, manifest_path, code, seed = args.func(args)
    except (UsageError, ConfigurationError, InfeasibleBoundError, FileNotFoundError, KeyError,
            json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, UncertifiableError):
            sys.stderr.write(f"tubewalk {args.command}: {exc}\n")
            return EXIT_FAILED
        sys.stderr.write(f"tubewalk {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except GPFitError as exc:
        sys.stderr.write(f"tubewalk {args.command}: {exc}\n")
        return EXIT_FAILED
    RunManifest(
        command=args.command,
        argv=argv,
        config_path=getattr(args, "config", None),
        seed=seed,
        version=__version__,
        inputs=_digests(inputs),
        outputs=_digests(outputs),
        started=started,
        finished=_now(),
        exit_code=code,
    ).save(manifest_path)
    _print(result, args.json)
    if code != EXIT_OK:
        sys.stderr.write(f"tubewalk {args.command}: run reported failure (exit {code})\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
