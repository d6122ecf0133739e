"""Seeded closed-loop Monte-Carlo harness: plan, track, switch feet, repeat.

The terrain disturbance is realized physically. At each stance the true
pendulum frequency follows from the gap between true and estimated ground
height, and the tracking loop integrates the resulting dynamics with the
contraction controller (or with no torque, for ablations).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conformal import cp_threshold, nonconformity_scores
from .contraction import synthesize_ccm
from .planner import MPCConfig, SolverConfig, TubeEntry, UncertifiableError, per_step_delta, plan
from .rom import (
    DivergenceError,
    GlobalState,
    RobotParams,
    integrate_auglipm,
    orbital_energy,
    reset_map,
    terrain_disturbance_bound,
)
from .terrain import (
    ConfigurationError,
    KernelConfig,
    TerrainGrid,
    TerrainSpec,
    fit_gp,
    generate_terrain,
    gp_mean,
    sample_observations,
    split_observations,
)

FALL_POSITION = 2.0
FALL_SPEED = 5.0
# RK4 substeps per metric sample. The CCM feedback is stiff enough that plain
# 200 Hz RK4 drifts ~1e-6 from the exact closed loop; 4 substeps bring it to ~1e-9.
SUBSTEPS = 4
# tube membership slack covering the remaining integration error
MEMBERSHIP_TOL = 1e-8


@dataclass(frozen=True)
class TrueDynamics:
    omega_sq: float
    eta: float
    eta_reported: float
    c_delta: float


def realize_true_dynamics(grid: TerrainGrid, stance_location, params: RobotParams, estimated_height: float,
                          c: float | None = None, slack: float = 0.05) -> TrueDynamics:
    """True pendulum frequency at a stance given the GP height estimate there.

    ``eta`` (true minus estimated height) is used unclamped; ``eta_reported`` is
    clipped to the conformal band (widened by ``slack``) purely for reporting.
    """
    if not grid.contains(stance_location):
        raise ConfigurationError(f"stance {tuple(stance_location)} lies outside the terrain grid")
    eta = float(grid.height_at(stance_location)) - float(estimated_height)
    if params.apex_height + eta <= 0:
        raise ConfigurationError(f"apex height plus height error is non-positive (eta={eta:.3f})")
    w2 = params.gravity / (params.apex_height + eta)
    shown = eta
    if c is not None and math.isfinite(c):
        lim = c * (1.0 + slack)
        shown = min(max(eta, -lim), lim)
    return TrueDynamics(omega_sq=w2, eta=eta, eta_reported=shown, c_delta=w2 - params.omega**2)


@dataclass(frozen=True)
class TrialConfig:
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    start: tuple[float, float] = (1.5, 1.5)
    goal: tuple[float, float] = (8.5, 8.5)
    start_heading: float | None = None
    start_speed: float = 0.8
    delta: float = 0.15
    n_obs: int = 700
    obs_noise: float = 0.01
    train_fraction: float = 0.7
    kernel: KernelConfig = field(default_factory=KernelConfig)
    gp_noise_var: float = 1e-4
    params: RobotParams = field(default_factory=RobotParams)
    mpc: MPCConfig = field(default_factory=lambda: MPCConfig(solver=SolverConfig(restarts=1)))
    lam: float = 12.0
    rho: float | None = None
    tau_box: tuple[float, float] = (-20.0, 20.0)
    max_steps: int = 20
    metric_rate: float = 200.0
    goal_tolerance: float = 0.3
    torque_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.metric_rate <= 0:
            raise ValueError("metric_rate must be positive")

    @property
    def x_box(self):
        return self.mpc.x_box

    @property
    def step_delta(self) -> float:
        """Failure rate used for calibration; compounded over the horizon if requested."""
        if self.mpc.compound_steps:
            return per_step_delta(self.delta, self.mpc.compound_steps)
        return self.delta

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    q: int
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    x_ref: np.ndarray
    v_ref: np.ndarray
    radius: np.ndarray
    inside: np.ndarray
    tube_invariant: bool
    cp_covered: bool
    footstep_safe: bool
    footstep_certified: bool
    plan_feasible: bool
    control: tuple[float, float]
    z_true: float
    z_est: float
    z_true_next: float
    eta: float
    omega_sq: float
    w_max: float
    box_respected: bool

    @property
    def norm_error(self) -> np.ndarray:
        return np.hypot(self.x - self.x_ref, self.v - self.v_ref)


@dataclass(frozen=True)
class SimReport:
    ane: float
    p_tube: float
    cp_coverage: float
    footstep_safety_rate: float
    steps_to_goal: int
    reached: bool
    failed: bool
    fail_reason: str
    n_steps: int
    whole_invariant: bool
    c: float
    w_bar: float
    feasible_rate: float
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, timing: bool = False) -> dict:
        """Plain dict with NaN mapped to None; wall time only on request (it is not reproducible)."""
        d = _json_safe(asdict(self))
        if not timing:
            d.pop("wall_time")
        return d


def _json_safe(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def _trial_setup(cfg: TrialConfig):
    grid = generate_terrain(cfg.terrain)
    obs = sample_observations(grid, cfg.n_obs, cfg.obs_noise, cfg.seed)
    train, cal = split_observations(obs, cfg.train_fraction, cfg.seed)
    gp = fit_gp(train, cfg.kernel, cfg.gp_noise_var)
    thr = cp_threshold(nonconformity_scores(gp, cal), cfg.step_delta)
    ccm = synthesize_ccm(cfg.params, cfg.lam, cfg.rho, cfg.x_box, cfg.tau_box)
    return grid, gp, thr, ccm


def _position_bounds(grid: TerrainGrid, margin: float = 0.3):
    ox, oy = grid.origin
    ex, ey = grid.extent
    return ((ox + margin, ox + ex - margin), (oy + margin, oy + ey - margin))


def run_trial(cfg: TrialConfig, setup=None):
    """Run one closed-loop trial; returns (SimReport, list of StepRecord).

    ``setup`` may pass a precomputed (grid, gp, thr, ccm) tuple.
    """
    t_wall = time.perf_counter()
    grid, gp, thr, ccm = setup if setup is not None else _trial_setup(cfg)
    p = cfg.params
    n_samples = int(round(p.t_step * cfg.metric_rate))
    dt = p.t_step / n_samples
    records: list[StepRecord] = []
    failed, reason = False, ""

    if thr.unbounded:
        report = _summarize(records, cfg, thr.c, math.nan, False, True, "unbounded conformal threshold", t_wall)
        return report, records

    bound = terrain_disturbance_bound(thr.c, p, cfg.x_box, cfg.tau_box)
    w_bar = bound.w_bar
    mpc = replace(cfg.mpc, goal=tuple(map(float, cfg.goal)), goal_heading=None, dt=dt,
                  position_bounds=cfg.mpc.position_bounds or _position_bounds(grid))
    heading = cfg.start_heading
    if heading is None:
        heading = math.atan2(cfg.goal[1] - cfg.start[1], cfg.goal[0] - cfg.start[0])
    x = GlobalState(float(cfg.start[0]), float(cfg.start[1]), float(grid.height_at(cfg.start)),
                    float(cfg.start_speed), float(heading))
    entry = TubeEntry()
    warm = None
    actual_end = None  # actual sagittal state before the previous switch
    reached = False

    for q in range(cfg.max_steps):
        stance = np.array([x.x, x.y])
        if not grid.contains(stance):
            failed, reason = True, f"left terrain at step {q}"
            break
        z_true = float(grid.height_at(stance))
        z_est = float(gp_mean(gp, stance[None, :])[0])
        try:
            pl = plan(x._replace(z=z_true), z_true, gp, thr, ccm, w_bar, mpc, entry, warm, seed=cfg.seed + q)
        except UncertifiableError as exc:
            failed, reason = True, str(exc)
            break
        u = pl.controls[0]
        ref, tube = pl.references[0], pl.tubes[0]
        if actual_end is None:
            s0 = ref.start
        else:
            # foot lands where the nominal plan puts it; the tracking error carries over
            disp = entry.end_state[0] + entry.end_state[1] * p.t_switch + u.u_f
            s0 = tuple(reset_map(actual_end, disp, p))

        dyn = realize_true_dynamics(grid, stance, p, z_est, thr.c)

        if cfg.torque_enabled:
            # same as ccm_torque(ccm, s, lipm_flow((-u_f, v0), u_f, t, p)), unrolled: this runs
            # once per RK4 stage and dominates the tracking cost
            k0, k1 = (float(k) for k in ccm.feedback_gain)
            uf, v0, om = u.u_f, ref.start[1], p.omega

            def torque(t, s):
                ch, sh = math.cosh(om * t), math.sinh(om * t)
                return k0 * (s[0] - (sh / om * v0 - ch * uf)) + k1 * (s[1] - (ch * v0 - om * sh * uf))
        else:
            torque = None
        try:
            fine = integrate_auglipm(s0, torque, None, p.t_step, dt / SUBSTEPS, p, omega_sq=dyn.omega_sq)
            traj = replace(fine, t=fine.t[::SUBSTEPS], x=fine.x[::SUBSTEPS], v=fine.v[::SUBSTEPS],
                           tau=fine.tau[::SUBSTEPS], w=fine.w[::SUBSTEPS])
        except DivergenceError as exc:
            failed, reason = True, f"diverged at step {q}: {exc}"
            break
        xr, vr = ref.x, ref.v
        err = np.hypot(traj.x - xr, traj.v - vr)
        inside = err <= tube.radius + MEMBERSHIP_TOL
        w_real = dyn.c_delta * (traj.x - traj.tau / p.weight)
        box_ok = bool(np.all((traj.x >= cfg.x_box[0]) & (traj.x <= cfg.x_box[1])
                             & (traj.tau >= cfg.tau_box[0]) & (traj.tau <= cfg.tau_box[1])))
        nxt = pl.states[1]
        nxt_xy = np.array([nxt.x, nxt.y])
        z_next = float(grid.height_at(nxt_xy)) if grid.contains(nxt_xy) else math.nan
        records.append(StepRecord(
            q=q, t=traj.t, x=traj.x, v=traj.v, x_ref=xr, v_ref=vr, radius=tube.radius, inside=inside,
            tube_invariant=bool(np.all(inside)),
            cp_covered=bool(abs(dyn.eta) <= thr.c),
            footstep_safe=bool(abs(z_next - z_true) <= mpc.delta_h_max),
            footstep_certified=bool(pl.feasibility_report["footstep"][0] >= -1e-9),
            plan_feasible=pl.feasible,
            control=(u.u_f, u.u_dtheta),
            z_true=z_true, z_est=z_est, z_true_next=z_next, eta=dyn.eta, omega_sq=dyn.omega_sq,
            w_max=float(np.max(np.abs(w_real))), box_respected=box_ok,
        ))
        if np.any(np.abs(traj.x) > FALL_POSITION) or np.any(np.abs(traj.v) > FALL_SPEED):
            failed, reason = True, f"fell at step {q}: state left |x|<={FALL_POSITION}, |v|<={FALL_SPEED}"
            break
        if traj.v[-1] <= 0 or orbital_energy(traj.x[-1], traj.v[-1], p.omega) <= 0 and traj.x[-1] < 0:
            failed, reason = True, f"fell at step {q}: CoM did not pass over the stance foot"
            break

        actual_end = (float(traj.x[-1]), float(traj.v[-1]))
        entry = TubeEntry(end_radius=float(math.sqrt(tube.energy_bound[-1] / ccm.eig_min)), end_state=ref.end)
        ctrl = np.array([[c.u_f, c.u_dtheta] for c in pl.controls])
        warm = np.concatenate([np.append(ctrl[1:, 0], ctrl[-1, 0]), np.append(ctrl[1:, 1], 0.0)])
        x = nxt
        if math.hypot(x.x - cfg.goal[0], x.y - cfg.goal[1]) <= cfg.goal_tolerance:
            reached = True
            break

    report = _summarize(records, cfg, thr.c, w_bar, reached, failed, reason, t_wall)
    return report, records


def _summarize(records, cfg, c, w_bar, reached, failed, reason, t_wall) -> SimReport:
    n = len(records)
    if n:
        errs = np.concatenate([r.norm_error for r in records])
        ane = float(np.mean(errs))
        p_tube = float(np.mean([r.tube_invariant for r in records]))
        cov = float(np.mean([r.cp_covered for r in records]))
        safe = float(np.mean([r.footstep_safe for r in records]))
        feas = float(np.mean([r.plan_feasible for r in records]))
    else:
        ane = p_tube = cov = safe = feas = math.nan
    return SimReport(
        ane=ane, p_tube=p_tube, cp_coverage=cov, footstep_safety_rate=safe,
        steps_to_goal=n if reached else -1, reached=reached, failed=failed, fail_reason=reason, n_steps=n,
        whole_invariant=bool(n > 0 and all(r.tube_invariant for r in records)), c=float(c), w_bar=float(w_bar),
        feasible_rate=feas, wall_time=time.perf_counter() - t_wall,
    )


# ----------------------------------------------------------------------------
# campaigns


def binomial_half_width(p: float, n: int, z: float = 1.96) -> float:
    if n <= 0 or not math.isfinite(p):
        return math.nan
    return z * math.sqrt(max(p * (1 - p), 0.0) / n)


@dataclass(frozen=True)
class CampaignSummary:
    n_trials: int
    n_steps: int
    ane: float
    p_tube: float
    p_tube_hw: float
    cp_coverage: float
    cp_coverage_hw: float
    footstep_safety_rate: float
    footstep_safety_hw: float
    whole_invariance_rate: float
    whole_invariance_hw: float
    reached_rate: float
    fail_count: int
    all_failed: bool

    def to_dict(self) -> dict:
        return _json_safe(asdict(self))


def aggregate(reports) -> CampaignSummary:
    """Pool step-weighted rates across trials; whole-trajectory rates are per trial."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one report")
    steps = np.array([r.n_steps for r in reports])
    total = int(steps.sum())

    def pooled(attr):
        vals = np.array([getattr(r, attr) for r in reports], dtype=float)
        ok = steps > 0
        if not ok.any():
            return math.nan
        return float(np.sum(vals[ok] * steps[ok]) / steps[ok].sum())

    p_tube, cov, safe = pooled("p_tube"), pooled("cp_coverage"), pooled("footstep_safety_rate")
    ane = pooled("ane")
    whole = float(np.mean([r.whole_invariant for r in reports]))
    fails = int(sum(r.failed for r in reports))
    return CampaignSummary(
        n_trials=len(reports), n_steps=total, ane=ane,
        p_tube=p_tube, p_tube_hw=binomial_half_width(p_tube, total),
        cp_coverage=cov, cp_coverage_hw=binomial_half_width(cov, total),
        footstep_safety_rate=safe, footstep_safety_hw=binomial_half_width(safe, total),
        whole_invariance_rate=whole, whole_invariance_hw=binomial_half_width(whole, len(reports)),
        reached_rate=float(np.mean([r.reached for r in reports])),
        fail_count=fails, all_failed=fails == len(reports),
    )


def trial_configs(base: TrialConfig, trials: int, seed: int, jitter: float = 0.5):
    """Per-trial configs with independent observation seeds and jittered start/goal."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        s = tuple(float(a + b) for a, b in zip(base.start, rng.uniform(-jitter, jitter, 2)))
        g = tuple(float(a + b) for a, b in zip(base.goal, rng.uniform(-jitter, jitter, 2)))
        out.append(replace(base, start=s, goal=g, seed=int(rng.integers(0, 2**31 - 1))))
    return out


def run_campaign(base: TrialConfig, trials: int, seed: int = 0, jitter: float = 0.5, keep_records: bool = False):
    """Run ``trials`` independent trials; returns (summary, reports, records-or-None)."""
    reports, all_records = [], []
    for cfg in trial_configs(base, trials, seed, jitter):
        rep, recs = run_trial(cfg)
        reports.append(rep)
        if keep_records:
            all_records.append(recs)
    return aggregate(reports), reports, (all_records if keep_records else None)


# ----------------------------------------------------------------------------
# artifacts


def _svg_panel(rec: StepRecord, omega: float, size: int = 360) -> str:
    xs = np.concatenate([rec.x, rec.x_ref, rec.x_ref - rec.radius, rec.x_ref + rec.radius])
    vs = np.concatenate([rec.v, rec.v_ref, rec.v_ref - rec.radius, rec.v_ref + rec.radius])
    x0, x1 = float(xs.min()), float(xs.max())
    v0, v1 = float(vs.min()), float(vs.max())
    padx, padv = 0.1 * (x1 - x0 or 1.0), 0.1 * (v1 - v0 or 1.0)
    x0, x1, v0, v1 = x0 - padx, x1 + padx, v0 - padv, v1 + padv

    def px(x):
        return (np.asarray(x) - x0) / (x1 - x0) * size

    def py(v):
        return size - (np.asarray(v) - v0) / (v1 - v0) * size

    def poly(xa, va, cls, color):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(xa), py(va)))
        return f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'

    parts = [f'<g class="panel" data-step="{rec.q}">',
             f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>']
    th = np.linspace(0, 2 * np.pi, 33)
    for i in range(0, len(rec.t), max(len(rec.t) // 8, 1)):
        cx, cv, r = rec.x_ref[i], rec.v_ref[i], rec.radius[i]
        parts.append(poly(cx + r * np.cos(th), cv + r * np.sin(th), "tube", "#9ecae1"))
    # asymptotes v = +/- omega x through the stance foot
    grid = np.array([x0, x1])
    parts.append(f'<g class="asymptotes">{poly(grid, omega * grid, "asymptote", "gray")}'
                 f'{poly(grid, -omega * grid, "asymptote", "gray")}</g>')
    parts.append(poly(rec.x_ref, rec.v_ref, "reference", "black"))
    parts.append(poly(rec.x, rec.v, "executed", "#d62728"))
    parts.append(f'<text x="6" y="16" font-size="12">step {rec.q}</text></g>')
    return "\n".join(parts)


def emit_artifacts(report: SimReport, records, out_dir, params: RobotParams | None = None,
                   max_panels: int | None = None):
    """Write summary.json, steps.csv (samples on [0, T_step) per step) and phase_qXX.svg files."""
    params = params or RobotParams()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        summary = out / "summary.json"
        summary.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(summary)
        if not records:
            return written
        steps = out / "steps.csv"
        with steps.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "x_loc", "v_loc", "x_ref", "v_ref", "radius", "inside",
                        "tube_invariant", "cp_covered", "footstep_safe", "eta"])
            for r in records:
                # the last sample is the pre-switch state; it starts the next step's row block
                for i in range(len(r.t) - 1):
                    w.writerow([r.q, f"{r.t[i]:.6f}", f"{r.x[i]:.10g}", f"{r.v[i]:.10g}", f"{r.x_ref[i]:.10g}",
                                f"{r.v_ref[i]:.10g}", f"{r.radius[i]:.10g}", int(r.inside[i]),
                                int(r.tube_invariant), int(r.cp_covered), int(r.footstep_safe), f"{r.eta:.10g}"])
        written.append(steps)
        for r in records[: max_panels if max_panels is not None else len(records)]:
            svg = out / f"phase_q{r.q:02d}.svg"
            body = _svg_panel(r, params.omega)
            svg.write_text('<svg xmlns="http://www.w3.org/2000/svg" width="360" height="360">\n'
                           f"{body}\n</svg>\n")
            written.append(svg)
        return written
    except OSError as exc:
        raise OSError(f"failed writing artifacts under {out}: {exc}") from exc
