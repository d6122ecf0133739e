"""Receding-horizon footstep MPC with conformal height bounds and tube-aware orbital energy.

Decision variables are the ``2H`` controls ``(u_f, u_dtheta)``; states follow by
rolling the global step map forward (single shooting). For every step the
planner builds the sagittal reference, chains the tube bound across foot
switches, and asks that the whole tube keeps positive orbital energy.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .conformal import CPThreshold
from .contraction import (
    CCMData,
    TubeProfile,
    reset_expansion,
    tube_profile,
)
from .rom import (
    ControlInput,
    GlobalState,
    RobotParams,
    global_step,
    lipm_flow,
    orbital_energy,
    reset_jacobian,
    saltation_matrix,
    wrap_angle,
)
from .terrain import GPModel, gp_mean_and_gradient


class UncertifiableError(ValueError):
    """The conformal threshold is unbounded, so no footstep can be certified."""


class InfeasiblePlanError(RuntimeError):
    def __init__(self, report: dict):
        worst = report.get("max_violation", math.nan)
        super().__init__(f"no feasible plan found (max constraint violation {worst:.3e})")
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 16
    iterations: int = 400
    tol: float = 1e-10
    fd_step: float = 1e-6
    coarse_samples: int = 11
    penalties: tuple[float, ...] = (1e2, 1e4, 1e6)
    extra_restarts: int = 4


@dataclass(frozen=True)
class MPCConfig:
    horizon: int = 8
    w_goal: tuple[float, float] = (10.0, 10.0)
    w_heading: float = 1.0
    w_slope: tuple[float, float] = (5.0, 5.0)
    goal: tuple[float, float] = (0.0, 0.0)
    goal_heading: float | None = None
    u_f_bounds: tuple[float, float] = (0.0, 0.3)
    u_dtheta_bounds: tuple[float, float] = (-0.3, 0.3)
    v_bounds: tuple[float, float] = (0.3, 1.2)
    x_box: tuple[float, float] = (-0.25, 0.25)
    position_bounds: tuple[tuple[float, float], tuple[float, float]] | None = None
    delta_h_max: float = 0.15
    lipschitz_L: float = 1.0
    energy_margin: float = 1e-4
    tube_variant: str = "standard"
    dt: float = 1 / 200
    compound_steps: int | None = None
    strict: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if not self.delta_h_max > 0:
            raise ValueError("delta_h_max must be positive")
        if not self.lipschitz_L > 0:
            raise ValueError("lipschitz_L must be positive")
        if min(self.w_goal) < 0 or min(self.w_slope) < 0 or self.w_heading < 0:
            raise ValueError("weights must be non-negative")
        if self.v_bounds[0] <= 0:
            raise ValueError("velocity lower bound must be positive (forward walking)")

    def with_goal(self, goal, goal_heading=None) -> "MPCConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(goal=(float(goal[0]), float(goal[1])), goal_heading=goal_heading)
        return MPCConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def per_step_delta(delta_total: float, steps: int) -> float:
    """Per-step failure rate whose compounded success (1-d)^steps equals 1-delta_total."""
    return 1.0 - (1.0 - delta_total) ** (1.0 / steps)


# ----------------------------------------------------------------------------
# constraint pieces


def footstep_safety_residual(z_q, z_next_mean, cfg: MPCConfig, c: float):
    """Delta_h_max - |z_next - z_q| - L c; non-negative means certifiably safe."""
    if math.isinf(c):
        raise UncertifiableError("conformal threshold is unbounded; cannot certify footstep safety")
    return cfg.delta_h_max - np.abs(np.asarray(z_next_mean) - np.asarray(z_q)) - cfg.lipschitz_L * c


def disk_min_orbital_energy(x, v, radius, omega, iterations: int = 40):
    """Minimum of E = (v^2 - w^2 x^2)/2 over the disk of given radius around (x, v).

    E is indefinite, so the minimum sits on the circle. Writing the point as
    c + d, the minimizer is d = -(D + mu I)^{-1} D c with D = diag(-w^2, 1) and
    mu > w^2 fixed by |d| = radius; mu is found by Newton on 1/|d| - 1/radius,
    which converges monotonically from the left.
    """
    x, v, r = np.broadcast_arrays(np.asarray(x, float), np.asarray(v, float), np.asarray(radius, float))
    w2 = omega**2
    g1, g2 = -w2 * x, v
    pos = r > 0
    rs = np.where(pos, r, 1.0)
    # hard case: no pull along x; the whole x-direction is free at mu = w^2
    d2_hard = -g2 / (w2 + 1.0)
    hard = pos & (np.abs(g1) <= 1e-14 * (1.0 + np.abs(g2))) & (np.abs(d2_hard) <= rs)
    # lanes settled elsewhere (hard case, zero radius) get a benign dummy problem
    skip = hard | ~pos
    g1n, g2n = np.where(skip, 1.0, g1), np.where(skip, 1.0, g2)
    # iterate on a = mu - w^2 directly; mu itself would lose digits when a << w^2.
    # All starts give |d| >= r, so Newton approaches the root from the left; |g|/r - w^2 - 1
    # is within w^2 + 1 of the root, which is close for the small tubes met in planning.
    tiny = 1e-300
    a = np.maximum.reduce([np.abs(g1n) / (2.0 * rs), np.hypot(g1n, g2n) / rs - 1.0 - w2, np.full_like(rs, tiny)])
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(iterations):
            b = a + w2 + 1.0
            q1 = (g1n / a) ** 2
            q2 = (g2n / b) ** 2
            n2 = q1 + q2
            # Newton step on 1/|d(mu)| - 1/r, using d|d|/dmu = -(d1^2/a + d2^2/b)/|d|
            new = np.maximum(a - (1.0 - np.sqrt(n2) / rs) * n2 / (q1 / a + q2 / b), tiny)
            # quadratic convergence: after a 1e-9 relative step the iterate is good to ~1e-18
            done = np.all(np.abs(new - a) <= 1e-9 * a)
            a = new
            if done:
                break
        d1 = -g1 / a
        d2 = -g2 / (a + w2 + 1.0)
    d1 = np.where(hard, np.sqrt(np.maximum(rs**2 - d2_hard**2, 0.0)), d1)
    d2 = np.where(hard, d2_hard, d2)
    e = orbital_energy(x + d1, v + d2, omega)
    out = np.where(pos, e, orbital_energy(x, v, omega))
    return float(out) if out.ndim == 0 else out


def orbital_energy_residual(ref_step, tube: TubeProfile, omega: float) -> float:
    """Smallest orbital energy over the tube around one step's reference.

    ``ref_step`` holds arrays ``x`` and ``v`` sampled on ``tube.times``.
    """
    x, v = np.asarray(ref_step.x), np.asarray(ref_step.v)
    if x.shape != tube.radius.shape:
        raise ValueError("reference and tube must share the time grid")
    return float(np.min(disk_min_orbital_energy(x, v, tube.radius, omega)))


# ----------------------------------------------------------------------------
# rollout


@dataclass(frozen=True)
class StepReference:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray

    @property
    def start(self):
        return float(self.x[0]), float(self.v[0])

    @property
    def end(self):
        return float(self.x[-1]), float(self.v[-1])


@dataclass(frozen=True)
class TubeEntry:
    """What the previous step leaves behind for the first tube of a new plan.

    ``end_radius`` is the (standard) tube radius at the end of the previous
    step and ``end_state`` the previous reference state just before the switch.
    Without ``end_state`` the radius is taken as a ball around the new start.
    """

    end_radius: float = 0.0
    end_state: tuple[float, float] | None = None


def _lmax_sym(a, b, c):
    return 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)


def _reset_gain_batch(M, x_minus, v_minus, disp, params: RobotParams, floor: float | None = None):
    """Vectorized reset_expansion for saltation matrices at many switch states.

    ``floor`` is the constant lambda_max(J^T M J) of the plain reset Jacobian;
    pass it to skip recomputing.
    """
    w2, tsw = params.omega**2, params.t_switch
    vs = np.where(np.abs(v_minus) < 1e-9, np.copysign(1e-9, v_minus), v_minus)
    x11 = 1.0 - tsw * w2 * x_minus / vs
    x12 = np.full_like(x11, tsw)
    x21 = w2 * (v_minus * tsw - disp) / vs
    x22 = np.ones_like(x11)
    # Xi^T M Xi entries
    m00, m01, m11 = M[0, 0], M[0, 1], M[1, 1]
    c0 = (x11, x21)
    c1 = (x12, x22)

    def quad(p, q):
        return m00 * p[0] * q[0] + m01 * (p[0] * q[1] + p[1] * q[0]) + m11 * p[1] * q[1]

    lx = _lmax_sym(quad(c0, c0), quad(c0, c1), quad(c1, c1))
    if floor is None:
        jd = reset_jacobian(params)
        floor = float(np.linalg.eigvalsh(jd.T @ M @ jd)[-1])
    return np.maximum(lx, floor)


class _Problem:
    """Batched evaluation of cost and constraints for a bundle of control vectors."""

    def __init__(self, x_init: GlobalState, z0: float, gp: GPModel, c: float, ccm: CCMData,
                 w_bar: float, cfg: MPCConfig, entry: TubeEntry):
        self.x0, self.z0, self.gp, self.c, self.ccm, self.cfg, self.entry = x_init, z0, gp, c, ccm, cfg, entry
        p = ccm.params
        self.params = p
        self.H = cfg.horizon
        w, T = p.omega, p.t_step
        self.ch, self.sh, self.w = math.cosh(w * T), math.sinh(w * T), w
        self.d_bar = ccm.d_bar(w_bar)
        self.lmin = ccm.eig_min
        jd = reset_jacobian(p)
        self.reset_floor = float(np.linalg.eigvalsh(jd.T @ ccm.M @ jd)[-1])
        s = np.linspace(0.0, T, cfg.solver.coarse_samples)
        self.s = s
        self.chs, self.shs = np.cosh(w * s), np.sinh(w * s)
        self.decay = np.exp(-ccm.lam * s)
        gx = cfg.goal_heading
        if gx is None:
            gx = math.atan2(cfg.goal[1] - x_init.y, cfg.goal[0] - x_init.x)
        self.goal_heading = gx
        self._cache_key = None

    # layout: [u_f_0..u_f_{H-1}, dth_0..dth_{H-1}]
    def rollout(self, U):
        U = np.atleast_2d(U)
        H = self.H
        uf, dth = U[:, :H], U[:, H:]
        B = U.shape[0]
        v = np.empty((B, H + 1))
        v[:, 0] = self.x0.v
        dx = np.empty((B, H))
        for q in range(H):
            dx[:, q] = self.sh / self.w * v[:, q] + (1.0 - self.ch) * uf[:, q]
            v[:, q + 1] = self.ch * v[:, q] - self.w * self.sh * uf[:, q]
        theta = self.x0.theta + np.concatenate([np.zeros((B, 1)), np.cumsum(dth, axis=1)], axis=1)
        px = self.x0.x + np.concatenate([np.zeros((B, 1)), np.cumsum(dx * np.cos(theta[:, :H]), axis=1)], axis=1)
        py = self.x0.y + np.concatenate([np.zeros((B, 1)), np.cumsum(dx * np.sin(theta[:, :H]), axis=1)], axis=1)
        return uf, dth, v, dx, theta, px, py

    def evaluate(self, U):
        """Return cost (B,), soft (B, 3H) and hard (B, m) constraints; >= 0 means satisfied.

        Soft constraints (footstep safety, orbital energy) get elastic slacks in
        the solver; box constraints are kept hard.
        """
        cfg, H = self.cfg, self.H
        uf, dth, v, dx, theta, px, py = self.rollout(U)
        B = uf.shape[0]
        pts = np.stack([px[:, 1:], py[:, 1:]], axis=-1).reshape(-1, 2)
        mean, grad = gp_mean_and_gradient(self.gp, pts)
        mean = mean.reshape(B, H)
        grad = grad.reshape(B, H, 2)

        goal_err_x, goal_err_y = px[:, -1] - cfg.goal[0], py[:, -1] - cfg.goal[1]
        head = wrap_angle(theta[:, -1] - self.goal_heading)
        cost = (cfg.w_goal[0] * goal_err_x**2 + cfg.w_goal[1] * goal_err_y**2 + cfg.w_heading * head**2
                + (cfg.w_slope[0] * grad[..., 0] ** 2 + cfg.w_slope[1] * grad[..., 1] ** 2).sum(axis=1))

        z = np.concatenate([np.full((B, 1), self.z0), mean], axis=1)
        dz = z[:, 1:] - z[:, :-1]
        slack = cfg.delta_h_max - cfg.lipschitz_L * self.c
        foot = np.concatenate([slack - dz, slack + dz], axis=1)

        orbital = self._orbital(uf, v, dx) - 2 * cfg.energy_margin

        lo, hi = cfg.v_bounds
        xs_lo, xs_hi = cfg.x_box
        box = [v[:, 1:] - lo, hi - v[:, 1:], -uf - xs_lo, xs_hi - (dx - uf)]
        if cfg.position_bounds is not None:
            (xlo, xhi), (ylo, yhi) = cfg.position_bounds
            box += [px[:, 1:] - xlo, xhi - px[:, 1:], py[:, 1:] - ylo, yhi - py[:, 1:]]
        # tiny interior offset so replayed residuals clear the feasibility tolerance
        soft = np.concatenate([foot, orbital], axis=1) - 1e-8
        hard = np.concatenate(box, axis=1) - 1e-8
        return cost, soft, hard

    def _orbital(self, uf, v, dx):
        """Per-step minimum disk orbital energy on the coarse grid, with chained tubes."""
        H, p = self.H, self.params
        B = uf.shape[0]
        # reference on coarse grid: start (-u_f, v_q), flow with pivot at origin
        xs = -uf[..., None] * self.chs + v[:, :H, None] * self.shs / self.w
        vs = -uf[..., None] * self.w * self.shs + v[:, :H, None] * self.chs
        x_end = dx - uf
        v_end = v[:, 1:]
        e0 = np.empty((B, H))
        if self.entry.end_state is None:
            e0[:, 0] = self.entry.end_radius**2 * self.ccm.eig_max
        else:
            xm, vm = self.entry.end_state
            disp0 = xm + vm * p.t_switch + uf[:, 0]
            gain = _reset_gain_batch(self.ccm.M, np.full(B, xm), np.full(B, vm), disp0, p, self.reset_floor)
            e0[:, 0] = self.entry.end_radius**2 * gain
        sq_d = self.d_bar * (1.0 - self.decay)
        radii = np.empty((B, H, self.s.size))
        for q in range(H):
            sqe = np.sqrt(e0[:, q])[:, None] * self.decay + sq_d
            energy = sqe**2
            radii[:, q] = self._radius(energy)
            if q + 1 < H:
                r_end = np.sqrt(energy[:, -1] / self.lmin)
                disp = x_end[:, q] + v_end[:, q] * p.t_switch + uf[:, q + 1]
                gain = _reset_gain_batch(self.ccm.M, x_end[:, q], v_end[:, q], disp, p, self.reset_floor)
                e0[:, q + 1] = r_end**2 * gain
        emin = disk_min_orbital_energy(xs, vs, radii, self.w)
        return emin.min(axis=-1)

    def _radius(self, energy):
        if self.cfg.tube_variant == "standard":
            return np.sqrt(energy / self.lmin)
        ds = np.diff(self.s)
        integ = np.concatenate([np.zeros(energy.shape[:-1] + (1,)),
                                np.cumsum(0.5 * (energy[..., 1:] + energy[..., :-1]) * ds, axis=-1)], axis=-1)
        return np.sqrt(integ / math.sqrt(self.lmin))


class _Evaluator:
    """Elastic exact-penalty problem over z = [u, slack] with cached FD jacobians.

    minimize cost(u) + penalty * sum(slack)
    s.t.     soft(u) + slack >= 0,  hard(u) >= 0,  slack >= 0
    """

    def __init__(self, prob: _Problem, h: float, n_u: int):
        self.prob, self.h, self.n_u = prob, h, n_u
        self.penalty = 1.0
        self.scale = 1.0
        self.key = None
        self.nfev = 0

    def _ensure(self, z):
        u = z[: self.n_u]
        key = u.tobytes()
        if key == self.key:
            return
        n = u.size
        U = np.vstack([u, u + self.h * np.eye(n)])
        cost, soft, hard = self.prob.evaluate(U)
        self.nfev += U.shape[0]
        self.f, self.soft, self.hard = float(cost[0]), soft[0], hard[0]
        self.df = (cost[1:] - cost[0]) / self.h
        self.dsoft = ((soft[1:] - soft[0]) / self.h).T
        self.dhard = ((hard[1:] - hard[0]) / self.h).T
        self.key = key

    def set_scale(self, z):
        """Normalize the cost so its gradient at the start is O(1); SLSQP is scale sensitive."""
        self._ensure(z)
        self.scale = 1.0 / max(1.0, float(np.max(np.abs(self.df))))

    def fun(self, z):
        self._ensure(z)
        return self.scale * self.f + self.penalty * float(np.sum(z[self.n_u:]))

    def jac(self, z):
        self._ensure(z)
        return np.concatenate([self.scale * self.df, np.full(z.size - self.n_u, self.penalty)])

    def cons_soft(self, z):
        self._ensure(z)
        return self.soft + z[self.n_u:]

    def cons_soft_jac(self, z):
        self._ensure(z)
        return np.hstack([self.dsoft, np.eye(z.size - self.n_u)])

    def cons_hard(self, z):
        self._ensure(z)
        return self.hard

    def cons_hard_jac(self, z):
        self._ensure(z)
        return np.hstack([self.dhard, np.zeros((self.dhard.shape[0], z.size - self.n_u))])


# ----------------------------------------------------------------------------
# plan object


@dataclass(frozen=True)
class Plan:
    states: list
    controls: list
    references: list
    tubes: list
    feasibility_report: dict
    cost: float
    step_energies: list
    solver_info: dict

    @property
    def feasible(self) -> bool:
        return bool(self.feasibility_report["feasible"])

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def to_dict(self) -> dict:
        return {
            "states": [list(map(float, s)) for s in self.states],
            "state_fields": list(GlobalState._fields),
            "controls": [list(map(float, u)) for u in self.controls],
            "control_fields": list(ControlInput._fields),
            "cost": self.cost,
            "step_energies": list(map(float, self.step_energies)),
            "residuals": self.feasibility_report,
            "solver": self.solver_info,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "t", "x_ref", "v_ref", "energy_bound", "radius"])
            for q, (ref, tube) in enumerate(zip(self.references, self.tubes)):
                for row in zip(ref.times, ref.x, ref.v, tube.energy_bound, tube.radius):
                    out.writerow([q] + [f"{float(v):.10g}" for v in row])
        return path


def heuristic_controls(x_init: GlobalState, cfg: MPCConfig, params: RobotParams) -> np.ndarray:
    """Foot offsets steering the speed into the allowed band, turning towards the goal."""
    H = cfg.horizon
    w, T = params.omega, params.t_step
    ch, sh = math.cosh(w * T), math.sinh(w * T)
    lo, hi = cfg.v_bounds
    target = min(max(x_init.v, lo + 0.25 * (hi - lo)), hi - 0.25 * (hi - lo))
    u_f = np.empty(H)
    v = x_init.v
    for q in range(H):
        want_v = target
        # keep the step inside the sagittal box: -u_f >= x_lo and sh v / w - ch u_f <= x_hi
        u = (ch * v - want_v) / (w * sh)
        u = min(max(u, (sh * v / w - cfg.x_box[1]) / ch), -cfg.x_box[0])
        u_f[q] = float(np.clip(u, *cfg.u_f_bounds))
        v = ch * v - w * sh * u_f[q]
    dth = np.zeros(H)
    theta = x_init.theta
    want = math.atan2(cfg.goal[1] - x_init.y, cfg.goal[0] - x_init.x)
    for q in range(H):
        dth[q] = float(np.clip(wrap_angle(want - theta), *cfg.u_dtheta_bounds))
        theta += dth[q]
    return np.concatenate([u_f, dth])


def replay_plan(x_init: GlobalState, z_true: float, gp: GPModel, controls, c: float, ccm: CCMData,
                w_bar: float, cfg: MPCConfig, entry: TubeEntry = TubeEntry()):
    """Roll the controls through the step map and rebuild references, tubes and residuals."""
    p = ccm.params
    H = len(controls)
    states = [GlobalState(*x_init)]
    states[0] = states[0]._replace(z=float(z_true))
    for u in controls:
        _, grad = gp_mean_and_gradient(gp, np.array([[states[-1].x, states[-1].y]]))
        states.append(global_step(states[-1], ControlInput(*u), grad[0], p))
    pts = np.array([[s.x, s.y] for s in states[1:]])
    mean, _ = gp_mean_and_gradient(gp, pts)
    z = np.concatenate([[z_true], mean])
    foot = footstep_safety_residual(z[:-1], z[1:], cfg, c)

    refs, tubes, energies, orbital, xis = [], [], [], [], []
    e0 = entry.end_radius**2 * ccm.eig_max
    if entry.end_state is not None:
        disp = entry.end_state[0] + entry.end_state[1] * p.t_switch + controls[0][0]
        xi = saltation_matrix(entry.end_state, disp, p)
        e0 = entry.end_radius**2 * reset_expansion(ccm.M, xi, p)
    for q in range(H):
        uf = controls[q][0]
        tube = tube_profile(ccm, e0, w_bar, p.t_step, cfg.dt, cfg.tube_variant)
        xr, vr = lipm_flow((-uf, states[q].v), uf, tube.times, p)
        ref = StepReference(tube.times, np.asarray(xr), np.asarray(vr))
        refs.append(ref)
        tubes.append(tube)
        energies.append(e0)
        orbital.append(orbital_energy_residual(ref, tube, p.omega))
        if q + 1 < H:
            end_std = math.sqrt(tube.energy_bound[-1] / ccm.eig_min)
            disp = ref.end[0] + ref.end[1] * p.t_switch + controls[q + 1][0]
            xi = saltation_matrix(ref.end, disp, p)
            xis.append(xi.tolist())
            e0 = end_std**2 * reset_expansion(ccm.M, xi, p)

    v_arr = np.array([s.v for s in states[1:]])
    uf_arr = np.array([u[0] for u in controls])
    x_end = np.array([r.end[0] for r in refs])
    box = {
        "v_lower": (v_arr - cfg.v_bounds[0]).tolist(),
        "v_upper": (cfg.v_bounds[1] - v_arr).tolist(),
        "x_start": (-uf_arr - cfg.x_box[0]).tolist(),
        "x_end": (cfg.x_box[1] - x_end).tolist(),
    }
    if cfg.position_bounds is not None:
        (xlo, xhi), (ylo, yhi) = cfg.position_bounds
        px = np.array([s.x for s in states[1:]])
        py = np.array([s.y for s in states[1:]])
        box["position"] = np.minimum.reduce([px - xlo, xhi - px, py - ylo, yhi - py]).tolist()
    ctrl_viol = 0.0
    for uf_, dth in controls:
        ctrl_viol = max(ctrl_viol, cfg.u_f_bounds[0] - uf_, uf_ - cfg.u_f_bounds[1],
                        cfg.u_dtheta_bounds[0] - dth, dth - cfg.u_dtheta_bounds[1])
    orbital = np.array(orbital)
    viol = [
        float(max(0.0, -np.min(foot))),
        float(max(0.0, cfg.energy_margin - np.min(orbital))),
        float(max(0.0, -min(min(v) for v in box.values()))),
        float(max(0.0, ctrl_viol)),
    ]
    tol = 1e-9
    report = {
        "footstep": np.asarray(foot).tolist(),
        "orbital": orbital.tolist(),
        "state_box": box,
        "control_box_violation": float(max(0.0, ctrl_viol)),
        "saltation": xis,
        "max_violation": max(viol),
        "feasible": bool(max(viol) <= tol),
        "energy_margin": cfg.energy_margin,
        "threshold": c,
    }
    return states, refs, tubes, energies, report


def plan(x_init: GlobalState, z_true_at_stance: float, gp: GPModel, thr: CPThreshold, ccm: CCMData,
         w_bar: float, cfg: MPCConfig, entry: TubeEntry = TubeEntry(), warm_start=None,
         seed: int = 0) -> Plan:
    """Solve the footstep MPC from ``x_init``.

    Restarts: the warm start (if any), a steady-gait heuristic, then seeded
    uniform draws from the control box, up to ``cfg.solver.restarts`` in total.
    The best feasible result wins; ties go to the lowest restart index. When
    nothing is feasible the least-violating plan is returned with its report,
    or InfeasiblePlanError is raised if ``cfg.strict``.
    """
    if thr.unbounded:
        raise UncertifiableError("conformal threshold is unbounded; cannot certify footstep safety")
    c = thr.c
    p = ccm.params
    H = cfg.horizon
    prob = _Problem(x_init, float(z_true_at_stance), gp, c, ccm, w_bar, cfg, entry)
    lb = np.concatenate([np.full(H, cfg.u_f_bounds[0]), np.full(H, cfg.u_dtheta_bounds[0])])
    ub = np.concatenate([np.full(H, cfg.u_f_bounds[1]), np.full(H, cfg.u_dtheta_bounds[1])])

    def start_points():
        if warm_start is not None:
            yield np.clip(np.asarray(warm_start, dtype=float).ravel(), lb, ub)
        yield heuristic_controls(x_init, cfg, p)
        rng = np.random.default_rng(seed)
        while True:
            yield rng.uniform(lb, ub)

    n_soft = 3 * H
    bounds = list(zip(lb, ub)) + [(0.0, 1e3)] * n_soft
    lo_b, hi_b = np.array([b[0] for b in bounds]), np.array([b[1] for b in bounds])
    best = None
    total_fev = 0
    budget = max(cfg.solver.restarts, 1)
    for idx, u0 in enumerate(start_points()):
        # past the budget, keep going only while no start satisfies the hard box constraints
        if idx >= budget and (best[0][0] < 2 or idx >= budget + cfg.solver.extra_restarts):
            break
        ev = _Evaluator(prob, cfg.solver.fd_step, 2 * H)
        cons = [{"type": "ineq", "fun": ev.cons_soft, "jac": ev.cons_soft_jac},
                {"type": "ineq", "fun": ev.cons_hard, "jac": ev.cons_hard_jac}]
        z = np.concatenate([u0, np.zeros(n_soft)])
        z[2 * H:] = np.maximum(-ev.cons_soft(z), 0.0)
        ev.set_scale(z)
        prev_viol = math.inf
        for weight in cfg.solver.penalties:
            ev.penalty = weight
            with warnings.catch_warnings():
                # SLSQP line searches may step a hair outside the box; scipy clips and warns
                warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
                res = minimize(ev.fun, z, jac=ev.jac, method="SLSQP", bounds=bounds, constraints=cons,
                               options={"maxiter": cfg.solver.iterations, "ftol": cfg.solver.tol})
            z = np.clip(res.x, lo_b, hi_b)
            viol = float(np.sum(np.maximum(-ev.cons_soft(np.concatenate([z[:2 * H], np.zeros(n_soft)])), 0.0)))
            # stop escalating once feasible, or when a heavier weight no longer helps
            if viol <= 0.0 or viol > (1.0 - 1e-3) * prev_viol:
                break
            prev_viol = viol
        total_fev += ev.nfev
        u = z[: 2 * H]
        controls = [ControlInput(float(u[q]), float(u[H + q])) for q in range(H)]
        states, refs, tubes, energies, report = replay_plan(
            x_init, z_true_at_stance, gp, controls, c, ccm, w_bar, cfg, entry)
        cost = float(prob.evaluate(u)[0][0])
        box_viol = max(0.0, -min(min(v) for v in report["state_box"].values()))
        if report["feasible"]:
            key = (0, cost)
        elif box_viol <= 1e-9:
            key = (1, report["max_violation"])
        else:
            key = (2, box_viol)
        if best is None or key < best[0]:
            best = (key, idx, controls, states, refs, tubes, energies, report, cost, res)

    _, idx, controls, states, refs, tubes, energies, report, cost, res = best
    info = {"restart": idx, "restarts": budget, "status": int(res.status),
            "message": str(res.message), "nfev": total_fev, "goal_heading": prob.goal_heading}
    if cfg.strict and not report["feasible"]:
        raise InfeasiblePlanError(report)
    return Plan(states=states, controls=controls, references=refs, tubes=tubes, feasibility_report=report,
                cost=cost, step_energies=energies, solver_info=info)


def mpc_cost(states, controls, gp: GPModel, cfg: MPCConfig, goal_heading: float | None = None) -> float:
    """Terminal goal distance and heading error plus the slope penalty over future stances."""
    final = states[-1]
    th_g = cfg.goal_heading if goal_heading is None else goal_heading
    if th_g is None:
        th_g = math.atan2(cfg.goal[1] - states[0].y, cfg.goal[0] - states[0].x)
    pts = np.array([[s.x, s.y] for s in states[1:]])
    _, grad = gp_mean_and_gradient(gp, pts)
    head = wrap_angle(final.theta - th_g)
    return float(cfg.w_goal[0] * (final.x - cfg.goal[0]) ** 2 + cfg.w_goal[1] * (final.y - cfg.goal[1]) ** 2
                 + cfg.w_heading * head**2
                 + np.sum(cfg.w_slope[0] * grad[:, 0] ** 2 + cfg.w_slope[1] * grad[:, 1] ** 2))


def receding_horizon_step(plan_: Plan) -> ControlInput:
    return plan_.controls[0]
