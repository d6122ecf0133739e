"""Reduced-order walking dynamics.

Sagittal states live in the frame of the current stance foot: ``x`` is the CoM
position ahead of the foot and ``v`` its velocity. The flywheel-augmented
model is ``xdd = w^2 x - w^2/(m g) tau + w_dist``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np


class DivergenceError(RuntimeError):
    def __init__(self, t: float, message: str = "state became non-finite"):
        super().__init__(f"{message} at t={t:.6g}s")
        self.t = t


class SingularCrossingError(RuntimeError):
    """Guard crossing is (nearly) tangential; the saltation matrix is undefined."""


class InfeasibleBoundError(ValueError):
    pass


@dataclass(frozen=True)
class RobotParams:
    mass: float = 45.0
    gravity: float = 9.81
    apex_height: float = 0.981
    t_step: float = 0.4
    t_switch: float = 0.05

    def __post_init__(self):
        for name in ("mass", "gravity", "apex_height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_step < 0 or self.t_switch < 0:
            raise ValueError("durations must be non-negative")

    @property
    def omega(self) -> float:
        return math.sqrt(self.gravity / self.apex_height)

    @property
    def weight(self) -> float:
        return self.mass * self.gravity

    def to_dict(self) -> dict:
        return asdict(self) | {"omega": self.omega}


class SagittalState(NamedTuple):
    x: float
    v: float


class GlobalState(NamedTuple):
    x: float
    y: float
    z: float
    v: float
    theta: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class ControlInput(NamedTuple):
    u_f: float
    u_dtheta: float


@dataclass(frozen=True)
class DisturbanceBound:
    c_delta_lo: float
    c_delta_hi: float
    w_bar: float
    x_box: tuple[float, float]
    tau_box: tuple[float, float]

    @property
    def c_delta_abs_max(self) -> float:
        return max(abs(self.c_delta_lo), abs(self.c_delta_hi))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def lipm_flow(s0, u_f, t, params: RobotParams) -> SagittalState:
    """Closed-form sagittal flow. ``t`` may be an array, giving array-valued fields."""
    x0, v0 = s0
    w = params.omega
    ch, sh = np.cosh(w * np.asarray(t, dtype=float)), np.sinh(w * np.asarray(t, dtype=float))
    x = x0 + sh / w * v0 + (1.0 - ch) * u_f
    v = ch * v0 - w * sh * u_f
    if np.ndim(x) == 0:
        return SagittalState(float(x), float(v))
    return SagittalState(x, v)


def discrete_step(s, u_f, params: RobotParams) -> SagittalState:
    return lipm_flow(s, u_f, params.t_step, params)


def step_displacement(v, u_f, params: RobotParams):
    """CoM travel over one stance phase; independent of where the CoM starts."""
    w, T = params.omega, params.t_step
    return np.sinh(w * T) / w * v + (1.0 - np.cosh(w * T)) * u_f


def global_step(xq: GlobalState, uq: ControlInput, slope, params: RobotParams) -> GlobalState:
    """One-step global update; height follows the estimated slope along the heading."""
    w, T = params.omega, params.t_step
    dx = float(step_displacement(xq.v, uq.u_f, params))
    c, s = math.cos(xq.theta), math.sin(xq.theta)
    grad = np.asarray(slope, dtype=float)
    return GlobalState(
        x=xq.x + dx * c,
        y=xq.y + dx * s,
        z=xq.z + float(grad[0] * c + grad[1] * s) * dx,
        v=math.cosh(w * T) * xq.v - w * math.sinh(w * T) * uq.u_f,
        theta=wrap_angle(xq.theta + uq.u_dtheta),
    )


def auglipm_deriv(s, tau_y, w, params: RobotParams):
    x, v = s
    w2 = params.omega**2
    return v, w2 * x - w2 / params.weight * tau_y + w


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def states(self) -> np.ndarray:
        return np.stack([self.x, self.v], axis=-1)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "x_loc", "v_loc", "tau", "w"])
            for row in zip(self.t, self.x, self.v, self.tau, self.w):
                out.writerow([f"{float(val):.10g}" for val in row])
        return path


TimeStateFn = Callable[[float, tuple], "float | np.ndarray"]


def _zero(t, s):
    return 0.0


def integrate_auglipm(
    s0,
    torque_fn: TimeStateFn | None,
    w_fn: TimeStateFn | None,
    duration: float,
    dt: float,
    params: RobotParams,
    omega_sq: float | None = None,
) -> Trajectory:
    """Fixed-step RK4 of the augmented model, sampling both endpoints.

    ``s0`` may hold arrays (a batch of trajectories) as long as the callbacks
    broadcast. ``omega_sq`` replaces the nominal ``g / z_H`` in both the
    gravity term and the torque gain, i.e. integrates ``w_true^2 (x - tau/mg)``.
    """
    if dt <= 0 or duration < 0:
        raise ValueError("need dt > 0 and duration >= 0")
    if dt > 1e-2 + 1e-15:
        raise ValueError("dt must not exceed 1e-2 s")
    if duration > 0 and dt > duration + 1e-15:
        raise ValueError("dt must not exceed duration")
    torque_fn = torque_fn or _zero
    w_fn = w_fn or _zero
    w2 = params.omega**2 if omega_sq is None else float(omega_sq)
    gain = w2 / params.weight
    n = int(round(duration / dt)) if duration > 0 else 0
    h = duration / n if n else 0.0

    def f(t, x, v):
        s = (x, v)
        return v, w2 * x - gain * torque_fn(t, s) + w_fn(t, s)

    x = np.asarray(s0[0], dtype=float) * 1.0
    v = np.asarray(s0[1], dtype=float) * 1.0
    ts = np.linspace(0.0, duration, n + 1)
    xs, vs, taus, ws = [x], [v], [], []
    for i in range(n):
        t = ts[i]
        taus.append(np.asarray(torque_fn(t, (x, v)), dtype=float) * np.ones_like(x))
        ws.append(np.asarray(w_fn(t, (x, v)), dtype=float) * np.ones_like(x))
        k1x, k1v = f(t, x, v)
        k2x, k2v = f(t + h / 2, x + h / 2 * k1x, v + h / 2 * k1v)
        k3x, k3v = f(t + h / 2, x + h / 2 * k2x, v + h / 2 * k2v)
        k4x, k4v = f(t + h, x + h * k3x, v + h * k3v)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise DivergenceError(ts[i + 1])
        xs.append(x)
        vs.append(v)
    taus.append(np.asarray(torque_fn(ts[-1], (x, v)), dtype=float) * np.ones_like(x))
    ws.append(np.asarray(w_fn(ts[-1], (x, v)), dtype=float) * np.ones_like(x))
    return Trajectory(ts, np.array(xs), np.array(vs), np.array(taus), np.array(ws))


def reset_map(s_minus, u_f_next, params: RobotParams) -> SagittalState:
    """Double-support drift for ``t_switch`` then re-express in the next stance frame.

    ``u_f_next`` is the sagittal distance from the old stance foot to the new one.
    """
    x, v = s_minus
    return SagittalState(x + v * params.t_switch - u_f_next, v)


def reset_jacobian(params: RobotParams) -> np.ndarray:
    return np.array([[1.0, params.t_switch], [0.0, 1.0]])


def vector_field(s, params: RobotParams) -> np.ndarray:
    x, v = s
    return np.array([v, params.omega**2 * x])


def saltation_matrix(s_minus, u_f_next, params: RobotParams, guard_grad=(1.0, 0.0)) -> np.ndarray:
    """Saltation matrix of the foot switch.

    The guard fires when the CoM reaches the predicted end-of-step position, so
    its gradient in the sagittal state is ``(1, 0)``.
    """
    jg = np.asarray(guard_grad, dtype=float)
    f_minus = vector_field(s_minus, params)
    f_plus = vector_field(reset_map(s_minus, u_f_next, params), params)
    jd = reset_jacobian(params)
    denom = float(jg @ f_minus)
    if abs(denom) < 1e-9:
        raise SingularCrossingError(f"|J_g . F-| = {abs(denom):.3g} < 1e-9")
    return jd + np.outer(f_plus - jd @ f_minus, jg) / denom


def c_delta_interval(c: float, params: RobotParams) -> tuple[float, float]:
    g, zh = params.gravity, params.apex_height
    if c >= zh:
        raise InfeasibleBoundError(f"threshold {c} >= apex height {zh}: natural frequency unbounded")
    if c < 0:
        raise ValueError("threshold must be non-negative")
    return -g * c / (zh * (zh + c)), g * c / (zh * (zh - c))


def terrain_disturbance_bound(c: float, params: RobotParams, x_box, tau_box) -> DisturbanceBound:
    """Worst-case |C_delta| |x - tau/(mg)| over the state/torque box (attained at a corner)."""
    lo, hi = c_delta_interval(c, params)
    cmax = max(abs(lo), abs(hi))
    corners = [abs(x - tau / params.weight) for x in x_box for tau in tau_box]
    return DisturbanceBound(lo, hi, cmax * max(corners), tuple(x_box), tuple(tau_box))


def orbital_energy(x_loc, v_loc, omega):
    return 0.5 * (np.asarray(v_loc) ** 2 - omega**2 * np.asarray(x_loc) ** 2)
