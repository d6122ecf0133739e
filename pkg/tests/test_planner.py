import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from tubewalk.conformal import CPThreshold, cp_threshold, nonconformity_scores
from tubewalk.contraction import TubeProfile, tube_profile
from tubewalk.planner import (
    InfeasiblePlanError,
    MPCConfig,
    Plan,
    SolverConfig,
    StepReference,
    TubeEntry,
    UncertifiableError,
    disk_min_orbital_energy,
    footstep_safety_residual,
    heuristic_controls,
    mpc_cost,
    orbital_energy_residual,
    per_step_delta,
    plan,
    receding_horizon_step,
    replay_plan,
)
from tubewalk.rom import (
    ControlInput,
    GlobalState,
    RobotParams,
    global_step,
    lipm_flow,
    orbital_energy,
    terrain_disturbance_bound,
)
from tubewalk.terrain import (
    KernelConfig,
    TerrainSpec,
    fit_gp,
    generate_terrain,
    gp_mean,
    gp_mean_gradient,
    sample_observations,
)

X_BOX = (-0.25, 0.25)
TAU_BOX = (-20.0, 20.0)

P = RobotParams()
W = P.omega
THR = CPThreshold(0.01, 0.15, 100, 86)
START = GlobalState(2.0, 2.0, 0.0, 0.8, 0.0)


@pytest.fixture(scope="module")
def flat_gp():
    grid = generate_terrain(TerrainSpec(style="flat-rough", height_band=(0.0, 0.0)))
    return fit_gp(sample_observations(grid, 200, 0.0, seed=0), KernelConfig(), 1e-4)


def _flat_cfg(goal, horizon=4, **kw):
    return MPCConfig(horizon=horizon, goal=goal, solver=SolverConfig(restarts=2), **kw)


# ---------------------------------------------------------------------------
# footstep residual


def test_footstep_residual_examples():
    cfg = MPCConfig()
    assert footstep_safety_residual(0.3, 0.3, cfg, 0.0) == pytest.approx(0.15)
    assert footstep_safety_residual(0.2, 0.3, cfg, 0.078) == pytest.approx(-0.028, abs=1e-12)
    assert footstep_safety_residual(0.3, 0.2, cfg, 0.078) == pytest.approx(-0.028, abs=1e-12)
    with pytest.raises(UncertifiableError):
        footstep_safety_residual(0.0, 0.0, cfg, math.inf)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 3))
def test_footstep_residual_decreases_at_rate_L(zq, zn, c1, c2, L):
    cfg = MPCConfig(lipschitz_L=L)
    r1 = footstep_safety_residual(zq, zn, cfg, c1)
    r2 = footstep_safety_residual(zq, zn, cfg, c2)
    assert r1 - r2 == pytest.approx(L * (c2 - c1), abs=1e-12)


def test_per_step_delta_compounds():
    d = per_step_delta(0.15, 10)
    assert (1 - d) ** 10 == pytest.approx(0.85, rel=1e-12)
    assert per_step_delta(0.15, 1) == pytest.approx(0.15)


# ---------------------------------------------------------------------------
# orbital energy over a tube


def _sampled_disk_min(x, v, r, n):
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.min(orbital_energy(x + r * np.cos(th), v + r * np.sin(th), W))


def _refined_disk_min(x, v, r, n=512):
    """Best of n boundary directions, then a bounded 1-D search inside its bracket."""
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    k = int(np.argmin(orbital_energy(x + r * np.cos(th), v + r * np.sin(th), W)))
    h = 2 * np.pi / n
    res = minimize_scalar(lambda a: orbital_energy(x + r * math.cos(a), v + r * math.sin(a), W),
                          bounds=(th[k] - h, th[k] + h), method="bounded", options={"xatol": 1e-12})
    return float(res.fun)


def test_zero_tube_is_nominal_energy():
    times = np.linspace(0, 0.4, 81)
    xr, vr = lipm_flow((-0.1, 0.7), 0.1, times, P)
    ref = StepReference(times, np.asarray(xr), np.asarray(vr))
    prof = _zero_profile(times)
    assert orbital_energy_residual(ref, prof, W) == pytest.approx(np.min(orbital_energy(ref.x, ref.v, W)), abs=1e-15)


def test_asymptote_reference_is_negative():
    times = np.linspace(0, 0.4, 81)
    x = 0.05 * np.exp(W * times)
    ref = StepReference(times, x, W * x)
    assert np.max(np.abs(orbital_energy(ref.x, ref.v, W))) < 1e-12
    prof = _zero_profile(times, radius=0.01)
    assert orbital_energy_residual(ref, prof, W) < 0


def test_residual_rejects_mismatched_grid():
    times = np.linspace(0, 0.4, 81)
    ref = StepReference(times[:10], times[:10], times[:10])
    with pytest.raises(ValueError):
        orbital_energy_residual(ref, _zero_profile(times), W)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-1.5, 1.5), st.floats(1e-4, 0.4))
def test_disk_min_matches_512_directions(x, v, r):
    sampled = _refined_disk_min(x, v, r)
    analytic = disk_min_orbital_energy(x, v, r, W)
    assert analytic <= sampled + 1e-12
    assert sampled - analytic <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-1.5, 1.5), st.floats(1e-3, 0.4))
def test_disk_min_matches_dense_sampling(x, v, r):
    sampled = _sampled_disk_min(x, v, r, 200_000)
    assert disk_min_orbital_energy(x, v, r, W) == pytest.approx(sampled, abs=1e-9 + 1e-9 * r)


def test_disk_min_hard_case_and_vectorized():
    # centre on the v-axis: the minimizer runs along x
    assert disk_min_orbital_energy(0.0, 0.5, 0.1, W) == pytest.approx(_sampled_disk_min(0.0, 0.5, 0.1, 100_000), abs=1e-9)
    xs = np.array([0.0, 0.1, -0.2, 0.05])
    vs = np.array([0.5, 0.9, 0.3, 0.0])
    rs = np.array([0.1, 0.0, 0.05, 0.2])
    batch = disk_min_orbital_energy(xs, vs, rs, W)
    for i in range(4):
        assert batch[i] == pytest.approx(disk_min_orbital_energy(xs[i], vs[i], rs[i], W), abs=1e-15)
    assert batch[1] == pytest.approx(orbital_energy(0.1, 0.9, W))


# ---------------------------------------------------------------------------
# cost


def test_cost_zero_at_goal_on_flat(flat_gp):
    final = GlobalState(3.0, 2.5, 0.0, 0.8, 0.4)
    cfg = MPCConfig(goal=(3.0, 2.5), goal_heading=0.4)
    assert mpc_cost([START, final], [ControlInput(0.1, 0.0)], flat_gp, cfg) == pytest.approx(0.0, abs=1e-12)


def test_cost_heading_wraps(flat_gp):
    final = GlobalState(3.0, 2.5, 0.0, 0.8, math.pi - 0.05)
    cfg = MPCConfig(goal=(3.0, 2.5), goal_heading=-math.pi + 0.05)
    assert mpc_cost([START, final], [ControlInput(0.1, 0.0)], flat_gp, cfg) == pytest.approx(0.01, rel=1e-9)


def test_slope_weight_linearity(hilly_setup):
    gp = hilly_setup[-1]
    states = [GlobalState(1.0 + 0.3 * q, 2.0 + 0.2 * q, 0.0, 0.8, 0.5) for q in range(5)]
    controls = [ControlInput(0.1, 0.0)] * 4

    def cost(ws):
        return mpc_cost(states, controls, gp, MPCConfig(goal=(5.0, 5.0), goal_heading=0.0, w_slope=ws))

    base = cost((0.0, 0.0))
    assert cost((10.0, 10.0)) - base == pytest.approx(2 * (cost((5.0, 5.0)) - base), rel=1e-12)
    g = gp_mean_gradient(gp, np.array([[s.x, s.y] for s in states[1:]]))
    assert cost((5.0, 5.0)) - base == pytest.approx(5.0 * np.sum(g**2), rel=1e-12)


# ---------------------------------------------------------------------------
# planning


@pytest.mark.parametrize("goal", [(3.0, 2.0), (2.9, 2.3), (3.1, 1.8)])
def test_flat_terrain_reaches_goal(flat_gp, ccm, goal):
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.0, _flat_cfg(goal), seed=0)
    end = pl.states[-1]
    assert math.hypot(end.x - goal[0], end.y - goal[1]) < 0.1
    assert pl.feasible


def test_attainable_goal_gives_near_zero_cost(flat_gp, ccm, params):
    # the goal is the end of a known admissible control sequence, heading included
    u = heuristic_controls(START, MPCConfig(horizon=4, goal=(9.0, 9.0)), params)
    s = START
    for q in range(4):
        s = global_step(s, ControlInput(u[q], u[4 + q]), (0.0, 0.0), params)
    cfg = _flat_cfg((s.x, s.y), goal_heading=s.theta)
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.0, cfg, seed=0)
    assert pl.cost < 1e-3


def _independent_replay(pl: Plan, x0, z0, gp, c, cfg, params):
    """Roll controls forward, recompute residuals from scratch."""
    s = x0._replace(z=z0)
    zs = [z0]
    for q, u in enumerate(pl.controls):
        g = gp_mean_gradient(gp, np.array([s.x, s.y]))
        s = global_step(s, u, g, params)
        for a, b in zip(s, pl.states[q + 1]):
            assert a == pytest.approx(b, abs=1e-12)
        zs.append(float(gp_mean(gp, np.array([[s.x, s.y]]))[0]))
    zs = np.array(zs)
    foot = cfg.delta_h_max - np.abs(np.diff(zs)) - cfg.lipschitz_L * c
    orbital = []
    for ref, tube in zip(pl.references, pl.tubes):
        orbital.append(min(_refined_disk_min(x, v, r) for x, v, r in zip(ref.x, ref.v, tube.radius)))
    return foot, np.array(orbital)


def test_feasible_plan_passes_independent_replay(flat_gp, ccm, params):
    cfg = _flat_cfg((2.9, 2.3))
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg, seed=0)
    assert pl.feasible
    foot, orbital = _independent_replay(pl, START, 0.0, flat_gp, THR.c, cfg, params)
    assert np.all(foot >= -1e-9)
    assert np.all(orbital > 0)
    assert np.allclose(foot, pl.feasibility_report["footstep"], atol=1e-12)
    assert np.allclose(orbital, pl.feasibility_report["orbital"], atol=1e-6)


def test_tubes_chain_through_saltation(flat_gp, ccm):
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.02, _flat_cfg((2.9, 2.3)), seed=0)
    for q, xi in enumerate(pl.feasibility_report["saltation"]):
        xi = np.array(xi)
        end_std = math.sqrt(pl.tubes[q].energy_bound[-1] / ccm.eig_min)
        lx = np.linalg.eigvalsh(xi.T @ ccm.M @ xi)[-1]
        assert pl.step_energies[q + 1] >= end_std**2 * lx * (1 - 1e-12)


def test_replay_reproduces_plan(flat_gp, ccm):
    cfg = _flat_cfg((2.9, 2.3))
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg, seed=0)
    states, refs, tubes, energies, report = replay_plan(START, 0.0, flat_gp, pl.controls, THR.c, ccm, 0.02, cfg)
    assert states == pl.states and energies == pl.step_energies
    assert report == pl.feasibility_report


def test_plan_determinism_and_receding_step(flat_gp, ccm):
    cfg = _flat_cfg((2.9, 2.3), horizon=2)
    a = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg, seed=3)
    b = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg, seed=3)
    assert a.horizon == 2 and len(a.states) == 3
    assert receding_horizon_step(a) == a.controls[0] == b.controls[0]
    assert a.controls == b.controls


def test_entry_tube_inflates_first_step(flat_gp, ccm):
    cfg = _flat_cfg((2.9, 2.3), horizon=2)
    cold = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg)
    warm = plan(START, 0.0, flat_gp, THR, ccm, 0.02, cfg, entry=TubeEntry(0.002, (0.15, 0.8)))
    assert cold.step_energies[0] == 0.0 and warm.step_energies[0] > 0.0


def test_unbounded_threshold_refused(flat_gp, ccm):
    with pytest.raises(UncertifiableError):
        plan(START, 0.0, flat_gp, CPThreshold(math.inf, 0.1, 4, 5), ccm, 0.0, _flat_cfg((3.0, 2.0)))


def test_strict_mode_raises_with_report(flat_gp, ccm):
    cfg = _flat_cfg((3.0, 2.0), strict=True)
    # a large threshold makes every footstep uncertifiable
    with pytest.raises(InfeasiblePlanError) as err:
        plan(START, 0.0, flat_gp, CPThreshold(0.2, 0.15, 100, 86), ccm, 0.0, cfg)
    assert err.value.report["max_violation"] > 0 and not err.value.report["feasible"]


def test_best_effort_plan_marks_violations(flat_gp, ccm):
    pl = plan(START, 0.0, flat_gp, CPThreshold(0.2, 0.15, 100, 86), ccm, 0.0, _flat_cfg((3.0, 2.0)))
    assert not pl.feasible
    assert min(pl.feasibility_report["footstep"]) < 0


def test_plan_serialization(tmp_path, flat_gp, ccm):
    pl = plan(START, 0.0, flat_gp, THR, ccm, 0.02, _flat_cfg((2.9, 2.3), horizon=2))
    d = json.loads(pl.save(tmp_path / "plan.json").read_text())
    assert len(d["states"]) == 3 and len(d["controls"]) == 2
    assert set(d["residuals"]) >= {"footstep", "orbital", "feasible"}
    rows = pl.to_csv(tmp_path / "plan.csv").read_text().splitlines()
    assert rows[0] == "step,t,x_ref,v_ref,energy_bound,radius" and len(rows) == 1 + 2 * 81


@pytest.mark.parametrize("kwargs", [dict(horizon=1), dict(delta_h_max=0.0), dict(lipschitz_L=0.0),
                                    dict(w_goal=(-1.0, 1.0)), dict(v_bounds=(0.0, 1.0))])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        MPCConfig(**kwargs)


# ---------------------------------------------------------------------------
# hilly terrain at the calibrated threshold


@pytest.fixture(scope="module")
def hilly_plan(hilly_setup, ccm):
    grid, _, _, cal, gp = hilly_setup
    thr = cp_threshold(nonconformity_scores(gp, cal), 0.15)
    w_bar = terrain_disturbance_bound(thr.c, ccm.params, X_BOX, TAU_BOX).w_bar
    x0 = GlobalState(1.5, 1.5, float(grid.height_at(np.array([[1.5, 1.5]]))[0]), 0.8, math.pi / 4)
    cfg = MPCConfig(horizon=8, goal=(8.5, 8.5), solver=SolverConfig(restarts=2))
    return plan(x0, x0.z, gp, thr, ccm, w_bar, cfg, seed=0)


def test_hilly_plan_footsteps_certified(hilly_plan):
    assert len(hilly_plan.feasibility_report["footstep"]) == 8
    assert min(hilly_plan.feasibility_report["footstep"]) >= 0


@pytest.mark.xfail(strict=True, reason="tube radius at the calibrated disturbance bound crosses the "
                                       "zero orbital-energy asymptote; see notes on orbital feasibility")
def test_hilly_plan_orbital_energy_positive(hilly_plan):
    assert min(hilly_plan.feasibility_report["orbital"]) > 0


# helpers ----------------------------------------------------------------------


def _zero_profile(times, radius=0.0):
    r = np.full_like(times, radius)
    return TubeProfile(times, r**2, r, 0.0)


def test_zero_profile_helper_shares_library_grid(ccm):
    prof = tube_profile(ccm, 0.0, 0.0, 0.4)
    assert np.array_equal(prof.times, _zero_profile(np.linspace(0, 0.4, 81)).times)
