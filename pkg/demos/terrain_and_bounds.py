"""Fit a GP to sparse height samples, calibrate a conformal band and check coverage.

Run: python3 demos/terrain_and_bounds.py
"""
import numpy as np

from tubewalk.conformal import cp_threshold, empirical_coverage, interval_width_comparison, nonconformity_scores
from tubewalk.terrain import (
    STYLES,
    KernelConfig,
    TerrainSpec,
    fit_gp,
    generate_terrain,
    held_out_observations,
    sample_observations,
    split_observations,
)

DELTA = 0.15

for style in STYLES:
    grid = generate_terrain(TerrainSpec(style=style, seed=7))
    obs = sample_observations(grid, 700, 0.01, seed=1)
    train, cal = split_observations(obs, 0.7, seed=1)
    gp = fit_gp(train, KernelConfig(), 1e-4)
    thr = cp_threshold(nonconformity_scores(gp, cal), DELTA)
    test = held_out_observations(grid, obs, 500, 0.01, seed=2)
    cov = empirical_coverage(gp, thr, test)
    wc = interval_width_comparison(gp, thr, grid.cell_centers())
    print(f"{style:>10}: band +-{thr.c:.3f} m, coverage {cov:.3f} (target {1 - DELTA:.2f}), "
          f"gaussian half-width {wc.z_score * wc.sigma_avg:.3f} m, height range "
          f"[{grid.heights.min():.2f}, {grid.heights.max():.2f}]")

# the band translates into a bound on the pendulum frequency mismatch
from tubewalk.rom import RobotParams, terrain_disturbance_bound  # noqa: E402

p = RobotParams()
for c in (0.0, 0.03, 0.1):
    b = terrain_disturbance_bound(c, p, (-0.25, 0.25), (-20.0, 20.0))
    print(f"c = {c:.2f} m  ->  w_bar = {b.w_bar:.4f} m/s^2")
print("omega =", np.round(p.omega, 4), "1/s")
