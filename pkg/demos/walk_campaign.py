"""Walk across hilly terrain with the receding-horizon planner and write artifacts.

Run: python3 demos/walk_campaign.py [out_dir]
"""
import sys
from dataclasses import replace

from tubewalk.planner import MPCConfig, SolverConfig
from tubewalk.sim import TrialConfig, emit_artifacts, run_campaign, run_trial
from tubewalk.terrain import TerrainSpec

out = sys.argv[1] if len(sys.argv) > 1 else "walk_out"
cfg = TrialConfig(terrain=TerrainSpec(style="hilly", seed=3), max_steps=20,
                  mpc=MPCConfig(horizon=3, solver=SolverConfig(restarts=1)))

report, records = run_trial(cfg)
print(f"single walk: {report.n_steps} steps, reached={report.reached}, p_tube={report.p_tube:.3f}, "
      f"ANE={report.ane:.2e}, band +-{report.c:.3f} m")
paths = emit_artifacts(report, records, out, max_panels=4)
print("wrote", ", ".join(str(x) for x in paths))

for torque in (True, False):
    summary, _, _ = run_campaign(replace(cfg, torque_enabled=torque), 3, seed=1)
    label = "CCM torque" if torque else "zero torque"
    print(f"{label:>11}: ANE {summary.ane:.2e}, p_tube {summary.p_tube:.3f} over {summary.n_steps} steps")
