import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tubewalk import cli
from tubewalk.terrain import TerrainGrid


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


@pytest.fixture(scope="module")
def stages(tmp_path_factory):
    """terrain -> fit -> calibrate -> synth on the 700-sample hilly setup."""
    d = tmp_path_factory.mktemp("pipe")
    assert cli.main(["terrain", "--style", "hilly", "--seed", "7", "--out", str(d / "hilly")]) == 0
    assert cli.main(["fit", "--terrain", str(d / "hilly.json"), "--seed", "1", "--out", str(d / "fit")]) == 0
    assert cli.main(["calibrate", "--gp", str(d / "fit" / "gp.json"), "--delta", "0.15",
                     "--terrain", str(d / "hilly.json"), "--out", str(d / "cal.json")]) == 0
    assert cli.main(["synth", "--out", str(d / "ccm.json")]) == 0
    return d


def _manifest(path):
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# terrain


def test_flat_band_gives_zero_grid(tmp_path):
    code, _ = run(["terrain", "--style", "flat-rough", "--band", 0, 0, "--out", tmp_path / "flat"])
    assert code == 0
    grid = TerrainGrid.load(tmp_path / "flat.json")
    assert np.all(grid.heights == 0.0)


def test_terrain_digests_identical_on_rerun(tmp_path):
    for sub in ("a", "b"):
        assert run(["terrain", "--style", "hilly", "--seed", 7, "--out", tmp_path / sub / "t"])[0] == 0
    ma = _manifest(tmp_path / "a" / "t.manifest.json")
    mb = _manifest(tmp_path / "b" / "t.manifest.json")
    assert sorted(ma["outputs"].values()) == sorted(mb["outputs"].values())
    assert ma["seed"] == 7 and ma["command"] == "terrain" and ma["exit_code"] == 0


def test_missing_out_is_usage_error(capsys):
    code, out = run(["terrain", "--style", "hilly"], capsys)
    assert code == 2 and "--out" in out.err


@pytest.mark.parametrize("argv", [["terrain", "--style", "cliffs", "--out", "x"],
                                  ["terrain", "--resolution", 4, 4, "--out", "{tmp}/t"],
                                  ["nonsense"]])
def test_invalid_flags_exit_2(tmp_path, argv):
    argv = [str(a).replace("{tmp}", str(tmp_path)) for a in argv]
    assert run(argv)[0] == 2


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("TUBEWALK_SEED", "7")
    assert run(["terrain", "--out", tmp_path / "env"])[0] == 0
    monkeypatch.delenv("TUBEWALK_SEED")
    assert run(["terrain", "--seed", 7, "--out", tmp_path / "flag"])[0] == 0
    assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()
    assert _manifest(tmp_path / "env.manifest.json")["seed"] == 7
    monkeypatch.setenv("TUBEWALK_SEED", "seven")
    assert run(["terrain", "--out", tmp_path / "bad"])[0] == 2


def test_json_flag_either_side(tmp_path, capsys):
    for argv in (["--json", "terrain", "--out", tmp_path / "j1"], ["terrain", "--json", "--out", tmp_path / "j2"]):
        code, out = run(argv, capsys)
        assert code == 0
        assert json.loads(out.out)["style"] == "hilly"


# ---------------------------------------------------------------------------
# fit and calibrate


def test_fit_outputs(stages):
    fit = stages / "fit"
    for name in ("observations.csv", "train.csv", "cal.csv", "test.csv", "gp.json", "fit.manifest.json"):
        assert (fit / name).is_file()
    m = _manifest(fit / "fit.manifest.json")
    assert set(m["inputs"]) == {str(stages / "hilly.json"), str(stages / "hilly.csv")}
    assert len(m["outputs"]) == 5


def test_calibrate_section_scale(stages):
    doc = json.loads((stages / "cal.json").read_text())
    assert doc["k"] == 210 and doc["quantile_index"] == 180 and doc["delta"] == 0.15
    assert 0.0 < doc["c"] < 0.5
    assert 0.0 <= doc["empirical_coverage"] <= 1.0
    wc = doc["width_comparison"]
    assert wc["cp_width"] == pytest.approx(2 * doc["c"])


def test_fit_and_calibrate_byte_identical(stages, tmp_path):
    assert run(["fit", "--terrain", stages / "hilly.json", "--seed", 1, "--out", tmp_path / "fit"])[0] == 0
    for name in ("observations.csv", "train.csv", "cal.csv", "test.csv", "gp.json"):
        assert (tmp_path / "fit" / name).read_bytes() == (stages / "fit" / name).read_bytes()
    assert run(["calibrate", "--gp", tmp_path / "fit" / "gp.json", "--delta", 0.15, "--terrain", stages / "hilly.json",
                "--out", tmp_path / "cal.json"])[0] == 0
    assert (tmp_path / "cal.json").read_bytes() == (stages / "cal.json").read_bytes()


def test_calibrate_unbounded_is_reported(stages, tmp_path):
    # ceil(211 * 0.999) = 211 > 210 scores: no finite order statistic qualifies
    assert run(["calibrate", "--gp", stages / "fit" / "gp.json", "--delta", 0.001, "--out", tmp_path / "u.json"])[0] == 0
    doc = json.loads((tmp_path / "u.json").read_text())
    assert doc["c"] is None and doc["quantile_index"] == 211


def test_missing_input_is_usage_error(tmp_path):
    assert run(["calibrate", "--gp", tmp_path / "nope.json", "--out", tmp_path / "c.json"])[0] == 2


# ---------------------------------------------------------------------------
# synth and plan


def test_synth_slow_rate(tmp_path, capsys):
    code, out = run(["--json", "synth", "--lambda", 1.0, "--out", tmp_path / "ccm1.json"], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "ccm1.json").read_text())
    assert doc["lmi_margin"] <= -1e-9 and doc["lambda"] == 1.0
    for key in ("M", "rho", "closed_loop_eigs"):
        assert key in doc
    assert json.loads(out.out)["lmi_margin"] == doc["lmi_margin"]


def test_synth_rejects_bad_rate(tmp_path):
    assert run(["synth", "--lambda", 0.0, "--out", tmp_path / "c.json"])[0] == 2


def test_plan_stage(stages, tmp_path):
    argv = ["plan", "--terrain", stages / "hilly.json", "--gp", stages / "fit" / "gp.json",
            "--calibration", stages / "cal.json", "--ccm", stages / "ccm.json", "--start", 1.5, 1.5,
            "--goal", 8.5, 8.5, "--horizon", 3, "--restarts", 1, "--seed", 0]
    code, _ = run(argv + ["--out", tmp_path / "a" / "plan.json"])
    code2, _ = run(argv + ["--out", tmp_path / "b" / "plan.json"])
    doc = json.loads((tmp_path / "a" / "plan.json").read_text())
    # exit status mirrors the feasibility report
    assert code == code2 == (0 if doc["residuals"]["feasible"] else 1)
    assert len(doc["controls"]) == 3 and len(doc["states"]) == 4
    assert (tmp_path / "a" / "plan.json").read_bytes() == (tmp_path / "b" / "plan.json").read_bytes()
    assert (tmp_path / "a" / "plan.csv").read_bytes() == (tmp_path / "b" / "plan.csv").read_bytes()
    assert (tmp_path / "a" / "plan.manifest.json").is_file()


def test_plan_with_unbounded_threshold_exits_1(stages, tmp_path):
    cal = json.loads((stages / "cal.json").read_text()) | {"c": None}
    (tmp_path / "cal.json").write_text(json.dumps(cal))
    code, _ = run(["plan", "--terrain", stages / "hilly.json", "--gp", stages / "fit" / "gp.json",
                   "--calibration", tmp_path / "cal.json", "--ccm", stages / "ccm.json",
                   "--start", 1.5, 1.5, "--goal", 8.5, 8.5, "--out", tmp_path / "p.json"])
    assert code == 1


# ---------------------------------------------------------------------------
# simulate and campaign

FAST = ["--max-steps", 3, "--horizon", 2]


def test_simulate_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run(["simulate", "--style", "wavy", "--seed", 2, *FAST, "--out", tmp_path / sub])[0] == 0
    for name in ("summary.json", "steps.csv", "phase_q00.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m = _manifest(tmp_path / "a" / "manifest.json")
    assert m["outputs"] == {k.replace("/b/", "/a/"): v for k, v in _manifest(tmp_path / "b" / "manifest.json")["outputs"].items()}


def test_simulate_config_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 4\n[terrain]\nstyle = "bumpy"\n[trial]\nmax_steps = 2\n[mpc]\nhorizon = 2\n')
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"])[0] == 0
    m = _manifest(tmp_path / "o" / "manifest.json")
    assert m["seed"] == 4 and m["config_path"] == str(cfg) and str(cfg) in m["inputs"]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["n_steps"] == 2


@pytest.mark.parametrize("text", ['[terrain]\ncolour = "red"\n', 'bogus = 1\n', '[mpc]\nhorizon = 1\n',
                                  '[trial]\nseed = 3\n', "not toml ==="])
def test_bad_config_exit_2(tmp_path, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"])[0] == 2


def test_json_config_equivalent(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "terrain": {"style": "bumpy"},
                                                 "trial": {"max_steps": 2}, "mpc": {"horizon": 2}}))
    (tmp_path / "c.toml").write_text('seed = 4\n[terrain]\nstyle = "bumpy"\n[trial]\nmax_steps = 2\n[mpc]\nhorizon = 2\n')
    assert cli.trial_config_from_mapping(cli.load_config(tmp_path / "c.json")) == \
        cli.trial_config_from_mapping(cli.load_config(tmp_path / "c.toml"))


def test_shipped_config_parses():
    cfg = cli.trial_config_from_mapping(cli.load_config(Path(__file__).parents[1] / "configs" / "campaign_hilly.toml"))
    assert cfg.terrain.style == "hilly"


def test_campaign_summary_fields(tmp_path, capsys):
    code, out = run(["--json", "campaign", "--trials", 15, "--delta", 0.15, "--style", "hilly",
                     "--max-steps", 2, "--horizon", 2, "--seed", 5, "--out", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    for key in ("p_tube", "cp_coverage", "ane", "footstep_safety_rate", "whole_invariance_rate", "fail_count"):
        assert key in doc
    assert doc["n_trials"] == 15 and len(doc["trials"]) == 15 and doc["delta"] == 0.15 and doc["style"] == "hilly"
    assert json.loads(out.out)["summary"] == str(tmp_path / "summary.json")


def test_campaign_rejects_zero_trials(tmp_path):
    assert run(["campaign", "--trials", 0, "--out", tmp_path])[0] == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tubewalk.cli", "terrain", "--style", "wavy", "--out",
                          str(tmp_path / "w")], capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "w.json").is_file()
    res = subprocess.run([sys.executable, "-m", "tubewalk.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "tubewalk" in res.stdout
