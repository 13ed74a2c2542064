import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from perelman_lab import cli

ROOT = Path(__file__).resolve().parent.parent
QUICK = "experiment = variation_oracle\nseed = 7\nresolution = 16\ncount = 2\n"


def write(tmp_path, text, name="run.conf"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# -- configuration ---------------------------------------------------------


def test_parse_sections_comments_and_duplicates():
    raw = cli.parse_config("a = 1  # note\n[flow]\nT = 0.5\n")
    assert raw == {"a": "1", "flow.T": "0.5"}
    with pytest.raises(cli.ConfigError) as e:
        cli.parse_config("a = 1\na = 2\nbroken line\n")
    assert len(e.value.errors) == 2


def test_load_config_types_and_defaults():
    cfg = cli.load_config(QUICK)
    assert cfg.experiment == "variation_oracle" and cfg.seed == 7
    assert cfg["resolution"] == 16 and cfg["eps"] == 1e-5
    assert cfg["metric.coeffs"] == [0.1, 0.05, 0, 0]


def test_load_config_collects_every_error():
    text = "experiment = variation_oracle\nseed = x\nresolution = 4\nbogus = 1\ncount = 2.5\n"
    with pytest.raises(cli.ConfigError) as e:
        cli.load_config(text)
    msg = " | ".join(e.value.errors)
    assert len(e.value.errors) == 4
    for part in ("seed", "resolution", "bogus", "count"):
        assert part in msg


def test_unknown_or_missing_experiment():
    with pytest.raises(cli.ConfigError, match="unknown experiment"):
        cli.load_config("experiment = nothing\n")
    with pytest.raises(cli.ConfigError, match="missing"):
        cli.load_config("seed = 1\n")


def test_overrides_change_digest_and_reach_composite_grids():
    a = cli.load_config(QUICK)
    b = cli.load_config(QUICK, {"seed": 8})
    assert b.seed == 8 and a.digest != b.digest
    c = cli.load_config("experiment = variant_suites\n", {"resolution": 24})
    assert c["list.resolution"] == 24 and c["rym.resolution"] == 24


def test_seeded_streams_are_independent_and_reproducible():
    cfg = cli.load_config(QUICK)
    assert np.array_equal(cfg.rng(1).normal(size=4), cfg.rng(1).normal(size=4))
    assert not np.array_equal(cfg.rng(1).normal(size=4), cfg.rng(2).normal(size=4))


def test_all_shipped_configs_validate():
    confs = sorted((ROOT / "configs").glob("*.conf"))
    names = {cli.load_config(p.read_text()).experiment for p in confs}
    assert names == set(cli.EXPERIMENTS)


# -- reports ---------------------------------------------------------------


def test_fmt_real_round_trips():
    rng = np.random.default_rng(0)
    for x in list(rng.normal(size=50) * 10.0 ** rng.integers(-300, 300, 50)) + [0.0, -0.0, 1.0, 1e300, 5e-324]:
        assert float(cli.fmt_real(float(x))) == x
    assert cli.fmt_real(3.0) == "3.0"
    assert cli.fmt_real(math.nan) == "NaN" and cli.fmt_real(-math.inf) == "-Infinity"


def test_json_is_lossless():
    obj = {"a": [0.1, 1 / 3, np.float64(2.0), np.int64(4)], "b": {"c": None, "d": True, "e": math.inf}, "s": 'q"x'}
    back = json.loads(cli.dumps_json(obj))
    assert back["a"] == [0.1, 1 / 3, 2.0, 4] and back["b"]["e"] == math.inf and back["s"] == 'q"x'


def test_check_relations():
    r = cli.RunReport()
    assert r.check("a", -1e-9, 1e-8)
    assert not r.check("b", math.nan, 1.0, "<=")
    assert r.check("c", 1.0, 0.0, ">=") and r.check("d", True, None, "true")
    assert not r.all_passed
    with pytest.raises(ValueError):
        r.check("e", 1.0, 1.0, "==")


def test_empty_report_emits_valid_files(tmp_path):
    cli.emit_report(cli.RunReport(), tmp_path)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["checks"] == [] and rep["all_passed"] is True
    assert (tmp_path / "checks.csv").read_text() == "name,value,tolerance,relation,passed\n"
    assert (tmp_path / "plot.gp").exists()


def test_tables_and_data_files(tmp_path):
    r = cli.RunReport()
    r.table("series", ["t", "y"], [[0.0, 1.0], [0.5, 0.25]])
    cli.emit_report(r, tmp_path)
    assert (tmp_path / "tables" / "series.csv").read_text() == "t,y\n0,1\n0.5,0.25\n"
    assert (tmp_path / "tables" / "series_y.dat").read_text().splitlines()[1:] == ["0 1", "0.5 0.25"]
    with pytest.raises(ValueError):
        r.table("series", ["t"], [])


# -- entry point -----------------------------------------------------------


def test_list_experiments(capsys):
    assert cli.main(["--list-experiments"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in cli.EXPERIMENTS)
    assert cli.main(["run", "--list-experiments"]) == 0


def test_usage_and_config_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["run", str(tmp_path / "missing.conf")]) == 2
    assert cli.main(["run", write(tmp_path, "experiment = variation_oracle\nbogus = 1\nresolution = 2\n")]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "resolution" in err


def test_passing_run_writes_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, QUICK), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["all_passed"] and rep["manifest"]["seed"] == 7 and rep["config"] == QUICK
    assert "PASS delta_W/max_rel_error" in capsys.readouterr().out


def test_failing_check_gives_exit_one(tmp_path):
    conf = write(tmp_path, QUICK + "tol.relative = 1e-300\n")
    assert cli.main(["run", conf, "--out", str(tmp_path / "o")]) == 1


def test_numerical_abort_becomes_failed_check(tmp_path):
    text = "experiment = list_flow\nresolution = 16\nchecks = trajectory\ndefect_tol = 1e-12\n"
    out = tmp_path / "o"
    assert cli.main(["run", write(tmp_path, text), "--out", str(out)]) == 1
    rep = json.loads((out / "report.json").read_text())
    (chk,) = [c for c in rep["checks"] if c["name"] == "trajectory/aborted"]
    assert not chk["passed"] and "DefectError" in chk["detail"]["error"]


def test_unknown_section_selection_fails(tmp_path):
    text = QUICK.replace("variation_oracle", "list_flow").replace("count = 2\n", "checks = nothing\n")
    assert cli.main(["run", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 1


def test_resolution_override_is_recorded(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", write(tmp_path, QUICK), "--out", str(out), "--resolution", "12", "--seed", "3"]) == 0
    man = json.loads((out / "report.json").read_text())["manifest"]
    assert man["overrides"] == {"resolution": "12", "seed": "3"} and man["seed"] == 3


def test_byte_determinism_across_runs_and_threads(tmp_path):
    conf = str(ROOT / "configs" / "determinism.conf")
    outs = []
    for i, threads in enumerate(("1", "3")):
        out = tmp_path / f"run{i}"
        env = {"PERELMAN_LAB_THREADS": threads, "PATH": "/usr/bin:/bin:/usr/local/bin"}
        res = subprocess.run([sys.executable, "-m", "perelman_lab.cli", "run", conf, "--out", str(out)],
                             env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        files = tree(out)
        assert "timing.json" in files
        files.pop("timing.json")
        outs.append(files)
    assert outs[0] == outs[1]
