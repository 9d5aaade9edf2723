import csv
import subprocess
import sys

import pytest

from tcclab.cli import cli_main

SMALL = """\
model.d_model = 8
model.n_layers = 2
model.n_tokens = 4
model.n_heads = 2
model.d_mlp = 16
model.n_conditions = 2
schedule.n_steps = 8
calibration.window = 7-4
samples.per_condition = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return cli_main([str(a) for a in argv])


def test_flops_default_ratio_half(tmp_path):
    assert run("flops", "--out", tmp_path) == 0
    (row,) = rows(tmp_path / "flops.csv")
    assert row["module_ratio"] == "0.5" and row["ratio"] == "0.5" and row["fresh_steps"] == "10"


def test_estimate_then_flops_with_pack(tmp_path, cfg_path):
    pack = tmp_path / "p.tccpack"
    assert run("estimate-priors", "--config", cfg_path, "--pack", pack) == 0
    assert run("flops", "--config", cfg_path, "--pack", pack, "--out", tmp_path) == 0
    (row,) = rows(tmp_path / "flops.csv")
    # steps 6 and 4 are cached inside window 7-4: 2 steps x 2 layers x 2 modules
    assert int(row["site_applications"]) == 8
    assert int(row["calibration_flops"]) == 8 * 2 * 4 * (64 + 16)


def test_sample_is_byte_identical(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("sample", "--config", cfg_path, "--out", a) == 0
    assert run("sample", "--config", cfg_path, "--out", b) == 0
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert (a / "steps.csv").read_bytes() == (b / "steps.csv").read_bytes()
    header = (a / "samples.csv").read_text().splitlines()[0]
    assert header == "sample,seed,condition,token,channel,value"


def test_seed_override_changes_samples(tmp_path, cfg_path):
    assert run("sample", "--config", cfg_path, "--out", tmp_path / "a") == 0
    assert run("sample", "--config", cfg_path, "--out", tmp_path / "b", "--seed", "77") == 0
    assert (tmp_path / "a" / "samples.csv").read_bytes() != (tmp_path / "b" / "samples.csv").read_bytes()


def test_pack_mismatch_exit_code(tmp_path, cfg_path):
    pack = tmp_path / "p.tccpack"
    assert run("estimate-priors", "--config", cfg_path, "--pack", pack) == 0
    other = tmp_path / "other.cfg"
    other.write_text(SMALL + "cache.interval = 3\n")
    assert run("sample", "--config", other, "--pack", pack, "--out", tmp_path) == 3


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("calibration.alpha = -1\n")
    assert run("flops", "--config", bad, "--out", tmp_path) == 2
    assert "calibration.alpha" in capsys.readouterr().err
    assert run("flops", "--config", tmp_path / "missing.cfg") == 2
    assert run("no-such-command") == 2


def test_runtime_error_exit_code(tmp_path, cfg_path):
    junk = tmp_path / "junk.tccpack"
    junk.write_bytes(b"garbage!")
    assert run("sample", "--config", cfg_path, "--pack", junk, "--out", tmp_path) == 1


def test_dispersion_needs_two_per_condition(tmp_path, cfg_path):
    assert run("dispersion", "--config", cfg_path, "--out", tmp_path) == 0
    fr = rows(tmp_path / "dispersion_fraction.csv")
    assert {r["module"] for r in fr} == {"attention", "mlp", "all"}
    one = tmp_path / "one.cfg"
    one.write_text(SMALL.replace("samples.per_condition = 2", "samples.per_condition = 1"))
    assert run("dispersion", "--config", one, "--out", tmp_path) == 1


def test_eval_deviation(tmp_path, cfg_path):
    pack = tmp_path / "p.tccpack"
    assert run("estimate-oneshot", "--config", cfg_path, "--pack", pack) == 0
    assert run("eval-deviation", "--config", cfg_path, "--pack", pack, "--out", tmp_path) == 0
    dev = rows(tmp_path / "deviation.csv")
    assert [int(r["step"]) for r in dev] == list(range(7, -1, -1))
    assert float(dev[0]["rel_dev"]) == 0.0  # first step is fresh
    assert len(rows(tmp_path / "site_mismatch.csv")) == 8


def test_sweep_alpha_zero_equals_base(tmp_path, cfg_path):
    assert run("sweep-alpha", "--config", cfg_path, "--alphas", "0", "--out", tmp_path) == 0
    (row,) = rows(tmp_path / "sweep_alpha.csv")
    assert row["tcc_endpoint_dev"] == row["oneshot_endpoint_dev"] == row["base_endpoint_dev"]
    assert run("sweep-alpha", "--config", cfg_path, "--alphas", "0,-1", "--out", tmp_path) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tcclab", "flops", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "flops.csv").exists()
