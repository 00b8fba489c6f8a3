"""Command-line surface tests."""

import numpy as np
import pytest

from tilepic.cli import main
from tilepic.core import SimulationConfig, format_config
from tilepic.metrics import metrics_from_csv


@pytest.fixture()
def cfg_file(tmp_path):
    cfg = SimulationConfig(n_cell=(8, 8, 8), prob_lo=(0, 0, 0),
                           prob_hi=(8e-6, 8e-6, 8e-6), ppc=2, u_th=0.05,
                           steps=3, warmup=0, seed=21)
    path = tmp_path / "test.cfg"
    path.write_text(format_config(cfg))
    return path


def test_run_writes_metrics_and_conservation(tmp_path, cfg_file, capsys):
    rc = main(["run", "--config", str(cfg_file), "--out", str(tmp_path)])
    assert rc == 0
    csv = tmp_path / "metrics_G7_D3_C2.csv"
    rows = metrics_from_csv(csv.read_text())
    assert len(rows) == 3
    assert (tmp_path / "conservation_G7_D3_C2.txt").exists()
    out = capsys.readouterr().out
    assert "pps=" in out


def test_run_zero_steps_header_only(tmp_path, cfg_file):
    rc = main(["run", "--config", str(cfg_file), "--steps", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    text = (tmp_path / "metrics_G7_D3_C2.csv").read_text()
    assert len(text.strip().splitlines()) == 1  # just the header

def test_variant_flags_override(tmp_path, cfg_file):
    rc = main(["run", "--config", str(cfg_file), "--interp", "G0",
               "--deposit", "D0", "--comm", "C0", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "metrics_G0_D0_C0.csv").exists()


def test_ablate_emits_summary(tmp_path, cfg_file):
    rc = main(["ablate", "--config", str(cfg_file),
               "--interp", "G0,G7", "--deposit", "D0,D3",
               "--comm", "C0", "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "ablate_summary.csv").read_text().strip().splitlines()
    # G0/D0, G0/D3 invalid, G7/D0, G7/D3 -> 3 valid combos
    assert len(lines) == 1 + 3


def test_verify_passes(tmp_path, capsys):
    rc = main(["verify", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in out
    assert out.count("PASS") >= 3
