"""
Desk-scale inverse design runs of the shipped example configurations.

Each run takes minutes on a multi-core CPU; they are deselected by default
and run with `pytest -m slow`.
"""

import json

import numpy as np
import pytest

from qholo.artifacts import read_csv
from qholo.config import CONFIG_DIR
from test_cli_functionality import run_cli


def optimize(tmp_path, config_name, threads=8):
    out = tmp_path / config_name.replace(".yml", "")
    code = run_cli(
        "optimize", "--config", CONFIG_DIR / config_name, "--out", out,
        "--threads", threads, "--log-file", tmp_path / "q.log",
    )
    assert code == 0
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    rows = read_csv(out / "P.csv")
    labels = [r["signal"] for r in rows]
    P = np.array([[float(r[label]) for label in labels] for r in rows])
    return out, summary, labels, P


@pytest.mark.slow
def test_high_order_qubit(tmp_path):
    _, summary, labels, P = optimize(tmp_path, "qubit_l2.yml")
    assert summary["fidelity"] >= 0.90
    plus, minus = labels.index("LG_0_2"), labels.index("LG_0_-2")
    assert P[plus, minus] + P[minus, plus] > 0.8


@pytest.mark.slow
def test_qutrit(tmp_path):
    _, _, labels, P = optimize(tmp_path, "qutrit.yml")
    cells = [labels.index(f"LG_0_{l}") for l in (1, 2, 3)]
    for k in cells:
        assert P[k, k] == pytest.approx(1 / 3, abs=0.07)
    diagonal = sum(P[k, k] for k in cells)
    assert 1 - diagonal < 0.15


@pytest.mark.slow
def test_hg_ququad_with_learned_pump(tmp_path):
    out, summary, _, _ = optimize(tmp_path, "hg_ququad.yml")
    assert summary["fidelity"] >= 0.85
    assert (out / "pump_magnitude.png").exists()
    assert (out / "crystal_zpattern.png").exists()
    pump = read_csv(out / "pump_coefficients.csv")
    assert sum(1 for r in pump if complex(float(r["re"]), float(r["im"])) != 0) > 1
