import pytest

# 32 x 32 window of 128 um, 200 um crystal: small enough for end-to-end runs.
SMALL_CONFIG = """\
version: 1
seed: 3

grid:
  nx: 32
  ny: 32
  dx: 4um
  nz: 4
  dz: 50um

interaction:
  lambda_p: 532nm
  lambda_s: 1064nm
  lambda_i: 1064nm
  n_p: 2.23
  n_s: 2.16
  n_i: 2.16
  kappa: 5/sqrt(W)
  pump_power: 1mW

pump:
  family: LG
  waist: 12um
  max_order: 0
  max_radial: 1

crystal:
  family: LG
  waist: 20um
  max_order: 1
  n_seg: 2
  init: uniform

detection:
  family: LG
  waist: 14um
  max_order: 1

target:
  kind: lg_high_order_qubit
  l: 1

optimizer:
  iterations: 2
  batch_size: 4
  checkpoint_every: 1
  eval_batch_size: 8

simulation:
  batch_size: 8
  chunk_size: 4

output:
  directory: {directory}
"""


def write_config(path, text=None, directory="run"):
    path.write_text(SMALL_CONFIG.format(directory=directory) if text is None else text,
                    encoding="utf-8")
    return path


@pytest.fixture
def small_config(tmp_path):
    """Path of a small, valid run configuration writing into tmp_path/run."""
    return write_config(tmp_path / "small.yml", directory=(tmp_path / "run").as_posix())
