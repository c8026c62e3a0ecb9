import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pgla.config import ExperimentConfig, validate_config  # noqa: E402

TINY = {
    "trials": 3,
    "model": {"input_shape": [1, 8, 8], "hidden": [12]},
    "attack": {"probes": 120, "inversion": {"iterations": 40}},
    "training": {"steps": 60, "width": 32, "blocks": 2, "time_dim": 16},
}


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    return validate_config({**TINY, "output_dir": str(tmp_path / "run")})
