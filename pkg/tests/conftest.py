from pathlib import Path
from tempfile import TemporaryDirectory
from unittest.mock import PropertyMock, patch

import numpy as np
import pytest

from app.experiment_log import ExperimentLog, make_forward_plan
from app.lab import InferenceLab
from app.lab_config import LabConfig
from app.simlab import DesignSpec, generate_trial


# Fixture to build a LabConfig whose every path lives in a temporary directory
@pytest.fixture
def lab_config():
    with TemporaryDirectory() as temp_dir:
        temp_path = Path(temp_dir)
        config = LabConfig(base_dir=temp_path, master_seed=11, replications=4, workers=1)

        with patch.object(LabConfig, 'output_dir', new_callable=PropertyMock) as mock_output_dir, \
             patch.object(LabConfig, 'log_dir', new_callable=PropertyMock) as mock_log_dir, \
             patch.object(LabConfig, 'log_file', new_callable=PropertyMock) as mock_log_file:

            mock_output_dir.return_value = temp_path / "out"
            mock_log_dir.return_value = temp_path / "logs"
            mock_log_file.return_value = temp_path / "logs/snaipw.log"

            yield config


@pytest.fixture
def lab(lab_config):
    return InferenceLab(config=lab_config)


# Five units, one covariate, hand-checkable
@pytest.fixture
def small_log():
    return ExperimentLog(
        x=np.array([[0.5], [-1.0], [2.0], [0.0], [1.5]]),
        a=np.array([1, 0, 1, 1, 0]),
        y=np.array([2.0, -1.0, 3.0, 1.0, 0.5]),
        pi=np.array([0.5, 0.5, 0.8, 0.25, 0.6]),
    )


@pytest.fixture
def seeded_log():
    """Randomized log with a linear outcome model and constant propensity 0.5."""
    rng = np.random.default_rng(2024)
    n, p = 400, 2
    x = rng.standard_normal((n, p))
    a = (rng.random(n) < 0.5).astype(int)
    y = 1.0 + x[:, 0] - 0.5 * x[:, 1] + 2.0 * a + rng.standard_normal(n)
    return ExperimentLog(x=x, a=a, y=y, pi=np.full(n, 0.5))


@pytest.fixture
def seeded_plan(seeded_log):
    return make_forward_plan(seeded_log.n, 4)


@pytest.fixture
def trial_b():
    return generate_trial(DesignSpec('B', 300, master_seed=5))
