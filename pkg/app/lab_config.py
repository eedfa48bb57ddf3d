########################
# Lab Config           #
########################

from dataclasses import dataclass
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from app.exceptions import ConfigurationError

# Load environment variables from a .env file into the program's environment
load_dotenv()


def get_project_root() -> Path:
    """
    Get the project root directory.

    Returns:
        Path: The directory two levels above this file (the repository root).
    """
    current_file = Path(__file__)
    return current_file.parent.parent


def _env_bool(name: str, default: str) -> bool:
    value = os.getenv(name, default).lower()
    return value == 'true' or value == '1'


@dataclass
class LabConfig:
    """
    Settings shared by simulation, inference and audit runs.

    Every parameter can be passed to the constructor or set through an
    ``SNAIPW_*`` environment variable (a ``.env`` file is honoured). Constructor
    arguments win over the environment, which wins over the built-in defaults.
    """

    def __init__(
        self,
        base_dir: Optional[Path] = None,
        master_seed: Optional[int] = None,
        workers: Optional[int] = None,
        replications: Optional[int] = None,
        alpha: Optional[float] = None,
        critical: Optional[str] = None,
        epsilon: Optional[float] = None,
        calibration_bins: Optional[int] = None,
        calibration_min_count: Optional[int] = None,
        auto_save: Optional[bool] = None,
        default_encoding: Optional[str] = None
    ):
        """
        Initialize configuration with environment variables and defaults.

        Args:
            base_dir (Optional[Path]): Root under which outputs and logs are written.
            master_seed (Optional[int]): Master seed for every random substream.
            workers (Optional[int]): Parallel worker count for Monte Carlo runs.
            replications (Optional[int]): Default replication count R.
            alpha (Optional[float]): Default interval level.
            critical (Optional[str]): Default critical value, 'z' or 't'.
            epsilon (Optional[float]): Default overlap threshold for audits.
            calibration_bins (Optional[int]): Equal-width calibration bins.
            calibration_min_count (Optional[int]): Minimum calibration bin occupancy.
            auto_save (Optional[bool]): Whether partial tables are written after each cell.
            default_encoding (Optional[str]): Encoding for all text files.
        """
        project_root = get_project_root()
        self.base_dir = base_dir or Path(
            os.getenv('SNAIPW_BASE_DIR', str(project_root))
        ).resolve()

        self.master_seed = master_seed if master_seed is not None else int(
            os.getenv('SNAIPW_SEED', '20240601')
        )

        self.workers = workers or int(os.getenv('SNAIPW_WORKERS', '1'))

        # Desk scale by default; the published grids use R=1000
        self.replications = replications or int(
            os.getenv('SNAIPW_REPLICATIONS', '500')
        )

        self.alpha = alpha if alpha is not None else float(
            os.getenv('SNAIPW_ALPHA', '0.05')
        )

        self.critical = (critical or os.getenv('SNAIPW_CRITICAL', 'z')).lower()

        self.epsilon = epsilon if epsilon is not None else float(
            os.getenv('SNAIPW_EPSILON', '0.05')
        )

        self.calibration_bins = calibration_bins or int(
            os.getenv('SNAIPW_CALIBRATION_BINS', '10')
        )
        self.calibration_min_count = calibration_min_count or int(
            os.getenv('SNAIPW_CALIBRATION_MIN_COUNT', '50')
        )

        self.auto_save = auto_save if auto_save is not None else _env_bool(
            'SNAIPW_AUTO_SAVE', 'true'
        )

        self.default_encoding = default_encoding or os.getenv(
            'SNAIPW_DEFAULT_ENCODING', 'utf-8'
        )

    @property
    def output_dir(self) -> Path:
        """
        Get the root output directory (``out/`` under the base directory).

        Returns:
            Path: The output directory path.
        """
        return Path(os.getenv(
            'SNAIPW_OUTPUT_DIR',
            str(self.base_dir / "out")
        )).resolve()

    @property
    def log_dir(self) -> Path:
        """
        Get log directory path.

        Returns:
            Path: The log directory path.
        """
        return Path(os.getenv(
            'SNAIPW_LOG_DIR',
            str(self.base_dir / "logs")
        )).resolve()

    @property
    def log_file(self) -> Path:
        """
        Get log file path.

        Returns:
            Path: The log file path.
        """
        return Path(os.getenv(
            'SNAIPW_LOG_FILE',
            str(self.log_dir / "snaipw.log")
        )).resolve()

    def validate(self) -> None:
        """
        Validate configuration settings.

        Raises:
            ConfigurationError: If any configuration parameter is invalid.
        """
        if self.master_seed < 0:
            raise ConfigurationError("master_seed must be non-negative")
        if self.workers <= 0:
            raise ConfigurationError("workers must be positive")
        if self.replications <= 0:
            raise ConfigurationError("replications must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.critical not in ('z', 't'):
            raise ConfigurationError("critical must be 'z' or 't'")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigurationError("epsilon must lie in (0, 0.5)")
        if self.calibration_bins <= 0:
            raise ConfigurationError("calibration_bins must be positive")
        if self.calibration_min_count <= 0:
            raise ConfigurationError("calibration_min_count must be positive")

    def to_dict(self) -> Dict[str, Any]:
        """
        Resolved settings in a JSON-serializable form.

        Returns:
            Dict[str, Any]: Every setting, paths rendered as strings.
        """
        return {
            'base_dir': str(self.base_dir),
            'output_dir': str(self.output_dir),
            'log_file': str(self.log_file),
            'master_seed': self.master_seed,
            'workers': self.workers,
            'replications': self.replications,
            'alpha': self.alpha,
            'critical': self.critical,
            'epsilon': self.epsilon,
            'calibration_bins': self.calibration_bins,
            'calibration_min_count': self.calibration_min_count,
            'auto_save': self.auto_save,
            'default_encoding': self.default_encoding,
        }
