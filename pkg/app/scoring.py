########################
# AIPW Scoring          #
########################

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from app.exceptions import NuisanceError, ScoringError
from app.experiment_log import ExperimentLog, ForwardPlan, UnitRecord
from app.nuisance import NuisanceFitSet


def aipw_score(record: UnitRecord, m0: float, m1: float) -> float:
    """
    Doubly robust score of one unit.

    (A/pi)(Y - m1) - ((1-A)/(1-pi))(Y - m0) + m1 - m0, with the logged pi.
    """
    a, y, pi = record.a, record.y, record.pi
    return (a / pi) * (y - m1) - ((1 - a) / (1 - pi)) * (y - m0) + m1 - m0


def aipw_scores(a: np.ndarray, y: np.ndarray, pi: np.ndarray,
                m0: np.ndarray, m1: np.ndarray) -> np.ndarray:
    """Vectorized ``aipw_score``; the same expression evaluated elementwise."""
    return (a / pi) * (y - m1) - ((1 - a) / (1 - pi)) * (y - m0) + m1 - m0


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    """
    Pseudo-outcomes phi_hat_t over the scored set, in increasing t.
    """

    t: np.ndarray
    phi_hat: np.ndarray
    mode: str

    def __post_init__(self):
        t = np.array(self.t, dtype=np.int64, copy=True).reshape(-1)
        phi = np.array(self.phi_hat, dtype=float, copy=True).reshape(-1)
        if t.shape != phi.shape:
            raise ScoringError("Score series needs one value per scored index")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ScoringError("Score series must be strictly increasing in t")
        t.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'phi_hat', phi)

    @classmethod
    def from_values(cls, values, mode: str = 'external') -> 'ScoreSeries':
        """Series over t = 1..len(values), for scores computed elsewhere."""
        values = np.asarray(values, dtype=float).reshape(-1)
        return cls(np.arange(1, values.size + 1), values, mode)

    @property
    def n_eff(self) -> int:
        return int(self.phi_hat.shape[0])

    @property
    def entries(self):
        return list(zip(self.t.tolist(), self.phi_hat.tolist()))

    def __len__(self) -> int:
        return self.n_eff

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.t, 'phi_hat': self.phi_hat})

    def to_csv(self, path: Union[str, Path], encoding: str = 'utf-8') -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g', encoding=encoding)
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], mode: str = 'external',
                 encoding: str = 'utf-8') -> 'ScoreSeries':
        try:
            df = pd.read_csv(path, encoding=encoding, float_precision='round_trip')
            return cls(df['t'].to_numpy(), df['phi_hat'].to_numpy(), mode)
        except (OSError, KeyError, ValueError, pd.errors.ParserError) as e:
            raise ScoringError(f"Could not read score series {path}: {e}") from e


def _check_plan(log: ExperimentLog, plan: ForwardPlan) -> None:
    if plan.n != log.n:
        raise ScoringError(f"Plan horizon {plan.n} does not match log length {log.n}")


def score_series(log: ExperimentLog, plan: ForwardPlan, fits: NuisanceFitSet,
                 assumed_pi: Optional[float] = None) -> ScoreSeries:
    """
    Score every unit of the plan's scored set with its block's nuisance pair.

    Args:
        log (ExperimentLog): Logged units.
        plan (ForwardPlan): Block partition and scored set.
        fits (NuisanceFitSet): Nuisance pairs covering every scored block.
        assumed_pi (Optional[float]): Replaces every logged propensity when set.

    Returns:
        ScoreSeries: phi_hat over the scored set, ordered by t.

    Raises:
        ScoringError: If the plan does not match the log or a scored block has no fit.
    """
    _check_plan(log, plan)
    times = plan.scored_array
    if times.size == 0:
        return ScoreSeries(times, np.zeros(0), fits.mode)
    rows = times - 1
    try:
        m0, m1 = fits.predict(times, log.x[rows], plan)
    except NuisanceError as e:
        raise ScoringError(str(e)) from e
    pi = log.pi[rows] if assumed_pi is None else np.full(rows.size, float(assumed_pi))
    phi = aipw_scores(log.a[rows], log.y[rows], pi, m0, m1)
    if not np.all(np.isfinite(phi)):
        raise ScoringError("Non-finite score encountered")
    return ScoreSeries(times, phi, fits.mode)


def mislogged_score_series(log: ExperimentLog, plan: ForwardPlan, fits: NuisanceFitSet,
                           assumed_pi: float) -> ScoreSeries:
    """
    Score with a constant assumed propensity instead of the logged one.

    Raises:
        ScoringError: If assumed_pi is outside (0, 1), or as ``score_series``.
    """
    if not 0.0 < assumed_pi < 1.0:
        raise ScoringError(f"assumed_pi must lie in (0, 1), got {assumed_pi}")
    logging.info(f"Scoring with assumed propensity {assumed_pi} instead of the logged values")
    return score_series(log, plan, fits, assumed_pi=assumed_pi)
