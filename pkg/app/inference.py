########################
# Inference             #
########################

from dataclasses import asdict, dataclass
import json
import logging
import math
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from app.exceptions import InferenceError
from app.scoring import ScoreSeries

VARIANTS = ('sn_z', 'sn_t', 'fixed_v')
DISTRIBUTIONS = ('std_normal', 'student_t')

SeriesLike = Union[ScoreSeries, Sequence[float], np.ndarray]


def _values(series: SeriesLike) -> np.ndarray:
    if isinstance(series, ScoreSeries):
        return series.phi_hat
    return np.asarray(series, dtype=float).reshape(-1)


def _is_constant(values: np.ndarray) -> bool:
    return bool(np.all(values == values[0]))


def quantile(dist: str, p: float, df: Optional[float] = None) -> float:
    """
    Inverse CDF of the standard normal or a Student-t distribution.

    Args:
        dist (str): 'std_normal' or 'student_t'.
        p (float): Probability in (0, 1).
        df (Optional[float]): Degrees of freedom (>= 1) for 'student_t'.

    Raises:
        InferenceError: On an unknown distribution, p outside (0, 1) or df < 1.
    """
    if not 0.0 < p < 1.0:
        raise InferenceError(f"Quantile level must lie in (0, 1), got {p}")
    if dist == 'std_normal':
        return float(stats.norm.ppf(p))
    if dist == 'student_t':
        if df is None or df < 1:
            raise InferenceError(f"Student-t quantile needs df >= 1, got {df}")
        return float(stats.t.ppf(p, df))
    raise InferenceError(f"Unknown distribution: {dist}")


def critical_value(alpha: float, critical: str = 'z', n_eff: Optional[int] = None) -> float:
    """
    Two-sided critical value z_{1-alpha/2} or t_{1-alpha/2, n_eff-1}.

    alpha = 1 gives 0 (the interval collapses to the point estimate).
    """
    if not 0.0 < alpha <= 1.0:
        raise InferenceError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return 0.0
    p = 1.0 - alpha / 2.0
    if critical == 'z':
        return quantile('std_normal', p)
    if critical == 't':
        if n_eff is None or n_eff < 2:
            raise InferenceError("t critical value needs n_eff >= 2")
        return quantile('student_t', p, n_eff - 1)
    raise InferenceError(f"critical must be 'z' or 't', got {critical!r}")


def estimate(series: SeriesLike) -> float:
    """
    Point estimate: the mean of the scores, accumulated with ``math.fsum``.

    Raises:
        InferenceError: If the series is empty.
    """
    values = _values(series)
    if values.size == 0:
        raise InferenceError("Cannot estimate from an empty score series")
    if _is_constant(values):
        return float(values[0])
    return math.fsum(values) / values.size


def sample_variance(series: SeriesLike) -> Tuple[float, bool]:
    """
    Unbiased sample variance of the scores and a degeneracy flag.

    A variance of exactly 0 is returned with the flag set; it is reported,
    not raised.

    Returns:
        Tuple[float, bool]: (V_hat, degenerate).

    Raises:
        InferenceError: If the series has fewer than 2 entries.
    """
    values = _values(series)
    if values.size < 2:
        raise InferenceError(f"Sample variance needs n_eff >= 2, got {values.size}")
    if _is_constant(values):
        logging.warning("Degenerate studentizer: all scores are identical (V_hat = 0)")
        return 0.0, True
    theta = estimate(values)
    v_hat = math.fsum((values - theta) ** 2) / (values.size - 1)
    return v_hat, v_hat == 0.0


@dataclass(frozen=True)
class InferenceReport:
    """Point estimate, studentizer and one confidence interval."""

    theta_hat: float
    v_hat: float
    se_hat: float
    n_eff: int
    ci_lo: float
    ci_hi: float
    variant: str
    alpha: float
    critical_value: float
    v_fix: Optional[float] = None
    degenerate: bool = False

    @property
    def length(self) -> float:
        return self.ci_hi - self.ci_lo

    def covers(self, theta0: float) -> bool:
        return self.ci_lo <= theta0 <= self.ci_hi

    def rejects(self, value: float = 0.0) -> bool:
        """Two-sided Wald rejection of H0: theta = value."""
        return not self.covers(value)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'InferenceReport':
        try:
            return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})
        except TypeError as e:
            raise InferenceError(f"Invalid inference report data: {e}") from e

    def summary(self) -> str:
        level = 100 * (1 - self.alpha)
        text = (
            f"theta_hat={self.theta_hat:.6g} SE={self.se_hat:.6g} n_eff={self.n_eff} "
            f"{level:g}% CI [{self.ci_lo:.6g}, {self.ci_hi:.6g}] ({self.variant})"
        )
        if self.degenerate:
            text += " DEGENERATE V_hat=0"
        return text


def sn_interval(series: SeriesLike, alpha: float = 0.05, critical: str = 'z') -> InferenceReport:
    """
    Self-normalized interval theta_hat +/- crit * sqrt(V_hat / n_eff).

    Args:
        series: Score series.
        alpha (float): Level in (0, 1].
        critical (str): 'z' for normal criticals, 't' for t with n_eff - 1 df.

    Raises:
        InferenceError: If n_eff < 2 or alpha/critical are invalid.
    """
    values = _values(series)
    v_hat, degenerate = sample_variance(values)
    theta = estimate(values)
    n_eff = int(values.size)
    crit = critical_value(alpha, critical, n_eff)
    se = math.sqrt(v_hat / n_eff)
    half = crit * se
    return InferenceReport(
        theta_hat=theta, v_hat=v_hat, se_hat=se, n_eff=n_eff,
        ci_lo=theta - half, ci_hi=theta + half,
        variant='sn_t' if critical == 't' else 'sn_z',
        alpha=alpha, critical_value=crit, degenerate=degenerate,
    )


def fixed_v_interval(series: SeriesLike, v_fix: float, alpha: float = 0.05) -> InferenceReport:
    """
    Interval with a fixed long-run variance: theta_hat +/- z * sqrt(v_fix / n_eff).

    V_hat is still computed and reported alongside.

    Raises:
        InferenceError: If v_fix <= 0 or n_eff < 2.
    """
    if not v_fix > 0:
        raise InferenceError(f"v_fix must be positive, got {v_fix}")
    values = _values(series)
    v_hat, degenerate = sample_variance(values)
    theta = estimate(values)
    n_eff = int(values.size)
    crit = critical_value(alpha, 'z')
    half = crit * math.sqrt(v_fix / n_eff)
    return InferenceReport(
        theta_hat=theta, v_hat=v_hat, se_hat=math.sqrt(v_hat / n_eff), n_eff=n_eff,
        ci_lo=theta - half, ci_hi=theta + half,
        variant='fixed_v', alpha=alpha, critical_value=crit, v_fix=float(v_fix),
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class QvReport:
    """
    Realized quadratic variation and score sum of xi_t = phi_hat_t - theta0.

    ``identity_residual`` is (n_eff-1)V_hat - (Q - n_eff (theta_hat-theta0)^2),
    zero up to roundoff. ``studentizer_ratio`` is (n_eff-1)V_hat/Q and
    ``ratio_identity`` its algebraic form 1 - (S/sqrt(Q))^2 / n_eff; both are
    NaN when Q = 0.
    """

    theta0: float
    n_eff: int
    q_t: float
    s_t: float
    identity_residual: float
    studentizer_ratio: float
    ratio_identity: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def qv_report(series: SeriesLike, theta0: float) -> QvReport:
    """
    Quadratic-variation diagnostics at a supplied theta0.

    Raises:
        InferenceError: If n_eff < 2.
    """
    values = _values(series)
    n_eff = int(values.size)
    if n_eff < 2:
        raise InferenceError(f"Quadratic variation report needs n_eff >= 2, got {n_eff}")
    xi = values - theta0
    q_t = math.fsum(xi ** 2)
    s_t = math.fsum(xi)
    v_hat, _ = sample_variance(values)
    theta = estimate(values)
    scaled_v = (n_eff - 1) * v_hat
    residual = scaled_v - (q_t - n_eff * (theta - theta0) ** 2)
    if q_t > 0:
        ratio = scaled_v / q_t
        ratio_identity = 1.0 - (s_t / math.sqrt(q_t)) ** 2 / n_eff
    else:
        ratio = ratio_identity = float('nan')
    return QvReport(
        theta0=float(theta0), n_eff=n_eff, q_t=q_t, s_t=s_t,
        identity_residual=residual, studentizer_ratio=ratio, ratio_identity=ratio_identity,
    )
