########################
# Nuisance Regressions  #
########################

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.exceptions import NuisanceError
from app.experiment_log import ExperimentLog, ForwardPlan
from app.feature_maps import FeatureMap, FeatureMapFactory

FIT_MODES = ('forward', 'leaky_full', 'leaky_iid', 'zero', 'oracle')

Clamp = Optional[Tuple[float, float]]


@dataclass(frozen=True)
class NuisanceConfig:
    """
    Learner configuration shared by both arms.

    ``ridge_lambda`` defaults to a numerical jitter, i.e. a plain linear fit;
    ``fallback`` enables the pooled-mean rule for arms without prior data.
    """

    feature_map: str = 'raw'
    ridge_lambda: float = 1e-8
    clamp: Clamp = None
    fallback: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise NuisanceError(f"ridge_lambda must be non-negative, got {self.ridge_lambda}")
        if self.clamp is not None:
            lo, hi = (float(v) for v in self.clamp)
            if not lo <= hi:
                raise NuisanceError(f"Clamp bounds must satisfy lo <= hi, got {self.clamp}")
            object.__setattr__(self, 'clamp', (lo, hi))
        FeatureMapFactory.create_feature_map(self.feature_map)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'feature_map': self.feature_map,
            'ridge_lambda': self.ridge_lambda,
            'clamp': list(self.clamp) if self.clamp is not None else None,
            'fallback': self.fallback,
            'seed': self.seed,
        }


########################
# Regression Models     #
########################

class Regression(ABC):
    """Fitted outcome regression x -> m(x) for one arm."""

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        """Predict for each row of ``x`` (shape (n, p))."""
        pass  # pragma: no cover

    @property
    @abstractmethod
    def learner(self) -> str:
        pass  # pragma: no cover


@dataclass(frozen=True, eq=False)
class LinearModel(Regression):
    """
    Affine model over a deterministic feature map: m(x) = phi(x) . w + b.
    """

    weights: np.ndarray
    intercept: float
    feature_map_id: str = 'raw'
    ridge_lambda: float = 0.0
    _map: FeatureMap = field(init=False, repr=False)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        weights.flags.writeable = False
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'intercept', float(self.intercept))
        object.__setattr__(self, '_map', FeatureMapFactory.create_feature_map(self.feature_map_id))

    def predict(self, x: np.ndarray) -> np.ndarray:
        features = self._map.transform(x)
        if features.shape[1] != self.weights.shape[0]:
            raise NuisanceError(
                f"Model expects {self.weights.shape[0]} features, map produced {features.shape[1]}"
            )
        return features @ self.weights + self.intercept

    @property
    def learner(self) -> str:
        return self.feature_map_id


@dataclass(frozen=True)
class ConstantModel(Regression):
    """Predicts one constant everywhere (zero nuisance, pooled-mean fallback)."""

    value: float = 0.0
    label: str = 'zero'

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        rows = x.shape[0] if x.ndim > 1 else 1
        return np.full(rows, float(self.value))

    @property
    def learner(self) -> str:
        return self.label


@dataclass(frozen=True)
class OracleModel(Regression):
    """Wraps a known regression function, vectorized over rows."""

    function: Callable[[np.ndarray], np.ndarray]
    label: str = 'oracle'

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return np.asarray(self.function(x), dtype=float).reshape(x.shape[0])

    @property
    def learner(self) -> str:
        return self.label


def fit_ridge(features: np.ndarray, targets: np.ndarray, ridge_lambda: float,
              feature_map_id: str = 'raw') -> LinearModel:
    """
    Ridge regression with an unpenalized intercept.

    Minimizes ||y - (F w + b)||^2 + lambda ||w||^2 by centering and solving the
    normal equations (F_c' F_c + lambda I) w = F_c' y_c with a Cholesky
    factorization.

    Args:
        features (np.ndarray): Mapped features, shape (n, q).
        targets (np.ndarray): Targets, shape (n,).
        ridge_lambda (float): Non-negative penalty.
        feature_map_id (str): Map the features came from, stored on the model.

    Returns:
        LinearModel: The fitted model.

    Raises:
        NuisanceError: On an empty training set, mismatched shapes, a negative
            penalty, or a rank-deficient system at lambda = 0.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    n, q = features.shape
    if n == 0:
        raise NuisanceError("Cannot fit a regression on an empty training set")
    if n != targets.shape[0]:
        raise NuisanceError(f"features have {n} rows but targets have {targets.shape[0]}")
    if ridge_lambda < 0:
        raise NuisanceError(f"ridge_lambda must be non-negative, got {ridge_lambda}")

    # Without features the model is the intercept alone
    y_mean = float(targets.mean())
    if q == 0:
        return LinearModel(np.zeros(0), y_mean, feature_map_id, ridge_lambda)

    # Centering leaves the intercept unpenalized
    f_mean = features.mean(axis=0)
    centered = features - f_mean
    if ridge_lambda == 0:
        rank = np.linalg.matrix_rank(centered)
        if rank < q:
            raise NuisanceError(
                f"Rank-deficient design (rank {rank} < {q} columns); use ridge_lambda > 0"
            )
    # Solve the normal equations by Cholesky
    gram = centered.T @ centered + ridge_lambda * np.eye(q)
    rhs = centered.T @ (targets - y_mean)
    try:
        weights = cho_solve(cho_factor(gram, lower=True), rhs)
    except LinAlgError as e:
        raise NuisanceError(f"Singular normal equations: {e}") from e
    intercept = y_mean - float(f_mean @ weights)
    return LinearModel(weights, intercept, feature_map_id, ridge_lambda)


def fit_arm(x: np.ndarray, a: np.ndarray, y: np.ndarray, rows: np.ndarray, arm: int,
            config: NuisanceConfig) -> Tuple[Regression, np.ndarray]:
    """
    Fit the arm-``arm`` regression on the given training rows (0-based).

    Only rows with A = arm are used. Without any such row the pooled mean of
    all training rows is used (0 if there are none), when fallback is enabled.

    Returns:
        Tuple[Regression, np.ndarray]: The model and the 0-based rows it was trained on.

    Raises:
        NuisanceError: If the arm has no training data and fallback is disabled.
    """
    rows = np.asarray(rows, dtype=np.int64)
    arm_rows = rows[a[rows] == arm]
    # Regress on this arm's units when there are any
    if arm_rows.size:
        feature_map = FeatureMapFactory.create_feature_map(config.feature_map)
        model = fit_ridge(feature_map.transform(x[arm_rows]), y[arm_rows], config.ridge_lambda,
                          feature_map.identifier)
        return model, arm_rows
    if not config.fallback:
        raise NuisanceError(f"No training observations for arm {arm} and fallback disabled")
    # Otherwise fall back to the pooled mean, or 0 with no data
    if rows.size:
        logging.warning(f"Arm {arm} has no prior observations; using pooled mean of {rows.size} units")
        return ConstantModel(float(y[rows].mean()), 'pooled_mean'), rows
    logging.warning(f"Arm {arm} has no prior data at all; predicting 0")
    return ConstantModel(0.0, 'zero'), rows


def fit_pair(x: np.ndarray, a: np.ndarray, y: np.ndarray, rows: np.ndarray,
             config: NuisanceConfig) -> Tuple[Tuple[Regression, Regression], Tuple[np.ndarray, np.ndarray]]:
    """Fit both arms on the same training rows."""
    m0, rows0 = fit_arm(x, a, y, rows, 0, config)
    m1, rows1 = fit_arm(x, a, y, rows, 1, config)
    return (m0, m1), (rows0, rows1)


def clamp_predictions(values: np.ndarray, clamp: Clamp) -> np.ndarray:
    if clamp is None:
        return values
    return np.clip(values, clamp[0], clamp[1])


########################
# Fit Ledger            #
########################

@dataclass(frozen=True)
class FitRecord:
    """
    Provenance of one arm-specific fit: what it scores and what it saw.

    ``block`` is the scored block the fit serves (None for fold-based fits,
    which carry ``fold`` instead). ``train_indices`` are 1-based time indices.
    """

    block: Optional[int]
    arm: int
    train_indices: Tuple[int, ...]
    learner: str
    ridge_lambda: float
    seed: int
    clamp: Clamp
    order: int
    fold: Optional[int] = None

    @property
    def train_range(self) -> Optional[Tuple[int, int]]:
        if not self.train_indices:
            return None
        return min(self.train_indices), max(self.train_indices)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'block': self.block,
            'fold': self.fold,
            'arm': self.arm,
            'train_indices': list(self.train_indices),
            'learner': self.learner,
            'ridge_lambda': self.ridge_lambda,
            'seed': self.seed,
            'clamp': list(self.clamp) if self.clamp is not None else None,
            'order': self.order,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FitRecord':
        clamp = data.get('clamp')
        return cls(
            block=data.get('block'),
            arm=int(data['arm']),
            train_indices=tuple(int(t) for t in data.get('train_indices', [])),
            learner=str(data.get('learner', '')),
            ridge_lambda=float(data.get('ridge_lambda', 0.0)),
            seed=int(data.get('seed', 0)),
            clamp=tuple(clamp) if clamp is not None else None,
            order=int(data['order']),
            fold=data.get('fold'),
        )


class FitLedger:
    """
    Append-only record of every nuisance fit, in the order fits were made.
    """

    def __init__(self, mode: str):
        if mode not in FIT_MODES:
            raise NuisanceError(f"Unknown fit mode: {mode}")
        self.mode = mode
        self._entries: List[FitRecord] = []

    @property
    def entries(self) -> Tuple[FitRecord, ...]:
        return tuple(self._entries)

    def append(self, block: Optional[int], arm: int, train_rows: np.ndarray, learner: str,
               config: NuisanceConfig, fold: Optional[int] = None) -> FitRecord:
        record = FitRecord(
            block=block,
            arm=arm,
            train_indices=tuple(int(r) + 1 for r in np.asarray(train_rows)),
            learner=learner,
            ridge_lambda=config.ridge_lambda,
            seed=config.seed,
            clamp=config.clamp,
            order=len(self._entries),
            fold=fold,
        )
        self._entries.append(record)
        return record

    def for_block(self, block: int) -> List[FitRecord]:
        return [entry for entry in self._entries if entry.block == block]

    def __len__(self) -> int:
        return len(self._entries)

    def to_jsonl(self) -> str:
        lines = [json.dumps({'mode': self.mode, **entry.to_dict()}) for entry in self._entries]
        return '\n'.join(lines) + ('\n' if lines else '')

    def save_jsonl(self, path: Union[str, Path], encoding: str = 'utf-8') -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if self._entries:
            path.write_text(self.to_jsonl(), encoding=encoding)
        else:
            # An empty ledger still records its mode
            path.write_text(json.dumps({'mode': self.mode}) + '\n', encoding=encoding)
        return path

    @classmethod
    def load_jsonl(cls, path: Union[str, Path], encoding: str = 'utf-8') -> 'FitLedger':
        """
        Raises:
            NuisanceError: If the file is malformed or mixes modes.
        """
        path = Path(path)
        ledger: Optional[FitLedger] = None
        for number, line in enumerate(path.read_text(encoding=encoding).splitlines(), start=1):
            # Blank lines are skipped
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                mode = data['mode']
                if ledger is None:
                    ledger = cls(mode)
                elif mode != ledger.mode:
                    raise NuisanceError(f"Ledger line {number} has mode {mode}, expected {ledger.mode}")
                # A mode-only line comes from an empty ledger
                if 'arm' in data:
                    ledger._entries.append(FitRecord.from_dict(data))
            except (KeyError, TypeError, ValueError) as e:
                raise NuisanceError(f"Malformed ledger line {number}: {e}") from e
        if ledger is None:
            raise NuisanceError(f"Empty ledger file: {path}")
        return ledger

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FitLedger):
            return NotImplemented
        return self.mode == other.mode and self._entries == other._entries


########################
# Nuisance Fit Sets     #
########################

Pair = Tuple[Regression, Regression]


@dataclass(frozen=True)
class NuisanceFitSet:
    """
    The regressions used to score each unit.

    Routing: ``shared`` pairs serve every unit; otherwise ``per_block`` is
    keyed by plan block id, or by fold id (t-1) mod ``folds`` when ``folds``
    is set.
    """

    mode: str
    per_block: Dict[int, Pair] = field(default_factory=dict)
    clamp_bounds: Clamp = None
    shared: Optional[Pair] = None
    folds: Optional[int] = None

    def __post_init__(self):
        if self.mode not in FIT_MODES:
            raise NuisanceError(f"Unknown fit mode: {self.mode}")

    def pair_for(self, key: int) -> Pair:
        if self.shared is not None:
            return self.shared
        if key not in self.per_block:
            unit = 'fold' if self.folds else 'scored block'
            raise NuisanceError(f"missing fit for {unit} {key}")
        return self.per_block[key]

    def predict(self, times: np.ndarray, x: np.ndarray, plan: ForwardPlan) -> Tuple[np.ndarray, np.ndarray]:
        """
        Clamped predictions (m0, m1) for the units at 1-based ``times``.

        Args:
            times (np.ndarray): Time indices being scored.
            x (np.ndarray): Their covariate rows, shape (len(times), p).
            plan (ForwardPlan): Supplies block membership.
        """
        times = np.asarray(times, dtype=np.int64)
        x = np.asarray(x, dtype=float).reshape(times.shape[0], -1)
        m0 = np.empty(times.shape[0])
        m1 = np.empty(times.shape[0])
        # Key each unit to the fit that scores it
        if self.shared is not None:
            keys = np.zeros(times.shape[0], dtype=np.int64)
        elif self.folds:
            keys = (times - 1) % self.folds
        else:
            keys = plan.block_ids(times)
        for key in np.unique(keys):
            rows = keys == key
            model0, model1 = self.pair_for(int(key))
            m0[rows] = model0.predict(x[rows])
            m1[rows] = model1.predict(x[rows])
        return clamp_predictions(m0, self.clamp_bounds), clamp_predictions(m1, self.clamp_bounds)


def fit_forward(log: ExperimentLog, plan: ForwardPlan,
                config: NuisanceConfig) -> Tuple[NuisanceFitSet, FitLedger]:
    """
    Forward (predictable) fitting: the pair scoring block k is trained only on
    blocks 1..k-1, separately per arm, and frozen across block k.

    Raises:
        NuisanceError: If the plan does not match the log, or an arm lacks
            prior data with fallback disabled.
    """
    if plan.n != log.n:
        raise NuisanceError(f"Plan horizon {plan.n} does not match log length {log.n}")
    ledger = FitLedger('forward')
    per_block: Dict[int, Pair] = {}
    for k in plan.scored_blocks:
        # Train on every unit before block k
        rows = np.arange(plan.block_bounds[k - 1])
        pair, trained = fit_pair(log.x, log.a, log.y, rows, config)
        for arm in (0, 1):
            ledger.append(k, arm, trained[arm], pair[arm].learner, config)
        per_block[k] = pair
        logging.info(f"Forward fit for block {k}: trained on indices 1..{rows.size}")
    return NuisanceFitSet('forward', per_block, config.clamp), ledger


def fit_leaky_full(log: ExperimentLog, plan: ForwardPlan,
                   config: NuisanceConfig) -> Tuple[NuisanceFitSet, FitLedger]:
    """
    Full-sample fit reused for every scored block. Violates predictability on
    purpose; the ledger shows the full training range so the audit flags it.
    """
    if plan.n != log.n:
        raise NuisanceError(f"Plan horizon {plan.n} does not match log length {log.n}")
    ledger = FitLedger('leaky_full')
    pair, trained = fit_pair(log.x, log.a, log.y, np.arange(log.n), config)
    per_block: Dict[int, Pair] = {}
    for k in plan.scored_blocks:
        for arm in (0, 1):
            ledger.append(k, arm, trained[arm], pair[arm].learner, config)
        per_block[k] = pair
    logging.info(f"Leaky full-sample fit on indices 1..{log.n}")
    return NuisanceFitSet('leaky_full', per_block, config.clamp), ledger


def fit_iid_crossfit(log: ExperimentLog, plan: ForwardPlan, config: NuisanceConfig,
                     folds: int = 5) -> Tuple[NuisanceFitSet, FitLedger]:
    """
    Naive i.i.d. cross-fitting: fold of unit t is (t-1) mod ``folds`` and each
    fold is scored by a fit on all other folds, ignoring time order.
    """
    if folds < 2:
        raise NuisanceError(f"Cross-fitting needs at least 2 folds, got {folds}")
    if plan.n != log.n:
        raise NuisanceError(f"Plan horizon {plan.n} does not match log length {log.n}")
    ledger = FitLedger('leaky_iid')
    # Folds interleave in time order
    fold_of = np.arange(log.n) % folds
    per_fold: Dict[int, Pair] = {}
    for fold in range(folds):
        rows = np.flatnonzero(fold_of != fold)
        pair, trained = fit_pair(log.x, log.a, log.y, rows, config)
        for arm in (0, 1):
            ledger.append(None, arm, trained[arm], pair[arm].learner, config, fold=fold)
        per_fold[fold] = pair
    logging.info(f"i.i.d. {folds}-fold cross-fit on n={log.n}")
    return NuisanceFitSet('leaky_iid', per_fold, config.clamp, folds=folds), ledger


def zero_nuisance() -> NuisanceFitSet:
    """m0 = m1 = 0 everywhere; scoring then reduces to IPW."""
    zero = ConstantModel(0.0, 'zero')
    return NuisanceFitSet('zero', shared=(zero, zero))


def oracle_nuisance(m0: Callable[[np.ndarray], np.ndarray],
                    m1: Callable[[np.ndarray], np.ndarray]) -> NuisanceFitSet:
    """The true regressions (m0*, m1*) as a fit set."""
    return NuisanceFitSet('oracle', shared=(OracleModel(m0, 'oracle_m0'), OracleModel(m1, 'oracle_m1')))


def empty_ledger(mode: str) -> FitLedger:
    """Ledger for data-independent nuisances (zero, oracle): nothing was fitted."""
    return FitLedger(mode)
