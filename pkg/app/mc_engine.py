########################
# Monte Carlo Engine    #
########################

from dataclasses import asdict
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from joblib import Parallel, delayed
import numpy as np
import pandas as pd

from app.exceptions import DesignError, InferenceError
from app.methods import FitCache, MethodFactory
from app.nuisance import zero_nuisance
from app.observers import CellObserver, CellResult
from app.simlab import DesignSpec, generate_trial, oracle_variance_trace

TABLE_COLUMNS = [
    'design', 'n', 'n_eff', 'method', 'coverage', 'mcse', 'avg_length', 'bias',
    'reject_rate', 'regime', 'replications', 'mean_v_hat',
]
HISTOGRAM_COLUMNS = ['bin_lo', 'bin_hi', 'count']


def mcse(p_hat: float, replications: int) -> float:
    """
    Monte Carlo standard error of a proportion, sqrt(p(1-p)/R).

    Raises:
        InferenceError: If p_hat is outside [0, 1] or replications < 1.
    """
    if not 0.0 <= p_hat <= 1.0:
        raise InferenceError(f"Proportion must lie in [0, 1], got {p_hat}")
    if replications < 1:
        raise InferenceError(f"Replication count must be positive, got {replications}")
    return math.sqrt(p_hat * (1.0 - p_hat) / replications)


def run_replication(spec: DesignSpec, alpha: float = 0.05, critical: str = 'z') -> List[Dict[str, Any]]:
    """
    Simulate one trial and evaluate every method the DesignSpec names on it.

    Returns:
        List[Dict[str, Any]]: One record per method.
    """
    trial = generate_trial(spec)
    fits = FitCache(trial)
    theta0 = trial.theta0
    records = []
    for name in spec.methods:
        report = MethodFactory.create_method(name).evaluate(trial, fits, alpha, critical)
        records.append({
            'replication': spec.replication,
            'n': spec.n,
            'n_eff': report.n_eff,
            'method': name,
            'regime': trial.regime,
            'covered': report.covers(theta0),
            'length': report.length,
            'error': report.theta_hat - theta0,
            'rejected': report.rejects(0.0),
            'v_hat': report.v_hat,
        })
    return records


def run_replications(spec: DesignSpec, replications: int, workers: int = 1,
                     alpha: float = 0.05, critical: str = 'z') -> pd.DataFrame:
    """
    Run replications 0..R-1 of one spec in parallel; records come back in
    replication order whatever the worker count.
    """
    if replications < 1:
        raise DesignError(f"Replication count must be positive, got {replications}")
    batches = Parallel(n_jobs=workers)(
        delayed(run_replication)(spec.for_replication(r), alpha, critical) for r in range(replications)
    )
    return pd.DataFrame([record for batch in batches for record in batch])


def _cell(design: str, group: pd.DataFrame, regime: Optional[float] = None) -> CellResult:
    count = int(len(group))
    coverage = float(group['covered'].mean())
    return CellResult(
        design=design,
        n=int(group['n'].iloc[0]),
        n_eff=int(group['n_eff'].iloc[0]),
        method=str(group['method'].iloc[0]),
        coverage=coverage,
        mcse=mcse(coverage, count),
        avg_length=float(group['length'].mean()),
        bias=float(group['error'].mean()),
        reject_rate=float(group['rejected'].mean()),
        replications=count,
        mean_v_hat=float(group['v_hat'].mean()),
        regime=regime,
    )


def aggregate(design: str, records: pd.DataFrame, methods: Sequence[str]) -> List[CellResult]:
    """
    Reduce per-replication records into cells: one marginal cell per method,
    then one cell per realized regime when the design tags regimes.
    """
    cells = []
    for method in methods:
        group = records[records['method'] == method]
        cells.append(_cell(design, group))
        regimes = group['regime'].dropna()
        for regime in sorted(regimes.unique()):
            cells.append(_cell(design, group[group['regime'] == regime], float(regime)))
    return cells


class McTable:
    """Coverage table over (n, method[, regime]) cells."""

    def __init__(self, cells: Iterable[CellResult], replications: int,
                 records: Optional[pd.DataFrame] = None):
        self.replications = replications
        self.frame = pd.DataFrame([asdict(cell) for cell in cells], columns=TABLE_COLUMNS)
        self.frame['regime'] = self.frame['regime'].astype(float)
        self.records = records if records is not None else pd.DataFrame()

    def __len__(self) -> int:
        return len(self.frame)

    def marginal(self) -> pd.DataFrame:
        return self.frame[self.frame['regime'].isna()].reset_index(drop=True)

    def conditional(self) -> pd.DataFrame:
        return self.frame[self.frame['regime'].notna()].reset_index(drop=True)

    def cell(self, n: int, method: str, regime: Optional[float] = None) -> pd.Series:
        """
        Raises:
            KeyError: If the table has no such cell.
        """
        rows = self.frame[(self.frame['n'] == n) & (self.frame['method'] == method)]
        if regime is None:
            rows = rows[rows['regime'].isna()]
        else:
            rows = rows[np.isclose(rows['regime'], regime)]
        if rows.empty:
            raise KeyError(f"No cell for n={n}, method={method}, regime={regime}")
        return rows.iloc[0]

    def with_relative(self, reference: str) -> pd.DataFrame:
        """
        Marginal rows with lengths and mean V_hat relative to ``reference`` at the same n.

        Raises:
            KeyError: If the reference method is missing for some n.
        """
        marginal = self.marginal()
        ref = marginal[marginal['method'] == reference].set_index('n')
        missing = set(marginal['n']) - set(ref.index)
        if missing:
            raise KeyError(f"Reference method {reference} missing for n in {sorted(missing)}")
        out = marginal.copy()
        out['relative_length'] = out['avg_length'] / out['n'].map(ref['avg_length'])
        out['relative_v_hat'] = out['mean_v_hat'] / out['n'].map(ref['mean_v_hat'])
        return out

    def to_csv(self, path: Union[str, Path], encoding: str = 'utf-8') -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format='%.17g', encoding=encoding)
        return path

    def to_json(self, path: Union[str, Path], encoding: str = 'utf-8') -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            'replications': self.replications,
            'rows': json.loads(self.frame.to_json(orient='records', double_precision=15)),
        }
        path.write_text(json.dumps(payload, indent=2), encoding=encoding)
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], replications: int, encoding: str = 'utf-8') -> 'McTable':
        frame = pd.read_csv(path, encoding=encoding, float_precision='round_trip')
        table = cls([], replications)
        table.frame = frame[TABLE_COLUMNS]
        return table

    def render(self) -> str:
        """Human-readable table; MCSE and rates rounded to 3 decimals."""
        shown = self.frame.copy()
        shown['regime'] = shown['regime'].map(lambda r: '' if pd.isna(r) else f"{r:g}")
        return shown.drop(columns=['design']).to_string(
            index=False,
            formatters={
                'coverage': '{:.3f}'.format, 'mcse': '{:.3f}'.format,
                'avg_length': '{:.3f}'.format, 'bias': '{:+.3f}'.format,
                'reject_rate': '{:.3f}'.format, 'mean_v_hat': '{:.3f}'.format,
            },
        )


def run_design(design: str, n_list: Sequence[int], methods: Optional[Sequence[str]] = None,
               replications: int = 500, master_seed: int = 0, workers: int = 1,
               alpha: float = 0.05, critical: str = 'z', params: Optional[Dict[str, Any]] = None,
               observers: Optional[List[CellObserver]] = None) -> McTable:
    """
    Monte Carlo coverage study of one design over a grid of horizons.

    Every replication draws from its own substreams, so the table is
    identical for any worker count.

    Args:
        design (str): Design code.
        n_list (Sequence[int]): Horizons.
        methods (Optional[Sequence[str]]): Methods; the design's defaults when omitted.
        replications (int): R per cell.
        master_seed (int): Master seed.
        workers (int): joblib worker count.
        alpha (float): Interval level.
        critical (str): 'z' or 't' for the self-normalized intervals.
        params (Optional[Dict[str, Any]]): Design parameter overrides.
        observers (Optional[List[CellObserver]]): Notified after each cell.

    Raises:
        DesignError: On an invalid method/design combination or R < 1.
    """
    cells: List[CellResult] = []
    all_records = []
    for n in n_list:
        spec = DesignSpec(design, int(n), master_seed, 0, dict(params or {}), tuple(methods or ()))
        logging.info(f"Running design {spec.design} n={n} R={replications} methods={list(spec.methods)}")
        records = run_replications(spec, replications, workers, alpha, critical)
        all_records.append(records)
        for cell in aggregate(spec.design, records, spec.methods):
            cells.append(cell)
            for observer in observers or []:
                observer.update(cell)
    records = pd.concat(all_records, ignore_index=True) if all_records else pd.DataFrame()
    return McTable(cells, replications, records)


def _variance_ratio(spec: DesignSpec) -> float:
    trial = generate_trial(spec)
    return oracle_variance_trace(trial, trial.plan, zero_nuisance()).ratio


class VarianceHistogram:
    """Per-replication V^2/n_eff values and their binned counts."""

    def __init__(self, ratios: np.ndarray, bins: int):
        self.ratios = np.asarray(ratios, dtype=float)
        counts, edges = np.histogram(self.ratios, bins=bins)
        self.frame = pd.DataFrame({'bin_lo': edges[:-1], 'bin_hi': edges[1:], 'count': counts},
                                  columns=HISTOGRAM_COLUMNS)

    def to_csv(self, path: Union[str, Path], encoding: str = 'utf-8') -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format='%.17g', encoding=encoding)
        return path


def variance_ratio_histogram(n: int = 1000, replications: int = 500, bins: int = 50,
                             master_seed: int = 0, workers: int = 1, design: str = 'A',
                             params: Optional[Dict[str, Any]] = None) -> VarianceHistogram:
    """
    Distribution of the oracle variance proxy V^2/n_eff across replications
    of the burn-in switching design.

    Raises:
        DesignError: For any design other than A, or bins < 1.
    """
    if str(design).upper() != 'A':
        raise DesignError("The variance-ratio histogram is defined for design A only")
    if bins < 1:
        raise DesignError(f"bins must be positive, got {bins}")
    spec = DesignSpec('A', n, master_seed, 0, dict(params or {}))
    ratios = Parallel(n_jobs=workers)(
        delayed(_variance_ratio)(spec.for_replication(r)) for r in range(replications)
    )
    return VarianceHistogram(np.array(ratios), bins)
