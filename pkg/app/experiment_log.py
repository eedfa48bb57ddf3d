########################
# Experiment Log        #
########################

from bisect import bisect_left
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import re
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.exceptions import PlanError, ValidationError
from app.input_validators import RecordValidator

PathLike = Union[str, Path]

LOG_FORMATS = ('jsonl', 'csv')
_CSV_LINE = re.compile(r'line (\d+)')


def _fmt(value: float) -> str:
    """Decimal rendering with 17 significant digits (exact for binary64)."""
    return format(float(value), '.17g')


@dataclass(frozen=True)
class UnitRecord:
    """
    One logged experimental unit (t, x, a, y, pi) in time order.

    ``pi`` is the executed propensity: the probability that was passed to the
    randomization device when ``a`` was drawn.
    """

    t: int
    x: Tuple[float, ...]
    a: int
    y: float
    pi: float

    def __post_init__(self):
        object.__setattr__(self, 't', RecordValidator.validate_time(self.t))
        object.__setattr__(self, 'x', tuple(RecordValidator.validate_covariates(self.x)))
        object.__setattr__(self, 'a', RecordValidator.validate_treatment(self.a))
        object.__setattr__(self, 'y', RecordValidator.validate_real(self.y, 'y'))
        object.__setattr__(self, 'pi', RecordValidator.validate_propensity(self.pi))

    def to_dict(self) -> Dict[str, Any]:
        return {'t': self.t, 'x': list(self.x), 'a': self.a, 'y': self.y, 'pi': self.pi}


@dataclass(frozen=True, eq=False)
class ExperimentLog:
    """
    Time-ordered log of units t = 1..n, stored column-wise.

    Arrays are copied and frozen on construction, so a log can be shared
    read-only across parallel workers. ``records`` materializes the row view.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        n = len(y)
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        if x.ndim != 2:
            raise ValidationError("Covariates must form an n-by-p matrix", field='x')
        if not (len(a) == len(pi) == x.shape[0] == n):
            raise ValidationError("Columns x, a, y, pi must have equal length")

        _check_finite(x, 'x')
        _check_finite(y, 'y')
        _check_finite(pi, 'pi')
        bad = np.flatnonzero((a != 0) & (a != 1))
        if bad.size:
            raise ValidationError(f"Non-binary treatment {a[bad[0]]!r}", row=int(bad[0]) + 1, field='a')
        bad = np.flatnonzero((pi <= 0.0) | (pi >= 1.0))
        if bad.size:
            raise ValidationError(
                f"propensity out of open interval (0, 1): {pi[bad[0]]!r}", row=int(bad[0]) + 1, field='pi'
            )

        for name, value in (('x', x), ('a', a.astype(np.int64)), ('y', y), ('pi', pi)):
            frozen = np.array(value, copy=True)
            frozen.flags.writeable = False
            object.__setattr__(self, name, frozen)

    @classmethod
    def from_records(cls, records: Sequence[UnitRecord]) -> 'ExperimentLog':
        """
        Build a log from row records, enforcing t = 1..n and a shared dimension.

        Raises:
            ValidationError: On ordering gaps or inconsistent covariate dimension.
        """
        records = list(records)
        p = len(records[0].x) if records else 0
        for row, record in enumerate(records, start=1):
            if record.t != row:
                raise ValidationError("time index gap/disorder", row=row, field='t')
            if len(record.x) != p:
                raise ValidationError(
                    f"inconsistent covariate dimension {len(record.x)} (expected {p})", row=row, field='x'
                )
        n = len(records)
        return cls(
            x=np.array([r.x for r in records], dtype=float).reshape(n, p),
            a=np.array([r.a for r in records], dtype=np.int64),
            y=np.array([r.y for r in records], dtype=float),
            pi=np.array([r.pi for r in records], dtype=float),
        )

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    @property
    def records(self) -> Tuple[UnitRecord, ...]:
        return tuple(self.record(t) for t in range(1, self.n + 1))

    def record(self, t: int) -> UnitRecord:
        """Row view of unit ``t`` (1-based)."""
        if not 1 <= t <= self.n:
            raise IndexError(f"time index {t} outside 1..{self.n}")
        i = t - 1
        return UnitRecord(
            t=t,
            x=tuple(float(v) for v in self.x[i]),
            a=int(self.a[i]),
            y=float(self.y[i]),
            pi=float(self.pi[i]),
        )

    def with_propensities(self, pi: np.ndarray) -> 'ExperimentLog':
        """Copy of the log with the logged propensity column replaced."""
        return ExperimentLog(x=self.x, a=self.a, y=self.y, pi=pi)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExperimentLog):
            return NotImplemented
        return (
            self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.pi, other.pi)
        )

    def __repr__(self) -> str:
        return f"ExperimentLog(n={self.n}, p={self.p})"


def _check_finite(values: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argwhere(bad)[0][0]) + 1
        raise ValidationError("Non-finite value", row=row, field=name)


########################
# Log File I/O          #
########################

def _resolve_format(path: Path, log_format: Optional[str]) -> str:
    resolved = (log_format or path.suffix.lstrip('.')).lower()
    if resolved not in LOG_FORMATS:
        raise ValidationError(f"Unsupported log format: {resolved!r} (expected one of {LOG_FORMATS})")
    return resolved


def load_log(path: PathLike, log_format: Optional[str] = None, encoding: str = 'utf-8') -> ExperimentLog:
    """
    Load and validate an experiment log.

    Args:
        path (PathLike): JSONL (keys t, x, a, y, pi) or CSV (header ``t,x1..xp,a,y,pi``).
        log_format (Optional[str]): 'jsonl' or 'csv'; inferred from the suffix if omitted.
        encoding (str): File encoding.

    Returns:
        ExperimentLog: The validated log, in file order.

    Raises:
        ValidationError: On malformed rows, out-of-range values, ordering
            violations or inconsistent covariate dimension.
    """
    path = Path(path)
    log_format = _resolve_format(path, log_format)
    if not path.exists():
        raise ValidationError(f"Log file not found: {path}")

    if log_format == 'jsonl':
        records = _read_jsonl(path, encoding)
    else:
        records = _read_csv(path, encoding)

    log = ExperimentLog.from_records(records)
    logging.info(f"Loaded experiment log {path} (n={log.n}, p={log.p})")
    return log


def _read_jsonl(path: Path, encoding: str) -> List[UnitRecord]:
    records = []
    with open(path, 'r', encoding=encoding) as handle:
        row = 0
        for line in handle:
            if not line.strip():
                continue
            row += 1
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"Malformed JSON: {e.msg}", row=row) from e
            if not isinstance(data, dict):
                raise ValidationError("Record must be a JSON object", row=row)
            records.append(_build_record(data, row))
    return records


def _read_csv(path: Path, encoding: str) -> List[UnitRecord]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding=encoding)
    except pd.errors.EmptyDataError as e:
        raise ValidationError("CSV log is empty; expected header t,x1..xp,a,y,pi") from e
    except pd.errors.ParserError as e:
        # pandas counts file lines; the header is line 1
        match = _CSV_LINE.search(str(e))
        row = int(match.group(1)) - 1 if match else None
        raise ValidationError(f"Malformed CSV row: {str(e).strip()}", row=row) from e
    columns = list(df.columns)
    if columns[:1] != ['t'] or columns[-3:] != ['a', 'y', 'pi']:
        raise ValidationError(f"CSV header must be t,x1..xp,a,y,pi; got {','.join(columns)}")
    covariates = columns[1:-3]
    expected = [f"x{j + 1}" for j in range(len(covariates))]
    if covariates != expected:
        raise ValidationError(f"Covariate columns must be {','.join(expected) or '(none)'}")

    records = []
    for row, values in enumerate(df.itertuples(index=False, name=None), start=1):
        data = dict(zip(columns, values))
        data['x'] = [data.pop(name) for name in covariates]
        records.append(_build_record(data, row))
    return records


def _build_record(data: Dict[str, Any], row: int) -> UnitRecord:
    for key in ('t', 'a', 'y', 'pi'):
        if key not in data:
            raise ValidationError("Missing field", row=row, field=key)
    t = RecordValidator.validate_time(data['t'], row)
    if t != row:
        raise ValidationError("time index gap/disorder", row=row, field='t')
    return UnitRecord(
        t=t,
        x=tuple(RecordValidator.validate_covariates(data.get('x', []), row)),
        a=RecordValidator.validate_treatment(data['a'], row),
        y=RecordValidator.validate_real(data['y'], 'y', row),
        pi=RecordValidator.validate_propensity(data['pi'], row),
    )


def save_log(log: ExperimentLog, path: PathLike, log_format: Optional[str] = None,
             encoding: str = 'utf-8') -> Path:
    """
    Write a log so that ``load_log`` reproduces it bit-exactly.

    Reals are written with 17 significant digits.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    log_format = _resolve_format(path, log_format)
    path.parent.mkdir(parents=True, exist_ok=True)

    if log_format == 'jsonl':
        with open(path, 'w', encoding=encoding) as handle:
            for i in range(log.n):
                x = ', '.join(_fmt(v) for v in log.x[i])
                handle.write(
                    f'{{"t": {i + 1}, "x": [{x}], "a": {int(log.a[i])}, '
                    f'"y": {_fmt(log.y[i])}, "pi": {_fmt(log.pi[i])}}}\n'
                )
    else:
        df = pd.DataFrame(log.x, columns=[f"x{j + 1}" for j in range(log.p)])
        df.insert(0, 't', log.t)
        df['a'] = log.a
        df['y'] = log.y
        df['pi'] = log.pi
        df.to_csv(path, index=False, float_format='%.17g', encoding=encoding)

    logging.info(f"Saved experiment log to {path} ({log_format}, n={log.n})")
    return path


########################
# Forward Plans         #
########################

@dataclass(frozen=True)
class ForwardPlan:
    """
    Contiguous block partition of 1..n plus a deterministic scored set.

    ``block_bounds`` holds the K+1 cut points 0 = c_0 < c_1 < ... < c_K = n;
    block k (1-based) is {c_{k-1}+1, ..., c_k}.
    """

    n: int
    block_bounds: Tuple[int, ...]
    scored: Tuple[int, ...] = field(repr=False)

    def __post_init__(self):
        bounds = tuple(int(c) for c in self.block_bounds)
        scored = tuple(int(t) for t in self.scored)
        object.__setattr__(self, 'block_bounds', bounds)
        object.__setattr__(self, 'scored', scored)
        if len(bounds) < 2 or bounds[0] != 0 or bounds[-1] != self.n:
            raise PlanError(f"Block cut points must run from 0 to n={self.n}")
        if any(lo >= hi for lo, hi in zip(bounds, bounds[1:])):
            raise PlanError("Blocks must be non-empty and contiguous")
        if any(s >= nxt for s, nxt in zip(scored, scored[1:])):
            raise PlanError("Scored indices must be strictly increasing")
        if scored and (scored[0] < 1 or scored[-1] > self.n):
            raise PlanError(f"Scored indices must lie in 1..{self.n}")

    @property
    def k(self) -> int:
        return len(self.block_bounds) - 1

    @property
    def n_eff(self) -> int:
        return len(self.scored)

    @property
    def scored_array(self) -> np.ndarray:
        return np.asarray(self.scored, dtype=np.int64)

    def block(self, k: int) -> range:
        """Indices of block ``k`` (1-based) as a range of time indices."""
        if not 1 <= k <= self.k:
            raise PlanError(f"Block {k} outside 1..{self.k}")
        return range(self.block_bounds[k - 1] + 1, self.block_bounds[k] + 1)

    def block_of(self, t: int) -> int:
        """Block id containing time index ``t``."""
        if not 1 <= t <= self.n:
            raise PlanError(f"time index {t} outside 1..{self.n}")
        return bisect_left(self.block_bounds, t)

    def block_ids(self, times: np.ndarray) -> np.ndarray:
        """Vectorized ``block_of``."""
        return np.searchsorted(np.asarray(self.block_bounds), times, side='left')

    @property
    def scored_blocks(self) -> List[int]:
        """Blocks holding at least one scored index, in increasing order."""
        return sorted({self.block_of(t) for t in self.scored})

    def to_dict(self) -> Dict[str, Any]:
        return {'n': self.n, 'block_bounds': list(self.block_bounds), 'scored': list(self.scored)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ForwardPlan':
        try:
            return cls(n=int(data['n']), block_bounds=tuple(data['block_bounds']), scored=tuple(data['scored']))
        except (KeyError, TypeError, ValueError) as e:
            raise PlanError(f"Invalid plan data: {e}") from e

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForwardPlan):
            return NotImplemented
        return self.n == other.n and self.block_bounds == other.block_bounds and self.scored == other.scored


def _after_first_block(bounds: Sequence[int], n: int) -> Tuple[int, ...]:
    return tuple(range(bounds[1] + 1, n + 1))


def make_forward_plan(n: int, k: int) -> ForwardPlan:
    """
    Split 1..n into ``k`` contiguous blocks and score everything after block 1.

    Block sizes are floor(n/k), with the remainder handed one apiece to the
    earliest blocks.

    Raises:
        PlanError: If k < 2 or n < k.
    """
    if k < 2:
        raise PlanError(f"Forward plan needs at least 2 blocks, got k={k}")
    if n < k:
        raise PlanError(f"Horizon n={n} is smaller than block count k={k}")
    base, remainder = divmod(n, k)
    bounds = [0]
    for block in range(k):
        bounds.append(bounds[-1] + base + (1 if block < remainder else 0))
    plan = ForwardPlan(n=n, block_bounds=tuple(bounds), scored=_after_first_block(bounds, n))
    logging.info(f"Forward plan: n={n}, K={k}, n_eff={plan.n_eff}")
    return plan


def make_burnin_plan(n: int, n0: int) -> ForwardPlan:
    """
    Two blocks: a burn-in {1..n0} and the scored block {n0+1..n}.

    Raises:
        PlanError: If n0 < 2 or n0 >= n.
    """
    if n0 < 2:
        raise PlanError(f"Burn-in length must be at least 2, got n0={n0}")
    if n0 >= n:
        raise PlanError(f"Burn-in length n0={n0} must be smaller than n={n}")
    bounds = (0, n0, n)
    plan = ForwardPlan(n=n, block_bounds=bounds, scored=_after_first_block(bounds, n))
    logging.info(f"Burn-in plan: n={n}, n0={n0}, n_eff={plan.n_eff}")
    return plan


def make_full_plan(n: int) -> ForwardPlan:
    """
    Single block with every unit scored (no burn-in).

    Raises:
        PlanError: If n < 1.
    """
    if n < 1:
        raise PlanError(f"Horizon must be positive, got n={n}")
    return ForwardPlan(n=n, block_bounds=(0, n), scored=tuple(range(1, n + 1)))


def make_block_plan(n: int, block_size: int, n0: int) -> ForwardPlan:
    """
    Burn-in block {1..n0} followed by blocks of ``block_size``; the last block
    may be shorter. Everything after the burn-in is scored.

    Raises:
        PlanError: If n0 < 2, n0 >= n or block_size < 1.
    """
    if block_size < 1:
        raise PlanError(f"Block size must be positive, got {block_size}")
    if n0 < 2 or n0 >= n:
        raise PlanError(f"Burn-in length must satisfy 2 <= n0 < n, got n0={n0}, n={n}")
    bounds = [0, n0]
    while bounds[-1] < n:
        bounds.append(min(bounds[-1] + block_size, n))
    plan = ForwardPlan(n=n, block_bounds=tuple(bounds), scored=_after_first_block(bounds, n))
    logging.info(f"Block plan: n={n}, n0={n0}, block_size={block_size}, K={plan.k}")
    return plan


def save_plan(plan: ForwardPlan, path: PathLike, encoding: str = 'utf-8') -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict()), encoding=encoding)
    return path


def load_plan(path: PathLike, encoding: str = 'utf-8') -> ForwardPlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding=encoding))
    except (OSError, json.JSONDecodeError) as e:
        raise PlanError(f"Could not read plan {path}: {e}") from e
    return ForwardPlan.from_dict(data)
