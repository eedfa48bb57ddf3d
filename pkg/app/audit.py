########################
# Contract Audits       #
########################

from dataclasses import asdict, dataclass, field
import json
import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.exceptions import AuditError
from app.experiment_log import ExperimentLog, ForwardPlan
from app.nuisance import FitLedger

PASS = 'pass'
WARN = 'warn'
FAIL = 'fail'

# Offending indices listed in a verdict before truncating
MAX_EVIDENCE = 20


@dataclass(frozen=True)
class AuditVerdict:
    """Outcome of one contract check with human-readable evidence."""

    check: str
    status: str
    details: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.status not in (PASS, WARN, FAIL):
            raise AuditError(f"Unknown audit status: {self.status}")
        if self.status == FAIL and not self.details:
            raise AuditError(f"Failed check {self.check} must carry evidence")

    @property
    def failed(self) -> bool:
        return self.status == FAIL

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _verdict(check: str, status: str, details: List[str]) -> AuditVerdict:
    verdict = AuditVerdict(check, status, details)
    if status == PASS:
        logging.info(f"Audit {check}: pass")
    else:
        logging.warning(f"Audit {check}: {status}: {'; '.join(details[:3])}")
    return verdict


def _listing(pairs: Sequence[str]) -> str:
    shown = ', '.join(pairs[:MAX_EVIDENCE])
    if len(pairs) > MAX_EVIDENCE:
        shown += f", ... ({len(pairs) - MAX_EVIDENCE} more)"
    return shown


########################
# Calibration           #
########################

@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    abar: float
    pibar: float

    @property
    def deviation(self) -> float:
        return self.abar - self.pibar

    @property
    def threshold(self) -> float:
        """Three binomial standard errors at the bin's mean propensity."""
        return 3.0 * math.sqrt(self.pibar * (1.0 - self.pibar) / self.count)

    @property
    def flagged(self) -> bool:
        return abs(self.deviation) > self.threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lo': self.lo, 'hi': self.hi, 'count': self.count, 'abar': self.abar,
            'pibar': self.pibar, 'deviation': self.deviation, 'threshold': self.threshold,
            'flagged': self.flagged,
        }


@dataclass(frozen=True)
class CalibrationReport:
    bins: List[CalibrationBin]
    n_min: int
    merged: bool

    def verdict(self) -> AuditVerdict:
        flagged = [b for b in self.bins if b.flagged]
        if not flagged:
            return _verdict('propensity_calibration', PASS, [f"{len(self.bins)} bins within 3 SE"])
        details = [
            f"bin [{b.lo:.2f}, {b.hi:.2f}) N={b.count}: abar={b.abar:.4f} pibar={b.pibar:.4f} "
            f"deviation={b.deviation:+.4f} exceeds {b.threshold:.4f}"
            for b in flagged
        ]
        return _verdict('propensity_calibration', WARN, details)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([b.to_dict() for b in self.bins])

    def to_dict(self) -> Dict[str, Any]:
        return {'n_min': self.n_min, 'merged': self.merged, 'bins': [b.to_dict() for b in self.bins]}


def calibration_bins(log: ExperimentLog, n_bins: int = 10, n_min: int = 50) -> CalibrationReport:
    """
    Compare realized treatment frequency with mean logged propensity per bin.

    Equal-width bins over (0, 1) are grouped left to right: a group closes once
    it holds at least ``n_min`` units. A trailing undersized group joins the
    previous group; if no group ever reaches ``n_min`` the single merged group
    is still reported. Empty groups are never reported.

    Raises:
        AuditError: If the log is empty or the bin settings are invalid.
    """
    if n_bins < 1 or n_min < 1:
        raise AuditError(f"n_bins and n_min must be positive, got {n_bins}, {n_min}")
    if log.n == 0:
        raise AuditError("Cannot calibrate an empty log")
    index = np.minimum((log.pi * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(index, minlength=n_bins)

    groups: List[List[int]] = []
    current: List[int] = []
    for j in range(n_bins):
        if counts[j]:
            current.append(j)
        if current and counts[current].sum() >= n_min:
            groups.append(current)
            current = []
    if current:
        if groups:
            groups[-1] = groups[-1] + current
        else:
            groups.append(current)

    bins = []
    for group in groups:
        members = np.isin(index, group)
        bins.append(CalibrationBin(
            lo=group[0] / n_bins,
            hi=(group[-1] + 1) / n_bins,
            count=int(members.sum()),
            abar=float(log.a[members].mean()),
            pibar=math.fsum(log.pi[members]) / int(members.sum()),
        ))
    merged = any(len(group) > 1 for group in groups)
    return CalibrationReport(bins=bins, n_min=n_min, merged=merged)


########################
# Contract Checks       #
########################

def overlap_check(log: ExperimentLog, plan: ForwardPlan, epsilon: float) -> AuditVerdict:
    """
    Every scored propensity must lie in the closed interval [epsilon, 1 - epsilon].

    Raises:
        AuditError: If epsilon is outside (0, 0.5) or the plan does not fit the log.
    """
    if not 0.0 < epsilon < 0.5:
        raise AuditError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    if plan.n > log.n:
        raise AuditError(f"Plan horizon {plan.n} exceeds log length {log.n}")
    times = plan.scored_array
    if times.size == 0:
        return _verdict('overlap', PASS, ["no scored units"])
    pi = log.pi[times - 1]
    realized = f"realized pi on scored units in [{pi.min():.6g}, {pi.max():.6g}]"
    bad = (pi < epsilon) | (pi > 1.0 - epsilon)
    if not bad.any():
        return _verdict('overlap', PASS, [realized])
    offenders = [f"(t={t}, pi={p:.6g})" for t, p in zip(times[bad].tolist(), pi[bad].tolist())]
    return _verdict('overlap', FAIL, [
        f"{len(offenders)} scored units outside [{epsilon:g}, {1 - epsilon:g}]: {_listing(offenders)}",
        realized,
    ])


def scored_set_check(plan: ForwardPlan, declared_plan: Optional[ForwardPlan] = None) -> AuditVerdict:
    """
    The scored set must be a union of whole blocks and, when a declared plan is
    given, match it exactly.
    """
    details = []
    scored = set(plan.scored)
    for k in plan.scored_blocks:
        missing = [t for t in plan.block(k) if t not in scored]
        if missing:
            details.append(f"block {k} is only partly scored; unscored indices {_listing([str(t) for t in missing])}")
    if declared_plan is not None and plan != declared_plan:
        if plan.block_bounds != declared_plan.block_bounds:
            details.append(f"block cut points {list(plan.block_bounds)} differ from declared "
                           f"{list(declared_plan.block_bounds)}")
        extra = sorted(scored - set(declared_plan.scored))
        dropped = sorted(set(declared_plan.scored) - scored)
        if extra:
            details.append(f"indices scored but not declared: {_listing([str(t) for t in extra])}")
        if dropped:
            details.append(f"declared indices not scored: {_listing([str(t) for t in dropped])}")
        if plan.n != declared_plan.n:
            details.append(f"plan horizon {plan.n} differs from declared {declared_plan.n}")
    if details:
        return _verdict('scored_set', FAIL, details)
    return _verdict('scored_set', PASS, [f"n_eff={plan.n_eff} over blocks {plan.scored_blocks}"])


def predictability_audit(ledger: FitLedger, plan: ForwardPlan) -> AuditVerdict:
    """
    Each scored block needs exactly one fit per arm, trained only on indices
    strictly before the block starts.

    Data-independent nuisances (zero, oracle) pass with an empty ledger.
    """
    if ledger.mode in ('zero', 'oracle') and len(ledger) == 0:
        return _verdict('predictability', PASS, [f"{ledger.mode} nuisance, no data-dependent fits"])
    details = []
    for entry in ledger.entries:
        if entry.block is None:
            span = entry.train_range
            details.append(
                f"fit #{entry.order} (fold {entry.fold}, arm {entry.arm}) is not tied to a block; "
                f"training range [{span[0]},{span[1]}]" if span else
                f"fit #{entry.order} (fold {entry.fold}, arm {entry.arm}) is not tied to a block"
            )
    for k in plan.scored_blocks:
        start = plan.block(k).start
        entries = ledger.for_block(k)
        for arm in (0, 1):
            fits = [e for e in entries if e.arm == arm]
            if not fits:
                details.append(f"no fit recorded for block {k}, arm {arm}")
                continue
            if len(fits) > 1:
                details.append(f"{len(fits)} fits recorded for block {k}, arm {arm} (expected one)")
            for entry in fits:
                leaked = [t for t in entry.train_indices if t >= start]
                if leaked:
                    lo, hi = entry.train_range
                    details.append(
                        f"block {k}, arm {arm}: training range [{lo},{hi}] overlaps block starting at "
                        f"t={start}; offending indices {_listing([str(t) for t in leaked])}"
                    )
    if details:
        return _verdict('predictability', FAIL, details)
    return _verdict('predictability', PASS, [f"{len(ledger)} fits, all trained before their blocks"])


def horizon_check(log: ExperimentLog, horizon: int, plan: Optional[ForwardPlan] = None) -> AuditVerdict:
    """The log (and plan, if given) must end exactly at the declared horizon."""
    details = []
    if log.n != horizon:
        details.append(f"log length {log.n} differs from declared horizon {horizon}")
    if plan is not None and plan.n != horizon:
        details.append(f"plan horizon {plan.n} differs from declared horizon {horizon}")
    if details:
        return _verdict('fixed_horizon', FAIL, details)
    return _verdict('fixed_horizon', PASS, [f"n={horizon}"])


def contract_report(log: ExperimentLog, plan: ForwardPlan, ledger: FitLedger, epsilon: float,
                    horizon: int, n_bins: int = 10, n_min: int = 50,
                    declared_plan: Optional[ForwardPlan] = None) -> List[AuditVerdict]:
    """
    Run the logging contract in order: calibration (warn-level), overlap,
    scored-set integrity, predictability, fixed horizon.

    Checks that cannot run because their inputs are inconsistent are
    reported as failures rather than raised.
    """
    verdicts = [calibration_bins(log, n_bins, n_min).verdict()]
    try:
        verdicts.append(overlap_check(log, plan, epsilon))
    except AuditError as e:
        verdicts.append(_verdict('overlap', FAIL, [str(e)]))
    verdicts.append(scored_set_check(plan, declared_plan))
    verdicts.append(predictability_audit(ledger, plan))
    verdicts.append(horizon_check(log, horizon, plan))
    return verdicts


def any_failed(verdicts: Sequence[AuditVerdict]) -> bool:
    return any(v.failed for v in verdicts)


def verdicts_to_json(verdicts: Sequence[AuditVerdict]) -> str:
    return json.dumps([v.to_dict() for v in verdicts], indent=2)


def verdict_table(verdicts: Sequence[AuditVerdict]) -> str:
    """Plain-text pass/warn/fail table for terminal output."""
    width = max((len(v.check) for v in verdicts), default=5)
    lines = [f"{'check'.ljust(width)}  status  evidence"]
    for v in verdicts:
        lines.append(f"{v.check.ljust(width)}  {v.status.ljust(6)}  {v.details[0] if v.details else ''}")
        lines.extend(f"{''.ljust(width)}          {d}" for d in v.details[1:])
    return '\n'.join(lines)
