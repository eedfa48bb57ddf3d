########################
# Interval Methods      #
########################

from dataclasses import dataclass
import logging
from typing import Dict, Optional, Tuple

from app.exceptions import DesignError, InferenceError
from app.inference import InferenceReport, fixed_v_interval, sn_interval
from app.nuisance import (FitLedger, NuisanceFitSet, empty_ledger, fit_forward,
                          fit_iid_crossfit, fit_leaky_full, oracle_nuisance, zero_nuisance)
from app.scoring import mislogged_score_series, score_series
from app.simlab import TrialData

NUISANCE_KINDS = ('zero', 'oracle', 'predictable', 'misspec', 'leaky', 'iid')
INTERVALS = ('sn', 'fixed_v', 'regime_fixed')

IID_FOLDS = 5


class FitCache:
    """
    Nuisance fit sets of one trial, built on first use and shared by every
    method evaluated on that trial.
    """

    def __init__(self, trial: TrialData):
        self.trial = trial
        self._fits: Dict[str, Tuple[NuisanceFitSet, FitLedger]] = {}

    def get(self, kind: str) -> Tuple[NuisanceFitSet, FitLedger]:
        """
        Raises:
            DesignError: On an unknown nuisance kind.
        """
        if kind not in self._fits:
            self._fits[kind] = self._build(kind)
        return self._fits[kind]

    def _build(self, kind: str) -> Tuple[NuisanceFitSet, FitLedger]:
        trial = self.trial
        design = trial.spec.implementation
        params = trial.spec.params
        if kind == 'zero':
            return zero_nuisance(), empty_ledger('zero')
        if kind == 'oracle':
            return oracle_nuisance(trial.truth.m0, trial.truth.m1), empty_ledger('oracle')
        if kind in ('predictable', 'misspec'):
            return fit_forward(trial.log, trial.plan, design.nuisance_config(params, kind))
        if kind == 'leaky':
            return fit_leaky_full(trial.log, trial.plan, design.nuisance_config(params, 'leaky'))
        if kind == 'iid':
            return fit_iid_crossfit(trial.log, trial.plan, design.nuisance_config(params), folds=IID_FOLDS)
        raise DesignError(f"Unknown nuisance kind: {kind}")


@dataclass(frozen=True)
class IntervalMethod:
    """
    A named estimator variant: which nuisance to score with, which interval to
    build, and optionally a propensity assumed in place of the logged one.
    """

    name: str
    nuisance: str
    interval: str = 'sn'
    assumed_pi: Optional[float] = None

    def __post_init__(self):
        if self.nuisance not in NUISANCE_KINDS:
            raise DesignError(f"Unknown nuisance kind: {self.nuisance}")
        if self.interval not in INTERVALS:
            raise DesignError(f"Unknown interval: {self.interval}")

    def evaluate(self, trial: TrialData, fits: FitCache, alpha: float = 0.05,
                 critical: str = 'z') -> InferenceReport:
        """
        Score the trial and build this method's interval.

        Raises:
            InferenceError: If the design provides no variance constant for a
                fixed-V interval.
        """
        fit_set, _ = fits.get(self.nuisance)
        if self.assumed_pi is None:
            series = score_series(trial.log, trial.plan, fit_set)
        else:
            series = mislogged_score_series(trial.log, trial.plan, fit_set, self.assumed_pi)

        if self.interval == 'sn':
            return sn_interval(series, alpha, critical)
        design = trial.spec.implementation
        regime = trial.regime if self.interval == 'regime_fixed' else None
        if self.interval == 'regime_fixed' and regime is None:
            raise InferenceError(f"{self.name} needs a realized regime")
        v_fix = design.v_fix(trial.spec.params, regime)
        if v_fix is None:
            raise InferenceError(f"Design {trial.spec.design} has no fixed variance for {self.name}")
        return fixed_v_interval(series, v_fix, alpha)


class MethodFactory:
    """Registry of interval methods by display name."""

    _methods: Dict[str, IntervalMethod] = {
        method.name: method for method in (
            IntervalMethod('SN', 'zero'),
            IntervalMethod('Fixed-V', 'zero', 'fixed_v'),
            IntervalMethod('Regime-Fixed', 'zero', 'regime_fixed'),
            IntervalMethod('SN-AIPW-Predictable', 'predictable'),
            IntervalMethod('SN-AIPW-LeakyFull', 'leaky'),
            IntervalMethod('SN-IPW', 'zero'),
            IntervalMethod('SN-AIPW-Oracle', 'oracle'),
            IntervalMethod('SN-AIPW-WellSpec', 'predictable'),
            IntervalMethod('SN-AIPW-Misspec', 'misspec'),
            IntervalMethod('SN-Oracle', 'oracle'),
            IntervalMethod('SN-AIPW', 'predictable'),
            IntervalMethod('Naive-iid-DML', 'iid'),
            IntervalMethod('SN-IPW-Assume0p5', 'zero', assumed_pi=0.5),
        )
    }

    @classmethod
    def register_method(cls, method: IntervalMethod) -> None:
        """
        Raises:
            TypeError: If method is not an IntervalMethod.
        """
        if not isinstance(method, IntervalMethod):
            raise TypeError("Method must be an IntervalMethod")
        cls._methods[method.name] = method
        logging.info(f"Registered method {method.name}")

    @classmethod
    def create_method(cls, name: str) -> IntervalMethod:
        """
        Raises:
            DesignError: If the name is unknown.
        """
        method = cls._methods.get(name)
        if method is None:
            raise DesignError(f"Unknown method: {name}")
        return method

    @classmethod
    def names(cls) -> Tuple[str, ...]:
        return tuple(cls._methods)
