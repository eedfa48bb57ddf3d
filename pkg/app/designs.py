########################
# Simulation Designs    #
########################

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
import logging
import math
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import expit

from app.exceptions import DesignError
from app.experiment_log import (ForwardPlan, make_block_plan, make_burnin_plan,
                                make_forward_plan, make_full_plan)
from app.nuisance import NuisanceConfig, clamp_predictions, fit_pair
from app.rng import THETA0_KEY, StreamRole, substream

Params = Dict[str, Any]


@dataclass(frozen=True)
class History:
    """Data observed before the current block (0-based rows 0..len-1)."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    pi: np.ndarray

    @property
    def size(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class Truth:
    """Ground truth of a design: regressions, noise variances and theta0."""

    design: 'Design'
    params: Params
    theta0: float

    def m0(self, x: np.ndarray) -> np.ndarray:
        return self.design.m0(np.asarray(x, dtype=float), self.params)

    def tau(self, x: np.ndarray) -> np.ndarray:
        return self.design.tau(np.asarray(x, dtype=float), self.params)

    def m1(self, x: np.ndarray) -> np.ndarray:
        return self.m0(x) + self.tau(x)

    def var0(self, x: np.ndarray) -> np.ndarray:
        return self.design.variance(np.asarray(x, dtype=float), 0, self.params)

    def var1(self, x: np.ndarray) -> np.ndarray:
        return self.design.variance(np.asarray(x, dtype=float), 1, self.params)


def correlated_normal(rng: np.random.Generator, n: int, p: int, rho: float) -> np.ndarray:
    """Rows drawn from N(0, S) with S_ij = rho^|i-j|."""
    z = rng.standard_normal((n, p))
    if rho == 0:
        return z
    chol = np.linalg.cholesky(toeplitz(rho ** np.arange(p)))
    return z @ chol.T


class Design(ABC):
    """
    Data-generating process plus its assignment policy.

    Potential outcomes are Y(a) = m_a(x) + sqrt(var_a(x)) e_a with
    standardized noise e_a drawn for both arms up front; the policy sets the
    executed propensities of block k from data before the block and the
    block's own covariates.
    """

    code: str = ''
    defaults: Params = {}
    methods: Tuple[str, ...] = ()
    default_methods: Tuple[str, ...] = ()

    def resolve(self, overrides: Optional[Params] = None) -> Params:
        """
        Merge overrides into the defaults; unknown keys are rejected.

        Raises:
            DesignError: On a parameter this design does not have.
        """
        params = dict(self.defaults)
        for key, value in (overrides or {}).items():
            if key not in params:
                raise DesignError(f"Design {self.code} has no parameter {key!r}")
            params[key] = tuple(value) if isinstance(params[key], tuple) else value
        self.validate(params)
        return params

    def validate(self, params: Params) -> None:
        pass

    def dimension(self, params: Params) -> int:
        return int(params.get('p', 0))

    def draw_covariates(self, rng: np.random.Generator, n: int, params: Params) -> np.ndarray:
        return rng.standard_normal((n, self.dimension(params)))

    def draw_noise(self, rng: np.random.Generator, n: int, params: Params) -> np.ndarray:
        """Standardized noise for both arms, shape (2, n)."""
        return rng.standard_normal((2, n))

    @abstractmethod
    def m0(self, x: np.ndarray, params: Params) -> np.ndarray:
        pass  # pragma: no cover

    def tau(self, x: np.ndarray, params: Params) -> np.ndarray:
        return np.zeros(x.shape[0])

    def variance(self, x: np.ndarray, arm: int, params: Params) -> np.ndarray:
        return np.ones(x.shape[0])

    def theta0(self, params: Params) -> float:
        return 0.0

    def truth(self, params: Params) -> Truth:
        return Truth(self, params, self.theta0(params))

    @abstractmethod
    def plan(self, n: int, params: Params) -> ForwardPlan:
        pass  # pragma: no cover

    @abstractmethod
    def block_propensities(self, k: int, history: History, x_block: np.ndarray,
                           params: Params) -> Tuple[np.ndarray, Optional[float]]:
        """
        Executed propensities for block ``k`` and an optional regime tag.
        """
        pass  # pragma: no cover

    def v_fix(self, params: Params, regime: Optional[float] = None) -> Optional[float]:
        return params.get('v_fix')

    def overlap_epsilon(self, params: Params) -> Optional[float]:
        """Overlap bound the policy enforces on scored units, if it has one."""
        return None

    def nuisance_config(self, params: Params, role: str = 'predictable') -> NuisanceConfig:
        """
        Learner for a method role: 'predictable', 'leaky' or 'misspec'.
        """
        clamp = params.get('clamp')
        feature_map = {
            'leaky': params.get('leaky_feature_map'),
            'misspec': params.get('misspec_feature_map'),
        }.get(role) or params.get('feature_map', 'raw')
        ridge_lambda = params.get('leaky_ridge_lambda') if role == 'leaky' else None
        if ridge_lambda is None:
            ridge_lambda = params.get('ridge_lambda', 1e-8)
        return NuisanceConfig(feature_map=feature_map, ridge_lambda=float(ridge_lambda),
                              clamp=tuple(clamp) if clamp else None)


def _constant(x_block: np.ndarray, value: float) -> np.ndarray:
    return np.full(x_block.shape[0], float(value))


def _forward_effect(history: History, x_block: np.ndarray, config: NuisanceConfig) -> np.ndarray:
    """tau_hat(x) = m1_hat(x) - m0_hat(x) from arm-specific fits on the history."""
    (model0, model1), _ = fit_pair(history.x, history.a, history.y, np.arange(history.size), config)
    m0 = clamp_predictions(model0.predict(x_block), config.clamp)
    m1 = clamp_predictions(model1.predict(x_block), config.clamp)
    return m1 - m0


class BurnInSwitchDesign(Design):
    """
    No covariates; burn-in at 0.5, then a constant propensity fixed by the sign
    of the burn-in IPW effect estimate.
    """

    code = 'A'
    defaults = {
        'n0': 50, 'burn_pi': 0.5, 'pi_high': 0.8, 'pi_low': 0.2,
        'var0': 1.0, 'var1': 9.0, 'v_fix': 31.25,
    }
    methods = ('SN', 'Fixed-V', 'Regime-Fixed')
    default_methods = ('Fixed-V', 'Regime-Fixed', 'SN')

    def m0(self, x, params):
        return np.zeros(x.shape[0])

    def variance(self, x, arm, params):
        return np.full(x.shape[0], float(params['var1'] if arm == 1 else params['var0']))

    def plan(self, n, params):
        return make_burnin_plan(n, int(params['n0']))

    def block_propensities(self, k, history, x_block, params):
        if k == 1:
            return _constant(x_block, params['burn_pi']), None
        a, y, pi = history.a, history.y, history.pi
        tau_burn = float(np.mean(a * y / pi - (1 - a) * y / (1 - pi)))
        regime = params['pi_high'] if tau_burn >= 0 else params['pi_low']
        logging.debug(f"Burn-in effect estimate {tau_burn:.6g}; regime pi={regime}")
        return _constant(x_block, regime), float(regime)

    def v_fix(self, params, regime=None):
        if regime is None:
            return params['v_fix']
        return params['var1'] / regime + params['var0'] / (1 - regime)


class ConstantPropensityDesign(Design):
    """No covariates; every unit randomized at a constant propensity, all scored."""

    code = 'B'
    defaults = {'pi': 0.6, 'var0': 1.0, 'var1': 9.0, 'v_fix': 17.5}
    methods = ('SN', 'Fixed-V')
    default_methods = ('Fixed-V', 'SN')

    def m0(self, x, params):
        return np.zeros(x.shape[0])

    def variance(self, x, arm, params):
        return np.full(x.shape[0], float(params['var1'] if arm == 1 else params['var0']))

    def plan(self, n, params):
        return make_full_plan(n)

    def block_propensities(self, k, history, x_block, params):
        return _constant(x_block, params['pi']), None


class LeakageStressDesign(Design):
    """
    Nonlinear baseline with a small heterogeneous effect and heavy-tailed
    noise; after burn-in the propensity follows an expit of the forward
    effect estimate, bounded to [epsilon, 1 - epsilon].
    """

    code = 'C1'
    defaults = {
        'p': 20, 'k': 5, 'burn_pi': 0.5, 'epsilon': 0.1, 'slope': 2.5,
        'tau0': 0.0, 'delta': 0.2, 'df': 30,
        'feature_map': 'raw', 'ridge_lambda': 1.0,
        'leaky_feature_map': 'quadratic', 'leaky_ridge_lambda': 0.1,
        'clamp': (-50.0, 50.0),
    }
    methods = ('SN-AIPW-Predictable', 'SN-AIPW-LeakyFull', 'SN-IPW', 'SN-AIPW-Oracle')
    default_methods = ('SN-AIPW-Predictable', 'SN-AIPW-LeakyFull', 'SN-IPW')

    def validate(self, params):
        if params['p'] < 5:
            raise DesignError("Design C1 needs at least 5 covariates")
        if params['df'] <= 2:
            raise DesignError("Design C1 noise needs df > 2 for finite variance")

    def draw_noise(self, rng, n, params):
        df = params['df']
        return rng.standard_t(df, size=(2, n)) / math.sqrt(df / (df - 2))

    def m0(self, x, params):
        return np.sin(x[:, 0]) + 0.5 * x[:, 1] ** 2 - 0.5 * x[:, 2] + 0.25 * x[:, 3] * x[:, 4]

    def tau(self, x, params):
        return params['tau0'] + params['delta'] * np.sin(x[:, 0])

    def theta0(self, params):
        return float(params['tau0'])

    def plan(self, n, params):
        return make_forward_plan(n, int(params['k']))

    def block_propensities(self, k, history, x_block, params):
        if k == 1:
            return _constant(x_block, params['burn_pi']), None
        effect = _forward_effect(history, x_block, self.nuisance_config(params))
        eps = params['epsilon']
        return eps + (1 - 2 * eps) * expit(params['slope'] * effect), None

    def overlap_epsilon(self, params):
        return float(params['epsilon'])


class NuisanceQualityDesign(Design):
    """Linear outcomes on AR(1)-correlated covariates, constant propensity."""

    code = 'C2'
    defaults = {
        'p': 5, 'rho': 0.5, 'pi': 0.5, 'tau': 0.0, 'k': 10,
        'feature_map': 'raw', 'misspec_feature_map': 'raw[1]', 'ridge_lambda': 1e-8,
    }
    methods = ('SN-AIPW-Oracle', 'SN-AIPW-WellSpec', 'SN-AIPW-Misspec', 'SN-IPW')
    default_methods = methods

    def validate(self, params):
        if params['p'] < 2:
            raise DesignError("Design C2 needs at least 2 covariates")

    def draw_covariates(self, rng, n, params):
        return correlated_normal(rng, n, int(params['p']), params['rho'])

    def m0(self, x, params):
        return x[:, 0] + x[:, 1]

    def tau(self, x, params):
        return np.full(x.shape[0], float(params['tau']))

    def theta0(self, params):
        return float(params['tau'])

    def plan(self, n, params):
        return make_forward_plan(n, int(params['k']))

    def block_propensities(self, k, history, x_block, params):
        return _constant(x_block, params['pi']), None


class ContextualPolicyDesign(Design):
    """
    Heteroskedastic contextual design; after a burn-in, blocks of fixed size
    are assigned by an epsilon-greedy or softmax rule on the forward effect
    estimate, clipped to keep overlap.
    """

    code = 'D'
    defaults = {
        'p': 10, 'rho': 0.3, 'n0': 100, 'block_size': 100, 'burn_pi': 0.5,
        'policy': 'epsilon_greedy', 'epsilon': 0.1, 'temperature': 0.5,
        'clip': (0.05, 0.95), 'feature_map': 'raw', 'ridge_lambda': 1e-8,
        'clamp': (-50.0, 50.0), 'theta0_draws': 1_000_000,
    }
    methods = ('SN-Oracle', 'SN-AIPW', 'Naive-iid-DML', 'SN-IPW', 'SN-IPW-Assume0p5')
    default_methods = methods
    policies = ('epsilon_greedy', 'softmax')

    def validate(self, params):
        if params['policy'] not in self.policies:
            raise DesignError(f"Unknown policy {params['policy']!r}; expected one of {self.policies}")
        if params['p'] < 5:
            raise DesignError("Design D needs at least 5 covariates")
        lo, hi = params['clip']
        if not 0 < lo <= hi < 1:
            raise DesignError(f"Clip bounds must satisfy 0 < lo <= hi < 1, got {params['clip']}")

    def draw_covariates(self, rng, n, params):
        return correlated_normal(rng, n, int(params['p']), params['rho'])

    def m0(self, x, params):
        return 0.8 * x[:, 0] + 0.5 * x[:, 1] ** 2 - 0.5 * np.cos(x[:, 2]) + 0.25 * x[:, 3]

    def tau(self, x, params):
        return (0.5 * x[:, 0] + 0.5 * np.sin(x[:, 1]) + 0.25 * (x[:, 2] > 0)
                - 0.25 * x[:, 3] * x[:, 4])

    def variance(self, x, arm, params):
        return (1.0 + 0.5 * np.abs(x[:, 0])) ** 2

    def theta0(self, params):
        return integrated_theta0(int(params['p']), float(params['rho']), int(params['theta0_draws']))

    def plan(self, n, params):
        return make_block_plan(n, int(params['block_size']), int(params['n0']))

    def block_propensities(self, k, history, x_block, params):
        if k == 1:
            return _constant(x_block, params['burn_pi']), None
        effect = _forward_effect(history, x_block, self.nuisance_config(params))
        if params['policy'] == 'epsilon_greedy':
            eps = params['epsilon']
            pi = np.where(effect > 0, 1 - eps / 2, eps / 2)
        else:
            pi = expit(effect / params['temperature'])
        lo, hi = params['clip']
        return np.clip(pi, lo, hi), None

    def overlap_epsilon(self, params):
        lo, hi = params['clip']
        return float(min(lo, round(1 - hi, 12)))


@lru_cache(maxsize=None)
def integrated_theta0(p: int, rho: float, draws: int, chunk: int = 100_000) -> float:
    """
    Monte Carlo integral of E[tau(X)] for the contextual design, on a
    dedicated stream so every run uses the same value.
    """
    rng = substream(0, 'D', THETA0_KEY, StreamRole.COVARIATES)
    design = ContextualPolicyDesign()
    totals = []
    remaining = draws
    while remaining > 0:
        size = min(chunk, remaining)
        x = correlated_normal(rng, size, p, rho)
        totals.append(math.fsum(design.tau(x, design.defaults)))
        remaining -= size
    value = math.fsum(totals) / draws
    logging.info(f"Integrated theta0 for design D over {draws} draws: {value:.6f}")
    return value


class DesignFactory:
    """Registry of designs by code."""

    _designs: Dict[str, type] = {
        'A': BurnInSwitchDesign,
        'B': ConstantPropensityDesign,
        'C1': LeakageStressDesign,
        'C2': NuisanceQualityDesign,
        'D': ContextualPolicyDesign,
    }

    @classmethod
    def register_design(cls, code: str, design_class: type) -> None:
        """
        Raises:
            TypeError: If design_class does not inherit from Design.
        """
        if not issubclass(design_class, Design):
            raise TypeError("Design class must inherit from Design")
        cls._designs[code.upper()] = design_class

    @classmethod
    def create_design(cls, code: str) -> Design:
        """
        Raises:
            DesignError: If the code is unknown.
        """
        design_class = cls._designs.get(str(code).upper())
        if not design_class:
            raise DesignError(f"Unknown design: {code}")
        return design_class()

    @classmethod
    def codes(cls) -> Tuple[str, ...]:
        return tuple(cls._designs)
