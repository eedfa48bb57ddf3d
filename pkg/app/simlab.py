########################
# Simulation Lab        #
########################

from dataclasses import dataclass, field, replace
import logging
import math
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.designs import Design, DesignFactory, History, Truth
from app.exceptions import DesignError
from app.experiment_log import ExperimentLog, ForwardPlan
from app.inference import estimate
from app.nuisance import NuisanceFitSet, oracle_nuisance
from app.rng import StreamRole, substream
from app.scoring import score_series


@dataclass(frozen=True)
class DesignSpec:
    """
    One fully resolved simulation run: design, horizon, seed, replication,
    parameters (defaults merged in) and the methods to evaluate.
    """

    design: str
    n: int
    master_seed: int = 0
    replication: int = 0
    params: Dict[str, Any] = field(default_factory=dict)
    methods: Tuple[str, ...] = ()

    def __post_init__(self):
        code = str(self.design).upper()
        implementation = DesignFactory.create_design(code)
        if self.n < 2:
            raise DesignError(f"Horizon must be at least 2, got n={self.n}")
        if self.replication < 0 or self.master_seed < 0:
            raise DesignError("Seed and replication index must be non-negative")
        methods = tuple(self.methods) or implementation.default_methods
        invalid = [m for m in methods if m not in implementation.methods]
        if invalid:
            raise DesignError(f"Methods {invalid} are not valid for design {code}")
        object.__setattr__(self, 'design', code)
        object.__setattr__(self, 'params', implementation.resolve(self.params))
        object.__setattr__(self, 'methods', methods)

    @property
    def implementation(self) -> Design:
        return DesignFactory.create_design(self.design)

    def for_replication(self, replication: int) -> 'DesignSpec':
        return replace(self, replication=replication)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'design': self.design,
            'n': self.n,
            'master_seed': self.master_seed,
            'replication': self.replication,
            'params': {k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()},
            'methods': list(self.methods),
        }


@dataclass(frozen=True)
class TrialData:
    """
    One simulated experiment. ``executed_pi`` is what the randomization device
    used; it equals ``log.pi`` unless the log was deliberately mis-logged.
    """

    spec: DesignSpec
    log: ExperimentLog
    plan: ForwardPlan
    truth: Truth
    executed_pi: np.ndarray
    regime: Optional[float] = None

    @property
    def theta0(self) -> float:
        return self.truth.theta0


def _streams(spec: DesignSpec) -> Dict[StreamRole, np.random.Generator]:
    return {role: substream(spec.master_seed, spec.design, spec.replication, role) for role in StreamRole}


def assignment_uniforms(spec: DesignSpec) -> np.ndarray:
    """Uniforms U_t of the assignment stream; A_t = 1 exactly when U_t < pi_t."""
    return substream(spec.master_seed, spec.design, spec.replication, StreamRole.ASSIGNMENT).random(spec.n)


def generate_trial(spec: DesignSpec) -> TrialData:
    """
    Simulate one experiment block by block.

    Covariates, standardized noise for both arms and the assignment uniforms
    are drawn up front from their own substreams; the policy then sets each
    block's propensities from earlier blocks only.

    Args:
        spec (DesignSpec): Resolved run specification.

    Returns:
        TrialData: The log, the declared plan and the ground truth.
    """
    design = spec.implementation
    params = spec.params
    n = spec.n
    streams = _streams(spec)
    x = design.draw_covariates(streams[StreamRole.COVARIATES], n, params)
    noise = design.draw_noise(streams[StreamRole.OUTCOMES], n, params)
    uniforms = streams[StreamRole.ASSIGNMENT].random(n)
    truth = design.truth(params)
    y0 = truth.m0(x) + np.sqrt(truth.var0(x)) * noise[0]
    y1 = truth.m1(x) + np.sqrt(truth.var1(x)) * noise[1]

    plan = design.plan(n, params)
    pi = np.empty(n)
    a = np.zeros(n, dtype=np.int64)
    y = np.empty(n)
    regime = None
    for k in range(1, plan.k + 1):
        lo, hi = plan.block_bounds[k - 1], plan.block_bounds[k]
        history = History(x[:lo], a[:lo], y[:lo], pi[:lo])
        block_pi, tag = design.block_propensities(k, history, x[lo:hi], params)
        if tag is not None:
            regime = tag
        pi[lo:hi] = block_pi
        a[lo:hi] = (uniforms[lo:hi] < block_pi).astype(np.int64)
        y[lo:hi] = np.where(a[lo:hi] == 1, y1[lo:hi], y0[lo:hi])

    log = ExperimentLog(x=x, a=a, y=y, pi=pi)
    executed = pi.copy()
    executed.flags.writeable = False
    logging.debug(f"Generated design {spec.design} trial n={n} replication={spec.replication}")
    return TrialData(spec=spec, log=log, plan=plan, truth=truth, executed_pi=executed, regime=regime)


def replay_assignments(spec: DesignSpec, pi: np.ndarray) -> np.ndarray:
    """
    Re-derive A_t from a propensity stream and the recorded assignment
    substream. On an intact log this reproduces the logged treatments.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (spec.n,):
        raise DesignError(f"Expected {spec.n} propensities, got shape {pi.shape}")
    return (assignment_uniforms(spec) < pi).astype(np.int64)


def mislog(trial: TrialData, logged_pi) -> TrialData:
    """
    Fault injection: overwrite the logged propensities while keeping the
    executed ones (and therefore the realized treatments) unchanged.
    """
    logged = np.broadcast_to(np.asarray(logged_pi, dtype=float), (trial.log.n,))
    return replace(trial, log=trial.log.with_propensities(logged))


def design_theta0(design: str, params: Optional[Dict[str, Any]] = None) -> float:
    """Target ATE of a design (integrated and cached for the contextual design)."""
    implementation = DesignFactory.create_design(design)
    return implementation.truth(implementation.resolve(params)).theta0


########################
# Oracle Quantities     #
########################

@dataclass(frozen=True)
class OracleVarianceTrace:
    """
    Conditional second moments E[xi_t^2 | past] over the scored set, their
    running sum V^2 and the ratio V^2 / n_eff.
    """

    t: np.ndarray
    contributions: np.ndarray
    running: np.ndarray

    @property
    def n_eff(self) -> int:
        return int(self.t.shape[0])

    @property
    def v_squared(self) -> float:
        return math.fsum(self.contributions)

    @property
    def ratio(self) -> float:
        return self.v_squared / self.n_eff


def conditional_second_moment(tau: np.ndarray, theta0: float, pi: np.ndarray, b0: np.ndarray, b1: np.ndarray,
                              var0: np.ndarray, var1: np.ndarray) -> np.ndarray:
    """
    E[(phi - theta0)^2 | past, x] for the doubly robust score with nuisance
    errors b_a = m_hat_a - m_a:

    (tau - theta0)^2 + var1/pi + var0/(1-pi) + pi(1-pi)(b1/pi + b0/(1-pi))^2
    """
    return ((tau - theta0) ** 2 + var1 / pi + var0 / (1 - pi)
            + pi * (1 - pi) * (b1 / pi + b0 / (1 - pi)) ** 2)


def oracle_variance_trace(trial: TrialData, plan: ForwardPlan, fits: NuisanceFitSet) -> OracleVarianceTrace:
    """
    Predictable quadratic variation of the scores built from ``fits``.

    Uses the executed propensities, which is what the randomization saw.

    Raises:
        DesignError: If the plan does not match the trial.
    """
    if plan.n != trial.log.n:
        raise DesignError(f"Plan horizon {plan.n} does not match trial length {trial.log.n}")
    times = plan.scored_array
    x = trial.log.x[times - 1]
    pi = trial.executed_pi[times - 1]
    m0_hat, m1_hat = fits.predict(times, x, plan)
    truth = trial.truth
    contributions = conditional_second_moment(
        truth.tau(x), truth.theta0, pi,
        m0_hat - truth.m0(x), m1_hat - truth.m1(x),
        truth.var0(x), truth.var1(x),
    )
    return OracleVarianceTrace(t=times, contributions=contributions, running=np.cumsum(contributions))


def oracle_gap(trial: TrialData, plan: ForwardPlan, fits: NuisanceFitSet) -> float:
    """sqrt(n_eff) times the estimate difference against oracle nuisances on the same log."""
    oracle = oracle_nuisance(trial.truth.m0, trial.truth.m1)
    theta_hat = estimate(score_series(trial.log, plan, fits))
    theta_star = estimate(score_series(trial.log, plan, oracle))
    return math.sqrt(plan.n_eff) * (theta_hat - theta_star)

