########################
# Inference Lab         #
########################

from dataclasses import dataclass, field
from datetime import datetime
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from app.audit import AuditVerdict, any_failed, calibration_bins, contract_report, verdicts_to_json
from app.exceptions import (AuditError, ContractViolation, DesignError, InferenceError, NuisanceError,
                            PlanError, ValidationError)
from app.experiment_log import (ExperimentLog, ForwardPlan, load_log, load_plan, make_block_plan,
                                make_burnin_plan, make_forward_plan, make_full_plan, save_log, save_plan)
from app.inference import InferenceReport, QvReport, fixed_v_interval, qv_report, sn_interval
from app.lab_config import LabConfig
from app.mc_engine import McTable, VarianceHistogram, run_design, variance_ratio_histogram
from app.nuisance import (FitLedger, NuisanceConfig, NuisanceFitSet, empty_ledger, fit_forward,
                          fit_iid_crossfit, fit_leaky_full, zero_nuisance)
from app.observers import CellObserver, CellResult
from app.scoring import score_series
from app.simlab import DesignSpec, generate_trial

INFER_MODES = ('forward', 'leaky_full', 'leaky_iid', 'zero')
INFER_VARIANTS = ('sn', 'fixed_v')


@dataclass(frozen=True)
class PlanSpec:
    """
    How to build the forward plan for a log whose horizon is not yet known:
    a saved plan file, K equal blocks, a burn-in (optionally followed by
    fixed-size blocks), or one full block when nothing is given.
    """

    path: Optional[Path] = None
    blocks: Optional[int] = None
    burn_in: Optional[int] = None
    block_size: Optional[int] = None

    def __post_init__(self):
        chosen = [self.path is not None, self.blocks is not None, self.burn_in is not None]
        if sum(chosen) > 1:
            raise PlanError("Give at most one of a plan file, a block count or a burn-in length")
        if self.block_size is not None and self.burn_in is None:
            raise PlanError("A block size needs a burn-in length")

    def build(self, n: int, encoding: str = 'utf-8') -> ForwardPlan:
        """
        Raises:
            PlanError: If the plan cannot be built or a saved plan has another horizon.
        """
        if self.path is not None:
            plan = load_plan(self.path, encoding)
            if plan.n != n:
                raise PlanError(f"Plan horizon {plan.n} does not match log length {n}")
            return plan
        if self.blocks is not None:
            return make_forward_plan(n, self.blocks)
        if self.burn_in is not None and self.block_size is not None:
            return make_block_plan(n, self.block_size, self.burn_in)
        if self.burn_in is not None:
            return make_burnin_plan(n, self.burn_in)
        return make_full_plan(n)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'path': str(self.path) if self.path is not None else None,
            'blocks': self.blocks,
            'burn_in': self.burn_in,
            'block_size': self.block_size,
        }


@dataclass(frozen=True)
class ReproductionGrid:
    """A bundled published grid: design, horizons, methods and overrides."""

    name: str
    design: str
    n_list: Tuple[int, ...]
    methods: Tuple[str, ...] = ()
    params: Dict[str, Any] = field(default_factory=dict)
    reference: Optional[str] = None
    histogram: bool = False


FULL_GRID = (250, 500, 1000, 2000, 5000)

GRIDS: Dict[str, ReproductionGrid] = {
    grid.name: grid for grid in (
        ReproductionGrid('A-main', 'A', FULL_GRID, ('Fixed-V', 'Regime-Fixed', 'SN')),
        ReproductionGrid('A-regime', 'A', (250, 500, 1000, 2000), ('SN', 'Fixed-V')),
        ReproductionGrid('A-variance', 'A', (1000,), histogram=True),
        ReproductionGrid('B', 'B', FULL_GRID, ('Fixed-V', 'SN')),
        ReproductionGrid('C1', 'C1', FULL_GRID,
                         ('SN-AIPW-Predictable', 'SN-AIPW-LeakyFull', 'SN-IPW')),
        ReproductionGrid('C2', 'C2', (5000,),
                         ('SN-AIPW-Oracle', 'SN-AIPW-WellSpec', 'SN-AIPW-Misspec', 'SN-IPW'),
                         reference='SN-AIPW-Oracle'),
        ReproductionGrid('D-epsilon-greedy', 'D', FULL_GRID, params={'policy': 'epsilon_greedy'}),
        ReproductionGrid('D-softmax', 'D', FULL_GRID, params={'policy': 'softmax'}),
    )
}

# Numbering of the published results each grid regenerates
PUBLISHED_TABLES: Dict[int, str] = {
    2: 'A-main', 3: 'A-regime', 4: 'B', 5: 'C1', 6: 'C2', 7: 'D-epsilon-greedy', 8: 'D-softmax',
}
PUBLISHED_FIGURES: Dict[int, str] = {1: 'A-variance'}


class InferenceLab:
    """
    Orchestrates simulation, inference and audit runs.

    Owns the configuration, logging, run directories and observers; every
    run writes its resolved configuration before computing anything.
    """

    def __init__(self, config: Optional[LabConfig] = None):
        """
        Args:
            config (Optional[LabConfig]): Settings; loaded from the environment if omitted.
        """
        # Load settings from the environment if none were given
        if config is None:
            config = LabConfig()

        # Assign the configuration and validate its parameters
        self.config = config
        self.config.validate()

        # Ensure the log directory exists, then set up logging
        os.makedirs(self.config.log_dir, exist_ok=True)
        self._setup_logging()

        # Observers and the partial table of the run in progress
        self.observers: List[CellObserver] = []
        self.partial_cells: List[CellResult] = []
        self.current_run: Optional[Path] = None

        # Create the output root for run directories
        self.config.output_dir.mkdir(parents=True, exist_ok=True)
        logging.info("Inference lab initialized with configuration")

    def _setup_logging(self) -> None:
        try:
            os.makedirs(self.config.log_dir, exist_ok=True)
            log_file = self.config.log_file.resolve()
            # Replace any handlers installed by an earlier lab
            logging.basicConfig(
                filename=str(log_file),
                level=logging.INFO,
                format='%(asctime)s - %(levelname)s - %(message)s',
                force=True
            )
            logging.info(f"Logging initialized at: {log_file}")
        except Exception as e:  # pragma: no cover
            # Print the error and re-raise if logging setup fails
            print(f"Error setting up logging: {e}")
            raise

    def add_observer(self, observer: CellObserver) -> None:
        self.observers.append(observer)
        logging.info(f"Added observer: {observer.__class__.__name__}")

    def remove_observer(self, observer: CellObserver) -> None:
        self.observers.remove(observer)
        logging.info(f"Removed observer: {observer.__class__.__name__}")

    ########################
    # Run Directories       #
    ########################

    def run_directory(self, subcommand: str, name: Optional[str] = None) -> Path:
        """Create ``out/<subcommand>/<name or timestamp>/`` and make it the current run."""
        name = name or datetime.now().strftime('%Y%m%d-%H%M%S')
        run_dir = self.config.output_dir / subcommand / name
        run_dir.mkdir(parents=True, exist_ok=True)
        self.current_run = run_dir
        self.partial_cells = []
        return run_dir

    def write_config(self, run_dir: Path, run: Dict[str, Any]) -> Path:
        """Persist the resolved lab settings and run parameters as config.json."""
        path = run_dir / 'config.json'
        payload = {'lab': self.config.to_dict(), 'run': run}
        path.write_text(json.dumps(payload, indent=2, default=str), encoding=self.config.default_encoding)
        logging.info(f"Resolved configuration written to {path}")
        return path

    def save_partial_table(self, cell: CellResult) -> None:
        """Append a cell and rewrite the partial table of the current run."""
        self.partial_cells.append(cell)
        if self.current_run is None:
            return
        table = McTable(self.partial_cells, cell.replications)
        table.to_csv(self.current_run / 'table.partial.csv', self.config.default_encoding)

    ########################
    # Simulation            #
    ########################

    def simulate(self, design: str, n_list: Sequence[int], methods: Optional[Sequence[str]] = None,
                 replications: Optional[int] = None, params: Optional[Dict[str, Any]] = None,
                 name: Optional[str] = None, reference: Optional[str] = None,
                 subcommand: str = 'simulate') -> Tuple[McTable, Path]:
        """
        Run a Monte Carlo table and write config.json, table.csv and table.json.

        Raises:
            DesignError: On invalid design parameters or method combinations.
        """
        if not n_list:
            raise DesignError("At least one horizon n is required")
        replications = replications or self.config.replications
        # Resolve up front so config.json holds every parameter
        specs = [DesignSpec(design, int(n), self.config.master_seed, 0, dict(params or {}),
                            tuple(methods or ())) for n in n_list]
        # Record the run before computing anything
        run_dir = self.run_directory(subcommand, name)
        self.write_config(run_dir, {
            'design': specs[0].design,
            'n_list': [int(n) for n in n_list],
            'methods': list(specs[0].methods),
            'params': specs[0].to_dict()['params'],
            'replications': replications,
            'reference': reference,
        })
        # Every cell is reported to the observers as it completes
        table = run_design(
            specs[0].design, n_list, specs[0].methods, replications, self.config.master_seed,
            self.config.workers, self.config.alpha, self.config.critical, params, self.observers,
        )
        # Write the final table in both formats
        encoding = self.config.default_encoding
        table.to_csv(run_dir / 'table.csv', encoding)
        table.to_json(run_dir / 'table.json', encoding)
        if reference:
            table.with_relative(reference).to_csv(run_dir / 'relative.csv', index=False,
                                                  float_format='%.17g', encoding=encoding)
        # The partial table is superseded by the final one
        partial = run_dir / 'table.partial.csv'
        if partial.exists():
            partial.unlink()
        logging.info(f"Simulation table written to {run_dir}")
        return table, run_dir

    def histogram(self, n: int = 1000, replications: Optional[int] = None, bins: int = 50,
                  name: Optional[str] = None, subcommand: str = 'simulate',
                  run_dir: Optional[Path] = None) -> Tuple[VarianceHistogram, Path]:
        """
        Variance-ratio histogram of the burn-in switching design, written to
        histogram.csv. With ``run_dir`` it joins an existing run (next to its
        table) instead of opening a new one.
        """
        replications = replications or self.config.replications
        if run_dir is None:
            run_dir = self.run_directory(subcommand, name)
            self.write_config(run_dir, {'design': 'A', 'n': n, 'replications': replications, 'bins': bins})
        result = variance_ratio_histogram(n, replications, bins, self.config.master_seed, self.config.workers)
        result.to_csv(run_dir / 'histogram.csv', self.config.default_encoding)
        logging.info(f"Variance-ratio histogram written to {run_dir}")
        return result, run_dir

    def reproduce(self, grid_name: str, replications: Optional[int] = None,
                  name: Optional[str] = None):
        """
        Run one bundled grid.

        Raises:
            DesignError: If the grid name is unknown.
        """
        grid = GRIDS.get(grid_name)
        if grid is None:
            raise DesignError(f"Unknown grid {grid_name!r}; expected one of {sorted(GRIDS)}")
        name = name or grid.name
        if grid.histogram:
            return self.histogram(grid.n_list[0], replications, name=name, subcommand='reproduce')
        return self.simulate(grid.design, grid.n_list, grid.methods, replications, grid.params,
                             name=name, reference=grid.reference, subcommand='reproduce')

    def dump(self, design: str, n: int, replication: int = 0, params: Optional[Dict[str, Any]] = None,
             name: Optional[str] = None) -> Path:
        """
        Write one simulated trial: log.jsonl, log.csv, plan.json and the
        forward ledger, ready for ``infer`` and ``audit``.
        """
        spec = DesignSpec(design, n, self.config.master_seed, replication, dict(params or {}))
        run_dir = self.run_directory('dump', name)
        self.write_config(run_dir, spec.to_dict())
        trial = generate_trial(spec)

        # Write the log in both formats beside its plan and ledger
        encoding = self.config.default_encoding
        save_log(trial.log, run_dir / 'log.jsonl', encoding=encoding)
        save_log(trial.log, run_dir / 'log.csv', encoding=encoding)
        save_plan(trial.plan, run_dir / 'plan.json', encoding=encoding)
        _, ledger = fit_forward(trial.log, trial.plan, spec.implementation.nuisance_config(spec.params))
        ledger.save_jsonl(run_dir / 'ledger.jsonl', encoding=encoding)
        # Ground truth plus the overlap bound the design enforces
        truth = {'theta0': trial.theta0, 'regime': trial.regime, 'horizon': n,
                 'epsilon': spec.implementation.overlap_epsilon(spec.params)}
        (run_dir / 'truth.json').write_text(json.dumps(truth, indent=2), encoding=encoding)
        logging.info(f"Trial of design {spec.design} dumped to {run_dir}")
        return run_dir

    ########################
    # Inference and Audit   #
    ########################

    def overlap_epsilon(self, log_path: Path, epsilon: Optional[float] = None) -> float:
        """
        Overlap threshold for an audit: an explicit value, else the design's
        bound recorded in truth.json beside the log, else the configured one.
        """
        if epsilon is not None:
            return float(epsilon)
        # A dumped trial records its design bound next to the log
        truth_path = Path(log_path).with_name('truth.json')
        if truth_path.exists():
            try:
                truth = json.loads(truth_path.read_text(encoding=self.config.default_encoding))
                recorded = truth.get('epsilon')
            except (OSError, json.JSONDecodeError, AttributeError) as e:
                logging.warning(f"Ignoring unreadable {truth_path}: {e}")
                recorded = None
            if recorded is not None:
                return float(recorded)
        return self.config.epsilon

    def fit(self, log: ExperimentLog, plan: ForwardPlan, mode: str,
            config: NuisanceConfig) -> Tuple[NuisanceFitSet, FitLedger]:
        """
        Raises:
            NuisanceError: On an unknown mode.
        """
        if mode == 'forward':
            return fit_forward(log, plan, config)
        if mode == 'leaky_full':
            return fit_leaky_full(log, plan, config)
        if mode == 'leaky_iid':
            return fit_iid_crossfit(log, plan, config)
        if mode == 'zero':
            return zero_nuisance(), empty_ledger('zero')
        raise NuisanceError(f"Unknown nuisance mode {mode!r}; expected one of {INFER_MODES}")

    def infer(self, log_path: Path, plan_spec: Optional[PlanSpec] = None, mode: str = 'forward',
              nuisance_config: Optional[NuisanceConfig] = None, variant: str = 'sn',
              v_fix: Optional[float] = None, theta0: Optional[float] = None,
              enforce_contract: bool = False, horizon: Optional[int] = None,
              log_format: Optional[str] = None, epsilon: Optional[float] = None,
              name: Optional[str] = None) -> Tuple[InferenceReport, Optional[QvReport], Path]:
        """
        Estimate from a logged experiment and write report.json, scores.csv
        and ledger.jsonl (plus qv.json when theta0 is given).

        Args:
            log_path (Path): JSONL or CSV log.
            plan_spec (Optional[PlanSpec]): Plan to score with; one full block if omitted.
            mode (str): Nuisance mode, one of INFER_MODES.
            nuisance_config (Optional[NuisanceConfig]): Learner settings.
            variant (str): 'sn' or 'fixed_v'.
            v_fix (Optional[float]): Variance constant for 'fixed_v'.
            theta0 (Optional[float]): If given, also emit the quadratic-variation report.
            enforce_contract (bool): Refuse to estimate when an audit check fails.
            horizon (Optional[int]): Declared horizon; the plan's n if omitted.
            epsilon (Optional[float]): Overlap threshold; see overlap_epsilon.

        Raises:
            ContractViolation: If enforce_contract is set and a check fails.
            InferenceError: If variant is 'fixed_v' without v_fix, or n_eff < 2.
            ValidationError: If the log does not load.
        """
        plan_spec = plan_spec or PlanSpec()
        nuisance_config = nuisance_config or NuisanceConfig()

        # Reject an incomplete interval request before reading anything
        if variant not in INFER_VARIANTS:
            raise InferenceError(f"Unknown interval variant {variant!r}; expected one of {INFER_VARIANTS}")
        if variant == 'fixed_v' and v_fix is None:
            raise InferenceError("The fixed_v variant needs a v_fix value")
        # Load the log and build the plan to score with
        encoding = self.config.default_encoding
        log = load_log(log_path, log_format, encoding)
        plan = plan_spec.build(log.n, encoding)

        # Record the run before computing anything
        run_dir = self.run_directory('infer', name)
        self.write_config(run_dir, {
            'log': str(log_path), 'plan_spec': plan_spec.to_dict(), 'plan': plan.to_dict(),
            'mode': mode, 'nuisance': nuisance_config.to_dict(), 'variant': variant,
            'v_fix': v_fix, 'theta0': theta0, 'enforce_contract': enforce_contract,
            'horizon': horizon or plan.n,
        })
        # Fit the nuisances and keep the ledger for a later audit
        fits, ledger = self.fit(log, plan, mode, nuisance_config)
        ledger.save_jsonl(run_dir / 'ledger.jsonl', encoding)

        # Refuse to estimate when the contract fails
        if enforce_contract:
            epsilon = self.overlap_epsilon(log_path, epsilon)
            verdicts = contract_report(log, plan, ledger, epsilon, horizon or plan.n,
                                       self.config.calibration_bins, self.config.calibration_min_count)
            (run_dir / 'audit.json').write_text(verdicts_to_json(verdicts), encoding=encoding)
            if any_failed(verdicts):
                raise ContractViolation("Logging contract failed; no estimate reported", verdicts)

        # Score the scored set and form the interval
        series = score_series(log, plan, fits)
        series.to_csv(run_dir / 'scores.csv', encoding)
        if variant == 'fixed_v':
            report = fixed_v_interval(series, v_fix, self.config.alpha)
        else:
            report = sn_interval(series, self.config.alpha, self.config.critical)
        (run_dir / 'report.json').write_text(report.to_json(), encoding=encoding)

        # The quadratic-variation diagnostic needs the true value
        qv = None
        if theta0 is not None:
            qv = qv_report(series, theta0)
            (run_dir / 'qv.json').write_text(json.dumps(qv.to_dict(), indent=2), encoding=encoding)
        logging.info(f"Inference report: {report.summary()}")
        return report, qv, run_dir

    def audit(self, log_path: Path, ledger_path: Path, plan_spec: Optional[PlanSpec] = None,
              horizon: Optional[int] = None, declared_plan_path: Optional[Path] = None,
              log_format: Optional[str] = None, epsilon: Optional[float] = None,
              name: Optional[str] = None) -> Tuple[List[AuditVerdict], Path]:
        """
        Run the logging contract and write audit.json and calibration.csv.

        Raises:
            AuditError: If the log, ledger or declared plan cannot be read.
        """
        plan_spec = plan_spec or PlanSpec()
        encoding = self.config.default_encoding
        # Any unreadable input is an audit error
        try:
            log = load_log(log_path, log_format, encoding)
            plan = plan_spec.build(log.n, encoding)
            ledger = FitLedger.load_jsonl(ledger_path, encoding)
            declared = load_plan(declared_plan_path, encoding) if declared_plan_path else None
        except (OSError, ValidationError, PlanError, NuisanceError) as e:
            raise AuditError(f"Could not read audit input: {e}") from e
        horizon = horizon or log.n
        epsilon = self.overlap_epsilon(log_path, epsilon)

        run_dir = self.run_directory('audit', name)
        self.write_config(run_dir, {
            'log': str(log_path), 'ledger': str(ledger_path), 'plan_spec': plan_spec.to_dict(),
            'plan': plan.to_dict(), 'horizon': horizon, 'epsilon': epsilon,
            'declared_plan': str(declared_plan_path) if declared_plan_path else None,
        })
        # Run every check, then the calibration diagnostic
        verdicts = contract_report(log, plan, ledger, epsilon, horizon,
                                   self.config.calibration_bins, self.config.calibration_min_count,
                                   declared)
        (run_dir / 'audit.json').write_text(verdicts_to_json(verdicts), encoding=encoding)
        calibration = calibration_bins(log, self.config.calibration_bins, self.config.calibration_min_count)
        calibration.to_frame().to_csv(run_dir / 'calibration.csv', index=False, encoding=encoding)
        logging.info(f"Audit written to {run_dir}")
        return verdicts, run_dir
