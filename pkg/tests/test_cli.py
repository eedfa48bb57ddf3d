import json

import pytest

from app.cli import EXIT_CONFIG, EXIT_CONTRACT, EXIT_INPUT, EXIT_OK, build_parser, main, parse_params
from app.exceptions import ConfigurationError
from app.lab import ReproductionGrid


@pytest.fixture
def run(tmp_path, monkeypatch):
    """Invoke the command line with every output under a temporary base directory."""
    for var in ('SNAIPW_OUTPUT_DIR', 'SNAIPW_LOG_DIR', 'SNAIPW_LOG_FILE'):
        monkeypatch.delenv(var, raising=False)

    def invoke(*argv):
        return main(['--out', str(tmp_path), '--seed', '3', *argv])
    return invoke


@pytest.fixture
def trial_dir(run, tmp_path):
    assert run('--name', 'trial', 'dump', '--design', 'C2', '--n', '400') == EXIT_OK
    return tmp_path / 'out' / 'dump' / 'trial'


# Test cases for parse_params

class TestParseParams:
    """Design overrides are decoded as JSON where possible."""

    valid_test_cases = {
        "number": {"pairs": ["pi=0.7"], "expected": {"pi": 0.7}},
        "list": {"pairs": ["clip=[0.1, 0.9]"], "expected": {"clip": [0.1, 0.9]}},
        "string": {"pairs": ["policy=softmax"], "expected": {"policy": "softmax"}},
        "several": {"pairs": ["k=4", "tau=-1"], "expected": {"k": 4, "tau": -1}},
        "none": {"pairs": None, "expected": {}},
    }

    def test_valid_pairs(self):
        for name, case in self.valid_test_cases.items():
            assert parse_params(case["pairs"]) == case["expected"], f"Failed case: {name}"

    @pytest.mark.parametrize("pair", ["pi", "=0.5"])
    def test_invalid_pairs(self, pair):
        with pytest.raises(ConfigurationError, match="KEY=VALUE"):
            parse_params([pair])


def test_parser_requires_subcommand():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args([])
    assert excinfo.value.code == 2

def test_parser_rejects_unknown_grid():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['reproduce', '--grid', 'Table-2'])

# Test cases for simulate

def test_simulate_prints_table(run, tmp_path, capsys):
    code = run('--name', 'b', 'simulate', '--design', 'B', '--n', '50', '--R', '2', '--methods', 'SN')
    assert code == EXIT_OK
    output = capsys.readouterr().out
    assert 'coverage' in output
    assert (tmp_path / 'out' / 'simulate' / 'b' / 'table.csv').exists()

def test_simulate_with_t_critical(run, tmp_path):
    code = run('--critical', 't', '--name', 't', 'simulate', '--design', 'B', '--n', '40', '--R', '1')
    assert code == EXIT_OK
    config = json.loads((tmp_path / 'out' / 'simulate' / 't' / 'config.json').read_text(encoding='utf-8'))
    assert config['lab']['critical'] == 't'
    assert config['lab']['master_seed'] == 3

def test_simulate_with_histogram(run, tmp_path):
    code = run('--name', 'a', 'simulate', '--design', 'A', '--n', '120', '--R', '2', '--histogram', '3')
    assert code == EXIT_OK
    assert (tmp_path / 'out' / 'simulate' / 'a' / 'histogram.csv').exists()

@pytest.mark.parametrize("argv", [
    ('simulate', '--design', 'Z', '--n', '50'),
    ('simulate', '--design', 'B', '--n', '50', '--param', 'gamma=1'),
    ('simulate', '--design', 'B', '--n', '50', '--param', 'pi'),
    ('simulate', '--design', 'A', '--n', '100', '--methods', 'SN-AIPW'),
    ('--alpha', '1.5', 'simulate', '--design', 'B', '--n', '50'),
])
def test_configuration_errors_exit_two(run, capsys, argv):
    assert run(*argv) == EXIT_CONFIG
    assert 'Error' in capsys.readouterr().err

# Test cases for dump, infer and audit

def test_dump_writes_trial(trial_dir):
    assert (trial_dir / 'log.jsonl').exists()
    assert (trial_dir / 'ledger.jsonl').exists()

def test_infer_reports_interval(run, trial_dir, capsys):
    code = run('infer', '--log', str(trial_dir / 'log.jsonl'), '--plan', str(trial_dir / 'plan.json'),
               '--theta0', '0')
    assert code == EXIT_OK
    output = capsys.readouterr().out
    assert 'theta_hat=' in output
    assert 'Q=' in output

def test_infer_fixed_v_needs_constant(run, trial_dir):
    assert run('infer', '--log', str(trial_dir / 'log.csv'), '--variant', 'fixed_v') == EXIT_CONFIG

def test_infer_contract_violation_exit_three(run, trial_dir, capsys):
    code = run('infer', '--log', str(trial_dir / 'log.jsonl'), '--plan', str(trial_dir / 'plan.json'),
               '--mode', 'leaky_full', '--feature-map', 'rich', '--enforce-contract')
    assert code == EXIT_CONTRACT
    err = capsys.readouterr().err
    assert 'Contract violation' in err
    assert 'predictability' in err

def test_infer_missing_log_exit_four(run, tmp_path):
    assert run('infer', '--log', str(tmp_path / 'missing.jsonl')) == EXIT_INPUT

def test_infer_plan_mismatch_exit_four(run, trial_dir):
    assert run('infer', '--log', str(trial_dir / 'log.jsonl'), '--burn-in', '500') == EXIT_INPUT

def test_infer_conflicting_plan_options_exit_four(run, trial_dir):
    assert run('infer', '--log', str(trial_dir / 'log.jsonl'), '--blocks', '4', '--burn-in', '40') == EXIT_INPUT

def test_audit_clean_trial(run, trial_dir, capsys):
    code = run('audit', '--log', str(trial_dir / 'log.jsonl'), '--ledger', str(trial_dir / 'ledger.jsonl'),
               '--plan', str(trial_dir / 'plan.json'), '--declared-plan', str(trial_dir / 'plan.json'))
    assert code == EXIT_OK
    output = capsys.readouterr().out
    assert output.splitlines()[0].split() == ['check', 'status', 'evidence']

def test_audit_failed_check_exit_three(run, trial_dir):
    code = run('audit', '--log', str(trial_dir / 'log.jsonl'), '--ledger', str(trial_dir / 'ledger.jsonl'),
               '--plan', str(trial_dir / 'plan.json'), '--horizon', '450')
    assert code == EXIT_CONTRACT

def test_audit_leaky_ledger_exit_three(run, trial_dir, tmp_path):
    assert run('--name', 'leaky', 'infer', '--log', str(trial_dir / 'log.jsonl'),
               '--plan', str(trial_dir / 'plan.json'), '--mode', 'leaky_full') == EXIT_OK
    ledger = tmp_path / 'out' / 'infer' / 'leaky' / 'ledger.jsonl'
    code = run('audit', '--log', str(trial_dir / 'log.jsonl'), '--ledger', str(ledger),
               '--plan', str(trial_dir / 'plan.json'))
    assert code == EXIT_CONTRACT

def test_audit_missing_ledger_exit_four(run, trial_dir, tmp_path):
    code = run('audit', '--log', str(trial_dir / 'log.jsonl'), '--ledger', str(tmp_path / 'none.jsonl'))
    assert code == EXIT_INPUT

# Test cases for reproduce

def test_reproduce_variance_grid(run, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr('app.lab.GRIDS', {'A-variance': ReproductionGrid('A-variance', 'A', (120,), histogram=True)})
    assert run('reproduce', '--grid', 'A-variance', '--R', '2') == EXIT_OK
    assert (tmp_path / 'out' / 'reproduce' / 'A-variance' / 'histogram.csv').exists()
    assert 'Results written to' in capsys.readouterr().out

def test_reproduce_by_table_number(run, tmp_path, monkeypatch):
    monkeypatch.setattr('app.lab.GRIDS', {'B': ReproductionGrid('B', 'B', (40,), ('SN',))})
    assert run('reproduce', '--table', '4', '--R', '2') == EXIT_OK
    assert (tmp_path / 'out' / 'reproduce' / 'B' / 'table.csv').exists()

def test_reproduce_by_figure_number(run, tmp_path, monkeypatch):
    monkeypatch.setattr('app.lab.GRIDS', {'A-variance': ReproductionGrid('A-variance', 'A', (120,), histogram=True)})
    assert run('reproduce', '--figure', '1', '--R', '2') == EXIT_OK
    assert (tmp_path / 'out' / 'reproduce' / 'A-variance' / 'histogram.csv').exists()

@pytest.mark.parametrize("argv", [
    ['reproduce', '--table', '9'],
    ['reproduce', '--table', '4', '--grid', 'B'],
])
def test_reproduce_rejects_bad_target(argv):
    with pytest.raises(SystemExit):
        build_parser().parse_args(argv)

# Run-level options after the subcommand

def test_seed_after_subcommand(run, tmp_path):
    code = run('--name', 's', 'simulate', '--design', 'B', '--n', '40', '--R', '1', '--seed', '7')
    assert code == EXIT_OK
    config = json.loads((tmp_path / 'out' / 'simulate' / 's' / 'config.json').read_text(encoding='utf-8'))
    assert config['lab']['master_seed'] == 7

def test_subcommand_keeps_leading_options():
    args = build_parser().parse_args(['--seed', '5', '--workers', '2', 'simulate', '--design', 'B', '--n', '40'])
    assert args.seed == 5
    assert args.workers == 2

def test_audit_ragged_csv_exit_four(run, trial_dir, tmp_path, capsys):
    ragged = tmp_path / 'ragged.csv'
    ragged.write_text("t,x1,a,y,pi\n1,0,1,1,0.5\n2,0.1,0,1.0,0.5,9\n", encoding='utf-8')
    code = run('audit', '--log', str(ragged), '--ledger', str(trial_dir / 'ledger.jsonl'))
    assert code == EXIT_INPUT
    assert 'row 2' in capsys.readouterr().err
