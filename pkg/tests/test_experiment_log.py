import json

import numpy as np
import pytest

from app.exceptions import PlanError, ValidationError
from app.experiment_log import (ExperimentLog, ForwardPlan, UnitRecord, load_log, load_plan,
                                make_block_plan, make_burnin_plan, make_forward_plan, make_full_plan,
                                save_log, save_plan)


def _write_jsonl(path, rows):
    path.write_text('\n'.join(json.dumps(row) for row in rows) + '\n', encoding='utf-8')
    return path


# Test cases for UnitRecord and ExperimentLog

def test_unit_record_validates_fields():
    record = UnitRecord(t=1, x=[0.5, "1"], a="1", y="2.0", pi=0.5)
    assert record.x == (0.5, 1.0)
    assert record.a == 1
    assert record.y == 2.0

def test_unit_record_rejects_boundary_propensity():
    with pytest.raises(ValidationError, match="propensity out of open interval"):
        UnitRecord(t=1, x=(), a=1, y=0.0, pi=1.0)

def test_log_is_read_only(small_log):
    with pytest.raises(ValueError):
        small_log.y[0] = 10.0
    assert small_log.n == 5
    assert small_log.p == 1
    assert list(small_log.t) == [1, 2, 3, 4, 5]

def test_log_copies_inputs():
    y = np.array([1.0, 2.0])
    log = ExperimentLog(x=np.zeros((2, 1)), a=np.array([0, 1]), y=y, pi=np.array([0.5, 0.5]))
    y[0] = 99.0
    assert log.y[0] == 1.0

def test_log_without_covariates():
    log = ExperimentLog(x=[], a=[1, 0], y=[1.0, 2.0], pi=[0.5, 0.5])
    assert log.x.shape == (2, 0)

@pytest.mark.parametrize("field, columns, message", [
    ('a', {'a': [0, 2]}, "Non-binary treatment"),
    ('pi', {'pi': [0.5, 0.0]}, "propensity out of open interval"),
    ('y', {'y': [1.0, np.nan]}, "Non-finite value"),
])
def test_log_rejects_invalid_columns(field, columns, message):
    data = {'x': np.zeros((2, 1)), 'a': [0, 1], 'y': [1.0, 2.0], 'pi': [0.5, 0.5]}
    data.update(columns)
    with pytest.raises(ValidationError, match=message) as exc_info:
        ExperimentLog(**data)
    assert exc_info.value.row == 2
    assert exc_info.value.field == field

def test_log_rejects_unequal_lengths():
    with pytest.raises(ValidationError, match="equal length"):
        ExperimentLog(x=np.zeros((3, 1)), a=[0, 1], y=[1.0, 2.0], pi=[0.5, 0.5])

def test_record_view(small_log):
    record = small_log.record(3)
    assert record == UnitRecord(t=3, x=(2.0,), a=1, y=3.0, pi=0.8)
    assert len(small_log.records) == 5
    with pytest.raises(IndexError):
        small_log.record(6)

def test_with_propensities_leaves_original(small_log):
    relogged = small_log.with_propensities(np.full(5, 0.5))
    assert np.all(relogged.pi == 0.5)
    assert small_log.pi[2] == 0.8
    assert np.array_equal(relogged.a, small_log.a)

def test_from_records_rejects_dimension_change():
    records = [UnitRecord(1, (0.0,), 1, 1.0, 0.5), UnitRecord(2, (0.0, 1.0), 0, 1.0, 0.5)]
    with pytest.raises(ValidationError, match="inconsistent covariate dimension") as exc_info:
        ExperimentLog.from_records(records)
    assert exc_info.value.row == 2

# Test cases for load_log

def test_load_minimal_jsonl(tmp_path):
    path = _write_jsonl(tmp_path / 'log.jsonl', [{'t': 1, 'x': [0.0], 'a': 1, 'y': 2.0, 'pi': 0.5}])
    log = load_log(path)
    assert log.n == 1
    assert log.p == 1

def test_load_rejects_pi_one(tmp_path):
    path = _write_jsonl(tmp_path / 'log.jsonl', [{'t': 1, 'x': [0.0], 'a': 1, 'y': 2.0, 'pi': 1.0}])
    with pytest.raises(ValidationError, match="propensity out of open interval"):
        load_log(path)

def test_load_csv_rejects_disorder(tmp_path):
    path = tmp_path / 'log.csv'
    path.write_text("t,x1,a,y,pi\n1,0,1,1,0.5\n3,0,0,1,0.5\n2,0,1,1,0.5\n", encoding='utf-8')
    with pytest.raises(ValidationError, match=r"time index gap/disorder \(row 2"):
        load_log(path)

def test_load_jsonl_missing_field(tmp_path):
    path = _write_jsonl(tmp_path / 'log.jsonl', [{'t': 1, 'x': [0.0], 'a': 1, 'pi': 0.5}])
    with pytest.raises(ValidationError, match="Missing field") as exc_info:
        load_log(path)
    assert exc_info.value.field == 'y'

def test_load_jsonl_malformed_line(tmp_path):
    path = tmp_path / 'log.jsonl'
    path.write_text('{"t": 1, "x": [0.0], "a": 1, "y": 2.0, "pi": 0.5}\n{"t": 2,\n', encoding='utf-8')
    with pytest.raises(ValidationError, match="Malformed JSON") as exc_info:
        load_log(path)
    assert exc_info.value.row == 2

def test_load_csv_ragged_row(tmp_path):
    path = tmp_path / 'log.csv'
    path.write_text("t,x1,a,y,pi\n1,0,1,1,0.5\n2,0.1,0,1.0,0.5,9\n", encoding='utf-8')
    with pytest.raises(ValidationError, match="Malformed CSV row") as exc_info:
        load_log(path)
    assert exc_info.value.row == 2

def test_load_csv_empty_file(tmp_path):
    path = tmp_path / 'log.csv'
    path.write_text("", encoding='utf-8')
    with pytest.raises(ValidationError, match="CSV log is empty"):
        load_log(path)

def test_load_csv_bad_header(tmp_path):
    path = tmp_path / 'log.csv'
    path.write_text("t,z1,a,y,pi\n1,0,1,1,0.5\n", encoding='utf-8')
    with pytest.raises(ValidationError, match="Covariate columns"):
        load_log(path)

def test_load_unknown_format(tmp_path):
    with pytest.raises(ValidationError, match="Unsupported log format"):
        load_log(tmp_path / 'log.parquet')

def test_load_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="Log file not found"):
        load_log(tmp_path / 'absent.jsonl')

@pytest.mark.parametrize("suffix", ['jsonl', 'csv'])
def test_saved_log_reloads_bit_exactly(tmp_path, seeded_log, suffix):
    path = save_log(seeded_log, tmp_path / f'log.{suffix}')
    assert load_log(path) == seeded_log

def test_loading_does_not_modify_file(tmp_path, small_log):
    path = save_log(small_log, tmp_path / 'log.jsonl')
    before = path.read_bytes()
    load_log(path)
    assert path.read_bytes() == before

# Test cases for forward plans

class TestMakeForwardPlan:
    """Block partitions of make_forward_plan."""

    cases = {
        "even_split": {"n": 10, "k": 5, "bounds": (0, 2, 4, 6, 8, 10), "n_eff": 8},
        "remainder_to_early_blocks": {"n": 11, "k": 5, "bounds": (0, 3, 5, 7, 9, 11), "n_eff": 8},
        "leakage_design_grid": {"n": 250, "k": 5, "bounds": (0, 50, 100, 150, 200, 250), "n_eff": 200},
    }

    def test_partitions(self):
        for name, case in self.cases.items():
            plan = make_forward_plan(case["n"], case["k"])
            assert plan.block_bounds == case["bounds"], f"Failed case: {name}"
            assert plan.n_eff == case["n_eff"], f"Failed case: {name}"
            assert plan.scored == tuple(range(case["bounds"][1] + 1, case["n"] + 1))

    def test_even_split_scores_three_to_ten(self):
        assert make_forward_plan(10, 5).scored == tuple(range(3, 11))

    @pytest.mark.parametrize("n, k, message", [
        (10, 1, "at least 2 blocks"),
        (3, 5, "smaller than block count"),
    ])
    def test_invalid(self, n, k, message):
        with pytest.raises(PlanError, match=message):
            make_forward_plan(n, k)


class TestMakeBurninPlan:
    """Two-block plans with a burn-in."""

    @pytest.mark.parametrize("n, n0, n_eff", [(250, 50, 200), (1000, 100, 900), (5, 4, 1)])
    def test_n_eff(self, n, n0, n_eff):
        plan = make_burnin_plan(n, n0)
        assert plan.n_eff == n_eff
        assert plan.k == 2
        assert plan.scored[0] == n0 + 1

    @pytest.mark.parametrize("n, n0", [(10, 1), (10, 10), (10, 12)])
    def test_invalid(self, n, n0):
        with pytest.raises(PlanError):
            make_burnin_plan(n, n0)


def test_full_plan_scores_everything():
    plan = make_full_plan(4)
    assert plan.k == 1
    assert plan.scored == (1, 2, 3, 4)
    with pytest.raises(PlanError):
        make_full_plan(0)

def test_block_plan_last_block_shorter():
    plan = make_block_plan(250, 100, 100)
    assert plan.block_bounds == (0, 100, 200, 250)
    assert plan.n_eff == 150
    assert plan.block(3) == range(201, 251)

@pytest.mark.parametrize("n, block_size, n0", [(100, 0, 10), (100, 10, 1), (100, 10, 100)])
def test_block_plan_invalid(n, block_size, n0):
    with pytest.raises(PlanError):
        make_block_plan(n, block_size, n0)

def test_block_lookup():
    plan = make_forward_plan(10, 5)
    assert plan.block(2) == range(3, 5)
    assert plan.block_of(1) == 1
    assert plan.block_of(2) == 1
    assert plan.block_of(3) == 2
    assert plan.block_of(10) == 5
    assert list(plan.block_ids(np.array([1, 2, 3, 10]))) == [1, 1, 2, 5]
    assert plan.scored_blocks == [2, 3, 4, 5]
    with pytest.raises(PlanError):
        plan.block(6)
    with pytest.raises(PlanError):
        plan.block_of(11)

@pytest.mark.parametrize("bounds, scored", [
    ((0, 5), (1, 7)),
    ((0, 3, 3, 5), (4, 5)),
    ((1, 5), (2,)),
    ((0, 5), (3, 2)),
])
def test_plan_rejects_invalid_structure(bounds, scored):
    with pytest.raises(PlanError):
        ForwardPlan(n=5, block_bounds=bounds, scored=scored)

def test_plan_file_round_trip(tmp_path):
    plan = make_block_plan(250, 100, 100)
    assert load_plan(save_plan(plan, tmp_path / 'plan.json')) == plan

def test_load_plan_errors(tmp_path):
    with pytest.raises(PlanError, match="Could not read plan"):
        load_plan(tmp_path / 'missing.json')
    path = tmp_path / 'bad.json'
    path.write_text('{"n": 5}', encoding='utf-8')
    with pytest.raises(PlanError, match="Invalid plan data"):
        load_plan(path)
