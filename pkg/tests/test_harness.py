"""Batch aggregation, failure analysis and batch runner checks."""
import json
import math

import pytest

from agent import AgentConfig, collect_snapshots
from config import InputError, apply_preset, build_run_config
from harness import (
    FAILED_REARRANGEMENT, MISSED_OBJECT, OUT_OF_TIME, SOLVED, WRONG_OBJECT, ablation, aggregate,
    build_report, categorize_failures, category_precision_recall, failure_category, failure_indicators,
    load_rows, paired_difference, run_batch, sweep, write_analysis,
)
from search_policy import MapSnapshotDataset, save_policy, train_policy, write_snapshot_dataset
from simulator import SimulatorConfig, generate_episode


# ── Helpers ──────────────────────────────────────────────────────────────

def _row(index=0, fixed_strict=0.0, success=0.0, newly=0, **extra) -> dict:
    row = {'index': index, 'seed': index, 'fixed_strict': fixed_strict, 'success': success,
           'num_newly_misplaced': newly, 'predicted': [], 'ground_truth': [], 'touched': [],
           'wrong_objects': [], 'out_of_time': False, 'indicators': [], 'error': None}
    row.update(extra)
    return row


def _truth(class_id, detected) -> dict:
    return {'class_id': class_id, 'object_id': 0, 'kind': 'position', 'detected': detected}


def _indicator(size, displacement, fixed, nearest=None) -> dict:
    return {'object_id': 0, 'class_id': 0, 'size': size, 'displacement': displacement,
            'nearest_same_class': nearest, 'fixed': fixed}


@pytest.fixture
def tiny_config():
    return build_run_config(episodes=2, seed=10, perception='gt', search='uniform', max_goals=1,
                            mapping_steps=30, resolution_steps=30, room_size=3.2, object_count=3,
                            shuffle_count=1)


@pytest.fixture(autouse=True)
def _local_database(monkeypatch):
    monkeypatch.delenv('DATABASE_URL', raising=False)


# ── Aggregation ──────────────────────────────────────────────────────────

class TestAggregate:

    def test_mean_and_standard_error(self):
        stats = aggregate([_row(0, 100.0), _row(1, 0.0), _row(2, 50.0)])
        assert stats['fixed_strict']['mean'] == pytest.approx(50.0)
        assert stats['fixed_strict']['se'] == pytest.approx(50.0 / math.sqrt(3))

    def test_single_episode_has_zero_error(self):
        stats = aggregate([_row(0, 100.0, 100.0)])
        assert stats['success'] == {'mean': 100.0, 'se': 0.0}

    def test_no_episodes(self):
        assert aggregate([])['fixed_strict'] == {'mean': 0.0, 'se': 0.0}


class TestPrecisionRecall:

    def test_ratios_and_binomial_errors(self):
        rows = [_row(0, predicted=[{'class_id': 1, 'kind': 'position', 'tp': True},
                                   {'class_id': 1, 'kind': 'position', 'tp': False}],
                     ground_truth=[_truth(1, True)]),
                _row(1, predicted=[{'class_id': 1, 'kind': 'position', 'tp': True}],
                     ground_truth=[_truth(1, True), _truth(1, False)])]
        (entry,) = category_precision_recall(rows)
        assert entry['class'] == 'bowl'
        assert entry['precision'] == pytest.approx(2 / 3)
        assert entry['precision_se'] == pytest.approx(math.sqrt(2 / 27))
        assert entry['recall'] == pytest.approx(2 / 3)

    def test_undefined_ratios_are_none(self):
        rows = [_row(0, predicted=[{'class_id': 2, 'kind': 'position', 'tp': False}],
                     ground_truth=[_truth(3, False)])]
        table = {entry['class_id']: entry for entry in category_precision_recall(rows)}
        assert table[2]['recall'] is None and table[2]['precision'] == 0.0
        assert table[3]['precision'] is None and table[3]['recall'] == 0.0

    def test_empty_batch(self):
        assert category_precision_recall([_row()]) == []


# ── Failure analysis ─────────────────────────────────────────────────────

class TestFailureCategories:

    def test_each_category(self):
        assert failure_category(_row(success=100.0, fixed_strict=100.0)) == SOLVED
        assert failure_category(_row(wrong_objects=[3])) == WRONG_OBJECT
        assert failure_category(_row(ground_truth=[_truth(0, False)])) == MISSED_OBJECT
        assert failure_category(_row(ground_truth=[_truth(0, True)], out_of_time=True)) == OUT_OF_TIME
        assert failure_category(_row(ground_truth=[_truth(0, True)])) == FAILED_REARRANGEMENT

    def test_priority_order(self):
        row = _row(wrong_objects=[1], ground_truth=[_truth(0, False)], out_of_time=True)
        assert failure_category(row) == WRONG_OBJECT
        row = _row(ground_truth=[_truth(0, False)], out_of_time=True)
        assert failure_category(row) == MISSED_OBJECT

    def test_counts_partition_the_batch(self):
        rows = [_row(0, 100.0, 100.0), _row(1, wrong_objects=[2]), _row(2, out_of_time=True),
                _row(3), _row(4, ground_truth=[_truth(1, False)])]
        counts = categorize_failures(rows)
        assert sum(counts.values()) == len(rows)
        assert counts == {SOLVED: 1, WRONG_OBJECT: 1, MISSED_OBJECT: 1, OUT_OF_TIME: 1, FAILED_REARRANGEMENT: 1}


class TestFailureIndicators:

    def test_binned_fix_rates(self):
        rows = [_row(0, indicators=[_indicator(1.0, 0.5, True), _indicator(1.0, 0.5, False)]),
                _row(1, indicators=[_indicator(2.0, 0.5, True), _indicator(2.0, 0.5, True)])]
        table = failure_indicators(rows, bins=2)
        size = table[table['indicator'] == 'size'].sort_values('bin_low')
        assert size['pct_fixed'].tolist() == pytest.approx([50.0, 100.0])
        assert size['objects'].tolist() == [2, 2]
        displacement = table[table['indicator'] == 'displacement']
        assert displacement['pct_fixed'].tolist() == pytest.approx([75.0])
        # No object had a same-class neighbour
        assert (table['indicator'] == 'nearest_same_class').sum() == 0

    def test_no_objects(self):
        table = failure_indicators([_row()])
        assert table.empty
        assert list(table.columns) == ['indicator', 'bin_low', 'bin_high', 'objects', 'pct_fixed', 'se']


class TestPairedDifference:

    def test_matches_on_seed(self):
        rows = [_row(0, 100.0), _row(1, 50.0), _row(2, 0.0)]
        base = [_row(2, 0.0), _row(0, 50.0), _row(1, 50.0)]
        mean, se = paired_difference(rows, base)
        assert mean == pytest.approx(50.0 / 3)
        assert se == pytest.approx(50.0 / 3)


# ── Reports ──────────────────────────────────────────────────────────────

class TestReports:

    def test_report_files(self, tmp_path, tiny_config):
        rows = [_row(1, 100.0, 100.0), _row(0, 0.0, wrong_objects=[4])]
        report = build_report(tiny_config, rows)
        assert [r['index'] for r in report.rows] == [0, 1]
        report.write(str(tmp_path), [[{'event': 'a'}], [{'event': 'b'}]])

        written = json.loads((tmp_path / 'report.json').read_text())
        assert written['episodes'] == 2
        assert 'jobs' not in written['config']
        assert written['failures'][SOLVED] == 1
        assert len(load_rows(str(tmp_path / 'episodes.jsonl'))) == 2
        assert json.loads((tmp_path / 'logs' / 'episode_00001.jsonl').read_text()) == {'event': 'b'}

    def test_write_analysis(self, tmp_path):
        rows = [_row(0, indicators=[_indicator(1.0, 0.5, True)])]
        analysis = write_analysis(rows, str(tmp_path))
        assert (tmp_path / 'indicators.csv').exists()
        assert analysis['failures'][FAILED_REARRANGEMENT] == 1
        assert analysis['indicator_bins'] == 2

    def test_sweep_rejects_bad_input(self, tiny_config):
        with pytest.raises(InputError):
            sweep('speed', [1, 2], tiny_config)
        with pytest.raises(InputError):
            sweep('budget', [], tiny_config)


@pytest.mark.slow
class TestRunBatch:

    def test_batch_writes_report_and_ledger(self, tmp_path, tiny_config):
        report = run_batch(tiny_config, str(tmp_path))
        assert [r['seed'] for r in report.rows] == [10, 11]
        assert (tmp_path / 'report.json').exists()
        assert len((tmp_path / 'episodes.jsonl').read_text().splitlines()) == 2
        assert (tmp_path / 'logs' / 'episode_00000.jsonl').exists()
        assert (tmp_path / 'runs.sqlite').exists()

    def test_worker_count_does_not_change_results(self, tiny_config):
        sequential = run_batch(tiny_config)
        parallel = run_batch(tiny_config.with_updates(jobs=2))
        assert sequential.rows == parallel.rows
        assert sequential.to_dict() == parallel.to_dict()

    def test_written_files_are_byte_identical_across_runs_and_workers(self, tmp_path, tiny_config):
        runs = {'first': tiny_config, 'again': tiny_config, 'parallel': tiny_config.with_updates(jobs=8)}
        for name, config in runs.items():
            run_batch(config, str(tmp_path / name))
        for filename in ('report.json', 'episodes.jsonl'):
            expected = (tmp_path / 'first' / filename).read_bytes()
            assert (tmp_path / 'again' / filename).read_bytes() == expected
            assert (tmp_path / 'parallel' / filename).read_bytes() == expected

    def test_budget_sweep_is_paired(self, tmp_path, tiny_config):
        reports, table = sweep('budget', [0, 1], tiny_config.with_updates(episodes=1), str(tmp_path))
        assert list(table['budget']) == [0, 1]
        assert reports[0].rows[0]['seed'] == reports[1].rows[0]['seed']
        assert (tmp_path / 'sweep.csv').exists()

    def test_ablation_runs_presets_on_shared_seeds(self, tmp_path, tiny_config):
        table = ablation(tiny_config.with_updates(episodes=1), str(tmp_path), ['no_semantic_search', 'gt_both'])
        assert list(table['preset']) == ['no_semantic_search', 'gt_both']
        assert (tmp_path / 'ablation.csv').exists()
        assert (tmp_path / 'gt_both' / 'report.json').exists()
        # Without the base preset there is nothing to pair against
        assert 'fixed_strict_diff' not in table.columns


# ── Trends ───────────────────────────────────────────────────────────────

TREND_ROOM = {'room_size': 4.8, 'object_count': 4, 'shuffle_count': 2}


def _not_below(rows, base_rows, metric='fixed_strict', band=2.0) -> bool:
    """Paired mean difference is not negative beyond `band` standard errors."""
    mean, se = paired_difference(rows, base_rows, metric)
    return mean + band * se >= 0.0


@pytest.fixture(scope='module')
def trained_checkpoint(tmp_path_factory):
    """Search policy fitted to snapshots of training rooms whose seeds the trend batches never use."""
    root = tmp_path_factory.mktemp('policy')
    agent_config = AgentConfig(perception='gt', search='uniform', max_goals=5, mapping_steps=200)
    sim_config = SimulatorConfig(**TREND_ROOM)
    size = 0
    for seed in range(1000, 1012):
        pairs = []
        collect_snapshots(generate_episode(seed, sim_config), agent_config, 10, lambda m, e: pairs.append((m, e)))
        size = write_snapshot_dataset(str(root / 'maps'), pairs, start_index=size)
    policy, _ = train_policy(MapSnapshotDataset(str(root / 'maps')), epochs=10, seed=0)
    path = str(root / 'policy.spol')
    save_policy(policy, path)
    return path


@pytest.fixture
def trend_config():
    return build_run_config(episodes=10, seed=0, max_goals=3, mapping_steps=150, resolution_steps=250,
                            jobs=4, **TREND_ROOM)


@pytest.mark.slow
class TestTrends:

    def test_oracle_pipeline_ceiling(self):
        config = apply_preset('gt_both', episodes=20, seed=0, room_size=4.8, object_count=2, shuffle_count=2,
                              jobs=4)
        report = run_batch(config)
        solved = sum(row['success'] == 100.0 for row in report.rows)
        assert solved >= 19
        assert report.failures[SOLVED] == solved

    def test_ablation_ordering(self, tmp_path, trend_config, trained_checkpoint):
        order = ['base', 'gt_search', 'gt_segmentation', 'gt_both']
        table = ablation(trend_config.with_updates(checkpoint=trained_checkpoint), str(tmp_path), order)
        assert list(table['preset']) == order
        rows = {name: load_rows(str(tmp_path / name / 'episodes.jsonl')) for name in order}
        for lower, higher in zip(order, order[1:]):
            assert _not_below(rows[higher], rows[lower]), f"{higher} fell below {lower}"

    def test_semantic_search_is_not_worse_than_uniform(self, trend_config, trained_checkpoint):
        tight = trend_config.with_updates(max_goals=3)
        uniform = run_batch(tight.with_updates(search='uniform'))
        trained = run_batch(tight.with_updates(search='trained', checkpoint=trained_checkpoint))
        oracle = run_batch(tight.with_updates(search='gt'))
        assert _not_below(trained.rows, uniform.rows)
        assert _not_below(oracle.rows, uniform.rows)

    def test_confidence_threshold_reduces_new_misplacements(self, trend_config):
        values = [0.0, 0.3, 0.6, 0.9]
        reports, table = sweep('confidence_threshold', values,
                               trend_config.with_updates(perception='heavy', search='uniform'))
        assert list(table['confidence_threshold']) == values
        for low, high in zip(values, values[1:]):
            # Raising the threshold must not add misplacements beyond the noise band
            assert _not_below(reports[low].rows, reports[high].rows, 'num_newly_misplaced')

    def test_trained_search_is_stable_across_budgets(self, trend_config, trained_checkpoint):
        config = trend_config.with_updates(search='trained', checkpoint=trained_checkpoint, mapping_steps=300)
        reports, _ = sweep('budget', [5, 20], config)
        assert _not_below(reports[5].rows, reports[20].rows)
