"""
Harness Module
This module runs seeded batches of episodes, aggregates their metrics with standard errors,
and produces the per-category, failure-category, sweep, ablation and failure-indicator
analyses as JSON and CSV files.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from agent import AgentConfig, run_episode
from config import CLASS_NAMES, InputError, RoomShuffleError, RunConfig, apply_preset, preset_names
from run_store import save_run
from search_policy import SearchPolicy, load_policy
from simulator import SimulatorConfig, generate_episode

logger = logging.getLogger(__name__)

METRICS = ('fixed_strict', 'success', 'num_newly_misplaced')

SOLVED = 'solved'
WRONG_OBJECT = 'rearranged-wrong-object'
MISSED_OBJECT = 'missed-an-object'
OUT_OF_TIME = 'ran-out-of-time'
FAILED_REARRANGEMENT = 'failed-to-rearrange-correct-object'
# Highest priority first; an unsuccessful episode takes the first category that applies
FAILURE_CATEGORIES = (WRONG_OBJECT, MISSED_OBJECT, OUT_OF_TIME, FAILED_REARRANGEMENT)

SWEEP_AXES = {'confidence_threshold': 'confidence', 'budget': 'max_goals'}
INDICATORS = ('size', 'displacement', 'nearest_same_class')

# Policies loaded per worker process, keyed by checkpoint path
_policy_cache: Dict[str, SearchPolicy] = {}


@dataclass
class Report:
    config: Dict[str, Any]
    rows: List[dict]
    aggregates: Dict[str, Dict[str, float]]
    precision_recall: List[dict] = field(default_factory=list)
    failures: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'config': self.config,
            'episodes': len(self.rows),
            'aggregates': self.aggregates,
            'precision_recall': self.precision_recall,
            'failures': self.failures,
            'failure_priority': list(FAILURE_CATEGORIES),
            'interval': '68% (one standard error)',
        }

    def write(self, out_dir: str, events: Optional[Sequence[List[dict]]] = None) -> None:
        """Write report.json, episodes.jsonl and, when given, one event log per episode."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'report.json'), 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        with open(os.path.join(out_dir, 'episodes.jsonl'), 'w') as f:
            for row in self.rows:
                f.write(json.dumps(row, sort_keys=True) + '\n')
        if events is not None:
            log_dir = os.path.join(out_dir, 'logs')
            os.makedirs(log_dir, exist_ok=True)
            for row, episode_events in zip(self.rows, events):
                with open(os.path.join(log_dir, f"episode_{row['index']:05d}.jsonl"), 'w') as f:
                    for event in episode_events:
                        f.write(json.dumps(event, sort_keys=True) + '\n')


def simulator_config(config: RunConfig) -> SimulatorConfig:
    return SimulatorConfig(room_size=config.room_size, object_count=config.object_count,
                           shuffle_count=config.shuffle_count,
                           openness_shuffles=config.openness_shuffles)


def _get_policy(checkpoint: Optional[str]) -> Optional[SearchPolicy]:
    if not checkpoint:
        return None
    if checkpoint not in _policy_cache:
        _policy_cache[checkpoint] = load_policy(checkpoint)
    return _policy_cache[checkpoint]


def _init_worker() -> None:
    torch.set_num_threads(1)


def _run_one(payload: Tuple[Dict[str, Any], int]) -> Tuple[int, dict, List[dict]]:
    """Run episode `index` of a batch; seeds are the batch seed plus the index."""
    config_fields, index = payload
    config = RunConfig(**config_fields)
    seed = config.seed + index
    try:
        spec = generate_episode(seed, simulator_config(config))
    except RoomShuffleError as e:
        logger.warning("episode %d could not be generated: %s", seed, e)
        row = {'index': index, 'seed': seed, 'fixed_strict': 0.0, 'success': 0.0,
               'num_newly_misplaced': 0, 'num_initially_misplaced': 0, 'num_fixed': 0,
               'predicted': [], 'ground_truth': [], 'touched': [], 'wrong_objects': [],
               'out_of_time': False, 'indicators': [], 'error': f"{type(e).__name__}: {e}"}
        return index, row, [{'event': 'error', 'message': row['error']}]
    policy = _get_policy(config.checkpoint) if config.search == 'trained' else None
    result = run_episode(spec, AgentConfig.from_run_config(config), policy)
    return index, {'index': index, **result.to_record()}, result.events


def aggregate(rows: Sequence[dict]) -> Dict[str, Dict[str, float]]:
    """Mean and one standard error of every headline metric."""
    df = pd.DataFrame(list(rows), columns=['index', *METRICS])
    out = {}
    for metric in METRICS:
        values = df[metric].astype(float)
        se = float(values.sem()) if len(values) > 1 else 0.0
        out[metric] = {'mean': float(values.mean()) if len(values) else 0.0,
                       'se': 0.0 if math.isnan(se) else se}
    return out


def _binomial(successes: int, total: int) -> Tuple[Optional[float], Optional[float]]:
    if total == 0:
        return None, None
    p = successes / total
    return p, math.sqrt(p * (1.0 - p) / total)


def category_precision_recall(rows: Sequence[dict]) -> List[dict]:
    """
    Per-class precision and recall of the predicted disagreements, with one-SE intervals.

    Precision is the share of predictions matching a truly shuffled object; recall is the
    share of shuffled objects that were predicted. Undefined ratios are None.
    """
    predicted = [p for row in rows for p in row.get('predicted', [])]
    truth = [t for row in rows for t in row.get('ground_truth', [])]
    pred_df = pd.DataFrame(predicted, columns=['class_id', 'tp'])
    truth_df = pd.DataFrame(truth, columns=['class_id', 'detected'])
    pred_counts = pred_df.groupby('class_id')['tp'].agg(['sum', 'count'])
    truth_counts = truth_df.groupby('class_id')['detected'].agg(['sum', 'count'])

    table = []
    for class_id in sorted(set(pred_counts.index) | set(truth_counts.index)):
        tp, n_pred = (int(v) for v in pred_counts.loc[class_id]) if class_id in pred_counts.index else (0, 0)
        hit, n_true = (int(v) for v in truth_counts.loc[class_id]) if class_id in truth_counts.index else (0, 0)
        precision, precision_se = _binomial(tp, n_pred)
        recall, recall_se = _binomial(hit, n_true)
        table.append({
            'class_id': int(class_id),
            'class': CLASS_NAMES[int(class_id)] if 0 <= int(class_id) < len(CLASS_NAMES) else str(class_id),
            'predicted': n_pred,
            'ground_truth': n_true,
            'precision': precision,
            'precision_se': precision_se,
            'recall': recall,
            'recall_se': recall_se,
        })
    return table


def failure_category(row: dict) -> str:
    if row.get('success', 0.0) >= 100.0:
        return SOLVED
    if row.get('wrong_objects'):
        return WRONG_OBJECT
    if any(not t['detected'] for t in row.get('ground_truth', [])):
        return MISSED_OBJECT
    if row.get('out_of_time'):
        return OUT_OF_TIME
    return FAILED_REARRANGEMENT


def categorize_failures(rows: Iterable[dict]) -> Dict[str, int]:
    """Histogram of episodes over solved plus the four failure categories; counts sum to len(rows)."""
    counts = {SOLVED: 0, **{category: 0 for category in FAILURE_CATEGORIES}}
    for row in rows:
        counts[failure_category(row)] += 1
    return counts


def failure_indicators(rows: Sequence[dict], bins: int = 4) -> pd.DataFrame:
    """
    %Fixed of initially misplaced objects binned by object size, shuffle displacement and
    distance to the nearest object of the same class.

    Returns:
        DataFrame with columns indicator, bin_low, bin_high, objects, pct_fixed, se
    """
    objects = pd.DataFrame([ind for row in rows for ind in row.get('indicators', [])],
                           columns=['object_id', 'class_id', *INDICATORS, 'fixed'])
    records = []
    for indicator in INDICATORS:
        values = objects[[indicator, 'fixed']].dropna()
        if values.empty:
            continue
        values = values.astype({indicator: float, 'fixed': float})
        n_bins = max(1, min(bins, values[indicator].nunique()))
        binned = pd.cut(values[indicator], n_bins, include_lowest=True)
        for interval, group in values.groupby(binned, observed=True):
            p, se = _binomial(int(group['fixed'].sum()), len(group))
            records.append({
                'indicator': indicator,
                'bin_low': float(interval.left),
                'bin_high': float(interval.right),
                'objects': len(group),
                'pct_fixed': 100.0 * p,
                'se': 100.0 * se,
            })
    return pd.DataFrame(records, columns=['indicator', 'bin_low', 'bin_high', 'objects', 'pct_fixed', 'se'])


def _report_config(config: RunConfig) -> Dict[str, Any]:
    # Parallelism must not show up in the report
    return config.model_dump(exclude={'jobs'})


def build_report(config: RunConfig, rows: List[dict]) -> Report:
    rows = sorted(rows, key=lambda r: r['index'])
    return Report(_report_config(config), rows, aggregate(rows), category_precision_recall(rows),
                  categorize_failures(rows))


def run_batch(config: RunConfig, out_dir: Optional[str] = None, command: str = 'run') -> Report:
    """
    Run `config.episodes` episodes seeded seed, seed+1, ... and assemble their report.

    Rows are ordered by episode index, so the report does not depend on the number of
    worker processes.
    """
    payloads = [(config.model_dump(), index) for index in range(config.episodes)]
    logger.info("running %d episodes (perception=%s, search=%s) on %d worker(s)",
                config.episodes, config.perception, config.search, config.jobs)
    if config.jobs == 1:
        results = [_run_one(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=config.jobs, initializer=_init_worker) as executor:
            results = list(executor.map(_run_one, payloads))
    results.sort(key=lambda r: r[0])

    report = build_report(config, [row for _, row, _ in results])
    if out_dir:
        report.write(out_dir, [events for _, _, events in results])
        save_run(command, _report_config(config), report.aggregates, len(report.rows), out_dir)
    means = {k: round(v['mean'], 2) for k, v in report.aggregates.items()}
    logger.info("batch finished: %s", means)
    return report


def _summary_row(label_field: str, label: Any, report: Report) -> dict:
    row = {label_field: label}
    for metric, stats in report.aggregates.items():
        row[f'{metric}_mean'] = stats['mean']
        row[f'{metric}_se'] = stats['se']
    return row


def sweep(axis: str, values: Sequence, base: RunConfig, out_dir: Optional[str] = None) -> Tuple[Dict[Any, Report], pd.DataFrame]:
    """
    Re-run the same seeds for each value of one axis (paired design).

    Args:
        axis: 'confidence_threshold' or 'budget' (navigation goals per phase)
        values: Axis values to try
        base: Configuration shared by every run
        out_dir: Where sweep.csv and one report directory per value are written

    Returns:
        (reports by value, sweep table)
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r}; choose from {list(SWEEP_AXES)}")
    if not values:
        raise InputError("sweep needs at least one value")
    reports = {}
    rows = []
    for value in values:
        config = base.with_updates(**{SWEEP_AXES[axis]: value})
        value_dir = os.path.join(out_dir, f"{axis}_{value}") if out_dir else None
        reports[value] = run_batch(config, value_dir, command='sweep')
        rows.append(_summary_row(axis, value, reports[value]))
    table = pd.DataFrame(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        table.to_csv(os.path.join(out_dir, 'sweep.csv'), index=False)
    return reports, table


def paired_difference(rows: Sequence[dict], base_rows: Sequence[dict], metric: str = 'fixed_strict') -> Tuple[float, float]:
    """Mean and SE of per-seed metric differences between two batches run on the same seeds."""
    left = pd.DataFrame(list(rows)).set_index('seed')[metric].astype(float)
    right = pd.DataFrame(list(base_rows)).set_index('seed')[metric].astype(float)
    diff = (left - right).dropna()
    if diff.empty:
        return 0.0, 0.0
    se = float(diff.sem()) if len(diff) > 1 else 0.0
    return float(diff.mean()), 0.0 if math.isnan(se) else se


def ablation(base: RunConfig, out_dir: Optional[str] = None,
             presets: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Run every ablation preset on the seeds of `base` and compare each with the 'base' preset.

    Returns:
        One row per preset with mean and SE of each metric and the paired %Fixed Strict
        difference against 'base'
    """
    presets = list(presets) if presets else preset_names()
    overrides = base.model_dump(exclude={'perception', 'search'})
    reports = {}
    for name in presets:
        config = apply_preset(name, **overrides)
        reports[name] = run_batch(config, os.path.join(out_dir, name) if out_dir else None, command='ablation')

    rows = []
    for name in presets:
        row = _summary_row('preset', name, reports[name])
        if 'base' in reports:
            row['fixed_strict_diff'], row['fixed_strict_diff_se'] = paired_difference(
                reports[name].rows, reports['base'].rows)
        rows.append(row)
    table = pd.DataFrame(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        table.to_csv(os.path.join(out_dir, 'ablation.csv'), index=False)
    return table


def load_rows(path: str) -> List[dict]:
    """Episode rows from an episodes.jsonl file."""
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def write_analysis(rows: Sequence[dict], out_dir: str, bins: int = 4) -> Dict[str, Any]:
    """Recompute the tables of a finished batch and write indicators.csv next to it."""
    os.makedirs(out_dir, exist_ok=True)
    indicators = failure_indicators(rows, bins)
    indicators.to_csv(os.path.join(out_dir, 'indicators.csv'), index=False)
    return {
        'aggregates': aggregate(rows),
        'failures': categorize_failures(rows),
        'precision_recall': category_precision_recall(rows),
        'indicator_bins': int(len(indicators)),
    }
