"""
Experiment orchestration: config -> data -> protocol -> metrics, report,
checkpoints and run records.
"""
import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.db import transaction

from cost_ledger.utils import PHASE_FEDAVG, PHASE_FORK, verify_against_bound
from data_plane.utils import gen_synthetic, load_dataset, partition_archetypes, split_balanced_holdout
from federation.seeding import Purpose, SeedStream
from federation.utils import (
    FederationState,
    run_fedavg,
    run_fork_phase,
    run_merge_consolidate,
)
from learner.utils import forward_eval, init_model

from .checkpoint_utils import CheckpointError, checkpoint, restore

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    'round', 'phase', 'group_count', 'device_id', 'group_id', 'val_loss', 'val_acc',
    'archetype_id', 'archetype_test_acc', 'global_test_acc', 'updates_delta', 'transfers_delta',
)

# An earlier group counts as collapsed once its accuracy falls this far below
# the value it had when its own merge finished
COLLAPSE_MARGIN = 15.0


class OutputError(Exception):
    """A result file could not be written"""


@dataclass(frozen=True)
class MetricsRow:
    """
    One CSV line. Round summaries leave device_id / group_id / archetype_id
    empty and carry means over devices.
    """
    round: int
    phase: str
    group_count: int
    device_id: int = None
    group_id: int = None
    val_loss: float = None
    val_acc: float = None
    archetype_id: int = None
    archetype_test_acc: float = None
    global_test_acc: float = None
    updates_delta: int = 0
    transfers_delta: int = 0

    def as_csv_row(self):
        return [_format_cell(getattr(self, column)) for column in METRICS_COLUMNS]


def _format_cell(value):
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def emit_metrics(rows, path):
    """Write rows under the fixed header; identical rows give identical bytes"""
    rows = list(rows)
    if not rows:
        raise ValueError("no metrics rows to write")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(METRICS_COLUMNS)
            for row in rows:
                writer.writerow(row.as_csv_row())
    except OSError as e:
        raise OutputError(f"{path}: could not write metrics: {e}")
    return path


# ---------------------------------------------------------------------------
# Evaluation-only metrics (use the hidden archetype tag and the test set)
# ---------------------------------------------------------------------------

def group_purity(groups, device_archetypes, num_archetypes):
    """
    Share of devices whose group's majority archetype is their own, plus the
    group x archetype contingency table.
    """
    contingency = {}
    majority = {}
    matched = 0
    total = 0
    for group_id, _, members, _ in groups:
        counts = Counter(device_archetypes[d] for d in members)
        top = min(counts, key=lambda archetype: (-counts[archetype], archetype))
        majority[group_id] = top
        matched += counts[top]
        total += len(members)
        contingency[str(group_id)] = {str(a): counts[a] for a in sorted(counts)}
    purity = 100.0 * matched / total if total else 0.0
    return {
        'group_count': len(majority),
        'purity': purity,
        'majority_archetype': {str(g): a for g, a in majority.items()},
        'contingency': contingency,
        'exact_recovery': (
            len(majority) == num_archetypes
            and matched == total
            and len(set(majority.values())) == num_archetypes
        ),
    }


def oscillation(series):
    """Mean absolute round-to-round change of per-archetype accuracy"""
    values = np.asarray(series, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(values, axis=0))))


class MetricsCollector:
    """on_round callback: builds the CSV rows and the report series"""

    def __init__(self, test_set, specs, shards):
        self.test_set = test_set
        self.archetype_tests = [test_set.subset(test_set.indices_with_labels(spec.label_set)) for spec in specs]
        self.device_archetypes = {i: shard.archetype_id for i, shard in enumerate(shards)}
        self.num_archetypes = len(specs)
        self.rows = []
        self.device_rows = []
        self.archetype_series = defaultdict(list)  # phase -> [per-archetype means per round]
        self.all_series = []  # every round in order, phases concatenated
        self.group_archetypes = {}
        self.merge_series = defaultdict(list)  # group id -> [(round, accuracy)]
        self.merge_newest = []  # (round, id of the most recently merged group)

    def accuracy(self, model, archetype_id=None):
        dataset = self.test_set if archetype_id is None else self.archetype_tests[archetype_id]
        return forward_eval(model, dataset).accuracy

    def begin_merge(self, groups, round_index, majority):
        """Remember which archetype each forked group stands for"""
        self.group_archetypes = {int(g): a for g, a in majority.items()}
        first_id, _, _, first_model = groups[0]
        archetype_id = self.group_archetypes[first_id]
        self.merge_series[first_id].append((round_index, self.accuracy(first_model, archetype_id)))

    def __call__(self, state, record):
        cache = {}

        def accuracy(model, archetype_id=None):
            key = (id(model), archetype_id)
            if key not in cache:
                cache[key] = self.accuracy(model, archetype_id)
            return cache[key]

        entry = record.ledger_entry
        per_archetype = defaultdict(list)
        device_global = []
        for result in record.devices:
            model = state.devices[result.device_id].current_model
            archetype_id = self.device_archetypes[result.device_id]
            archetype_acc = accuracy(model, archetype_id)
            global_acc = accuracy(model)
            per_archetype[archetype_id].append(archetype_acc)
            device_global.append(global_acc)
            self.device_rows.append(MetricsRow(
                record.round, record.phase, record.group_count,
                result.device_id, result.group_id, result.val_loss, result.val_acc,
                archetype_id, archetype_acc, global_acc,
                entry.updates_delta, entry.transfers_delta,
            ))

        archetype_means = [float(np.mean(per_archetype[a])) for a in range(self.num_archetypes)]
        self.archetype_series[record.phase].append(archetype_means)
        self.all_series.append(archetype_means)

        if record.working_model is not None:
            round_global = accuracy(record.working_model)
            self.merge_newest.append((record.round, record.merged_groups[-1]))
            for group_id in record.merged_groups:
                if group_id in self.group_archetypes:
                    self.merge_series[group_id].append(
                        (record.round, accuracy(record.working_model, self.group_archetypes[group_id]))
                    )
        else:
            round_global = float(np.mean(device_global))

        self.rows.append(MetricsRow(
            record.round, record.phase, record.group_count,
            val_loss=float(np.mean([r.val_loss for r in record.devices])),
            val_acc=float(np.mean([r.val_acc for r in record.devices])),
            archetype_test_acc=float(np.mean(archetype_means)),
            global_test_acc=round_global,
            updates_delta=entry.updates_delta,
            transfers_delta=entry.transfers_delta,
        ))

    def _completion_round(self, group_id, series):
        newest_rounds = [r for r, g in self.merge_newest if g == group_id]
        if newest_rounds:
            return max(newest_rounds)
        if self.merge_newest:
            # the base group completes together with the first group folded into it
            first = self.merge_newest[0][1]
            return max(r for r, g in self.merge_newest if g == first)
        return series[0][0]

    def merge_stability(self):
        """Per merged group: accuracy when its merge finished and the worst drop afterwards"""
        stability = {}
        for group_id, series in self.merge_series.items():
            completion_round = self._completion_round(group_id, series)
            completion = dict(series)[completion_round]
            later = [acc for r, acc in series if r > completion_round]
            max_drop = max((completion - acc for acc in later), default=0.0)
            stability[str(group_id)] = {
                'archetype_id': self.group_archetypes.get(group_id),
                'completion_round': completion_round,
                'completion_accuracy': completion,
                'max_drop_after': max_drop,
                'collapsed': max_drop > COLLAPSE_MARGIN,
            }
        return stability

    def oscillation_by_phase(self):
        by_phase = {phase: oscillation(series) for phase, series in self.archetype_series.items()}
        by_phase['overall'] = oscillation(self.all_series)
        return by_phase


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: object
    final_model: object
    ledger: object
    rows: list
    device_rows: list
    report: dict
    post_fork: tuple = None  # (round, groups snapshot) for FedFMC
    final_groups: list = field(default_factory=list)
    final_round: int = 0


def build_data(cfg, seeds):
    """Source dataset, balanced test holdout and device shards"""
    if cfg.dataset == 'synthetic':
        dataset = gen_synthetic(
            cfg.synthetic_classes, cfg.synthetic_feature_dim, cfg.synthetic_per_class,
            cfg.synthetic_separation, seeds.seed(Purpose.SYNTHETIC_DATA),
        )
    else:
        dataset = load_dataset(cfg.data_path, cfg.dataset, labels_path=cfg.labels_path or None)
    test_set, remainder, _ = split_balanced_holdout(dataset, cfg.test_per_class, seeds.seed(Purpose.TEST_SPLIT))
    shards = partition_archetypes(
        remainder, list(cfg.archetypes), cfg.devices_per_archetype, cfg.samples_per_device,
        cfg.validation_fraction, seeds.seed(Purpose.PARTITION),
    )
    return dataset, test_set, shards


def _personalised_report(state, collector, majority):
    report = {}
    for group in state.group_table:
        correct = 0.0
        total = 0
        for device_id in group.members:
            result = forward_eval(group.model, state.devices[device_id].shard.validation)
            correct += result.accuracy * result.num_examples
            total += result.num_examples
        archetype_id = majority[str(group.group_id)]
        report[str(group.group_id)] = {
            'members': list(group.members),
            'validation_accuracy': correct / total,
            'test_accuracy': collector.accuracy(group.model),
            'archetype_id': archetype_id,
            'archetype_test_accuracy': collector.accuracy(group.model, archetype_id),
        }
    return report


def run_experiment(cfg, resume_from=None, workers=1):
    """
    Run FedAvg, or FedFMC (fork then merge), end to end.

    With ``resume_from`` the post-fork group table is restored from a
    checkpoint and only the merge phase runs.
    """
    seeds = SeedStream(cfg.master_seed)
    dataset, test_set, shards = build_data(cfg, seeds)
    layer_dims = [dataset.feature_dim, *cfg.hidden_layers, dataset.num_classes]
    collector = MetricsCollector(test_set, cfg.archetypes, shards)
    device_archetypes = collector.device_archetypes
    train_cfg = cfg.train_config()

    logger.info("=" * 60)
    logger.info(
        f"🚀 {cfg.algorithm} run '{cfg.name}' seed {cfg.master_seed}: N={cfg.num_devices}, "
        f"K={cfg.K}, T={cfg.T}, E={cfg.E}, layers {layer_dims}"
    )
    logger.info("=" * 60)

    report = {
        'name': cfg.name,
        'algorithm': cfg.algorithm,
        'master_seed': cfg.master_seed,
        'config': cfg.as_dict(),
        'layer_dims': layer_dims,
        'num_devices': cfg.num_devices,
        'dataset': {
            'examples': len(dataset),
            'classes': dataset.num_classes,
            'feature_dim': dataset.feature_dim,
            'test_examples': len(test_set),
        },
        'resumed_from': str(resume_from) if resume_from else None,
    }
    post_fork = None

    if resume_from:
        if cfg.algorithm != 'fedfmc':
            raise CheckpointError("only FedFMC runs can resume from a post-fork checkpoint")
        saved = restore(resume_from, expected_dims=layer_dims)
        state = FederationState.from_snapshot(
            shards, saved.groups, saved.round_index, seeds, workers=workers, on_round=collector,
        )
        post_fork = (saved.round_index, list(saved.groups))
        report['cost_check'] = None
    else:
        model = init_model(layer_dims, seeds.seed(Purpose.INIT))
        state = FederationState.initial(shards, model, seeds, workers=workers, on_round=collector)
        if cfg.algorithm == 'fedavg':
            final_model = run_fedavg(state, cfg.T, cfg.K, train_cfg)
        else:
            run_fork_phase(state, cfg.T, cfg.K, train_cfg, cfg.fork_policy())
            post_fork = (state.round, state.group_table.snapshot())

        phase = PHASE_FEDAVG if cfg.algorithm == 'fedavg' else PHASE_FORK
        verification = verify_against_bound(
            state.ledger, cfg.T, cfg.K, cfg.num_devices, local_epochs=cfg.E, phases=(phase,),
        )
        report['cost_check'] = verification.as_dict()
        report['cost_check']['bound_applies'] = cfg.algorithm == 'fedavg' or cfg.fork_policy().is_default_schedule
        report['eq2_updates_equal'] = verification.updates_equal

    if cfg.algorithm == 'fedfmc':
        round_index, groups = post_fork
        purity = group_purity(groups, device_archetypes, len(cfg.archetypes))
        report['fork'] = purity
        logger.info(
            f"Fork result: {purity['group_count']} groups, purity {purity['purity']:.1f}%, "
            f"contingency {purity['contingency']}"
        )
        if cfg.stop_after_fork:
            final_model = None
            report['personalised'] = _personalised_report(state, collector, purity['majority_archetype'])
        else:
            collector.begin_merge(groups, round_index, purity['majority_archetype'])
            final_model = run_merge_consolidate(state, train_cfg, cfg.merge_policy())
            stability = collector.merge_stability()
            report['merge_stability'] = stability
            report['earlier_group_collapsed'] = any(entry['collapsed'] for entry in stability.values())

    if final_model is not None:
        report['final_test_accuracy'] = {
            'global': collector.accuracy(final_model),
            'per_archetype': [collector.accuracy(final_model, a) for a in range(len(cfg.archetypes))],
        }
    report['oscillation'] = collector.oscillation_by_phase()
    report['ledger'] = state.ledger.summary()
    report['rounds'] = state.round

    logger.info(f"✅ Run finished after {state.round} rounds: {report.get('final_test_accuracy')}")
    return ExperimentResult(
        config=cfg,
        final_model=final_model,
        ledger=state.ledger,
        rows=collector.rows,
        device_rows=collector.device_rows,
        report=report,
        post_fork=post_fork,
        final_groups=state.group_table.snapshot(),
        final_round=state.round,
    )


def write_outputs(result, out_dir):
    """metrics.csv, devices.csv, report.json and the .fmc checkpoints"""
    out_dir = Path(out_dir)
    written = {}
    if result.rows:
        written['metrics'] = emit_metrics(result.rows, out_dir / 'metrics.csv')
        written['devices'] = emit_metrics(result.device_rows, out_dir / 'devices.csv')
    report_path = out_dir / 'report.json'
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(result.report, indent=2) + '\n', encoding='utf-8')
    except OSError as e:
        raise OutputError(f"{report_path}: could not write report: {e}")
    written['report'] = report_path

    if result.post_fork is not None and result.config.algorithm == 'fedfmc' and not result.report.get('resumed_from'):
        round_index, groups = result.post_fork
        written['post_fork'] = checkpoint(groups[0][3], groups, out_dir / 'post_fork.fmc', round_index=round_index)
    if result.final_model is not None:
        written['final_model'] = checkpoint(
            result.final_model, result.final_groups, out_dir / 'final_model.fmc', round_index=result.final_round,
        )
    return written


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

def _metric_kwargs(row):
    return {column: getattr(row, column) for column in METRICS_COLUMNS}


@transaction.atomic
def record_run(result, output_dir='', duration_seconds=None):
    """Store a finished run and its metric rows"""
    from .models import ExperimentRun, RoundMetric

    report = result.report
    final = report.get('final_test_accuracy') or {}
    cost_check = report.get('cost_check') or {}
    fork = report.get('fork') or {}
    run = ExperimentRun.objects.create(
        name=result.config.name,
        algorithm=result.config.algorithm,
        master_seed=result.config.master_seed,
        status=ExperimentRun.STATUS_COMPLETED,
        config=result.config.as_dict(),
        report=report,
        output_dir=str(output_dir or ''),
        rounds=result.final_round,
        final_group_count=fork.get('group_count', 1 if result.config.algorithm == 'fedavg' else None),
        final_test_accuracy=final.get('global'),
        total_updates=result.ledger.updates,
        total_transfers=result.ledger.transfers,
        cost_check_passed=cost_check.get('passed'),
        duration_seconds=duration_seconds,
    )
    RoundMetric.objects.bulk_create(
        [RoundMetric(run=run, **_metric_kwargs(row)) for row in result.rows + result.device_rows]
    )
    logger.info(f"Recorded run #{run.id} ({len(result.rows)} rounds)")
    return run


def record_failed_run(cfg, error):
    from .models import ExperimentRun

    return ExperimentRun.objects.create(
        name=cfg.name,
        algorithm=cfg.algorithm,
        master_seed=cfg.master_seed,
        status=ExperimentRun.STATUS_FAILED,
        config=cfg.as_dict(),
        report={},
        error_message=str(error),
    )
