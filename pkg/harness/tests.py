"""
Test cases for the experiment harness: config parsing, presets, checkpoints,
metrics output, end-to-end runs and the management commands
"""
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings, tag

from cost_ledger.utils import PHASE_FEDAVG, PHASE_FORK, PHASE_MERGE
from learner.utils import ModelParams, init_model

from .checkpoint_utils import MAGIC, CheckpointError, checkpoint, restore
from .config_utils import (
    ConfigError,
    config_from_mapping,
    format_archetypes,
    list_presets,
    parse_archetypes,
    parse_config,
    resolve_config,
)
from .models import ExperimentRun, RoundMetric
from .utils import (
    METRICS_COLUMNS,
    MetricsRow,
    OutputError,
    emit_metrics,
    group_purity,
    oscillation,
    record_run,
    run_experiment,
    write_outputs,
)

SMALL_CONFIG = """\
# tiny three-archetype run
algorithm = fedfmc
dataset = synthetic
synthetic_classes = 3
synthetic_feature_dim = 4
synthetic_per_class = 60
archetypes = 0; 1; 2
devices_per_archetype = 2
samples_per_device = 20
validation_fraction = 0.25
test_per_class = 10

T = 12
K = 4
hidden_layers = 8
max_rounds_per_group = 3
window = 2
"""

SMALL_DIMS = [4, 8, 3]


def small_mapping():
    raw = {}
    for line in SMALL_CONFIG.splitlines():
        if '=' in line and not line.startswith('#'):
            key, _, value = line.partition('=')
            raw[key.strip()] = value.strip()
    return raw


def small_config(**overrides):
    raw = small_mapping()
    raw.update({key: str(value).lower() if isinstance(value, bool) else str(value) for key, value in overrides.items()})
    return config_from_mapping(raw, name='small')


def write_config(directory, text, name='small.cfg'):
    path = Path(directory) / name
    path.write_text(text, encoding='utf-8')
    return path


def three_group_snapshot(seed=0):
    """One group per archetype; shards are archetype-major, two devices each"""
    return [
        (0, 0, (0, 1), init_model(SMALL_DIMS, seed=seed)),
        (1, 6, (2, 3), init_model(SMALL_DIMS, seed=seed + 1)),
        (2, 6, (4, 5), init_model(SMALL_DIMS, seed=seed + 2)),
    ]


class ConfigParsingTestCase(SimpleTestCase):
    """Test cases for config files"""

    def test_parses_values_and_defaults(self):
        """Test a config file is parsed with every unset key defaulted"""
        with tempfile.TemporaryDirectory() as tmp:
            cfg = parse_config(write_config(tmp, SMALL_CONFIG))
        self.assertEqual(cfg.name, 'small')
        self.assertEqual(cfg.algorithm, 'fedfmc')
        self.assertEqual([set(spec.label_set) for spec in cfg.archetypes], [{0}, {1}, {2}])
        self.assertEqual(cfg.hidden_layers, (8,))
        self.assertEqual(cfg.num_devices, 6)
        self.assertEqual(cfg.E, 1)
        self.assertEqual(cfg.h_f, 1.5)
        self.assertEqual(cfg.fork_policy().sigma_floor, 0.3)
        self.assertTrue(cfg.ewc_enabled)
        self.assertFalse(cfg.stop_after_fork)
        self.assertEqual(cfg.train_config().local_epochs, 1)
        self.assertTrue(cfg.fork_policy().is_default_schedule)
        self.assertEqual(cfg.merge_policy().max_rounds_per_group, 3)

    def test_duplicate_key_reports_line(self):
        """Test a repeated key names the field and the second line"""
        text = "algorithm = fedavg\ndataset = synthetic\n\nalgorithm = fedfmc\n"
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError) as ctx:
                parse_config(write_config(tmp, text))
        self.assertEqual(ctx.exception.field, 'algorithm')
        self.assertEqual(ctx.exception.line, 4)
        self.assertIn('duplicate', str(ctx.exception))

    def test_unknown_key(self):
        """Test an unknown key is rejected with its line"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError) as ctx:
                parse_config(write_config(tmp, SMALL_CONFIG + "learning_rat = 0.1\n"))
        self.assertEqual(ctx.exception.field, 'learning_rat')
        self.assertEqual(ctx.exception.line, len(SMALL_CONFIG.splitlines()) + 1)

    def test_bad_value_names_field_and_line(self):
        """Test an unparsable value names its key and line"""
        text = SMALL_CONFIG.replace('K = 4', 'K = four')
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError) as ctx:
                parse_config(write_config(tmp, text))
        self.assertEqual(ctx.exception.field, 'K')
        self.assertEqual(ctx.exception.line, SMALL_CONFIG.splitlines().index('K = 4') + 1)

    def test_missing_required_key(self):
        """Test a config without T is rejected"""
        text = SMALL_CONFIG.replace('T = 12\n', '')
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError) as ctx:
                parse_config(write_config(tmp, text))
        self.assertEqual(ctx.exception.field, 'T')

    def test_missing_file(self):
        """Test a missing config file is a ConfigError"""
        with self.assertRaises(ConfigError):
            parse_config('/nonexistent/run.cfg')

    def test_cross_field_checks(self):
        """Test K > N, missing data paths and stray labels are rejected"""
        with self.assertRaises(ConfigError) as ctx:
            small_config(K=7)
        self.assertEqual(ctx.exception.field, 'K')
        with self.assertRaises(ConfigError) as ctx:
            small_config(dataset='csv')
        self.assertEqual(ctx.exception.field, 'data_path')
        with self.assertRaises(ConfigError) as ctx:
            small_config(archetypes='0; 1; 3')
        self.assertEqual(ctx.exception.field, 'archetypes')
        with self.assertRaises(ConfigError) as ctx:
            small_config(algorithm='fedavg', stop_after_fork=True)
        self.assertEqual(ctx.exception.field, 'stop_after_fork')

    def test_range_checks(self):
        """Test out-of-range values are rejected"""
        for key, value in [('h_f', 0), ('bias', 1.5), ('validation_fraction', 1.0),
                           ('participation_fraction', 0), ('hidden_layers', '8,0'), ('E', 0)]:
            with self.assertRaises(ConfigError, msg=key) as ctx:
                small_config(**{key: value})
            self.assertEqual(ctx.exception.field, key)

    def test_archetype_syntax(self):
        """Test archetype strings with per-archetype bias"""
        specs = parse_archetypes('0,1@0.9; 2', default_bias=0.5)
        self.assertEqual(set(specs[0].label_set), {0, 1})
        self.assertEqual(specs[0].bias, 0.9)
        self.assertEqual(specs[1].bias, 0.5)
        self.assertEqual(format_archetypes(specs), '0,1@0.9; 2@0.5')
        with self.assertRaises(ValueError):
            parse_archetypes('a,b')
        with self.assertRaises(ValueError):
            parse_archetypes(' ; ')

    def test_overrides(self):
        """Test command-line overrides replace only the given fields"""
        cfg = small_config()
        changed = cfg.with_overrides(master_seed=7, ewc_enabled=None)
        self.assertEqual(changed.master_seed, 7)
        self.assertTrue(changed.ewc_enabled)
        self.assertIs(cfg.with_overrides(master_seed=None), cfg)


class PresetTestCase(SimpleTestCase):
    """Test cases for the bundled presets"""

    def test_three_archetypes(self):
        """Test the three-archetype preset: labels {0}, {1}, {2} at bias 1.0"""
        cfg = resolve_config('three-archetypes')
        self.assertEqual(cfg.algorithm, 'fedfmc')
        self.assertEqual([set(spec.label_set) for spec in cfg.archetypes], [{0}, {1}, {2}])
        self.assertTrue(all(spec.bias == 1.0 for spec in cfg.archetypes))
        self.assertEqual((cfg.num_devices, cfg.T, cfg.K), (12, 25, 6))

    def test_grouped_archetypes(self):
        """Test the grouped preset: {0,1,2,3}, {4,5,6}, {7,8,9} at bias 1.0"""
        cfg = resolve_config('grouped_archetypes')
        self.assertEqual(
            [set(spec.label_set) for spec in cfg.archetypes],
            [{0, 1, 2, 3}, {4, 5, 6}, {7, 8, 9}],
        )
        self.assertTrue(all(spec.bias == 1.0 for spec in cfg.archetypes))

    def test_fedavg_baselines_pair_with_fedfmc(self):
        """Test each FedAvg baseline shares data and training and runs T + 2 x max_rounds_per_group"""
        shared = (
            'dataset', 'synthetic_classes', 'synthetic_feature_dim', 'synthetic_per_class',
            'synthetic_separation', 'archetypes', 'bias', 'devices_per_archetype', 'samples_per_device',
            'validation_fraction', 'test_per_class', 'K', 'E', 'hidden_layers', 'learning_rate',
            'batch_size', 'master_seed',
        )
        for name in ('three_archetypes', 'grouped_archetypes'):
            fedfmc = resolve_config(name)
            fedavg = resolve_config(f'{name}_fedavg')
            self.assertEqual((fedfmc.algorithm, fedavg.algorithm), ('fedfmc', 'fedavg'))
            for key in shared:
                self.assertEqual(getattr(fedfmc, key), getattr(fedavg, key), f"{name}: {key}")
            self.assertEqual(fedavg.T, fedfmc.T + 2 * fedfmc.max_rounds_per_group)

    def test_presets_fork_with_the_default_threshold(self):
        """Test the FedFMC presets keep the default threshold, floor and schedule"""
        for name in ('three_archetypes', 'grouped_archetypes'):
            policy = resolve_config(name).fork_policy()
            self.assertEqual((policy.h_f, policy.sigma_floor), (1.5, 0.3))
            self.assertTrue(policy.is_default_schedule)
            self.assertTrue(policy.coalesce_new_groups)

    def test_every_preset_parses(self):
        """Test every bundled preset is a valid config with a description"""
        presets = list_presets()
        names = [name for name, _ in presets]
        self.assertIn('three_archetypes', names)
        self.assertIn('grouped_archetypes_fedavg', names)
        for name, description in presets:
            self.assertTrue(description, name)
            resolve_config(name)

    def test_unknown_preset(self):
        """Test an unknown preset lists the available ones"""
        with self.assertRaises(ConfigError) as ctx:
            resolve_config('four-archetypes')
        self.assertIn('three_archetypes', str(ctx.exception))


class CheckpointTestCase(SimpleTestCase):
    """Test cases for .fmc checkpoints"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'post_fork.fmc'
        self.groups = three_group_snapshot()

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        """Test a saved checkpoint restores bit-identically"""
        checkpoint(self.groups[0][3], self.groups, self.path, round_index=12)
        saved = restore(self.path, expected_dims=SMALL_DIMS)
        self.assertEqual(saved.round_index, 12)
        self.assertEqual(saved.model, self.groups[0][3])
        self.assertEqual(len(saved.groups), 3)
        for (gid, created, members, model), original in zip(saved.groups, self.groups):
            self.assertEqual((gid, created, members), original[:3])
            self.assertEqual(model, original[3])

    def test_rejects_damaged_files(self):
        """Test bad magic, version, truncation and trailing bytes are rejected"""
        checkpoint(self.groups[0][3], self.groups, self.path)
        good = self.path.read_bytes()
        self.assertEqual(good[:4], MAGIC)
        damaged = {
            'bad magic': b'XXXX' + good[4:],
            'version': b'FMC2' + good[4:],
            'truncated': good[:-1],
            'trailing': good + b'\x00',
            'empty': b'',
        }
        for label, data in damaged.items():
            self.path.write_bytes(data)
            with self.assertRaises(CheckpointError, msg=label):
                restore(self.path)

    def test_header_layout(self):
        """Test the layer count follows the magic directly, then the widths"""
        checkpoint(self.groups[0][3], self.groups, self.path, round_index=12)
        data = self.path.read_bytes()
        self.assertEqual(int.from_bytes(data[4:8], 'little'), len(SMALL_DIMS))
        widths = [int.from_bytes(data[8 + 4 * i:12 + 4 * i], 'little') for i in range(len(SMALL_DIMS))]
        self.assertEqual(widths, SMALL_DIMS)
        values = int.from_bytes(data[20:28], 'little')
        self.assertEqual(values, self.groups[0][3].values.size)

    def test_other_format_digit(self):
        """Test a file from another format revision names the version"""
        checkpoint(self.groups[0][3], self.groups, self.path)
        self.path.write_bytes(b'FMC2' + self.path.read_bytes()[4:])
        with self.assertRaises(CheckpointError) as ctx:
            restore(self.path)
        self.assertIn('unsupported checkpoint version FMC2', str(ctx.exception))

    def test_layout_mismatch(self):
        """Test restoring into a different layout is rejected"""
        checkpoint(self.groups[0][3], self.groups, self.path)
        with self.assertRaises(CheckpointError):
            restore(self.path, expected_dims=[4, 6, 3])

    def test_mixed_layouts_not_written(self):
        """Test groups with another layout cannot be saved"""
        groups = self.groups + [(3, 6, (6,), init_model([4, 3], seed=0))]
        with self.assertRaises(CheckpointError):
            checkpoint(self.groups[0][3], groups, self.path)
        self.assertFalse(self.path.exists())

    def test_missing_file(self):
        """Test a missing checkpoint is a CheckpointError"""
        with self.assertRaises(CheckpointError):
            restore(self.path)


class MetricsOutputTestCase(SimpleTestCase):
    """Test cases for emit_metrics and the report metrics"""

    def test_header_and_formatting(self):
        """Test fixed header, six-decimal floats and empty cells"""
        rows = [
            MetricsRow(1, PHASE_FORK, 1, val_loss=0.5, val_acc=90.0, archetype_test_acc=1 / 3,
                       global_test_acc=np.float64(42.0), updates_delta=4, transfers_delta=14),
            MetricsRow(1, PHASE_FORK, 1, device_id=0, group_id=0, val_loss=0.25, val_acc=100.0, archetype_id=2),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = emit_metrics(rows, Path(tmp) / 'nested' / 'metrics.csv')
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], ','.join(METRICS_COLUMNS))
        self.assertEqual(lines[1], '1,fork,1,,,0.500000,90.000000,,0.333333,42.000000,4,14')
        self.assertEqual(lines[2], '1,fork,1,0,0,0.250000,100.000000,2,,,0,0')

    def test_empty_rows_rejected(self):
        """Test writing no rows is an error"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ValueError):
                emit_metrics([], Path(tmp) / 'metrics.csv')

    def test_unwritable_path(self):
        """Test an unwritable destination raises OutputError naming the path"""
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / 'file.txt'
            blocker.write_text('x')
            with self.assertRaises(OutputError) as ctx:
                emit_metrics([MetricsRow(1, PHASE_FEDAVG, 1)], blocker / 'metrics.csv')
        self.assertIn('metrics.csv', str(ctx.exception))

    def test_group_purity(self):
        """Test purity, contingency and majority ties going to the lower archetype"""
        model = init_model([2, 2], seed=0)
        archetypes = {0: 0, 1: 0, 2: 1, 3: 1, 4: 2, 5: 1}
        groups = [(0, 0, (0, 1), model), (3, 6, (2, 3, 5), model), (4, 6, (4,), model)]
        purity = group_purity(groups, archetypes, 3)
        self.assertEqual(purity['purity'], 100.0)
        self.assertTrue(purity['exact_recovery'])
        self.assertEqual(purity['contingency']['3'], {'1': 3})

        mixed = group_purity([(0, 0, (0, 2, 4), model), (1, 6, (1, 3, 5), model)], archetypes, 3)
        self.assertEqual(mixed['majority_archetype'], {'0': 0, '1': 1})
        self.assertAlmostEqual(mixed['purity'], 100.0 * 3 / 6)
        self.assertFalse(mixed['exact_recovery'])

    def test_oscillation(self):
        """Test mean absolute round-to-round change"""
        self.assertEqual(oscillation([[0, 0], [10, 20], [10, 0]]), 12.5)
        self.assertEqual(oscillation([[50, 50]]), 0.0)
        self.assertEqual(oscillation([]), 0.0)


class RunExperimentTestCase(SimpleTestCase):
    """Test cases for end-to-end runs on a tiny synthetic problem"""

    def test_fedavg_costs_and_rows(self):
        """Test a FedAvg run's ledger matches E·K·T and T·(2K+N)"""
        cfg = small_config(algorithm='fedavg')
        result = run_experiment(cfg)
        self.assertEqual(len(result.rows), 12)
        self.assertEqual(len(result.device_rows), 12 * 6)
        self.assertTrue(all(row.phase == PHASE_FEDAVG and row.group_count == 1 for row in result.rows))
        self.assertEqual([row.round for row in result.rows], list(range(1, 13)))
        self.assertEqual(result.ledger.updates, 1 * 4 * 12)
        self.assertEqual(result.ledger.transfers, 12 * (2 * 4 + 6))
        check = result.report['cost_check']
        self.assertTrue(check['passed'])
        self.assertTrue(check['base_equality'])
        self.assertTrue(result.report['eq2_updates_equal'])
        self.assertIsInstance(result.final_model, ModelParams)
        self.assertEqual(list(result.final_model.layer_dims), SMALL_DIMS)
        final = result.report['final_test_accuracy']
        self.assertEqual(len(final['per_archetype']), 3)
        self.assertTrue(0.0 <= final['global'] <= 100.0)

    def test_deterministic_outputs(self):
        """Test two runs with one seed write byte-identical metrics"""
        cfg = small_config(master_seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            first = write_outputs(run_experiment(cfg), Path(tmp) / 'a')
            second = write_outputs(run_experiment(cfg), Path(tmp) / 'b')
            for key in ('metrics', 'devices', 'report'):
                self.assertEqual(first[key].read_bytes(), second[key].read_bytes(), key)
            self.assertEqual(restore(first['final_model']).model, restore(second['final_model']).model)

    def test_workers_do_not_change_results(self):
        """Test threaded device work gives the same rows"""
        cfg = small_config(master_seed=2)
        single = run_experiment(cfg, workers=1)
        threaded = run_experiment(cfg, workers=3)
        self.assertEqual(single.rows, threaded.rows)
        self.assertEqual(single.final_model, threaded.final_model)

    def test_fedfmc_round_numbering(self):
        """Test fork rounds are 1..T and merge rounds continue from T+1"""
        result = run_experiment(small_config(master_seed=1))
        rounds = [row.round for row in result.rows]
        self.assertEqual(rounds, list(range(1, len(rounds) + 1)))
        fork_rows = [row for row in result.rows if row.phase == PHASE_FORK]
        merge_rows = [row for row in result.rows if row.phase == PHASE_MERGE]
        self.assertEqual([row.round for row in fork_rows], list(range(1, 13)))
        self.assertTrue(all(row.round > 12 for row in merge_rows))
        self.assertEqual(result.ledger.totals(PHASE_FORK)['updates'], 1 * 4 * 12)

        post_fork_round, groups = result.post_fork
        self.assertEqual(post_fork_round, 12)
        members = sorted(d for _, _, group_members, _ in groups for d in group_members)
        self.assertEqual(members, list(range(6)))
        self.assertEqual(result.report['fork']['group_count'], len(groups))
        self.assertEqual(len(result.final_groups), 1)
        if len(groups) > 1:
            self.assertTrue(merge_rows)
        self.assertTrue(result.report['cost_check']['passed'])

    def test_resume_matches_full_run(self):
        """Test resuming from post_fork.fmc reproduces the merge phase"""
        cfg = small_config(master_seed=3)
        full = run_experiment(cfg)
        with tempfile.TemporaryDirectory() as tmp:
            written = write_outputs(full, tmp)
            resumed = run_experiment(cfg, resume_from=written['post_fork'])
        self.assertEqual(resumed.report['resumed_from'], str(written['post_fork']))
        self.assertEqual(resumed.rows, [row for row in full.rows if row.phase == PHASE_MERGE])
        self.assertEqual(resumed.final_model, full.final_model)
        self.assertEqual(resumed.ledger.totals(PHASE_MERGE), full.ledger.totals(PHASE_MERGE))

    def test_merge_from_three_groups(self):
        """Test merging a three-group checkpoint folds everything into one model"""
        cfg = small_config()
        with tempfile.TemporaryDirectory() as tmp:
            groups = three_group_snapshot()
            path = checkpoint(groups[0][3], groups, Path(tmp) / 'post_fork.fmc', round_index=12)
            result = run_experiment(cfg, resume_from=path)
            no_ewc = run_experiment(cfg.with_overrides(ewc_enabled=False), resume_from=path)

        self.assertTrue(result.rows)
        self.assertEqual(result.rows[0].round, 13)
        self.assertTrue(all(row.phase == PHASE_MERGE for row in result.rows))
        self.assertEqual(len(result.final_groups), 1)
        self.assertEqual(sorted(result.final_groups[0][2]), list(range(6)))
        self.assertEqual(result.report['fork']['purity'], 100.0)
        self.assertTrue(result.report['fork']['exact_recovery'])
        self.assertEqual(set(result.report['merge_stability']), {'0', '1', '2'})
        self.assertIsNone(result.report['cost_check'])

        # first merge round: k=2 of 4 active; EWC adds 2 Fisher uploads and
        # 4 anchor broadcasts, plain SGD only the 2 newcomers' downloads
        self.assertEqual(result.ledger.entries(PHASE_MERGE)[0].transfers_delta, 2 * 2 + 4 + 2 + 4)
        self.assertEqual(no_ewc.ledger.entries(PHASE_MERGE)[0].transfers_delta, 2 * 2 + 4 + 2)

    def test_resume_errors(self):
        """Test resuming a FedAvg config or into another layout fails"""
        with tempfile.TemporaryDirectory() as tmp:
            groups = three_group_snapshot()
            path = checkpoint(groups[0][3], groups, Path(tmp) / 'post_fork.fmc', round_index=12)
            with self.assertRaises(CheckpointError):
                run_experiment(small_config(algorithm='fedavg'), resume_from=path)
            with self.assertRaises(CheckpointError):
                run_experiment(small_config(hidden_layers=6), resume_from=path)

    def test_stop_after_fork(self):
        """Test the personalised variant stops after forking"""
        result = run_experiment(small_config(stop_after_fork=True))
        self.assertIsNone(result.final_model)
        self.assertTrue(all(row.phase == PHASE_FORK for row in result.rows))
        personalised = result.report['personalised']
        self.assertEqual(len(personalised), result.report['fork']['group_count'])
        members = sorted(d for group in personalised.values() for d in group['members'])
        self.assertEqual(members, list(range(6)))
        with tempfile.TemporaryDirectory() as tmp:
            written = write_outputs(result, tmp)
            self.assertIn('post_fork', written)
            self.assertNotIn('final_model', written)


SEEDS = range(5)


def seeded_runs(cfg, **overrides):
    return [run_experiment(cfg.with_overrides(master_seed=seed, **overrides)) for seed in SEEDS]


def resumed_merges(runs, **overrides):
    """Merge each run's post-fork groups again under other merge settings"""
    resumed = []
    with tempfile.TemporaryDirectory() as tmp:
        for run in runs:
            round_index, groups = run.post_fork
            path = checkpoint(groups[0][3], groups, Path(tmp) / f'seed{run.config.master_seed}.fmc', round_index)
            resumed.append(run_experiment(run.config.with_overrides(**overrides), resume_from=path))
    return resumed


def worst_drop(result):
    return max((entry['max_drop_after'] for entry in result.report['merge_stability'].values()), default=0.0)


@tag('slow')
class ThreeArchetypeBehaviourTestCase(SimpleTestCase):
    """Test cases for the three-archetype preset over five seeds"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.cfg = resolve_config('three_archetypes')
        cls.fedfmc = seeded_runs(cls.cfg)
        cls.fedavg = seeded_runs(resolve_config('three_archetypes_fedavg'))
        # every device sees labels {0, 1, 2}
        cls.iid = seeded_runs(cls.cfg.with_overrides(
            archetypes=tuple(parse_archetypes('0,1,2')), devices_per_archetype=12, stop_after_fork=True,
        ))

    def test_forks_into_one_pure_group_per_archetype(self):
        """Test at least four of five seeds end the fork phase with three pure groups"""
        recovered = [run.report['fork']['exact_recovery'] for run in self.fedfmc]
        self.assertGreaterEqual(sum(recovered), 4, [run.report['fork']['contingency'] for run in self.fedfmc])
        self.assertTrue(all(run.report['fork']['group_count'] >= 2 for run in self.fedfmc))

    def test_iid_devices_stay_together(self):
        """Test devices that all see labels {0, 1, 2} end the fork phase in one group under the default threshold"""
        for run in self.iid:
            self.assertEqual(run.report['fork']['group_count'], 1, run.config.master_seed)

    def test_identical_groups_merge_without_loss(self):
        """Test two groups holding one model on one distribution merge within 2 points of it"""
        gaps = []
        with tempfile.TemporaryDirectory() as tmp:
            for run in self.iid:
                round_index, groups = run.post_fork
                model = groups[0][3]
                before = run.report['personalised'][str(groups[0][0])]['test_accuracy']
                halves = [(0, 0, tuple(range(6)), model), (1, round_index, tuple(range(6, 12)), model)]
                path = checkpoint(model, halves, Path(tmp) / f'halves{run.config.master_seed}.fmc', round_index)
                merged = run_experiment(run.config.with_overrides(stop_after_fork=False), resume_from=path)
                self.assertEqual(len(merged.final_groups), 1)
                gaps.append(abs(merged.report['final_test_accuracy']['global'] - before))
        self.assertLessEqual(float(np.median(gaps)), 2.0, gaps)

    def test_consolidated_model_serves_every_archetype(self):
        """Test median per-archetype accuracy is at least 70 with at most 15 points between archetypes"""
        per_archetype = np.array([run.report['final_test_accuracy']['per_archetype'] for run in self.fedfmc])
        medians = np.median(per_archetype, axis=0)
        self.assertTrue(np.all(medians >= 70.0), medians)
        self.assertLessEqual(float(medians.max() - medians.min()), 15.0, medians)

    def test_beats_fedavg_and_oscillates_less(self):
        """Test FedFMC beats FedAvg(T=65) by 5 points in the median and oscillates less on every seed"""
        gains = [
            fmc.report['final_test_accuracy']['global'] - avg.report['final_test_accuracy']['global']
            for fmc, avg in zip(self.fedfmc, self.fedavg)
        ]
        self.assertGreaterEqual(float(np.median(gains)), 5.0, gains)
        for fmc, avg in zip(self.fedfmc, self.fedavg):
            self.assertEqual(avg.final_round, 65)
            self.assertGreater(avg.report['oscillation']['overall'], fmc.report['oscillation']['overall'])

    def test_ewc_keeps_earlier_groups(self):
        """Test EWC keeps earlier groups within 15 points and never does worse than plain SGD in the median"""
        with_ewc = [worst_drop(run) for run in self.fedfmc]
        without_ewc = [worst_drop(run) for run in resumed_merges(self.fedfmc, ewc_enabled=False)]
        self.assertLessEqual(sum(run.report['earlier_group_collapsed'] for run in self.fedfmc), 1, with_ewc)
        self.assertLessEqual(float(np.median(with_ewc)), 15.0, with_ewc)
        self.assertLessEqual(float(np.median(with_ewc)), float(np.median(without_ewc)), (with_ewc, without_ewc))

    def test_plain_sgd_collapses_earlier_groups(self):
        """Test merging without EWC on half the devices per round drags an earlier group down by over 15 points"""
        resumed = resumed_merges(self.fedfmc, ewc_enabled=False, participation_fraction=0.5)
        collapsed = [run.report['earlier_group_collapsed'] for run in resumed]
        self.assertGreaterEqual(sum(collapsed), 4, [worst_drop(run) for run in resumed])


@tag('slow')
class GroupedArchetypeBehaviourTestCase(SimpleTestCase):
    """Test cases for the grouped-archetype preset over five seeds"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.fedfmc = seeded_runs(resolve_config('grouped_archetypes'))
        cls.fedavg = seeded_runs(resolve_config('grouped_archetypes_fedavg'))

    def test_beats_fedavg_and_oscillates_less(self):
        """Test FedFMC beats FedAvg(T=65) by 5 points in the median and oscillates less on every seed"""
        gains = [
            fmc.report['final_test_accuracy']['global'] - avg.report['final_test_accuracy']['global']
            for fmc, avg in zip(self.fedfmc, self.fedavg)
        ]
        self.assertGreaterEqual(float(np.median(gains)), 5.0, gains)
        for fmc, avg in zip(self.fedfmc, self.fedavg):
            self.assertGreater(avg.report['oscillation']['overall'], fmc.report['oscillation']['overall'])

    def test_skewed_devices_fork(self):
        """Test the default threshold splits the grouped archetypes on at least four of five seeds"""
        forked = [run.report['fork']['group_count'] >= 2 for run in self.fedfmc]
        self.assertGreaterEqual(sum(forked), 4, forked)


class RecordRunTestCase(TestCase):
    """Test cases for storing runs"""

    def test_record_run(self):
        """Test a run is stored with all its metric rows"""
        result = run_experiment(small_config(algorithm='fedavg', T=3))
        run = record_run(result, output_dir='/tmp/out', duration_seconds=1.5)
        self.assertEqual(run.status, ExperimentRun.STATUS_COMPLETED)
        self.assertEqual(run.total_transfers, 3 * (2 * 4 + 6))
        self.assertEqual(run.total_updates, 3 * 4)
        self.assertTrue(run.cost_check_passed)
        self.assertEqual(run.config['archetypes'], '0@1; 1@1; 2@1')
        self.assertEqual(RoundMetric.objects.filter(run=run).count(), 3 + 3 * 6)
        self.assertEqual(RoundMetric.objects.filter(run=run, device_id__isnull=True).count(), 3)


@override_settings(FEDFMC_RECORD_RUNS=True, FEDFMC_WORKERS=1)
class CommandTestCase(TestCase):
    """Test cases for the run / verify_costs / presets commands"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = write_config(self.tmp.name, SMALL_CONFIG)
        self.out = Path(self.tmp.name) / 'out'

    def tearDown(self):
        self.tmp.cleanup()

    def test_run_writes_outputs(self):
        """Test run writes metrics, report and checkpoints and records the run"""
        out = StringIO()
        call_command('run', str(self.config), '--out', str(self.out), '--seed', '4', stdout=out)
        for name in ('metrics.csv', 'devices.csv', 'report.json', 'post_fork.fmc', 'final_model.fmc'):
            self.assertTrue((self.out / name).is_file(), name)
        self.assertIn('Done', out.getvalue())
        run = ExperimentRun.objects.get()
        self.assertEqual(run.master_seed, 4)
        self.assertEqual(run.output_dir, str(self.out))

    def test_no_ewc_and_no_record(self):
        """Test --no-ewc reaches the config and --no-record skips storage"""
        call_command('run', str(self.config), '--out', str(self.out), '--no-ewc', '--no-record', stdout=StringIO())
        self.assertFalse(ExperimentRun.objects.exists())
        self.assertIn('"ewc_enabled": false', (self.out / 'report.json').read_text())

    def test_failed_run_is_recorded(self):
        """Test a failing run exits with CommandError and is stored as failed"""
        with self.assertRaises(CommandError):
            call_command(
                'run', str(self.config), '--out', str(self.out),
                '--resume-from', str(Path(self.tmp.name) / 'missing.fmc'), stdout=StringIO(),
            )
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, ExperimentRun.STATUS_FAILED)
        self.assertIn('missing.fmc', run.error_message)

    def test_bad_config(self):
        """Test an invalid config becomes CommandError"""
        bad = write_config(self.tmp.name, SMALL_CONFIG.replace('K = 4', 'K = 40'), name='bad.cfg')
        with self.assertRaises(CommandError):
            call_command('run', str(bad), '--out', str(self.out), stdout=StringIO())
        self.assertFalse(ExperimentRun.objects.exists())

    def test_verify_costs(self):
        """Test verify_costs passes on FedAvg and on a fork phase"""
        for algorithm in ('fedavg', 'fedfmc'):
            config = write_config(
                self.tmp.name, SMALL_CONFIG.replace('algorithm = fedfmc', f'algorithm = {algorithm}'),
                name=f'{algorithm}.cfg',
            )
            out = StringIO()
            call_command('verify_costs', str(config), stdout=out)
            self.assertIn('All cost checks passed', out.getvalue())
            self.assertIn('Updates:   48 (expected 48)', out.getvalue())

    def test_presets(self):
        """Test presets list and show"""
        out = StringIO()
        call_command('presets', 'list', stdout=out)
        self.assertIn('three_archetypes', out.getvalue())
        self.assertIn('grouped_archetypes', out.getvalue())

        out = StringIO()
        call_command('presets', 'show', 'three-archetypes', stdout=out)
        self.assertIn('archetypes = 0@1; 1@1; 2@1', out.getvalue())
        self.assertIn('ewc_enabled = true', out.getvalue())

        with self.assertRaises(CommandError):
            call_command('presets', 'show', stdout=StringIO())
        with self.assertRaises(CommandError):
            call_command('presets', 'show', 'nope', stdout=StringIO())
