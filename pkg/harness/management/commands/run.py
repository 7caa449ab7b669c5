"""
Django management command to run one FedAvg or FedFMC experiment
Usage: python manage.py run three_archetypes --seed 1 --out runs/demo
       python manage.py run runs/demo.cfg --resume-from runs/demo/post_fork.fmc
"""
import logging
import time
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from federation.utils import FederationError
from harness.checkpoint_utils import CheckpointError
from harness.config_utils import ConfigError, resolve_config
from harness.utils import OutputError, record_failed_run, record_run, run_experiment, write_outputs
from learner.exceptions import LearnerError

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Run a FedAvg / FedFMC experiment from a config file or bundled preset'

    def add_arguments(self, parser):
        parser.add_argument(
            'config',
            type=str,
            help='Config file path, or the name of a bundled preset (see `manage.py presets list`)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Override master_seed from the config'
        )
        parser.add_argument(
            '--out',
            type=str,
            default=None,
            help='Output directory (default: FEDFMC_OUTPUT_DIR/<config>_seed<seed>)'
        )
        parser.add_argument(
            '--no-ewc',
            action='store_true',
            help='Merge with plain SGD: no Fisher uploads, no EWC penalty'
        )
        parser.add_argument(
            '--resume-from',
            type=str,
            default=None,
            help='post_fork.fmc checkpoint; only the merge phase runs'
        )
        parser.add_argument(
            '--workers',
            type=int,
            default=None,
            help='Threads per round for device training / evaluation (default: FEDFMC_WORKERS)'
        )
        parser.add_argument(
            '--no-record',
            action='store_true',
            help='Do not store the run in the database'
        )

    def handle(self, *args, **options):
        try:
            cfg = resolve_config(options['config'])
        except ConfigError as e:
            raise CommandError(str(e))

        if options['seed'] is not None and options['seed'] < 0:
            raise CommandError(f"--seed must be >= 0, got {options['seed']}")
        cfg = cfg.with_overrides(
            master_seed=options['seed'],
            ewc_enabled=False if options['no_ewc'] else None,
        )
        workers = options['workers'] or settings.FEDFMC_WORKERS
        out_dir = Path(options['out'] or Path(settings.FEDFMC_OUTPUT_DIR) / f"{cfg.name}_seed{cfg.master_seed}")
        record = settings.FEDFMC_RECORD_RUNS and not options['no_record']

        started = time.perf_counter()
        try:
            result = run_experiment(cfg, resume_from=options['resume_from'], workers=workers)
            written = write_outputs(result, out_dir)
        except (ConfigError, CheckpointError, FederationError, LearnerError, OutputError, ValueError) as e:
            logger.error(f"❌ Run '{cfg.name}' failed: {e}")
            if record:
                record_failed_run(cfg, e)
            raise CommandError(str(e))
        duration = time.perf_counter() - started

        if record:
            run = record_run(result, output_dir=out_dir, duration_seconds=duration)
            self.stdout.write(f'Recorded as run #{run.id}')

        report = result.report
        self.stdout.write('\n' + '=' * 50)
        self.stdout.write(f'{cfg.algorithm.upper()} RUN: {cfg.name} (seed {cfg.master_seed})')
        self.stdout.write('=' * 50)
        self.stdout.write(f'Rounds: {result.final_round}')
        if 'fork' in report:
            fork = report['fork']
            self.stdout.write(f"Groups after fork: {fork['group_count']} (purity {fork['purity']:.1f}%)")
        final = report.get('final_test_accuracy')
        if final:
            per_archetype = ', '.join(f'{acc:.2f}' for acc in final['per_archetype'])
            self.stdout.write(f"Test accuracy: {final['global']:.2f}% (per archetype: {per_archetype})")
        self.stdout.write(f'Updates: {result.ledger.updates}  Transfers: {result.ledger.transfers}')
        cost_check = report.get('cost_check')
        if cost_check and cost_check.get('bound_applies') and not cost_check['passed']:
            self.stdout.write(self.style.WARNING(
                f"Transfers {cost_check['measured_transfers']} exceed the bound {cost_check['bound']}"
            ))
        for label, path in written.items():
            self.stdout.write(f'  {label}: {path}')
        self.stdout.write('=' * 50)
        self.stdout.write(self.style.SUCCESS(f'✅ Done in {duration:.1f}s'))
