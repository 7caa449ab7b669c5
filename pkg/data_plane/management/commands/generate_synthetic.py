"""
Django management command to write a synthetic Gaussian-blob dataset as CSV
Usage: python manage.py generate_synthetic blobs.csv --classes 10 --per-class 200
"""
from django.core.management.base import BaseCommand, CommandError

from data_plane.utils import gen_synthetic, save_csv


class Command(BaseCommand):
    help = 'Generate a Gaussian-blob classification dataset and save it in the CSV layout load_dataset reads'

    def add_arguments(self, parser):
        parser.add_argument(
            'output',
            type=str,
            help='Path of the CSV file to write'
        )
        parser.add_argument(
            '--classes',
            type=int,
            default=10,
            help='Number of classes (default: 10)'
        )
        parser.add_argument(
            '--feature-dim',
            type=int,
            default=16,
            help='Number of features per example (default: 16)'
        )
        parser.add_argument(
            '--per-class',
            type=int,
            default=200,
            help='Examples generated for every class (default: 200)'
        )
        parser.add_argument(
            '--separation',
            type=float,
            default=6.0,
            help='Minimum distance between class means (default: 6.0)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=0,
            help='Random seed (default: 0)'
        )

    def handle(self, *args, **options):
        try:
            dataset = gen_synthetic(
                num_classes=options['classes'],
                feature_dim=options['feature_dim'],
                per_class=options['per_class'],
                separation=options['separation'],
                seed=options['seed'],
            )
        except ValueError as e:
            raise CommandError(str(e))

        try:
            path = save_csv(dataset, options['output'])
        except OSError as e:
            raise CommandError(f'Could not write "{options["output"]}": {e}')

        self.stdout.write(self.style.SUCCESS(
            f'Wrote {len(dataset)} examples ({dataset.num_classes} classes, '
            f'{dataset.feature_dim} features) to {path}'
        ))
