"""
Django management command to list or print the bundled experiment presets
Usage: python manage.py presets list
       python manage.py presets show three-archetypes
"""
from django.core.management.base import BaseCommand, CommandError

from harness.config_utils import ConfigError, list_presets, parse_config, preset_path


class Command(BaseCommand):
    help = 'List the bundled presets, or show one with every default filled in'

    def add_arguments(self, parser):
        parser.add_argument('action', choices=['list', 'show'])
        parser.add_argument('name', nargs='?', help='Preset to show')

    def handle(self, *args, **options):
        if options['action'] == 'list':
            presets = list_presets()
            if not presets:
                self.stdout.write(self.style.WARNING('No presets found'))
                return
            width = max(len(name) for name, _ in presets)
            for name, description in presets:
                self.stdout.write(f'{name.ljust(width)}  {description}')
            return

        if not options['name']:
            raise CommandError('presets show needs a preset name')
        try:
            path = preset_path(options['name'])
            config = parse_config(path)
        except ConfigError as e:
            raise CommandError(str(e))

        self.stdout.write(f'# {path}')
        for key, value in config.as_dict().items():
            if key == 'name':
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            self.stdout.write(f'{key} = {value}')
