"""
Experiment configuration: flat ``key = value`` files, parsed strictly.

    # three single-label archetypes
    algorithm = fedfmc
    dataset = synthetic
    archetypes = 0; 1; 2
    T = 25
    K = 6

Lines are read with python-dotenv's parser (so quoting and ``#`` comments
behave as in .env files); values are validated by RunConfigSerializer.
Duplicate and unknown keys are errors, and every error names the field and,
when it came from the file, the line.
"""
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from django.conf import settings
from dotenv.parser import parse_stream
from rest_framework import serializers

from data_plane.utils import DEFAULT_VALIDATION_FRACTION, ArchetypeSpec
from federation.utils import ForkPolicy, MergePolicy
from learner.utils import TrainConfig

logger = logging.getLogger(__name__)

ALGORITHM_CHOICES = ['fedavg', 'fedfmc']
DATASET_CHOICES = ['synthetic', 'idx', 'csv']
PRESET_SUFFIX = '.cfg'


class ConfigError(Exception):
    """Invalid experiment configuration"""

    def __init__(self, message, field=None, line=None, path=None):
        self.field = field
        self.line = line
        self.path = str(path) if path is not None else None
        self.message = message
        location = ''
        if self.path:
            location = self.path + (f":{line}" if line is not None else '') + ': '
        elif line is not None:
            location = f"line {line}: "
        prefix = f"{field}: " if field else ''
        super().__init__(f"{location}{prefix}{message}")


def parse_archetypes(text, default_bias=1.0):
    """
    ``"0,1,2,3@0.9; 4,5,6; 7,8,9"`` -> [ArchetypeSpec, ...]

    Archetypes are separated by ``;``, labels by ``,``; an optional ``@bias``
    overrides the default bias for that archetype.
    """
    specs = []
    for chunk in text.split(';'):
        chunk = chunk.strip()
        if not chunk:
            continue
        labels_text, _, bias_text = chunk.partition('@')
        try:
            labels = {int(label) for label in labels_text.split(',') if label.strip()}
            bias = float(bias_text) if bias_text.strip() else default_bias
        except ValueError:
            raise ValueError(f"cannot parse archetype {chunk!r}")
        specs.append(ArchetypeSpec(frozenset(labels), bias))
    if not specs:
        raise ValueError("at least one archetype is required")
    return specs


def format_archetypes(specs):
    return '; '.join(
        ','.join(str(label) for label in sorted(spec.label_set)) + f"@{spec.bias:g}"
        for spec in specs
    )


def parse_int_list(text):
    values = [int(part) for part in str(text).split(',') if part.strip()]
    if any(v < 1 for v in values):
        raise ValueError("widths must be >= 1")
    return values


class RunConfigSerializer(serializers.Serializer):
    """Validation and defaults for every config key"""
    algorithm = serializers.ChoiceField(choices=ALGORITHM_CHOICES)
    dataset = serializers.ChoiceField(choices=DATASET_CHOICES)
    data_path = serializers.CharField(required=False, allow_blank=True, default='')
    labels_path = serializers.CharField(required=False, allow_blank=True, default='')

    # synthetic blobs
    synthetic_classes = serializers.IntegerField(min_value=2, default=10)
    synthetic_feature_dim = serializers.IntegerField(min_value=1, default=16)
    synthetic_per_class = serializers.IntegerField(min_value=2, default=300)
    synthetic_separation = serializers.FloatField(min_value=1e-6, default=6.0)

    # partition
    archetypes = serializers.CharField()
    bias = serializers.FloatField(min_value=0.0, max_value=1.0, default=1.0)
    devices_per_archetype = serializers.IntegerField(min_value=1, default=4)
    samples_per_device = serializers.IntegerField(min_value=2, default=100)
    validation_fraction = serializers.FloatField(default=DEFAULT_VALIDATION_FRACTION)
    test_per_class = serializers.IntegerField(min_value=1, default=50)

    # rounds and local training
    T = serializers.IntegerField(min_value=0)
    K = serializers.IntegerField(min_value=1)
    E = serializers.IntegerField(min_value=1, default=1)
    hidden_layers = serializers.CharField(required=False, allow_blank=True, default='32')
    learning_rate = serializers.FloatField(default=0.05)
    batch_size = serializers.IntegerField(min_value=1, default=16)

    # fork policy
    h_f = serializers.FloatField(default=1.5)
    warmup = serializers.IntegerField(min_value=1, default=5)
    cooldown = serializers.IntegerField(min_value=0, default=5)
    gap = serializers.IntegerField(min_value=1, default=4)
    sigma_floor = serializers.FloatField(min_value=0.0, default=0.3)
    coalesce_new_groups = serializers.BooleanField(default=False)

    # merge policy
    max_rounds_per_group = serializers.IntegerField(min_value=1, default=20)
    window = serializers.IntegerField(min_value=1, default=5)
    accuracy_gap = serializers.FloatField(default=1.0)
    participation_fraction = serializers.FloatField(default=0.5)
    ewc_enabled = serializers.BooleanField(default=True)
    lambda_scale = serializers.FloatField(min_value=0.0, default=1.0)

    stop_after_fork = serializers.BooleanField(default=False)
    master_seed = serializers.IntegerField(min_value=0, default=0)

    def validate_archetypes(self, value):
        try:
            default_bias = float(self.initial_data.get('bias', 1.0))
        except (TypeError, ValueError):
            default_bias = 1.0
        if not 0.0 <= default_bias <= 1.0:
            default_bias = 1.0  # the bias field reports its own error
        try:
            return parse_archetypes(value, default_bias=default_bias)
        except ValueError as e:
            raise serializers.ValidationError(str(e))

    def validate_hidden_layers(self, value):
        try:
            return parse_int_list(value)
        except ValueError:
            raise serializers.ValidationError("expected comma-separated positive integers, e.g. 64,32")

    def validate_h_f(self, value):
        if not value > 0:
            raise serializers.ValidationError("h_f must be > 0")
        return value

    def validate_learning_rate(self, value):
        if not value > 0:
            raise serializers.ValidationError("learning_rate must be > 0")
        return value

    def validate_accuracy_gap(self, value):
        if not value > 0:
            raise serializers.ValidationError("accuracy_gap must be > 0")
        return value

    def validate_validation_fraction(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError("validation_fraction must lie in (0, 1)")
        return value

    def validate_participation_fraction(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("participation_fraction must lie in (0, 1]")
        return value

    def validate(self, attrs):
        num_devices = attrs['devices_per_archetype'] * len(attrs['archetypes'])
        if attrs['K'] > num_devices:
            raise serializers.ValidationError({
                'K': f"K={attrs['K']} exceeds N={num_devices} (devices_per_archetype x archetypes)"
            })
        if attrs['dataset'] in ('idx', 'csv') and not attrs.get('data_path'):
            raise serializers.ValidationError({'data_path': f"required for dataset={attrs['dataset']}"})
        if attrs['dataset'] == 'idx' and not attrs.get('labels_path'):
            raise serializers.ValidationError({'labels_path': "required for dataset=idx"})
        if attrs['dataset'] == 'synthetic':
            highest = max(max(spec.label_set) for spec in attrs['archetypes'])
            if highest >= attrs['synthetic_classes']:
                raise serializers.ValidationError({
                    'archetypes': f"label {highest} does not exist with synthetic_classes={attrs['synthetic_classes']}"
                })
        if attrs['stop_after_fork'] and attrs['algorithm'] != 'fedfmc':
            raise serializers.ValidationError({'stop_after_fork': "only applies to algorithm=fedfmc"})
        return attrs


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    dataset: str
    data_path: str
    labels_path: str
    synthetic_classes: int
    synthetic_feature_dim: int
    synthetic_per_class: int
    synthetic_separation: float
    archetypes: tuple
    bias: float
    devices_per_archetype: int
    samples_per_device: int
    validation_fraction: float
    test_per_class: int
    T: int
    K: int
    E: int
    hidden_layers: tuple
    learning_rate: float
    batch_size: int
    h_f: float
    warmup: int
    cooldown: int
    gap: int
    sigma_floor: float
    coalesce_new_groups: bool
    max_rounds_per_group: int
    window: int
    accuracy_gap: float
    participation_fraction: float
    ewc_enabled: bool
    lambda_scale: float
    stop_after_fork: bool
    master_seed: int
    name: str = 'config'

    @property
    def num_devices(self):
        return self.devices_per_archetype * len(self.archetypes)

    def train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, local_epochs=self.E, batch_size=self.batch_size)

    def fork_policy(self):
        return ForkPolicy(
            h_f=self.h_f,
            warmup_rounds=self.warmup,
            cooldown_from_end=self.cooldown,
            min_gap=self.gap,
            sigma_floor=self.sigma_floor,
            coalesce_new_groups=self.coalesce_new_groups,
        )

    def merge_policy(self):
        return MergePolicy(
            max_rounds_per_group=self.max_rounds_per_group,
            window=self.window,
            accuracy_gap=self.accuracy_gap,
            participation_fraction=self.participation_fraction,
            ewc_enabled=self.ewc_enabled,
            lambda_scale=self.lambda_scale,
        )

    def with_overrides(self, **changes):
        changes = {key: value for key, value in changes.items() if value is not None}
        return replace(self, **changes) if changes else self

    def as_dict(self):
        """Every setting, defaults included, in file-key form"""
        data = asdict(self)
        data['archetypes'] = format_archetypes(self.archetypes)
        data['hidden_layers'] = ','.join(str(width) for width in self.hidden_layers)
        return data


CONFIG_KEYS = frozenset(RunConfigSerializer().fields)


def config_from_mapping(raw, lines=None, path=None, name='config'):
    """Validate a {key: string} mapping into a RunConfig"""
    lines = lines or {}
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        key = unknown[0]
        raise ConfigError(f"unknown key (allowed: {', '.join(sorted(CONFIG_KEYS))})", field=key, line=lines.get(key), path=path)

    serializer = RunConfigSerializer(data=raw)
    if not serializer.is_valid():
        field, messages = next(iter(serializer.errors.items()))
        message = '; '.join(str(m) for m in messages) if isinstance(messages, list) else str(messages)
        field = None if field == 'non_field_errors' else field
        raise ConfigError(message, field=field, line=lines.get(field), path=path)

    data = dict(serializer.validated_data)
    data['archetypes'] = tuple(data['archetypes'])
    data['hidden_layers'] = tuple(data['hidden_layers'])
    return RunConfig(name=name, **data)


def parse_config(path):
    """Read and validate a config file; raises ConfigError"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file does not exist", path=path)

    raw = {}
    lines = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for binding in parse_stream(handle):
            # the binding's text starts with any blank lines before the key
            text = binding.original.string
            line = binding.original.line + text[:len(text) - len(text.lstrip())].count('\n')
            if binding.error:
                raise ConfigError(f"cannot parse {binding.original.string.strip()!r}", line=line, path=path)
            if binding.key is None:
                continue
            if binding.key in raw:
                raise ConfigError(f"duplicate key (first set on line {lines[binding.key]})", field=binding.key, line=line, path=path)
            if binding.value is None:
                raise ConfigError("missing value", field=binding.key, line=line, path=path)
            raw[binding.key] = binding.value
            lines[binding.key] = line

    config = config_from_mapping(raw, lines=lines, path=path, name=path.stem)
    logger.debug(f"Parsed {path}: {config.as_dict()}")
    return config


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def presets_dir():
    return Path(settings.FEDFMC_PRESETS_DIR)


def list_presets():
    """[(name, first comment line)] for every bundled preset"""
    presets = []
    for path in sorted(presets_dir().glob(f"*{PRESET_SUFFIX}")):
        description = ''
        with open(path, 'r', encoding='utf-8') as handle:
            first = handle.readline().strip()
        if first.startswith('#'):
            description = first.lstrip('#').strip()
        presets.append((path.stem, description))
    return presets


def preset_path(name):
    path = presets_dir() / f"{name.replace('-', '_')}{PRESET_SUFFIX}"
    if not path.is_file():
        available = ', '.join(n for n, _ in list_presets())
        raise ConfigError(f"unknown preset {name!r} (available: {available})")
    return path


def resolve_config(argument):
    """A config file path, or the name of a bundled preset"""
    candidate = Path(argument)
    if candidate.is_file():
        return parse_config(candidate)
    return parse_config(preset_path(argument))
