# scenepose/config/run_config.py
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import json
import logging
import os
import re

import yaml

from scenepose.config.settings import (AugmentationConfig, BenchConfig, ConfigError, ModelConfig, TrainConfig,
                                       reference_backbone_spec)
from scenepose.models.backbone import efficientnet_backbone_spec

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('synth', 'cluster', 'train', 'eval', 'attend', 'bench')

# settings that only steer the workflow, not one of the typed configs
RUN_KEYS = (
    'manifest', 'centroids', 'checkpoint', 'output_dir', 'out', 'seed', 'split', 'pdf', 'limit', 'images',
    'synthetic_scenes', 'per_scene', 'image_size', 'test_fraction',
    'scene_counts', 'layer_counts',
    'backbone', 'input_size', 'position_endpoint', 'orientation_endpoint',
    'eval_batch_size', 'coarse_only', 'attention_layer',
)
_EXCLUDED = {'backbone', 'seed'}
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in _EXCLUDED)
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in _EXCLUDED)
AUGMENTATION_KEYS = tuple(f.name for f in fields(AugmentationConfig) if f.name not in _EXCLUDED)
BENCH_KEYS = tuple(f.name for f in fields(BenchConfig) if f.name not in {'batch_size'})
KNOWN_KEYS = frozenset(RUN_KEYS + MODEL_KEYS + TRAIN_KEYS + AUGMENTATION_KEYS + BENCH_KEYS)
_EXPONENT_FLOAT = re.compile(r'^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$')


def get_output_root() -> Path:
    """Default directory for run outputs, overridable through the environment"""
    return Path(os.getenv('SCENEPOSE_OUTPUT_ROOT', './runs'))


def parse_value(text: str) -> Any:
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value '{text}': {e}")
    # YAML 1.1 reads 1e-10 (no dot in the mantissa) as a string
    if isinstance(value, str) and _EXPONENT_FLOAT.match(value):
        return float(value)
    return value


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return '[' + ', '.join(format_value(v) for v in value) + ']'
    if isinstance(value, str):
        return value if parse_value(value) == value else json.dumps(value)
    return repr(value)


def parse_int_list(value: Any, label: str) -> List[int]:
    """Accepts [4, 10], '4,10' or a single integer."""
    if isinstance(value, int) and not isinstance(value, bool):
        return [value]
    if isinstance(value, str):
        value = [v for v in value.split(',') if v.strip()]
    try:
        return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{label} must be a comma-separated list of integers, got {value!r}")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """key=value lines, '#' comments; values are typed with yaml.safe_load."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{line_number}: expected key=value")
        key, raw = (part.strip() for part in line.split('=', 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{line_number}: unknown key '{key}'")
        values[key] = parse_value(raw)
    logger.info(f"Loaded {len(values)} settings from {path}")
    return values


@dataclass
class RunConfig:
    subcommand: str
    values: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(cls, subcommand: str, file_values: Optional[Dict[str, Any]] = None,
                flag_values: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """File values first, then every flag that was given; flags win."""
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"Unknown subcommand '{subcommand}', expected one of {SUBCOMMANDS}")
        values: Dict[str, Any] = {}
        for source in (file_values or {}, flag_values or {}):
            for key, value in source.items():
                if key not in KNOWN_KEYS:
                    raise ConfigError(f"Unknown setting '{key}'")
                if value is not None:
                    values[key] = value
        values.setdefault('seed', 0)
        values.setdefault('output_dir', str(get_output_root() / subcommand))
        return cls(subcommand, values)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values.get(k) in (None, '', [])]
        if missing:
            flags = ', '.join('--' + k.replace('_', '-') for k in missing)
            raise ConfigError(f"{self.subcommand} requires {flags}")

    @property
    def output_dir(self) -> Path:
        return Path(self.values['output_dir'])

    def _pick(self, keys: Sequence[str]) -> Dict[str, Any]:
        return {k: self.values[k] for k in keys if k in self.values}

    def backbone_spec(self):
        name = self.get('backbone', ModelConfig().backbone.name)
        if name == 'reference':
            return reference_backbone_spec(int(self.get('input_size', 64)))
        if name == 'efficientnet_b0':
            return efficientnet_backbone_spec(int(self.get('input_size', 224)),
                                              int(self.get('position_endpoint', 5)),
                                              int(self.get('orientation_endpoint', 3)))
        raise ConfigError(f"Unknown backbone '{name}'")

    def model_config(self, num_scenes: Optional[int] = None) -> ModelConfig:
        values = self._pick(MODEL_KEYS)
        if num_scenes is not None and 'num_scenes' not in values:
            values['num_scenes'] = num_scenes
        try:
            return ModelConfig(backbone=self.backbone_spec(), **values).validate()
        except TypeError as e:
            raise ConfigError(f"Invalid model settings: {e}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=int(self.values['seed']), **self._pick(TRAIN_KEYS)).validate()

    def augmentation_config(self, input_size: int) -> AugmentationConfig:
        values = self._pick(AUGMENTATION_KEYS)
        values.setdefault('crop_size', input_size)
        values.setdefault('resize', max(values['crop_size'], round(values['crop_size'] * 256 / 224)))
        return AugmentationConfig(seed=int(self.values['seed']), **values).validate()

    def bench_config(self) -> BenchConfig:
        return BenchConfig(**self._pick(BENCH_KEYS)).validate()

    def snapshot_text(self) -> str:
        lines = [f"# resolved settings for '{self.subcommand}'; reload with --config"]
        lines += [f"{key}={format_value(self.values[key])}" for key in sorted(self.values)]
        return '\n'.join(lines) + '\n'

    def write_snapshot(self, output_dir: Optional[Union[str, Path]] = None) -> Path:
        output_dir = Path(output_dir) if output_dir is not None else self.output_dir
        output_dir.mkdir(parents=True, exist_ok=True)
        path = output_dir / f"{self.subcommand}_config.txt"
        path.write_text(self.snapshot_text())
        logger.info(f"Wrote resolved configuration to {path}")
        return path
