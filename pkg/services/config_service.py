"""
Config Service
Named presets, JSON config files and environment defaults resolved into
generator and experiment settings, plus the provenance hash
"""

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from services.bag_service import SPLITS, BagGenConfig
from services.errors import ConfigError, MilcError
from services.experiment_service import ExperimentConfig
from services.model_service import ModelSpec
from services.pooling import POOLING_NAMES

load_dotenv()


MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte'
}

# every accepted key with its default; nested dicts are sections
BASE_CONFIG: Dict[str, Any] = {
    'preset': None,
    'seed': 0,
    'out_dir': None,
    'jobs': None,
    'generate': {
        'kind': 'mnist',
        'mnist': {name: None for name in MNIST_FILES},
        'feature_dim': 2048,
        'separation': 5.0,
        **{
            split: {
                'n_bags': 0,
                'bag_size': 100,
                'bag_size_std': 0.0,
                'positives_per_positive_bag': 1,
                'positive_fraction': 0.5,
                'positive_digit': 9
            }
            for split in SPLITS
        }
    },
    'experiment': {
        'pooling': 'certainty',
        'model': {
            'embedder_dims': None,
            'head_dims': None,
            'attention_hidden': None,
            'dropout_p': 0.5,
            'activation': 'relu'
        },
        'lr': 5e-4,
        'epochs': 50,
        'mc_passes': 10,
        'eps': 1e-6,
        'bag_sample_n': None,
        'validation_every': 5,
        'validation_instance_cap': None,
        'seeds': None,
        'n_seeds': 1,
        'top_k': 1,
        'instance_auc_mode': 'pooled',
        'record_wall_time': True,
        'train_sizes': None
    },
    'data': {
        'root': None,
        'train': None,
        'validation': None,
        'test': None
    }
}

HASH_EXCLUDED = ('out_dir', 'jobs')

PATH_KEYS = [
    ('out_dir',),
    ('generate', 'mnist', 'train_images'),
    ('generate', 'mnist', 'train_labels'),
    ('generate', 'mnist', 'test_images'),
    ('generate', 'mnist', 'test_labels'),
    ('data', 'root'),
    ('data', 'train'),
    ('data', 'validation'),
    ('data', 'test')
]

_MNIST_MODEL = {
    'embedder_dims': [784, 256, 128],
    'head_dims': [64, 1],
    'attention_hidden': 128,
    'dropout_p': 0.5
}

_MNIST_EXPERIMENT = {
    'pooling': list(POOLING_NAMES),
    'model': _MNIST_MODEL,
    'lr': 5e-4,
    'epochs': 50,
    'validation_every': 5,
    'mc_passes': 10,
    'eps': 1e-6,
    'n_seeds': 20,
    'top_k': 10,
    'instance_auc_mode': 'pooled'
}

# Preset configuration - overlaid by config files and flags
PRESETS: Dict[str, Dict[str, Any]] = {
    'mnist-1pct': {
        'generate': {
            'kind': 'mnist',
            'train': {'n_bags': 300, 'bag_size': 100, 'positives_per_positive_bag': 1},
            'validation': {'n_bags': 1000, 'bag_size': 100, 'positives_per_positive_bag': 1},
            'test': {'n_bags': 1000, 'bag_size': 100, 'positives_per_positive_bag': 1}
        },
        'experiment': _MNIST_EXPERIMENT
    },
    'mnist-10pct': {
        'generate': {
            'kind': 'mnist',
            'train': {'n_bags': 200, 'bag_size': 10, 'bag_size_std': 2.0},
            'validation': {'n_bags': 200, 'bag_size': 10, 'bag_size_std': 2.0},
            'test': {'n_bags': 1000, 'bag_size': 10, 'bag_size_std': 2.0}
        },
        'experiment': _MNIST_EXPERIMENT
    },
    'camelyon-features': {
        'generate': {
            'kind': 'features',
            'feature_dim': 2048,
            'separation': 5.0,
            'train': {'n_bags': 100, 'bag_size': 150, 'positives_per_positive_bag': 3},
            'validation': {'n_bags': 30, 'bag_size': 150, 'positives_per_positive_bag': 3},
            'test': {'n_bags': 50, 'bag_size': 150, 'positives_per_positive_bag': 3}
        },
        'experiment': {
            'pooling': list(POOLING_NAMES),
            'model': {
                'embedder_dims': [2048],
                'head_dims': [1024, 512, 256, 128, 64, 1],
                'attention_hidden': 1024,
                'dropout_p': 0.5
            },
            'lr': 0.01,
            'epochs': 1000,
            'validation_every': 5,
            'validation_instance_cap': 20000,
            'bag_sample_n': 128,
            'n_seeds': 20,
            'top_k': 10,
            'instance_auc_mode': 'per_bag'
        }
    }
}


def default_jobs() -> int:
    """Worker count from MILC_JOBS (default 1)"""
    raw = os.getenv('MILC_JOBS', '1')
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"MILC_JOBS must be an integer, got '{raw}'")
    if jobs < 1:
        raise ConfigError(f"MILC_JOBS must be >= 1, got {jobs}")
    return jobs


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of base with overlay merged in; sections merge, other values replace"""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def check_keys(config: Dict[str, Any], schema: Dict[str, Any] = BASE_CONFIG, prefix: str = ''):
    """Reject keys that are not in the schema, naming the full key path"""
    if not isinstance(config, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or '<root>'}' must be an object")
    for key, value in config.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(schema[key], dict):
            check_keys(value, schema[key], f"{path}.")


def _resolve_paths(config: Dict[str, Any], base_dir: Path):
    for key_path in PATH_KEYS:
        section = config
        for key in key_path[:-1]:
            section = section.get(key)
            if not isinstance(section, dict):
                break
        else:
            value = section.get(key_path[-1])
            if value is not None and not Path(value).is_absolute():
                section[key_path[-1]] = str((base_dir / value).resolve())


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a JSON config file, check its keys and resolve its relative paths

    Raises:
        ConfigError: not valid JSON, or an unknown key
        OSError: the file cannot be read
    """
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
    check_keys(config)
    _resolve_paths(config, path.parent.resolve())
    return config


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None
) -> Dict[str, Any]:
    """
    Resolve the full configuration

    Precedence, lowest first: built-in defaults, preset, config file,
    overrides (command-line flags). An explicit preset argument replaces the
    file's `preset` key.

    Args:
        path: Optional JSON config file
        preset: Optional preset name
        overrides: Nested dict of flag values

    Returns:
        Config dict shaped like BASE_CONFIG
    """
    file_config = read_config_file(path) if path else {}
    overrides = overrides or {}
    check_keys(overrides)

    preset = preset or overrides.get('preset') or file_config.get('preset')
    config = copy.deepcopy(BASE_CONFIG)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (available: {', '.join(sorted(PRESETS))})")
        config = deep_merge(config, PRESETS[preset])
    config = deep_merge(config, file_config)
    config = deep_merge(config, overrides)
    config['preset'] = preset

    if config['jobs'] is None:
        config['jobs'] = default_jobs()
    if config['generate']['kind'] == 'mnist':
        _default_mnist_paths(config['generate']['mnist'])
    return config


def _default_mnist_paths(mnist: Dict[str, Optional[str]]):
    """Fill unset MNIST paths from MILC_MNIST_DIR, preferring uncompressed files"""
    mnist_dir = os.getenv('MILC_MNIST_DIR')
    if not mnist_dir:
        return
    for key, filename in MNIST_FILES.items():
        if mnist.get(key):
            continue
        candidate = Path(mnist_dir) / filename
        if not candidate.exists() and candidate.with_name(filename + '.gz').exists():
            candidate = candidate.with_name(filename + '.gz')
        mnist[key] = str(candidate)


def config_hash(config: Dict[str, Any], seed: int) -> str:
    """SHA-256 of the canonical JSON of the resolved config plus seed

    out_dir and jobs do not change results and are left out.
    """
    hashed = {key: value for key, value in config.items() if key not in HASH_EXCLUDED}
    payload = json.dumps({'config': hashed, 'seed': int(seed)}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def pooling_names(config: Dict[str, Any]) -> List[str]:
    pooling = config['experiment']['pooling']
    names = [pooling] if isinstance(pooling, str) else list(pooling)
    if not names:
        raise ConfigError("experiment.pooling must name at least one operator")
    for name in names:
        if name not in POOLING_NAMES:
            raise ConfigError(f"experiment.pooling: unknown operator '{name}' (choose from {', '.join(POOLING_NAMES)})")
    if len(set(names)) != len(names):
        raise ConfigError(f"experiment.pooling lists an operator twice: {names}")
    return names


def seed_list(config: Dict[str, Any]) -> List[int]:
    """Explicit experiment.seeds, else n_seeds consecutive seeds from the top-level seed"""
    experiment = config['experiment']
    if experiment['seeds'] is not None:
        return [int(s) for s in experiment['seeds']]
    n_seeds = int(experiment['n_seeds'])
    if n_seeds < 1:
        raise ConfigError(f"experiment.n_seeds must be >= 1, got {n_seeds}")
    return [int(config['seed']) + i for i in range(n_seeds)]


def experiment_configs(config: Dict[str, Any]) -> List[ExperimentConfig]:
    """
    One ExperimentConfig per requested pooling operator

    The attention net width only applies to attention pooling and is dropped
    for the other operators.

    Raises:
        ConfigError: any invalid experiment setting
    """
    experiment = config['experiment']
    model = dict(experiment['model'])
    if model['embedder_dims'] is None or model['head_dims'] is None:
        raise ConfigError("experiment.model needs embedder_dims and head_dims (or a preset)")

    seeds = seed_list(config)
    top_k = int(experiment['top_k'])
    configs = []
    for name in pooling_names(config):
        model_dict = dict(model)
        if name != 'attention':
            model_dict['attention_hidden'] = None
        try:
            configs.append(ExperimentConfig(
                pooling=name,
                model=ModelSpec.from_dict(model_dict),
                lr=float(experiment['lr']),
                epochs=int(experiment['epochs']),
                mc_passes=int(experiment['mc_passes']),
                eps=float(experiment['eps']),
                bag_sample_n=experiment['bag_sample_n'],
                validation_every=int(experiment['validation_every']),
                validation_instance_cap=experiment['validation_instance_cap'],
                seeds=seeds,
                top_k=top_k,
                instance_auc_mode=experiment['instance_auc_mode'],
                record_wall_time=bool(experiment['record_wall_time']),
                train_sizes=experiment['train_sizes']
            ))
        except ConfigError:
            raise
        except (MilcError, TypeError, ValueError) as e:
            raise ConfigError(f"experiment ({name}): {e}")
    return configs


def generator_configs(config: Dict[str, Any]) -> Dict[str, BagGenConfig]:
    """BagGenConfig per split"""
    configs = {}
    for split in SPLITS:
        try:
            configs[split] = BagGenConfig(**config['generate'][split])
        except (MilcError, TypeError, ValueError) as e:
            raise ConfigError(f"generate.{split}: {e}")
    return configs


def data_paths(config: Dict[str, Any]) -> Dict[str, Path]:
    """BagPack directory per split from data.root or the individual split keys"""
    data = config['data']
    paths = {}
    for split in SPLITS:
        if data.get(split):
            paths[split] = Path(data[split])
        elif data.get('root'):
            paths[split] = Path(data['root']) / split
        else:
            raise ConfigError(f"no BagPack for the {split} split: set data.root or data.{split}")
    return paths
