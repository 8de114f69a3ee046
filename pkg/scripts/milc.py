"""
MIL Certainty Pooling Command Line
generate: write train/validation/test BagPacks from a preset or config file
train:    run seed sweeps per pooling operator (and training-set size) and write
          runs.csv, sizes.csv, summary.json, checkpoints
eval:     score a BagPack with a checkpoint and write scores, rankings and instance predictions

Exit codes: 0 ok, 1 unexpected error, 2 config or dimension error,
3 I/O or format error, 4 every seed of every sweep failed.
"""

import os
import sys
import csv
import json
import shutil
import tempfile
import argparse
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from services.bag_service import (
    SPLITS,
    generate_feature_bags,
    generate_mnist_bags,
    load_mnist,
    read_bagpack,
    write_bagpack
)
from services.config_service import (
    config_hash,
    data_paths,
    experiment_configs,
    generator_configs,
    load_config
)
from services.errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    MilcError,
    SweepError
)
from services.experiment_service import (
    ExperimentReport,
    RunRecord,
    SizePoint,
    evaluate,
    export_rankings,
    run_size_sweep,
    run_sweep
)
from services.logging_service import get_logging_service
from services.model_service import load_checkpoint, save_checkpoint
from services.pooling import DEFAULT_EPS, DEFAULT_MC_PASSES, POOLING_NAMES


RUNS_HEADER = ['seed', 'best_epoch', 'val_auc', 'test_bag_auc', 'test_instance_auc', 'wall_s', 'status']
SCORES_HEADER = ['bag_id', 'label', 'z', 'selected_index']
RANKINGS_HEADER = ['bag_id', 'rank', 'instance_index', 'h', 'instance_label']
INSTANCES_HEADER = ['bag_id', 'instance_index', 'h', 'instance_label']
SIZES_HEADER = [
    'pooling', 'train_size', 'top_k', 'n_failed', 'val_auc_mean', 'test_bag_auc_mean', 'test_bag_auc_std',
    'test_instance_auc_mean', 'test_instance_auc_std', 'test_instance_auc_n', 'status'
]

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SWEEP = 4


def fmt(value: Any) -> str:
    """CSV cell: floats with 17 significant digits, None as empty"""
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_csv(path: Path, header: List[str], rows: Iterable[Iterable[Any]]):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(value) for value in row])


def write_json(path: Path, data: Dict[str, Any]):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


@contextmanager
def atomic_directory(out_dir: Path):
    """
    Yield a temporary sibling of out_dir and move it into place on success

    On error the temporary directory is removed and out_dir is untouched.
    """
    out_dir = Path(out_dir).resolve()
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp_dir = Path(tempfile.mkdtemp(prefix=f'.{out_dir.name}.', suffix='.tmp', dir=out_dir.parent))
    try:
        yield tmp_dir
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(tmp_dir, out_dir)


def _output_dir(args, config: Dict[str, Any]) -> Path:
    out = args.out or config.get('out_dir')
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir")
    return Path(out)


def parse_train_sizes(text: str) -> List[Any]:
    """'50,100,0.5' -> [50, 100, 0.5]; a '.' marks a fraction"""
    sizes = []
    for item in (part.strip() for part in text.split(',')):
        if not item:
            continue
        try:
            sizes.append(float(item) if '.' in item else int(item))
        except ValueError:
            raise ConfigError(f"--train-sizes: '{item}' is not a number")
    if not sizes:
        raise ConfigError("--train-sizes lists no sizes")
    return sizes


def _overrides(args) -> Dict[str, Any]:
    """Nested config dict from whichever flags were given"""
    overrides: Dict[str, Any] = {}
    experiment: Dict[str, Any] = {}

    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if getattr(args, 'jobs', None) is not None:
        overrides['jobs'] = args.jobs
    if getattr(args, 'n_train', None) is not None:
        overrides['generate'] = {'train': {'n_bags': args.n_train}}
    if getattr(args, 'bagpack', None) is not None:
        overrides['data'] = {'root': str(Path(args.bagpack).resolve())}
    if getattr(args, 'pooling', None) is not None:
        experiment['pooling'] = [name.strip() for name in args.pooling.split(',') if name.strip()]
    if getattr(args, 'mc_passes', None) is not None:
        experiment['mc_passes'] = args.mc_passes
    if getattr(args, 'epochs', None) is not None:
        experiment['epochs'] = args.epochs
    if getattr(args, 'n_seeds', None) is not None:
        experiment['n_seeds'] = args.n_seeds
        experiment['seeds'] = None
    if getattr(args, 'top_k', None) is not None:
        experiment['top_k'] = args.top_k
    if getattr(args, 'train_sizes', None) is not None:
        experiment['train_sizes'] = parse_train_sizes(args.train_sizes)
    if getattr(args, 'no_wall_time', False):
        experiment['record_wall_time'] = False
    if experiment:
        overrides['experiment'] = experiment
    return overrides


def _provenance(config: Dict[str, Any], seed: int, **extra) -> Dict[str, Any]:
    provenance = {
        'seed': seed,
        'config_hash': config_hash(config, seed),
        'preset': config.get('preset')
    }
    provenance.update(extra)
    return provenance


def cmd_generate(args) -> int:
    """Write one BagPack per split plus provenance.json"""
    logger = get_logging_service()
    config = load_config(args.config, args.preset, _overrides(args))
    out_dir = _output_dir(args, config)
    seed = int(config['seed'])
    generate = config['generate']
    gen_configs = generator_configs(config)
    split_rngs = dict(zip(SPLITS, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(SPLITS)))))

    datasets = {}
    if generate['kind'] == 'mnist':
        mnist = generate['mnist']
        missing = [key for key, path in mnist.items() if not path]
        if missing:
            raise ConfigError(f"generate.mnist is missing {', '.join(missing)} (or set MILC_MNIST_DIR)")
        train_images, train_labels = load_mnist(mnist['train_images'], mnist['train_labels'])
        test_images, test_labels = load_mnist(mnist['test_images'], mnist['test_labels'])
        sources = {
            'train': (train_images, train_labels),
            'validation': (train_images, train_labels),
            'test': (test_images, test_labels)
        }
        for split in SPLITS:
            images, labels = sources[split]
            datasets[split] = generate_mnist_bags(images, labels, gen_configs[split], split_rngs[split], split)
    elif generate['kind'] == 'features':
        for split in SPLITS:
            datasets[split] = generate_feature_bags(
                gen_configs[split],
                split_rngs[split],
                dim=int(generate['feature_dim']),
                separation=float(generate['separation']),
                direction_seed=seed,
                split=split
            )
    else:
        raise ConfigError(f"generate.kind must be 'mnist' or 'features', got '{generate['kind']}'")

    with atomic_directory(out_dir) as tmp_dir:
        for split, ds in datasets.items():
            write_bagpack(ds, tmp_dir / split)
            logger.info(f"{split}: {len(ds)} bags ({int(ds.labels().sum())} positive)")
        write_json(tmp_dir / 'provenance.json', _provenance(
            config, seed,
            kind=generate['kind'],
            splits={split: len(ds) for split, ds in datasets.items()},
            generators={split: cfg.to_dict() for split, cfg in gen_configs.items()}
        ))

    logger.info(f"BagPacks written to {out_dir}")
    return EXIT_OK


def _run_rows(runs: List[RunRecord]) -> List[List[Any]]:
    return [
        [run.seed, run.best_epoch, run.best_val_auc, run.test_bag_auc, run.test_instance_auc, run.wall_s, run.status]
        for run in sorted(runs, key=lambda run: run.seed)
    ]


def _write_pooling_outputs(pooling_dir: Path, runs: List[RunRecord]):
    pooling_dir.mkdir(parents=True, exist_ok=True)
    write_csv(pooling_dir / 'runs.csv', RUNS_HEADER, _run_rows(runs))
    checkpoint_dir = pooling_dir / 'checkpoints'
    for run in runs:
        if run.succeeded and run.state is not None:
            checkpoint_dir.mkdir(exist_ok=True)
            save_checkpoint(run.state, checkpoint_dir / f'seed-{run.seed}.milc')


def _size_row(pooling: str, point: SizePoint) -> List[Any]:
    if not point.succeeded:
        return [pooling, point.train_size, None, len(point.runs), None, None, None, None, None, None, 'failed']
    report = point.report
    headline = report.headline
    return [
        pooling, point.train_size, report.top_k, report.n_failed,
        headline['val_auc_mean'], headline['test_bag_auc_mean'], headline['test_bag_auc_std'],
        headline['test_instance_auc_mean'], headline['test_instance_auc_std'],
        headline['test_instance_auc_n'], 'ok'
    ]


def cmd_train(args) -> int:
    """
    Run one seed sweep per pooling operator, or one per pooling and training
    size when experiment.train_sizes is set

    Sweeps whose seeds all fail are written and reported; the command exits 4
    only when no sweep succeeded.
    """
    logger = get_logging_service()
    config = load_config(args.config, args.preset, _overrides(args))
    out_dir = _output_dir(args, config)
    seed = int(config['seed'])
    cfgs = experiment_configs(config)
    paths = data_paths(config)
    datasets = {split: read_bagpack(paths[split], split) for split in SPLITS}
    jobs = int(config['jobs'])

    reports: Dict[str, ExperimentReport] = {}
    size_points: Dict[str, List[SizePoint]] = {}
    failed: List[str] = []
    with atomic_directory(out_dir) as tmp_dir:
        logger.set_events_path(tmp_dir)
        try:
            for cfg in cfgs:
                if cfg.train_sizes is not None:
                    points = run_size_sweep(cfg, datasets['train'], datasets['validation'], datasets['test'], jobs)
                    size_points[cfg.pooling] = points
                    for point in points:
                        _write_pooling_outputs(tmp_dir / cfg.pooling / f'n-{point.train_size}', point.runs)
                        if not point.succeeded:
                            failed.append(point.error)
                    continue
                try:
                    report = run_sweep(cfg, datasets['train'], datasets['validation'], datasets['test'], jobs)
                    reports[cfg.pooling] = report
                    runs = report.runs
                except SweepError as e:
                    failed.append(str(e))
                    runs = e.runs
                _write_pooling_outputs(tmp_dir / cfg.pooling, runs)

            provenance = _provenance(
                config, seed,
                seeds=cfgs[0].seeds,
                poolings=[cfg.pooling for cfg in cfgs],
                data={split: str(path) for split, path in paths.items()}
            )
            write_json(tmp_dir / 'provenance.json', provenance)
            if size_points:
                write_csv(tmp_dir / 'sizes.csv', SIZES_HEADER, [
                    _size_row(name, point) for name, points in size_points.items() for point in points
                ])
            n_succeeded = len(reports) + sum(p.succeeded for points in size_points.values() for p in points)
            if n_succeeded:
                summary = {'provenance': provenance}
                if reports:
                    summary['poolings'] = {name: report.to_dict() for name, report in reports.items()}
                if size_points:
                    summary['sizes'] = {
                        name: [point.report.to_dict() for point in points if point.succeeded]
                        for name, points in size_points.items()
                    }
                write_json(tmp_dir / 'summary.json', summary)
        finally:
            logger.set_events_path(None)

    for name, report in reports.items():
        headline = report.headline
        logger.info(
            f"{name}: top-{report.top_k} test bag AUC {fmt(headline['test_bag_auc_mean'])} "
            f"(std {fmt(headline['test_bag_auc_std'])}), seeds {report.selected_seeds}"
        )
    for name, points in size_points.items():
        for point in points:
            if point.succeeded:
                logger.info(
                    f"{name} n={point.train_size}: top-{point.report.top_k} test bag AUC "
                    f"{fmt(point.report.headline['test_bag_auc_mean'])}"
                )
    if failed and not n_succeeded:
        raise SweepError('; '.join(failed))
    for message in failed:
        logger.warning(message)
    return EXIT_OK


def cmd_eval(args) -> int:
    """Score every bag of a BagPack split and rank its instances"""
    logger = get_logging_service()
    if args.mc_passes < 2 and args.pooling == 'certainty':
        raise ConfigError(f"certainty pooling needs --mc-passes >= 2, got {args.mc_passes}")
    if args.n_top < 1:
        raise ConfigError(f"--n-top must be >= 1, got {args.n_top}")

    state = load_checkpoint(args.checkpoint)
    if args.pooling == 'attention' and state.attention is None:
        raise ConfigError("checkpoint has no attention network; it cannot be evaluated with attention pooling")
    ds = read_bagpack(args.bagpack)
    if ds.dim is not None and ds.dim != state.spec.input_dim:
        raise DimensionError(f"checkpoint expects instance width {state.spec.input_dim}, BagPack has {ds.dim}")

    evaluation = evaluate(state, ds, args.pooling, args.mc_passes, args.seed, args.eps)
    rankings = export_rankings(state, ds, args.n_top, positive_only=args.positive_only)

    instance_rows = []
    for bag, h in zip(ds, evaluation.predictions):
        for index, value in enumerate(h):
            label = None if bag.instance_labels is None else int(bag.instance_labels[index])
            instance_rows.append([bag.bag_id, index, float(value), label])

    with atomic_directory(Path(args.out)) as tmp_dir:
        write_csv(tmp_dir / 'scores.csv', SCORES_HEADER, [
            [bag_id, int(label), float(z), selected]
            for bag_id, label, z, selected in zip(
                evaluation.bag_ids, evaluation.bags.labels, evaluation.bags.scores, evaluation.selected
            )
        ])
        write_csv(tmp_dir / 'rankings.csv', RANKINGS_HEADER, [list(row) for row in rankings])
        write_csv(tmp_dir / 'instances.csv', INSTANCES_HEADER, instance_rows)
        settings = {
            'checkpoint': str(Path(args.checkpoint).resolve()),
            'bagpack': str(Path(args.bagpack).resolve()),
            'pooling': args.pooling,
            'mc_passes': args.mc_passes,
            'eps': args.eps,
            'n_top': args.n_top,
            'positive_only': args.positive_only
        }
        write_json(tmp_dir / 'provenance.json', _provenance(settings, args.seed, settings=settings))

    logger.info(f"Scored {len(ds)} bags into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Multiple instance learning with certainty pooling'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    generate = subparsers.add_parser('generate', help='Write train/validation/test BagPacks')
    generate.add_argument('--config', help='JSON config file')
    generate.add_argument('--preset', help='Named preset (mnist-1pct, mnist-10pct, camelyon-features)')
    generate.add_argument('--seed', type=int, help='Generation seed')
    generate.add_argument('--out', help='Output directory')
    generate.add_argument('--n-train', type=int, help='Number of training bags')
    generate.set_defaults(handler=cmd_generate)

    train = subparsers.add_parser('train', help='Run seed sweeps and write reports')
    train.add_argument('--config', help='JSON config file')
    train.add_argument('--preset', help='Named preset')
    train.add_argument('--seed', type=int, help='First seed when seeds are not listed explicitly')
    train.add_argument('--n-seeds', type=int, help='Number of consecutive seeds')
    train.add_argument('--top-k', type=int, help='Runs averaged into the headline')
    train.add_argument('--jobs', type=int, help='Parallel seed workers (default MILC_JOBS or 1)')
    train.add_argument('--out', help='Output directory')
    train.add_argument('--bagpack', help='Directory holding train/validation/test BagPacks')
    train.add_argument('--pooling', help=f"Comma-separated operators from {', '.join(POOLING_NAMES)}")
    train.add_argument('--mc-passes', type=int, help='MC dropout passes for certainty pooling')
    train.add_argument('--epochs', type=int, help='Training epochs')
    train.add_argument('--train-sizes', help='Comma-separated training-set sizes: bag counts (50) or fractions (0.5)')
    train.add_argument('--no-wall-time', action='store_true', help='Leave wall_s empty in runs.csv')
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = subparsers.add_parser('eval', help='Score a BagPack with a checkpoint')
    evaluate_cmd.add_argument('--checkpoint', required=True, help='Checkpoint (.milc) file')
    evaluate_cmd.add_argument('--bagpack', required=True, help='BagPack directory of one split')
    evaluate_cmd.add_argument('--pooling', choices=POOLING_NAMES, default='certainty', help='Pooling operator')
    evaluate_cmd.add_argument('--mc-passes', type=int, default=DEFAULT_MC_PASSES, help='MC dropout passes')
    evaluate_cmd.add_argument('--eps', type=float, default=DEFAULT_EPS, help='Certainty epsilon')
    evaluate_cmd.add_argument('--seed', type=int, default=0, help='Evaluation seed')
    evaluate_cmd.add_argument('--n-top', type=int, default=10, help='Instances listed per bag in rankings.csv')
    evaluate_cmd.add_argument('--positive-only', action='store_true', help='Rank positive bags only')
    evaluate_cmd.add_argument('--out', required=True, help='Output directory')
    evaluate_cmd.set_defaults(handler=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = get_logging_service()

    try:
        return args.handler(args)
    except (ConfigError, DimensionError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except (OSError, FormatError, DataError) as e:
        logger.error(str(e))
        return EXIT_IO
    except SweepError as e:
        logger.error(str(e))
        return EXIT_SWEEP
    except MilcError as e:
        logger.error(str(e))
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.error(f"unexpected {type(e).__name__}: {e}")
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
