#!/usr/bin/env python3
"""
Tests for the milc command line
generate / train / eval end to end on tiny synthetic feature bags
"""

import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from scripts import milc
from services import experiment_service
from services.errors import NumericError
from services.model_service import ModelSpec, init_model, save_checkpoint


FEATURE_CONFIG = {
    'seed': 3,
    'generate': {
        'kind': 'features',
        'feature_dim': 6,
        'separation': 8.0,
        'train': {'n_bags': 8, 'bag_size': 5},
        'validation': {'n_bags': 6, 'bag_size': 5},
        'test': {'n_bags': 6, 'bag_size': 5}
    },
    'experiment': {
        'model': {'embedder_dims': [6, 5], 'head_dims': [3, 1], 'attention_hidden': 4, 'dropout_p': 0.2},
        'lr': 0.01,
        'epochs': 2,
        'mc_passes': 3,
        'validation_every': 1,
        'n_seeds': 2,
        'top_k': 1
    }
}


def read_rows(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(FEATURE_CONFIG))
    return path


@pytest.fixture
def bagpacks(tmp_path, config_file):
    out = tmp_path / 'bags'
    assert milc.main(['generate', '--config', str(config_file), '--out', str(out)]) == 0
    return out


def leftovers(directory):
    return [p.name for p in Path(directory).iterdir() if p.name.endswith('.tmp')]


def test_generate_writes_splits_and_provenance(bagpacks, tmp_path, config_file):
    for split, n_bags in (('train', 8), ('validation', 6), ('test', 6)):
        manifest = (bagpacks / split / 'manifest.jsonl').read_text().splitlines()
        assert len(manifest) == n_bags
    provenance = json.loads((bagpacks / 'provenance.json').read_text())
    assert provenance['seed'] == 3
    assert provenance['splits'] == {'train': 8, 'validation': 6, 'test': 6}

    again = tmp_path / 'bags-again'
    assert milc.main(['generate', '--config', str(config_file), '--out', str(again)]) == 0
    assert json.loads((again / 'provenance.json').read_text())['config_hash'] == provenance['config_hash']
    assert ((again / 'train' / 'bag_000000.bin').read_bytes()
            == (bagpacks / 'train' / 'bag_000000.bin').read_bytes())
    assert leftovers(tmp_path) == []


def test_generate_missing_idx_exits_3_without_output(tmp_path):
    config = {
        'generate': {
            'kind': 'mnist',
            'mnist': {name: f'missing/{name}.idx' for name in ('train_images', 'train_labels', 'test_images', 'test_labels')},
            'train': {'n_bags': 2, 'bag_size': 3}
        }
    }
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(config))
    out = tmp_path / 'out'
    assert milc.main(['generate', '--config', str(path), '--out', str(out)]) == 3
    assert not out.exists()
    assert leftovers(tmp_path) == []


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'experiment': {'learning_rate': 0.1}}))
    assert milc.main(['generate', '--config', str(path), '--out', str(tmp_path / 'out')]) == 2


def test_certainty_with_one_mc_pass_exits_2(bagpacks, tmp_path, config_file):
    code = milc.main([
        'train', '--config', str(config_file), '--bagpack', str(bagpacks),
        '--pooling', 'certainty', '--mc-passes', '1', '--out', str(tmp_path / 'run')
    ])
    assert code == 2
    assert not (tmp_path / 'run').exists()


def train(bagpacks, config_file, out):
    return milc.main([
        'train', '--config', str(config_file), '--bagpack', str(bagpacks),
        '--pooling', 'max,certainty', '--no-wall-time', '--out', str(out)
    ])


def test_train_writes_reports(bagpacks, tmp_path, config_file):
    out = tmp_path / 'run'
    assert train(bagpacks, config_file, out) == 0

    summary = json.loads((out / 'summary.json').read_text())
    assert sorted(summary['poolings']) == ['certainty', 'max']
    for pooling in ('max', 'certainty'):
        rows = read_rows(out / pooling / 'runs.csv')
        assert list(rows[0]) == milc.RUNS_HEADER
        assert [int(row['seed']) for row in rows] == [3, 4]
        assert all(row['wall_s'] == '' and row['status'] == 'ok' for row in rows)
        for row in rows:
            assert (out / pooling / 'checkpoints' / f"seed-{row['seed']}.milc").exists()

        # headline recomputed from runs.csv: best validation AUC, ties to the lower seed
        best = sorted(rows, key=lambda row: (-float(row['val_auc']), int(row['seed'])))[0]
        headline = summary['poolings'][pooling]['headline']
        assert headline['test_bag_auc_mean'] == float(best['test_bag_auc'])

    assert (out / 'provenance.json').exists()
    events = [json.loads(line) for line in (out / 'events.ndjson').read_text().splitlines()]
    assert {'run_started', 'validation', 'run_finished', 'sweep_finished'} <= {e['event_type'] for e in events}
    assert leftovers(tmp_path) == []


def test_train_reruns_are_byte_identical(bagpacks, tmp_path, config_file):
    assert train(bagpacks, config_file, tmp_path / 'first') == 0
    assert train(bagpacks, config_file, tmp_path / 'second') == 0
    for pooling in ('max', 'certainty'):
        first = (tmp_path / 'first' / pooling / 'runs.csv').read_bytes()
        second = (tmp_path / 'second' / pooling / 'runs.csv').read_bytes()
        assert first == second
        assert ((tmp_path / 'first' / pooling / 'checkpoints' / 'seed-3.milc').read_bytes()
                == (tmp_path / 'second' / pooling / 'checkpoints' / 'seed-3.milc').read_bytes())


def evaluate(checkpoint, bagpack, out, *extra):
    return milc.main([
        'eval', '--checkpoint', str(checkpoint), '--bagpack', str(bagpack),
        '--seed', '7', '--mc-passes', '4', '--n-top', '3', '--out', str(out), *extra
    ])


def test_eval_outputs(bagpacks, tmp_path, config_file):
    run = tmp_path / 'run'
    assert train(bagpacks, config_file, run) == 0
    checkpoint = run / 'certainty' / 'checkpoints' / 'seed-3.milc'

    assert evaluate(checkpoint, bagpacks / 'test', tmp_path / 'eval-a') == 0
    assert evaluate(checkpoint, bagpacks / 'test', tmp_path / 'eval-b') == 0
    for name in ('scores.csv', 'rankings.csv', 'instances.csv'):
        assert (tmp_path / 'eval-a' / name).read_bytes() == (tmp_path / 'eval-b' / name).read_bytes()

    scores = read_rows(tmp_path / 'eval-a' / 'scores.csv')
    assert len(scores) == 6
    assert all(0.0 < float(row['z']) < 1.0 for row in scores)
    assert all(row['selected_index'] != '' for row in scores)

    rankings = read_rows(tmp_path / 'eval-a' / 'rankings.csv')
    assert list(rankings[0]) == milc.RANKINGS_HEADER
    by_bag = {}
    for row in rankings:
        by_bag.setdefault(row['bag_id'], []).append(float(row['h']))
    assert all(len(values) == 3 for values in by_bag.values())
    assert all(a >= b for values in by_bag.values() for a, b in zip(values, values[1:]))

    instances = read_rows(tmp_path / 'eval-a' / 'instances.csv')
    assert len(instances) == 6 * 5


def test_eval_dimension_mismatch_exits_2(bagpacks, tmp_path, capsys):
    checkpoint = tmp_path / 'wide.milc'
    save_checkpoint(init_model(ModelSpec(embedder_dims=[9, 4], head_dims=[1]), np.random.default_rng(0)), checkpoint)
    assert evaluate(checkpoint, bagpacks / 'test', tmp_path / 'eval') == 2
    err = capsys.readouterr().err
    assert '9' in err and '6' in err
    assert not (tmp_path / 'eval').exists()


def test_eval_attention_needs_attention_checkpoint(bagpacks, tmp_path):
    checkpoint = tmp_path / 'plain.milc'
    save_checkpoint(init_model(ModelSpec(embedder_dims=[6, 4], head_dims=[1]), np.random.default_rng(0)), checkpoint)
    assert evaluate(checkpoint, bagpacks / 'test', tmp_path / 'eval', '--pooling', 'attention') == 2


def test_train_size_sweep_writes_sizes_csv(bagpacks, tmp_path, config_file):
    out = tmp_path / 'sizes'
    code = milc.main([
        'train', '--config', str(config_file), '--bagpack', str(bagpacks), '--pooling', 'max,certainty',
        '--train-sizes', '4,1.0', '--epochs', '1', '--no-wall-time', '--out', str(out)
    ])
    assert code == 0

    rows = read_rows(out / 'sizes.csv')
    assert list(rows[0]) == milc.SIZES_HEADER
    assert [(row['pooling'], int(row['train_size'])) for row in rows] == [
        ('max', 4), ('max', 8), ('certainty', 4), ('certainty', 8)
    ]
    assert all(row['status'] == 'ok' for row in rows)

    summary = json.loads((out / 'summary.json').read_text())
    assert 'poolings' not in summary
    for pooling in ('max', 'certainty'):
        blocks = summary['sizes'][pooling]
        assert [block['train_size'] for block in blocks] == [4, 8]
        for block, row in zip(blocks, [r for r in rows if r['pooling'] == pooling]):
            assert block['headline']['test_bag_auc_mean'] == float(row['test_bag_auc_mean'])
        for size in (4, 8):
            runs = read_rows(out / pooling / f'n-{size}' / 'runs.csv')
            assert [int(row['seed']) for row in runs] == [3, 4]


def test_train_sizes_larger_than_bagpack_exit_2(bagpacks, tmp_path, config_file):
    code = milc.main([
        'train', '--config', str(config_file), '--bagpack', str(bagpacks), '--pooling', 'max',
        '--train-sizes', '50', '--out', str(tmp_path / 'run')
    ])
    assert code == 2
    assert not (tmp_path / 'run').exists()
    assert milc.main([
        'train', '--config', str(config_file), '--bagpack', str(bagpacks), '--train-sizes', 'half',
        '--out', str(tmp_path / 'run')
    ]) == 2


def fail_pooling(monkeypatch, names):
    real_step = experiment_service._train_step

    def step(cfg, *args):
        if cfg.pooling in names:
            raise NumericError("loss went non-finite")
        return real_step(cfg, *args)

    monkeypatch.setattr(experiment_service, '_train_step', step)


def test_one_failed_pooling_still_exits_0(bagpacks, tmp_path, config_file, monkeypatch, capsys):
    fail_pooling(monkeypatch, {'max'})
    out = tmp_path / 'run'
    assert train(bagpacks, config_file, out) == 0
    assert 'all 2 max runs failed' in capsys.readouterr().err

    assert all(row['status'] == 'failed' for row in read_rows(out / 'max' / 'runs.csv'))
    assert not (out / 'max' / 'checkpoints').exists()
    summary = json.loads((out / 'summary.json').read_text())
    assert list(summary['poolings']) == ['certainty']


def test_every_sweep_failed_exits_4(bagpacks, tmp_path, config_file, monkeypatch):
    fail_pooling(monkeypatch, {'max', 'certainty'})
    out = tmp_path / 'run'
    assert train(bagpacks, config_file, out) == 4
    assert len(read_rows(out / 'certainty' / 'runs.csv')) == 2
    assert (out / 'events.ndjson').exists()
    assert not (out / 'summary.json').exists()
