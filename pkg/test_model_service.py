#!/usr/bin/env python3
"""
Tests for the model service
Initialization, forward passes, attention, loss, Adam and checkpoint files
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from services import autograd as ag
from services.autograd import Tensor
from services.errors import ContractError, DimensionError, FormatError, ParameterError
from services.model_service import (
    AdamState,
    ModelSpec,
    adam_step,
    attention_forward,
    bce_loss,
    embed,
    head_forward,
    init_model,
    instance_forward,
    load_checkpoint,
    save_checkpoint
)


@pytest.fixture(autouse=True)
def fresh_graph():
    ag.reset_graph()
    yield
    ag.reset_graph()


def small_spec(**kwargs):
    defaults = dict(embedder_dims=[6, 5, 4], head_dims=[3, 1], attention_hidden=3, dropout_p=0.5)
    defaults.update(kwargs)
    return ModelSpec(**defaults)


def test_spec_validation():
    with pytest.raises(ParameterError):
        ModelSpec(embedder_dims=[4], head_dims=[2])
    with pytest.raises(ParameterError):
        ModelSpec(embedder_dims=[4], head_dims=[1], dropout_p=1.0)
    with pytest.raises(ParameterError):
        ModelSpec(embedder_dims=[], head_dims=[1])
    with pytest.raises(ParameterError):
        ModelSpec(embedder_dims=[4], head_dims=[1], activation='gelu')


def test_parameter_count_matches_state():
    spec = small_spec()
    state = init_model(spec, np.random.default_rng(0))
    assert sum(p.size for p in state.parameters()) == spec.parameter_count()


def test_single_layer_init_bound():
    state = init_model(ModelSpec(embedder_dims=[4], head_dims=[1]), np.random.default_rng(1))
    weight, bias = state.head[0]
    assert weight.shape == (4, 1)
    assert bias.shape == (1,)
    assert np.all(np.abs(weight.values) <= np.sqrt(6.0 / 5.0))
    assert np.all(bias.values == 0.0)


def test_init_is_deterministic():
    spec = small_spec()
    first = init_model(spec, np.random.default_rng(42)).parameters()
    second = init_model(spec, np.random.default_rng(42)).parameters()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.values, b.values)


def test_init_weight_variance():
    fan_in, fan_out = 400, 250
    state = init_model(ModelSpec(embedder_dims=[fan_in], head_dims=[fan_out, 1]), np.random.default_rng(2))
    weights = state.head[0][0].values
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    assert weights.size == 10 ** 5
    assert abs(weights.var() - limit ** 2 / 3.0) < 0.05 * limit ** 2 / 3.0


def test_instances_are_independent():
    state = init_model(small_spec(), np.random.default_rng(3))
    row = np.random.default_rng(4).standard_normal(6)
    _, single = instance_forward(state, Tensor(row[None, :]))
    _, triple = instance_forward(state, Tensor(np.tile(row, (3, 1))))
    np.testing.assert_array_equal(triple.values, np.repeat(single.values, 3))


def test_zero_weights_give_half():
    state = init_model(small_spec(), np.random.default_rng(5))
    for param in state.parameters():
        param.values = np.zeros(param.shape)
    _, h = instance_forward(state, Tensor(np.random.default_rng(6).standard_normal((4, 6))))
    np.testing.assert_array_equal(h.values, np.full(4, 0.5))


def test_predictions_strictly_inside_unit_interval():
    state = init_model(small_spec(), np.random.default_rng(7))
    _, h = instance_forward(state, Tensor(100.0 * np.random.default_rng(8).standard_normal((20, 6))))
    assert np.all(h.values > 0.0) and np.all(h.values < 1.0)


def test_instance_width_mismatch():
    state = init_model(small_spec(), np.random.default_rng(9))
    with pytest.raises(DimensionError, match='6'):
        instance_forward(state, Tensor(np.zeros((2, 5))))


def test_instance_forward_gradient():
    spec = small_spec(attention_hidden=None, dropout_p=0.0)
    state = init_model(spec, np.random.default_rng(10))
    x = Tensor(np.random.default_rng(11).uniform(-2, 2, (3, 6)))
    params = state.parameters()

    def total():
        return ag.reduce('sum', instance_forward(state, x)[1])

    assert ag.gradcheck(total, params) < 1e-4


def test_embed_then_head_equals_instance_forward():
    state = init_model(small_spec(), np.random.default_rng(12))
    x = Tensor(np.random.default_rng(13).standard_normal((5, 6)))
    embeddings, h = instance_forward(state, x)
    np.testing.assert_array_equal(head_forward(state, embed(state, x)).values, h.values)
    assert embeddings.shape == (5, 4)


def test_attention_uniform_for_identical_embeddings():
    state = init_model(small_spec(), np.random.default_rng(14))
    embeddings = Tensor(np.tile(np.random.default_rng(15).standard_normal(4), (5, 1)))
    np.testing.assert_allclose(attention_forward(state, embeddings).values, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_array_equal(attention_forward(state, Tensor(embeddings.values[:1])).values, [1.0])


def test_attention_sums_to_one():
    state = init_model(small_spec(), np.random.default_rng(16))
    a = attention_forward(state, Tensor(np.random.default_rng(17).standard_normal((9, 4))))
    assert abs(a.values.sum() - 1.0) < 1e-12


def test_attention_gradient():
    state = init_model(small_spec(), np.random.default_rng(18))
    embeddings = Tensor(np.random.default_rng(19).uniform(-2, 2, (4, 4)), requires_grad=True)
    c = Tensor(np.random.default_rng(20).uniform(-1, 1, 4))
    inputs = [embeddings, state.attention['V'], state.attention['b'], state.attention['w']]
    assert ag.gradcheck(lambda: ag.reduce('sum', attention_forward(state, embeddings) * c), inputs) < 1e-4


def test_attention_needs_attention_net():
    state = init_model(small_spec(attention_hidden=None), np.random.default_rng(21))
    with pytest.raises(ContractError):
        attention_forward(state, Tensor(np.zeros((2, 4))))


def test_bce_loss_examples():
    assert bce_loss(Tensor(0.5), 1).item() == pytest.approx(0.693147, abs=1e-6)
    z = Tensor(0.25, requires_grad=True)
    ag.backward(bce_loss(z, 1))
    assert float(z.grad) == pytest.approx(-4.0)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam = AdamState.for_params([p], lr=0.1)
    adam_step(adam, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.values, [1.0, -2.0])
    np.testing.assert_array_equal(adam.m[0], [0.0, 0.0])
    assert adam.t == 1


def test_adam_first_step_has_magnitude_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    adam = AdamState.for_params([p], lr=0.01)
    adam_step(adam, [p], [np.array([3.0, 0.5])])
    np.testing.assert_allclose(p.values, [-0.01, -0.01], rtol=1e-6)


def test_adam_descends_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    adam = AdamState.for_params([x], lr=0.1)
    values = [float(x.values[0] ** 2)]
    for _ in range(10):
        ag.backward(ag.reduce('sum', x * x))
        adam_step(adam, [x], [x.grad])
        x.zero_grad()
        values.append(float(x.values[0] ** 2))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    adam = AdamState.for_params([p], lr=0.1)
    with pytest.raises(DimensionError):
        adam_step(adam, [p], [np.zeros(2)])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    state = init_model(small_spec(), np.random.default_rng(22))
    path = tmp_path / 'model.milc'
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == state.spec
    for a, b in zip(state.parameters(), loaded.parameters()):
        assert a.values.tobytes() == b.values.tobytes()
    assert path.read_bytes()[:4] == b'MILC'


def test_checkpoint_errors(tmp_path):
    state = init_model(small_spec(), np.random.default_rng(23))
    path = tmp_path / 'model.milc'
    save_checkpoint(state, path)
    data = path.read_bytes()

    bad_magic = tmp_path / 'magic.milc'
    bad_magic.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(FormatError, match='magic'):
        load_checkpoint(bad_magic)

    truncated = tmp_path / 'short.milc'
    truncated.write_bytes(data[:-8])
    with pytest.raises(FormatError, match='truncated'):
        load_checkpoint(truncated)

    trailing = tmp_path / 'long.milc'
    trailing.write_bytes(data + b'\x00' * 8)
    with pytest.raises(FormatError, match='trailing'):
        load_checkpoint(trailing)


def test_clone_is_independent():
    state = init_model(small_spec(), np.random.default_rng(24))
    snapshot = state.clone()
    state.parameters()[0].values += 1.0
    assert not np.array_equal(state.parameters()[0].values, snapshot.parameters()[0].values)
