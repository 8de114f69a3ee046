"""
Model Service
Embedder, classifier head and attention network for bag models, plus the
binary cross-entropy loss, the Adam optimizer and checkpoint file I/O
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services import autograd as ag
from services.autograd import Tensor
from services.errors import (
    ContractError,
    DimensionError,
    EmptyBagError,
    FormatError,
    ParameterError
)


CHECKPOINT_MAGIC = b'MILC'
CHECKPOINT_VERSION = 1

Layer = Tuple[Tensor, Tensor]


@dataclass
class ModelSpec:
    """
    Architecture description

    embedder_dims starts with the instance width and ends with the embedding
    width; a single entry means instances are used as embeddings directly.
    head_dims lists the classifier layer widths after the embedding and must
    end in 1. attention_hidden is None for models without an attention net.
    """
    embedder_dims: List[int]
    head_dims: List[int]
    attention_hidden: Optional[int] = None
    dropout_p: float = 0.5
    activation: str = 'relu'

    def __post_init__(self):
        self.embedder_dims = [int(d) for d in self.embedder_dims]
        self.head_dims = [int(d) for d in self.head_dims]
        if self.attention_hidden is not None:
            self.attention_hidden = int(self.attention_hidden)
        self.validate()

    def validate(self):
        if not self.embedder_dims:
            raise ParameterError("embedder_dims needs at least the input width")
        if not self.head_dims:
            raise ParameterError("head_dims needs at least the output layer")
        if any(d < 1 for d in self.embedder_dims + self.head_dims):
            raise ParameterError(f"all layer widths must be >= 1: {self.embedder_dims} / {self.head_dims}")
        if self.head_dims[-1] != 1:
            raise ParameterError(f"head must end in width 1, got {self.head_dims[-1]}")
        if self.attention_hidden is not None and int(self.attention_hidden) < 1:
            raise ParameterError(f"attention_hidden must be >= 1, got {self.attention_hidden}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.activation != 'relu':
            raise ParameterError(f"Unsupported activation '{self.activation}' (only 'relu')")

    @property
    def input_dim(self) -> int:
        return self.embedder_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.embedder_dims[-1]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every embedder then head layer"""
        embedder = list(zip(self.embedder_dims[:-1], self.embedder_dims[1:]))
        head_in = [self.embedding_dim] + self.head_dims[:-1]
        return embedder + list(zip(head_in, self.head_dims))

    def parameter_count(self) -> int:
        count = sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes())
        if self.attention_hidden:
            a = int(self.attention_hidden)
            count += self.embedding_dim * a + a + a
        return count

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelSpec':
        return cls(**data)


@dataclass
class ModelState:
    """Parameter tensors for one model; declaration order is embedder, head, attention"""
    spec: ModelSpec
    embedder: List[Layer]
    head: List[Layer]
    attention: Optional[Dict[str, Tensor]] = None

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for weight, bias in self.embedder + self.head:
            params.extend([weight, bias])
        if self.attention is not None:
            params.extend([self.attention['V'], self.attention['b'], self.attention['w']])
        return params

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def clone(self) -> 'ModelState':
        """Detached snapshot with copied values"""
        def copy_layers(layers):
            return [(_param(w.values.copy(), w.name), _param(b.values.copy(), b.name)) for w, b in layers]

        attention = None
        if self.attention is not None:
            attention = {key: _param(t.values.copy(), t.name) for key, t in self.attention.items()}
        return ModelState(self.spec, copy_layers(self.embedder), copy_layers(self.head), attention)

    def load_values(self, arrays: Sequence[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise DimensionError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for param, array in zip(params, arrays):
            if param.shape != np.shape(array):
                raise DimensionError(f"parameter {param.name}: shape {param.shape} vs {np.shape(array)}")
            param.values = np.array(array, dtype=np.float64)


def _param(values, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelState:
    """
    Xavier-uniform weights and zero biases

    Args:
        spec: Architecture
        rng: Seeded generator; identical seeds give bit-identical states

    Returns:
        Fresh ModelState
    """
    spec.validate()
    layers: List[Layer] = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes()):
        layers.append((
            _param(_xavier(rng, fan_in, fan_out), f"layer{i}.W"),
            _param(np.zeros(fan_out), f"layer{i}.b")
        ))
    n_embed = len(spec.embedder_dims) - 1

    attention = None
    if spec.attention_hidden:
        e, a = spec.embedding_dim, int(spec.attention_hidden)
        attention = {
            'V': _param(_xavier(rng, e, a), 'attention.V'),
            'b': _param(np.zeros(a), 'attention.b'),
            'w': _param(_xavier(rng, a, 1), 'attention.w'),
        }

    return ModelState(spec, layers[:n_embed], layers[n_embed:], attention)


def _hidden_layer(x: Tensor, layer: Layer, p: float, mode: str, rng) -> Tensor:
    weight, bias = layer
    return ag.dropout(ag.relu(x @ weight + bias), p, mode, rng)


def embed(
    state: ModelState,
    instances: Tensor,
    dropout_mode: str = 'infer',
    rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Apply the shared embedder to every row of a K x d instance matrix"""
    instances = ag.as_tensor(instances)
    spec = state.spec
    if instances.ndim != 2 or instances.shape[1] != spec.input_dim:
        raise DimensionError(
            f"instance width mismatch: model expects {spec.input_dim}, got shape {instances.shape}"
        )
    x = instances
    for layer in state.embedder:
        x = _hidden_layer(x, layer, spec.dropout_p, dropout_mode, rng)
    return x


def head_forward(
    state: ModelState,
    embeddings: Tensor,
    dropout_mode: str = 'infer',
    rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Classifier head: K x e embeddings -> K sigmoid outputs"""
    embeddings = ag.as_tensor(embeddings)
    spec = state.spec
    if embeddings.ndim != 2 or embeddings.shape[1] != spec.embedding_dim:
        raise DimensionError(
            f"embedding width mismatch: head expects {spec.embedding_dim}, got shape {embeddings.shape}"
        )
    x = embeddings
    for layer in state.head[:-1]:
        x = _hidden_layer(x, layer, spec.dropout_p, dropout_mode, rng)
    weight, bias = state.head[-1]
    out = ag.sigmoid(x @ weight + bias)
    return ag.reshape(out, (embeddings.shape[0],))


def instance_forward(
    state: ModelState,
    instances: Tensor,
    dropout_mode: str = 'infer',
    rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, Tensor]:
    """
    Per-instance embeddings and predictions h in (0, 1)

    Returns:
        (embeddings K x e, predictions K)
    """
    embeddings = embed(state, instances, dropout_mode, rng)
    return embeddings, head_forward(state, embeddings, dropout_mode, rng)


def attention_forward(state: ModelState, embeddings: Tensor) -> Tensor:
    """a_k = softmax_k(w^T tanh(V e_k + b)), non-gated"""
    if state.attention is None:
        raise ContractError("model has no attention network (attention_hidden is unset)")
    embeddings = ag.as_tensor(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise EmptyBagError(f"attention needs a non-empty K x e bag, got shape {embeddings.shape}")
    if embeddings.shape[1] != state.spec.embedding_dim:
        raise DimensionError(
            f"attention expects width {state.spec.embedding_dim}, got shape {embeddings.shape}"
        )

    net = state.attention
    hidden = ag.tanh(embeddings @ net['V'] + net['b'])
    scores = ag.reshape(hidden @ net['w'], (embeddings.shape[0],))
    return ag.softmax(scores, axis=0)


def bce_loss(z: Tensor, label: int) -> Tensor:
    """Bag-level binary cross-entropy on the pooled prediction"""
    return ag.binary_cross_entropy(z, label)


@dataclass
class AdamState:
    """Per-parameter moments plus hyperparameters (defaults are Adam's)"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float, **kwargs) -> 'AdamState':
        return cls(
            lr=lr,
            m=[np.zeros(p.shape) for p in params],
            v=[np.zeros(p.shape) for p in params],
            **kwargs
        )


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]]) -> AdamState:
    """
    One bias-corrected Adam update, applied to params in place

    A None gradient is treated as zeros.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t

    for i, (param, grad) in enumerate(zip(params, grads)):
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape or state.m[i].shape != param.shape:
            raise DimensionError(f"adam_step: parameter {param.shape} vs gradient {grad.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        param.values = param.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_opt)

    return state


def save_checkpoint(state: ModelState, path: Union[str, Path]):
    """
    Write MILC magic, u32 version, u32 spec length, spec JSON, then every
    parameter as little-endian float64 in declaration order
    """
    spec_bytes = json.dumps(state.spec.to_dict(), sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(spec_bytes)))
        f.write(spec_bytes)
        for param in state.parameters():
            f.write(np.ascontiguousarray(param.values, dtype='<f8').tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    """Read a checkpoint written by save_checkpoint (bit-exact)"""
    path = str(path)
    with open(path, 'rb') as f:
        data = f.read()

    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", path=path, offset=0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", path=path, offset=len(data))
    version, spec_len = struct.unpack('<II', data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)

    spec_end = 12 + spec_len
    if len(data) < spec_end:
        raise FormatError("truncated model spec", path=path, offset=len(data))
    try:
        spec = ModelSpec.from_dict(json.loads(data[12:spec_end].decode('utf-8')))
    except (ValueError, TypeError) as e:
        raise FormatError(f"unreadable model spec: {e}", path=path, offset=12) from None

    state = init_model(spec, np.random.default_rng(0))
    arrays = []
    offset = spec_end
    for param in state.parameters():
        n_bytes = param.size * 8
        if len(data) < offset + n_bytes:
            raise FormatError(f"truncated parameter {param.name}", path=path, offset=len(data))
        arrays.append(np.frombuffer(data, dtype='<f8', count=param.size, offset=offset).reshape(param.shape))
        offset += n_bytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after parameters", path=path, offset=offset)

    state.load_values(arrays)
    return state
