"""
Pooling
Bag pooling operators (max, mean, attention, certainty) and the MC-dropout
certainty estimator
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from services import autograd as ag
from services.autograd import Tensor
from services.errors import ContractError, DimensionError, EmptyBagError, ParameterError
from services.model_service import ModelState, instance_forward


POOLING_NAMES = ('max', 'mean', 'attention', 'certainty')

DEFAULT_MC_PASSES = 10
DEFAULT_EPS = 1e-6
ATTENTION_SUM_TOLERANCE = 1e-9


@dataclass
class PoolResult:
    """
    Bag prediction plus what produced it

    z: scalar tensor in (0, 1), differentiable when its inputs were recorded
    selected_index: k* for max and certainty pooling
    weights: attention weights, or the certainty-weighted scores C_k * h_k
    """
    z: Tensor
    selected_index: Optional[int] = None
    weights: Optional[np.ndarray] = None

    @property
    def value(self) -> float:
        return self.z.item()


@dataclass
class MCSampleMatrix:
    """T x K matrix: row t holds every instance's prediction on stochastic pass t"""
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise DimensionError(f"MC samples must be T x K, got shape {self.samples.shape}")
        if self.samples.shape[0] < 2:
            raise ParameterError(f"need at least 2 MC passes, got {self.samples.shape[0]}")
        if np.any(self.samples <= 0.0) or np.any(self.samples >= 1.0):
            raise ContractError("MC predictions must lie strictly inside (0, 1)")

    @property
    def n_passes(self) -> int:
        return self.samples.shape[0]

    @property
    def bag_size(self) -> int:
        return self.samples.shape[1]


@dataclass
class CertaintyVector:
    """c_k = 1 / (sigma(X_k) + eps)"""
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.c)


def _as_bag_predictions(h: Tensor) -> Tensor:
    h = ag.as_tensor(h)
    if h.ndim != 1:
        raise DimensionError(f"instance predictions must be a length-K vector, got shape {h.shape}")
    if h.shape[0] == 0:
        raise EmptyBagError("cannot pool an empty bag")
    return h


def max_pool(h: Tensor) -> PoolResult:
    """z = max_k h_k; ties go to the lowest index"""
    h = _as_bag_predictions(h)
    return PoolResult(ag.reduce('max', h), selected_index=int(np.argmax(h.values)))


def mean_pool(h: Tensor) -> PoolResult:
    """z = (1/K) sum_k h_k"""
    h = _as_bag_predictions(h)
    return PoolResult(ag.reduce('mean', h))


def attention_pool(
    embeddings: Tensor,
    attention: Tensor,
    head: Callable[[Tensor], Tensor]
) -> PoolResult:
    """
    z = head(sum_k a_k e_k)

    Args:
        embeddings: K x e instance embeddings
        attention: Length-K weights summing to 1
        head: Maps a 1 x e tensor to a length-1 sigmoid output

    Raises:
        ContractError: weights do not sum to 1 within 1e-9
    """
    embeddings, attention = ag.as_tensor(embeddings), ag.as_tensor(attention)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise EmptyBagError(f"attention pooling needs a non-empty K x e bag, got {embeddings.shape}")
    k = embeddings.shape[0]
    if attention.shape != (k,):
        raise DimensionError(f"attention weights {attention.shape} do not match embeddings {embeddings.shape}")
    total = float(attention.values.sum())
    if abs(total - 1.0) > ATTENTION_SUM_TOLERANCE:
        raise ContractError(f"attention weights sum to {total!r}, expected 1")

    weighted = ag.reshape(attention, (k, 1)) * embeddings
    pooled = ag.reshape(ag.reduce('sum', weighted, axis=0), (1, embeddings.shape[1]))
    z = ag.reshape(head(pooled), ())
    return PoolResult(z, weights=attention.values.copy())


def mc_dropout_predict(
    state: ModelState,
    instances: Tensor,
    passes: int,
    rng: np.random.Generator
) -> MCSampleMatrix:
    """
    Run `passes` stochastic forward passes with dropout active

    Each pass draws its masks from its own sub-stream split off `rng` up front,
    so the matrix does not depend on how passes are scheduled. Nothing is
    recorded for backward.
    """
    if passes < 2:
        raise ParameterError(f"MC dropout needs at least 2 passes, got {passes}")

    pass_seeds = rng.integers(0, 2 ** 63 - 1, size=passes)
    rows = []
    with ag.no_grad():
        for seed in pass_seeds:
            _, h = instance_forward(state, instances, 'mc', np.random.default_rng(int(seed)))
            rows.append(h.values)
    return MCSampleMatrix(np.stack(rows))


def certainty(samples: MCSampleMatrix, eps: float = DEFAULT_EPS) -> CertaintyVector:
    """
    Inverse population standard deviation per instance

    Columns are shifted by their first pass before the two-pass variance so a
    constant column gives exactly sigma = 0.
    """
    if eps <= 0.0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x = samples.samples
    shifted = x - x[0]
    centered = shifted - shifted.mean(axis=0)
    sigma = np.sqrt((centered * centered).mean(axis=0))
    return CertaintyVector(1.0 / (sigma + eps))


def certainty_pool(h: Tensor, c: CertaintyVector) -> PoolResult:
    """
    z = h_{k*} with k* = argmax_k c_k * h_k (ties to the lowest index)

    c is divided by its maximum first, so equal certainties weigh exactly 1.0
    and k* matches max_pool bit for bit. c is a constant: the gradient reaches
    h at k* only.
    """
    h = _as_bag_predictions(h)
    weights = np.asarray(c.c, dtype=np.float64)
    if weights.shape != h.shape:
        raise DimensionError(f"certainty length {weights.shape} does not match predictions {h.shape}")
    if np.any(weights <= 0.0):
        raise ContractError("certainty values must be positive")

    scores = (weights / weights.max()) * h.values
    k_star = int(np.argmax(scores))
    return PoolResult(ag.take(h, k_star), selected_index=k_star, weights=scores)
