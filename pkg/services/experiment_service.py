"""
Experiment Service
Training loop with validation-based checkpoint selection, seeded evaluation,
multi-seed sweeps with top-K aggregation, training-set size sweeps and
key-instance rankings
"""

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from services import autograd as ag
from services.bag_service import Bag, BagDataset, sample_instances, subsample_bags
from services.errors import (
    ConfigError,
    DimensionError,
    MilcError,
    NumericError,
    ParameterError,
    SweepError,
    UndefinedMetricError
)
from services.logging_service import get_logging_service
from services.metrics import (
    ScoredSet,
    instance_auc_mean,
    pooled_instance_auc,
    roc_auc,
    topk_mean
)
from services.model_service import (
    AdamState,
    ModelSpec,
    ModelState,
    adam_step,
    attention_forward,
    bce_loss,
    embed,
    head_forward,
    init_model,
    instance_forward
)
from services.pooling import (
    DEFAULT_EPS,
    DEFAULT_MC_PASSES,
    POOLING_NAMES,
    attention_pool,
    certainty,
    certainty_pool,
    max_pool,
    mc_dropout_predict,
    mean_pool
)


INSTANCE_AUC_MODES = ('per_bag', 'pooled')

# sub-stream indices of a run's SeedSequence
STREAM_INIT, STREAM_ORDER, STREAM_SAMPLE, STREAM_DROPOUT, STREAM_MC = range(5)

# first key of per-bag evaluation streams: default_rng([seed, EVAL_STREAM, bag_index])
EVAL_STREAM = 7

# first key of the training-subset stream: default_rng([SIZE_STREAM, min(seeds)])
SIZE_STREAM = 11


@dataclass
class ExperimentConfig:
    """Everything one sweep of one pooling operator needs besides the data"""
    pooling: str
    model: ModelSpec
    lr: float = 5e-4
    epochs: int = 50
    mc_passes: int = DEFAULT_MC_PASSES
    eps: float = DEFAULT_EPS
    bag_sample_n: Optional[int] = None
    validation_every: int = 5
    validation_instance_cap: Optional[int] = None
    seeds: List[int] = field(default_factory=lambda: [0])
    top_k: int = 1
    instance_auc_mode: str = 'pooled'
    record_wall_time: bool = True
    train_sizes: Optional[List[Union[int, float]]] = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self):
        """Raises ConfigError naming the offending field"""
        if self.pooling not in POOLING_NAMES:
            raise ConfigError(f"pooling must be one of {POOLING_NAMES}, got '{self.pooling}'")
        if self.pooling == 'attention' and self.model.attention_hidden is None:
            raise ConfigError("attention pooling needs model.attention_hidden")
        if self.pooling != 'attention' and self.model.attention_hidden is not None:
            raise ConfigError(f"model.attention_hidden only applies to attention pooling, not '{self.pooling}'")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.pooling == 'certainty' and self.mc_passes < 2:
            raise ConfigError(f"certainty pooling needs mc_passes >= 2, got {self.mc_passes}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.bag_sample_n is not None and self.bag_sample_n < 1:
            raise ConfigError(f"bag_sample_n must be >= 1, got {self.bag_sample_n}")
        if self.validation_every < 1:
            raise ConfigError(f"validation_every must be >= 1, got {self.validation_every}")
        if self.validation_instance_cap is not None and self.validation_instance_cap < 1:
            raise ConfigError(f"validation_instance_cap must be >= 1, got {self.validation_instance_cap}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {self.seeds}")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if not 1 <= self.top_k <= len(self.seeds):
            raise ConfigError(f"top_k must be in [1, {len(self.seeds)}], got {self.top_k}")
        if self.instance_auc_mode not in INSTANCE_AUC_MODES:
            raise ConfigError(f"instance_auc_mode must be one of {INSTANCE_AUC_MODES}, got '{self.instance_auc_mode}'")
        if self.train_sizes is not None:
            if not self.train_sizes:
                raise ConfigError("train_sizes must list at least one size")
            for size in self.train_sizes:
                _check_train_size(size)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_train_size(size: Union[int, float]):
    """Counts are ints >= 1, fractions are floats in (0, 1]"""
    if isinstance(size, bool) or not isinstance(size, (int, float)):
        raise ConfigError(f"train size must be a bag count or a fraction, got {size!r}")
    if isinstance(size, int) and size < 1:
        raise ConfigError(f"train size count must be >= 1, got {size}")
    if isinstance(size, float) and not 0.0 < size <= 1.0:
        raise ConfigError(f"train size fraction must be in (0, 1], got {size}")


def resolve_train_sizes(train_sizes: List[Union[int, float]], n_available: int) -> List[int]:
    """
    Bag counts for a training-size sweep, ascending

    Fractions round to the nearest count (at least 1).

    Raises:
        ConfigError: a count above n_available, or two sizes resolving to the same count
    """
    counts = []
    for size in train_sizes:
        _check_train_size(size)
        n = size if isinstance(size, int) else max(1, int(round(size * n_available)))
        if n > n_available:
            raise ConfigError(f"train size {n} exceeds the {n_available} training bags available")
        counts.append(n)
    if len(set(counts)) != len(counts):
        raise ConfigError(f"train sizes {list(train_sizes)} resolve to duplicate counts {counts}")
    return sorted(counts)


@dataclass
class RunRecord:
    """Outcome of training one seed"""
    seed: int
    pooling: str
    status: str = 'ok'
    error: Optional[str] = None
    failed_epoch: Optional[int] = None
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_auc: Optional[float] = None
    test_bag_auc: Optional[float] = None
    test_instance_auc: Optional[float] = None
    wall_s: Optional[float] = None
    state: Optional[ModelState] = None
    train_size: Optional[int] = None

    @property
    def succeeded(self) -> bool:
        return self.status == 'ok'

    @property
    def run_id(self) -> str:
        if self.train_size is None:
            return f"{self.pooling}/seed-{self.seed}"
        return f"{self.pooling}/n-{self.train_size}/seed-{self.seed}"

    def summary(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'status': self.status,
            'error': self.error,
            'failed_epoch': self.failed_epoch,
            'best_epoch': self.best_epoch,
            'val_auc': self.best_val_auc,
            'test_bag_auc': self.test_bag_auc,
            'test_instance_auc': self.test_instance_auc,
            'wall_s': self.wall_s,
            'train_size': self.train_size
        }


@dataclass
class Evaluation:
    """Per-bag results of one evaluation pass, in dataset order"""
    bag_ids: List[str]
    bags: ScoredSet
    selected: List[Optional[int]]
    predictions: List[np.ndarray]
    instances: List[Optional[ScoredSet]]

    def instance_sets(self, positive_only: bool = False) -> List[ScoredSet]:
        """Instance ScoredSets of the bags that carry instance labels"""
        return [
            scored for scored, label in zip(self.instances, self.bags.labels)
            if scored is not None and (label == 1 or not positive_only)
        ]

    def instance_auc(self, mode: str) -> Optional[float]:
        """
        Instance AUC under the given protocol, or None if undefined

        per_bag: mean over positive bags of each bag's instance AUC
        pooled: one AUC over all labeled instances of all bags
        """
        try:
            if mode == 'per_bag':
                result = instance_auc_mean(self.instance_sets(positive_only=True))
                if result.skipped:
                    get_logging_service().warning(
                        f"{result.skipped} positive bag(s) skipped in instance AUC (single class)"
                    )
                return result.mean
            return pooled_instance_auc(self.instance_sets())
        except UndefinedMetricError:
            return None


@dataclass
class ExperimentReport:
    """Sweep result for one pooling operator"""
    pooling: str
    runs: List[RunRecord]
    top_k: int
    selected_seeds: List[int]
    headline: Dict[str, Optional[float]]
    train_size: Optional[int] = None

    @property
    def n_failed(self) -> int:
        return sum(1 for run in self.runs if not run.succeeded)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'pooling': self.pooling,
            'train_size': self.train_size,
            'top_k': self.top_k,
            'selected_seeds': self.selected_seeds,
            'n_runs': len(self.runs),
            'n_failed': self.n_failed,
            'headline': self.headline,
            'runs': [run.summary() for run in self.runs]
        }


class RankingRow(NamedTuple):
    bag_id: str
    rank: int
    instance_index: int
    h: float
    instance_label: Optional[int]


def _check_dims(spec: ModelSpec, *datasets: BagDataset):
    for ds in datasets:
        if ds.dim is not None and ds.dim != spec.input_dim:
            raise DimensionError(
                f"{ds.split} bags have width {ds.dim} but the model expects {spec.input_dim}"
            )


def _size_tag(cfg: ExperimentConfig, train_ds: BagDataset) -> Optional[int]:
    return len(train_ds) if cfg.train_sizes is not None else None


def _forward_bag(
    state: ModelState,
    instances: Union[np.ndarray, ag.Tensor],
    pooling: str,
    mode: str,
    rng: np.random.Generator,
    mc_passes: int,
    mc_rng: np.random.Generator,
    eps: float
):
    """
    Instance predictions and pooled bag prediction for one bag

    Certainty pooling runs its MC passes unrecorded first; the predictions it
    pools come from a separate pass in `mode`. A Tensor input is used as is,
    so callers can ask for gradients with respect to the instances.
    """
    x = instances if isinstance(instances, ag.Tensor) else ag.Tensor(instances)

    if pooling == 'attention':
        embeddings = embed(state, x, mode, rng)
        weights = attention_forward(state, embeddings)
        result = attention_pool(embeddings, weights, lambda pooled: head_forward(state, pooled, mode, rng))
        with ag.no_grad():
            h = head_forward(state, embeddings.detach(), 'infer')
        return h, result

    if pooling == 'certainty':
        c = certainty(mc_dropout_predict(state, x, mc_passes, mc_rng), eps)
        _, h = instance_forward(state, x, mode, rng)
        return h, certainty_pool(h, c)

    _, h = instance_forward(state, x, mode, rng)
    return h, (max_pool(h) if pooling == 'max' else mean_pool(h))


def evaluate(
    state: ModelState,
    ds: BagDataset,
    pooling: str,
    mc_passes: int = DEFAULT_MC_PASSES,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    instance_cap: Optional[int] = None
) -> Evaluation:
    """
    Score every bag with dropout off (certainty draws fresh MC passes)

    Each bag gets its own stream default_rng([seed, EVAL_STREAM, i]), so the
    result is deterministic given seed and independent of bag order elsewhere.

    Args:
        instance_cap: Optional per-bag instance subsample (validation only)
    """
    _check_dims(state.spec, ds)
    bag_ids, scores, selected, predictions, instances = [], [], [], [], []

    with ag.no_grad():
        for i, bag in enumerate(ds):
            rng = np.random.default_rng([seed, EVAL_STREAM, i])
            if instance_cap is not None:
                bag = sample_instances(bag, instance_cap, rng)

            h, result = _forward_bag(state, bag.instances, pooling, 'infer', None, mc_passes, rng, eps)
            bag_ids.append(bag.bag_id)
            scores.append(result.value)
            selected.append(result.selected_index)
            predictions.append(h.values.copy())
            instances.append(
                None if bag.instance_labels is None else ScoredSet(h.values.copy(), bag.instance_labels)
            )

    return Evaluation(bag_ids, ScoredSet(np.array(scores), ds.labels()), selected, predictions, instances)


def _train_step(
    cfg: ExperimentConfig,
    state: ModelState,
    adam: AdamState,
    params: List[ag.Tensor],
    bag: Bag,
    dropout_rng: np.random.Generator,
    mc_rng: np.random.Generator
) -> float:
    ag.reset_graph()
    state.zero_grad()
    _, result = _forward_bag(
        state, bag.instances, cfg.pooling, 'train', dropout_rng, cfg.mc_passes, mc_rng, cfg.eps
    )
    loss = bce_loss(result.z, bag.label)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} on bag {bag.bag_id}")
    ag.backward(loss)
    adam_step(adam, params, [p.grad for p in params])
    return value


def train_one(
    cfg: ExperimentConfig,
    train_ds: BagDataset,
    val_ds: BagDataset,
    seed: int
) -> RunRecord:
    """
    Train one seeded model, keeping the checkpoint with the best validation AUC

    One optimizer step per bag, bags shuffled every epoch. Validation runs
    every `validation_every` epochs and after the last epoch; a checkpoint is
    kept only on strict improvement, so ties go to the earliest. Test metrics
    are left unset.

    A NumericError during training marks the record failed instead of raising.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ParameterError("training and validation datasets must be non-empty")
    _check_dims(cfg.model, train_ds, val_ds)
    val_labels = val_ds.labels()
    if val_labels.min() == val_labels.max():
        raise UndefinedMetricError("validation set needs both positive and negative bags")

    logger = get_logging_service()
    record = RunRecord(seed=seed, pooling=cfg.pooling, train_size=_size_tag(cfg, train_ds))
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    order_rng = streams[STREAM_ORDER]
    sample_rng = streams[STREAM_SAMPLE]
    dropout_rng = streams[STREAM_DROPOUT]
    mc_rng = streams[STREAM_MC]

    state = init_model(cfg.model, streams[STREAM_INIT])
    params = state.parameters()
    adam = AdamState.for_params(params, cfg.lr)
    logger.log_event(record.run_id, 'run_started', {'seed': seed, 'epochs': cfg.epochs})

    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for index in order_rng.permutation(len(train_ds)):
                bag = train_ds.bags[int(index)]
                if cfg.bag_sample_n is not None:
                    bag = sample_instances(bag, cfg.bag_sample_n, sample_rng)
                losses.append(_train_step(cfg, state, adam, params, bag, dropout_rng, mc_rng))
            record.loss_history.append(float(np.mean(losses)))

            if epoch % cfg.validation_every == 0 or epoch == cfg.epochs:
                evaluation = evaluate(
                    state, val_ds, cfg.pooling, cfg.mc_passes, seed, cfg.eps, cfg.validation_instance_cap
                )
                val_auc = roc_auc(evaluation.bags)
                record.val_history.append((epoch, val_auc))
                improved = record.best_val_auc is None or val_auc > record.best_val_auc
                if improved:
                    record.best_val_auc = val_auc
                    record.best_epoch = epoch
                    record.state = state.clone()
                logger.log_event(record.run_id, 'validation', {
                    'epoch': epoch,
                    'val_auc': val_auc,
                    'loss': record.loss_history[-1],
                    'improved': improved
                })
    except NumericError as e:
        ag.reset_graph()
        record.status = 'failed'
        record.error = str(e)
        record.failed_epoch = epoch
        record.state = None
        logger.log_event(record.run_id, 'run_failed', {'epoch': epoch, 'error': str(e)}, severity='error')

    return record


def _run_seed(
    cfg: ExperimentConfig,
    train_ds: BagDataset,
    val_ds: BagDataset,
    test_ds: BagDataset,
    seed: int
) -> RunRecord:
    """train_one plus test metrics of the selected checkpoint"""
    logger = get_logging_service()
    started = time.perf_counter()
    try:
        record = train_one(cfg, train_ds, val_ds, seed)
        if record.succeeded:
            evaluation = evaluate(record.state, test_ds, cfg.pooling, cfg.mc_passes, seed, cfg.eps)
            record.test_bag_auc = roc_auc(evaluation.bags)
            record.test_instance_auc = evaluation.instance_auc(cfg.instance_auc_mode)
    except MilcError as e:
        record = RunRecord(seed=seed, pooling=cfg.pooling, status='failed', error=str(e),
                           train_size=_size_tag(cfg, train_ds))
        logger.log_event(record.run_id, 'run_failed', {'epoch': None, 'error': str(e)}, severity='error')

    if cfg.record_wall_time:
        record.wall_s = time.perf_counter() - started
    if record.succeeded:
        logger.log_event(record.run_id, 'run_finished', {
            'best_epoch': record.best_epoch,
            'val_auc': record.best_val_auc,
            'test_bag_auc': record.test_bag_auc,
            'test_instance_auc': record.test_instance_auc
        })
    return record


def _mean_std(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def aggregate_runs(pooling: str, runs: List[RunRecord], top_k: int) -> ExperimentReport:
    """
    Rank successful runs by validation AUC and average the top_k test metrics

    Ties in validation AUC go to the lower seed. Test metrics of unselected
    runs never enter the headline.

    Raises:
        SweepError: no run succeeded
    """
    runs = sorted(runs, key=lambda run: run.seed)
    succeeded = [run for run in runs if run.succeeded]
    if not succeeded:
        raise SweepError(f"all {len(runs)} {pooling} runs failed", runs=runs)
    if top_k < 1:
        raise ParameterError(f"top_k must be >= 1, got {top_k}")

    k = top_k
    if len(succeeded) < top_k:
        get_logging_service().warning(
            f"{pooling}: only {len(succeeded)} successful runs for top_k={top_k}, averaging all of them"
        )
        k = len(succeeded)

    ranked = sorted(succeeded, key=lambda run: (-run.best_val_auc, run.seed))
    selected = ranked[:k]

    bag_mean, bag_std = _mean_std([run.test_bag_auc for run in selected])
    instance_aucs = [run.test_instance_auc for run in selected if run.test_instance_auc is not None]
    if len(instance_aucs) < k:
        get_logging_service().warning(
            f"{pooling}: instance AUC undefined for {k - len(instance_aucs)} of the {k} selected runs; "
            f"test_instance_auc_mean covers {len(instance_aucs)}"
        )
    inst_mean, inst_std = _mean_std(instance_aucs)
    headline = {
        'val_auc_mean': topk_mean([run.best_val_auc for run in succeeded], k),
        'test_bag_auc_mean': bag_mean,
        'test_bag_auc_std': bag_std,
        'test_instance_auc_mean': inst_mean,
        'test_instance_auc_std': inst_std,
        'test_instance_auc_n': len(instance_aucs)
    }
    return ExperimentReport(pooling, runs, k, [run.seed for run in selected], headline, runs[0].train_size)


def run_sweep(
    cfg: ExperimentConfig,
    train_ds: BagDataset,
    val_ds: BagDataset,
    test_ds: BagDataset,
    jobs: int = 1
) -> ExperimentReport:
    """
    Train every seed (up to `jobs` at a time) and aggregate

    Seeds share nothing but the read-only datasets; each run owns its model
    state and RNG streams, so results do not depend on `jobs`.
    """
    cfg.validate()
    _check_dims(cfg.model, train_ds, val_ds, test_ds)
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")

    logger = get_logging_service()
    logger.info(f"{cfg.pooling}: training {len(cfg.seeds)} seed(s) with {jobs} worker(s)")

    runs = []
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = {
            executor.submit(_run_seed, cfg, train_ds, val_ds, test_ds, seed): seed
            for seed in cfg.seeds
        }
        for future in as_completed(futures):
            record = future.result()
            runs.append(record)
            status = 'done' if record.succeeded else f"FAILED ({record.error})"
            logger.info(f"  [{len(runs)}/{len(cfg.seeds)}] {record.run_id} {status}")

    report = aggregate_runs(cfg.pooling, runs, cfg.top_k)
    sweep_id = cfg.pooling if report.train_size is None else f"{cfg.pooling}/n-{report.train_size}"
    logger.log_event(sweep_id, 'sweep_finished', {
        'n_runs': len(runs),
        'n_failed': report.n_failed,
        'selected_seeds': report.selected_seeds,
        'headline': report.headline
    })
    return report


@dataclass
class SizePoint:
    """One training-set size of a size sweep; report is None when every seed failed"""
    train_size: int
    runs: List[RunRecord]
    report: Optional[ExperimentReport] = None
    error: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.report is not None


def run_size_sweep(
    cfg: ExperimentConfig,
    train_ds: BagDataset,
    val_ds: BagDataset,
    test_ds: BagDataset,
    jobs: int = 1
) -> List[SizePoint]:
    """
    run_sweep once per entry of cfg.train_sizes, smallest first

    Each point trains on a subset of train_ds drawn from one permutation
    seeded by default_rng([SIZE_STREAM, min(seeds)]), so subsets are nested and
    identical across pooling operators. A size whose seeds all fail is
    recorded and the sweep moves on.

    Raises:
        ConfigError: train_sizes unset or not resolvable against train_ds
    """
    if cfg.train_sizes is None:
        raise ConfigError("run_size_sweep needs experiment.train_sizes")
    sizes = resolve_train_sizes(cfg.train_sizes, len(train_ds))

    points = []
    for n in sizes:
        subset = subsample_bags(train_ds, n, np.random.default_rng([SIZE_STREAM, min(cfg.seeds)]))
        try:
            report = run_sweep(cfg, subset, val_ds, test_ds, jobs)
            points.append(SizePoint(n, report.runs, report))
        except SweepError as e:
            get_logging_service().warning(f"{cfg.pooling}: every seed failed at train size {n}")
            points.append(SizePoint(n, e.runs or [], error=str(e)))
    return points


def export_rankings(
    state: ModelState,
    ds: BagDataset,
    n_top: int,
    positive_only: bool = False
) -> List[RankingRow]:
    """
    Top n_top instances of each bag by h, descending (ties to the lower index)

    Args:
        positive_only: Only rank positive bags
    """
    if n_top < 1:
        raise ParameterError(f"n_top must be >= 1, got {n_top}")
    _check_dims(state.spec, ds)

    rows: List[RankingRow] = []
    with ag.no_grad():
        for bag in ds:
            if positive_only and bag.label != 1:
                continue
            _, h = instance_forward(state, ag.Tensor(bag.instances), 'infer')
            order = np.argsort(-h.values, kind='stable')[:n_top]
            for rank, index in enumerate(order, start=1):
                label = None if bag.instance_labels is None else int(bag.instance_labels[index])
                rows.append(RankingRow(bag.bag_id, rank, int(index), float(h.values[index]), label))
    return rows
