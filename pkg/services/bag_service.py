"""
Bag Service
Builds and persists labeled bags: MNIST IDX ingestion, low-evidence-ratio bag
generation, synthetic feature bags, the BagPack on-disk format and per-epoch
instance sampling
"""

import gzip
import json
import struct
from dataclasses import InitVar, asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from services.errors import DataError, DimensionError, FormatError, ParameterError


SPLITS = ('train', 'validation', 'test')

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MANIFEST_NAME = 'manifest.jsonl'

PathLike = Union[str, Path]


@dataclass(eq=False)
class Bag:
    """One labeled set of instances (K x d) with optional instance labels"""
    bag_id: str
    instances: np.ndarray
    label: int
    instance_labels: Optional[np.ndarray] = None
    check_evidence: InitVar[bool] = True

    def __post_init__(self, check_evidence: bool):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.label = int(self.label)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise DimensionError(f"bag {self.bag_id}: instances must be K x d with K >= 1, got {self.instances.shape}")
        if self.label not in (0, 1):
            raise ParameterError(f"bag {self.bag_id}: label must be 0 or 1, got {self.label}")

        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (self.size,):
                raise DimensionError(
                    f"bag {self.bag_id}: {self.instance_labels.shape[0]} instance labels for {self.size} instances"
                )
            # bag label is the OR of instance labels
            if check_evidence and int(self.instance_labels.max()) != self.label:
                raise DataError(
                    f"bag {self.bag_id}: label {self.label} contradicts instance labels"
                )

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class BagGenConfig:
    """
    Bag generator settings

    bag_size_std > 0 draws each bag's size from Normal(bag_size, bag_size_std),
    rounded and clipped so every bag keeps at least one negative instance.
    """
    n_bags: int
    bag_size: int = 100
    positives_per_positive_bag: int = 1
    positive_fraction: float = 0.5
    positive_digit: int = 9
    bag_size_std: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_bags < 0:
            raise ParameterError(f"n_bags must be >= 0, got {self.n_bags}")
        if self.bag_size < 1:
            raise ParameterError(f"bag_size must be >= 1, got {self.bag_size}")
        if not 1 <= self.positives_per_positive_bag <= self.bag_size:
            raise ParameterError(
                f"positives_per_positive_bag must be in [1, bag_size={self.bag_size}], "
                f"got {self.positives_per_positive_bag}"
            )
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ParameterError(f"positive_fraction must be in [0, 1], got {self.positive_fraction}")
        if self.bag_size_std < 0:
            raise ParameterError(f"bag_size_std must be >= 0, got {self.bag_size_std}")

    @property
    def n_positive(self) -> int:
        return int(round(self.n_bags * self.positive_fraction))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class BagDataset:
    """Bags of one split sharing instance width d"""
    bags: List[Bag]
    split: str = 'test'
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = [bag.bag_id for bag in self.bags]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate bag ids in {self.split} dataset")
        dims = {bag.dim for bag in self.bags}
        if len(dims) > 1:
            raise DimensionError(f"bags of the {self.split} dataset mix instance widths {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    @property
    def dim(self) -> Optional[int]:
        return self.bags[0].dim if self.bags else None

    def labels(self) -> np.ndarray:
        return np.array([bag.label for bag in self.bags], dtype=np.int64)


def _open_binary(path: PathLike):
    return gzip.open(path, 'rb') if str(path).endswith('.gz') else open(path, 'rb')


def read_idx(path: PathLike) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Parse an IDX file (optionally gzip-compressed)

    Image files (magic 0x00000803) come back as an n x (rows*cols) float64
    array scaled to [0, 1]; label files (0x00000801) as an int64 vector.

    Returns:
        (array, declared dimensions)

    Raises:
        FormatError: bad magic or truncated payload, with the byte offset
    """
    path = str(path)
    with _open_binary(path) as f:
        data = f.read()

    if len(data) < 4:
        raise FormatError("truncated IDX magic", path=path, offset=len(data))
    magic = struct.unpack('>I', data[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        n_dims = 3
    elif magic == IDX_LABELS_MAGIC:
        n_dims = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", path=path, offset=0)

    header_end = 4 + 4 * n_dims
    if len(data) < header_end:
        raise FormatError("truncated IDX dimensions", path=path, offset=len(data))
    dims = struct.unpack(f'>{n_dims}I', data[4:header_end])

    expected = int(np.prod(dims))
    available = len(data) - header_end
    if available < expected:
        raise FormatError(
            f"IDX payload declares {expected} bytes but holds {available}",
            path=path,
            offset=len(data)
        )

    payload = np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_end)
    if n_dims == 1:
        return payload.astype(np.int64), dims
    return payload.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0, dims


def load_mnist(images_path: PathLike, labels_path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read a matching pair of MNIST image and label IDX files"""
    images, _ = read_idx(images_path)
    labels, _ = read_idx(labels_path)
    if images.ndim != 2 or labels.ndim != 1:
        raise FormatError("expected an image file and a label file", path=str(images_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels",
            path=str(labels_path)
        )
    return images, labels


def _bag_sizes(cfg: BagGenConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.bag_size_std == 0:
        return np.full(cfg.n_bags, cfg.bag_size, dtype=np.int64)
    drawn = np.rint(rng.normal(cfg.bag_size, cfg.bag_size_std, size=cfg.n_bags)).astype(np.int64)
    return np.maximum(drawn, max(2, cfg.positives_per_positive_bag + 1))


def _assemble_bags(
    cfg: BagGenConfig,
    rng: np.random.Generator,
    split: str,
    draw_positive,
    draw_negative
) -> List[Bag]:
    """Shared bag assembly: exact positive count, evidence at random positions"""
    sizes = _bag_sizes(cfg, rng)
    labels = np.zeros(cfg.n_bags, dtype=np.int64)
    labels[:cfg.n_positive] = 1
    labels = rng.permutation(labels)

    bags = []
    for i in range(cfg.n_bags):
        size = int(sizes[i])
        instance_labels = np.zeros(size, dtype=np.int64)
        if labels[i] == 1:
            positions = rng.choice(size, size=cfg.positives_per_positive_bag, replace=False)
            instance_labels[positions] = 1

        n_pos = int(instance_labels.sum())
        negatives = draw_negative(size - n_pos)
        rows = np.empty((size, negatives.shape[1]))
        rows[instance_labels == 0] = negatives
        if n_pos:
            rows[instance_labels == 1] = draw_positive(n_pos)

        bags.append(Bag(f"{split}-{i:05d}", rows, int(labels[i]), instance_labels))
    return bags


def generate_mnist_bags(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: BagGenConfig,
    rng: np.random.Generator,
    split: str = 'train'
) -> BagDataset:
    """
    MNIST bags: positive iff they hold the positive digit

    Digits are drawn with replacement from the source pool.

    Raises:
        DataError: the pool lacks positive or negative digits
    """
    labels = np.asarray(labels)
    positive_pool = np.flatnonzero(labels == cfg.positive_digit)
    negative_pool = np.flatnonzero(labels != cfg.positive_digit)

    if cfg.n_positive > 0 and len(positive_pool) == 0:
        raise DataError(f"source pool has no digit {cfg.positive_digit} for positive bags")
    if cfg.n_bags > 0 and len(negative_pool) == 0:
        raise DataError(f"source pool has no digits other than {cfg.positive_digit}")

    def draw_positive(n):
        return images[rng.choice(positive_pool, size=n, replace=True)]

    def draw_negative(n):
        return images[rng.choice(negative_pool, size=n, replace=True)]

    bags = _assemble_bags(cfg, rng, split, draw_positive, draw_negative)
    provenance = {'generator': 'mnist', 'config': cfg.to_dict()}
    return BagDataset(bags, split, provenance)


def feature_direction(dim: int, direction_seed: int) -> np.ndarray:
    """Fixed random unit vector along which positive instances are shifted"""
    direction = np.random.default_rng(direction_seed).standard_normal(dim)
    return direction / np.linalg.norm(direction)


def generate_feature_bags(
    cfg: BagGenConfig,
    rng: np.random.Generator,
    dim: int = 2048,
    separation: float = 5.0,
    direction_seed: int = 0,
    split: str = 'train'
) -> BagDataset:
    """
    Synthetic feature bags

    Negatives ~ N(0, I); positives ~ N(s * u, I) for a unit direction u fixed by
    direction_seed, so splits generated with the same direction_seed share it.
    """
    if dim < 1:
        raise ParameterError(f"feature dim must be >= 1, got {dim}")
    if separation < 0:
        raise ParameterError(f"separation must be >= 0, got {separation}")

    shift = separation * feature_direction(dim, direction_seed)

    def draw_positive(n):
        return rng.standard_normal((n, dim)) + shift

    def draw_negative(n):
        return rng.standard_normal((n, dim))

    bags = _assemble_bags(cfg, rng, split, draw_positive, draw_negative)
    provenance = {
        'generator': 'features',
        'config': cfg.to_dict(),
        'dim': dim,
        'separation': separation,
        'direction_seed': direction_seed
    }
    return BagDataset(bags, split, provenance)


def write_bagpack(ds: BagDataset, directory: PathLike):
    """
    Write manifest.jsonl plus one little-endian float64 file per bag

    Each manifest line: {bag_id, label, n_instances, dim, file, instance_labels?}
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    lines = []
    for i, bag in enumerate(ds.bags):
        file_name = f"bag_{i:06d}.bin"
        (directory / file_name).write_bytes(
            np.ascontiguousarray(bag.instances, dtype='<f8').tobytes()
        )
        entry = {
            'bag_id': bag.bag_id,
            'label': bag.label,
            'n_instances': bag.size,
            'dim': bag.dim,
            'file': file_name
        }
        if bag.instance_labels is not None:
            entry['instance_labels'] = [int(v) for v in bag.instance_labels]
        lines.append(json.dumps(entry))

    with open(directory / MANIFEST_NAME, 'w') as f:
        for line in lines:
            f.write(line + '\n')


def read_bagpack(directory: PathLike, split: Optional[str] = None) -> BagDataset:
    """
    Load a BagPack directory

    Args:
        directory: Folder holding manifest.jsonl
        split: Split name; defaults to the folder name when it is a known split

    Raises:
        FormatError: missing files, count mismatches or mixed widths
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError("missing BagPack manifest", path=str(manifest))
    if split is None:
        split = directory.name if directory.name in SPLITS else 'test'

    bags = []
    dim = None
    with open(manifest, 'r') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                bag_id = str(entry['bag_id'])
                n_instances = int(entry['n_instances'])
                bag_dim = int(entry['dim'])
                file_name = entry['file']
                label = int(entry['label'])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"bad manifest line {line_no}: {e}", path=str(manifest)) from None

            if dim is None:
                dim = bag_dim
            elif bag_dim != dim:
                raise FormatError(f"dim {bag_dim} differs from {dim}", path=str(manifest), bag_id=bag_id)

            bag_path = directory / file_name
            if not bag_path.exists():
                raise FormatError("missing bag file", path=str(bag_path), bag_id=bag_id)
            raw = bag_path.read_bytes()
            expected = n_instances * bag_dim * 8
            if len(raw) != expected:
                raise FormatError(
                    f"manifest declares {n_instances} x {bag_dim} floats ({expected} bytes) "
                    f"but file holds {len(raw)} bytes",
                    path=str(bag_path),
                    bag_id=bag_id
                )

            instances = np.frombuffer(raw, dtype='<f8').reshape(n_instances, bag_dim).astype(np.float64)
            instance_labels = entry.get('instance_labels')
            try:
                bags.append(Bag(bag_id, instances, label, instance_labels))
            except (DimensionError, ParameterError, DataError) as e:
                raise FormatError(str(e), path=str(manifest), bag_id=bag_id) from None

    provenance_path = directory.parent / 'provenance.json'
    provenance: Dict[str, Any] = {'source': str(directory)}
    if provenance_path.exists():
        with open(provenance_path, 'r') as f:
            provenance['pack'] = json.load(f)
    try:
        return BagDataset(bags, split, provenance)
    except (DataError, DimensionError) as e:
        raise FormatError(str(e), path=str(manifest)) from None


def sample_instances(bag: Bag, n: int, rng: np.random.Generator) -> Bag:
    """
    Uniformly sample n instances without replacement; bags with K <= n are
    returned unchanged

    A positive bag can lose all its evidence; its label is kept.
    """
    if n < 1:
        raise ParameterError(f"sample size must be >= 1, got {n}")
    if bag.size <= n:
        return bag

    rows = np.sort(rng.choice(bag.size, size=n, replace=False))
    instance_labels = None if bag.instance_labels is None else bag.instance_labels[rows]
    # sampling may drop the evidence, so the OR check is off
    return Bag(bag.bag_id, bag.instances[rows], bag.label, instance_labels, check_evidence=False)


def subsample_bags(ds: BagDataset, n: int, rng: np.random.Generator) -> BagDataset:
    """
    The first n bags of one seeded permutation, kept in dataset order

    The same rng state gives nested subsets: every smaller n is contained in
    every larger one.
    """
    if not 1 <= n <= len(ds):
        raise ParameterError(f"subset size must be in [1, {len(ds)}], got {n}")
    rows = np.sort(rng.permutation(len(ds))[:n])
    provenance = dict(ds.provenance, subset_of=len(ds))
    return BagDataset([ds.bags[int(i)] for i in rows], ds.split, provenance)
