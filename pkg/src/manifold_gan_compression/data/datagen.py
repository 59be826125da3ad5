"""
Deterministic synthetic paired image-translation datasets.

Each sample is rendered from a small set of latent factors: a grayscale
outline of the shape is the source, the hue-filled shape is the target.
The source frame carries a thin border in the target hue so the mapping
from source to target is a function.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple
import colorsys
import logging
import math

import numpy as np

from ..config import DataConfig
from ..utils.exceptions import ContractViolation, SampleLookupError
from ..utils.seeding import numpy_rng

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("circle", "square", "triangle")
SPLITS = ("train", "val", "test")
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class LatentFactors:
    """Semantic content of one sample."""
    shape_class: int
    hue: float
    scale: float
    position: Tuple[float, float]

    def to_row(self) -> Dict[str, float]:
        return {
            "shape_class": self.shape_class,
            "hue": self.hue,
            "scale": self.scale,
            "pos_x": self.position[0],
            "pos_y": self.position[1],
        }

    def feature_vector(self, n_shapes: int = 3) -> np.ndarray:
        """Vector whose Euclidean distances equal the factor-space distance.

        Shape is one-hot, hue is a point on the unit circle (so differences are
        chord lengths), scale and position are used as-is.
        """
        one_hot = np.zeros(n_shapes)
        one_hot[self.shape_class] = 1.0
        return np.concatenate([
            one_hot,
            [math.cos(self.hue), math.sin(self.hue), self.scale, self.position[0], self.position[1]],
        ])


@dataclass(frozen=True)
class PairedSample:
    source_image: np.ndarray
    target_image: np.ndarray
    factors: LatentFactors
    id: int


@dataclass
class Dataset:
    """Ordered samples of one split; ids are contiguous."""
    samples: List[PairedSample]
    split: str
    seed: int
    _positions: Dict[int, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self._positions = {s.id: i for i, s in enumerate(self.samples)}
        if len(self._positions) != len(self.samples):
            raise ContractViolation("sample ids must be unique", details={"split": self.split})

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[PairedSample]:
        return iter(self.samples)

    @property
    def ids(self) -> List[int]:
        return [s.id for s in self.samples]

    def position(self, sample_id: int) -> int:
        try:
            return self._positions[sample_id]
        except KeyError:
            raise SampleLookupError(
                f"unknown sample id {sample_id}",
                details={"id": sample_id, "split": self.split}
            ) from None

    def get(self, sample_id: int) -> PairedSample:
        return self.samples[self.position(sample_id)]

    def sources(self) -> np.ndarray:
        """Stacked source images, N×H×W×C in [0, 1]."""
        return _stack([s.source_image for s in self.samples])

    def targets(self) -> np.ndarray:
        return _stack([s.target_image for s in self.samples])

    def factor_matrix(self, n_shapes: int = 3) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, n_shapes + 5))
        return np.stack([s.factors.feature_vector(n_shapes) for s in self.samples])


def _stack(images: Sequence[np.ndarray]) -> np.ndarray:
    if not images:
        return np.zeros((0, 0, 0, 0), dtype=np.float32)
    return np.stack(images).astype(np.float32)


def hue_to_rgb(hue: float) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb((hue % TWO_PI) / TWO_PI, 1.0, 1.0)
    return np.array([r, g, b], dtype=np.float64)


def _shape_inside(shape_class: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if r <= 0:
        return np.zeros(dx.shape, dtype=bool)
    if shape_class == 0:
        return dx * dx + dy * dy <= r * r
    if shape_class == 1:
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    # apex at the top (y grows downward), base of half-width r at the bottom
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)


def _coverage(factors: LatentFactors, size: int, supersample: int, shrink: float = 0.0) -> np.ndarray:
    """Anti-aliased area coverage of the shape per pixel."""
    n = size * supersample
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)
    dx = xs - factors.position[0]
    dy = ys - factors.position[1]
    inside = _shape_inside(factors.shape_class, dx, dy, factors.scale / 2.0 - shrink)
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def render_target(factors: LatentFactors, cfg: DataConfig) -> np.ndarray:
    """Hue-filled shape on black, H×W×3 in [0, 1]."""
    fill = _coverage(factors, cfg.image_size, cfg.supersample)
    image = fill[..., None] * hue_to_rgb(factors.hue)[None, None, :]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def render_source(factors: LatentFactors, cfg: DataConfig) -> np.ndarray:
    """Grayscale outline plus a border of ``cue_width`` pixels in the target hue."""
    size = cfg.image_size
    width = cfg.outline_width / size
    outer = _coverage(factors, size, cfg.supersample)
    inner = _coverage(factors, size, cfg.supersample, shrink=width)
    outline = np.clip(outer - inner, 0.0, 1.0)
    image = np.repeat(outline[..., None], 3, axis=2)
    rgb = hue_to_rgb(factors.hue)
    w = min(cfg.cue_width, size // 2)
    image[:w, :, :] = rgb
    image[-w:, :, :] = rgb
    image[:, :w, :] = rgb
    image[:, -w:, :] = rgb
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def sample_factors(rng: np.random.Generator, cfg: DataConfig) -> LatentFactors:
    shape_class = int(rng.integers(0, cfg.n_shapes))
    hue = float(rng.uniform(0.0, TWO_PI))
    scale = float(rng.uniform(*cfg.scale_range))
    lo, hi = cfg.position_range
    px, py = (float(v) for v in rng.uniform(lo, hi, size=2))
    return LatentFactors(shape_class=shape_class, hue=hue, scale=scale, position=(px, py))


def make_sample(factors: LatentFactors, sample_id: int, cfg: DataConfig) -> PairedSample:
    return PairedSample(
        source_image=render_source(factors, cfg),
        target_image=render_target(factors, cfg),
        factors=factors,
        id=sample_id,
    )


def generate_dataset(
    config: DataConfig,
    seed: int,
    split: str = "train",
    id_offset: int = 0
) -> Dataset:
    """Render one split; a pure function of ``(config, seed, split)``."""
    config.check()
    if split not in SPLITS:
        raise ContractViolation(f"unknown split {split!r}", details={"split": split})
    count = config.split_counts()[split]
    rng = numpy_rng(seed, "datagen", split)
    factors = [sample_factors(rng, config) for _ in range(count)]
    samples = [make_sample(f, id_offset + i, config) for i, f in enumerate(factors)]
    logger.debug(f"Rendered {count} {split} samples (seed={seed})")
    return Dataset(samples=samples, split=split, seed=seed)


def generate_splits(config: DataConfig, seed: int) -> Dict[str, Dataset]:
    """All three splits with globally unique ids (train, then val, then test)."""
    splits: Dict[str, Dataset] = {}
    offset = 0
    for split in SPLITS:
        splits[split] = generate_dataset(config, seed, split=split, id_offset=offset)
        offset += config.split_counts()[split]
    return splits


def factor_distance(a: LatentFactors, b: LatentFactors, n_shapes: int = 3) -> float:
    """Unit-weight factor distance; hue contributes its chord length."""
    d = a.feature_vector(n_shapes) - b.feature_vector(n_shapes)
    return float(np.sqrt(np.sum(d * d, axis=-1)))


def oracle_neighbors(ds: Dataset, sample_id: int, k: int, n_shapes: int = 3) -> List[int]:
    """The ``k`` samples closest in factor space, excluding the query; ties go to the lower id."""
    center = ds.position(sample_id)
    if not 0 <= k < len(ds):
        raise ContractViolation(f"k must be below the dataset size, got k={k}", details={"k": k, "n": len(ds)})
    features = ds.factor_matrix(n_shapes)
    diff = features - features[center]
    dists = np.sqrt(np.sum(diff * diff, axis=-1))
    ids = np.asarray(ds.ids)
    candidates = [i for i in range(len(ds)) if i != center]
    order = sorted(candidates, key=lambda i: (dists[i], ids[i]))
    return [int(ids[i]) for i in order[:k]]


def oracle_neighbor_table(ds: Dataset, k: int, n_shapes: int = 3) -> Dict[int, List[int]]:
    """``oracle_neighbors`` for every center, vectorized over the distance matrix."""
    if not 0 <= k < len(ds):
        raise ContractViolation(f"k must be below the dataset size, got k={k}", details={"k": k, "n": len(ds)})
    features = ds.factor_matrix(n_shapes)
    diff = features[:, None, :] - features[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=-1))
    ids = np.asarray(ds.ids)
    table: Dict[int, List[int]] = {}
    for i in range(len(ds)):
        row = dists[i].copy()
        row[i] = np.inf
        order = np.lexsort((ids, row))
        table[int(ids[i])] = [int(ids[j]) for j in order[:k]]
    return table
