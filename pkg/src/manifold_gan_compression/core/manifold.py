"""
Neighborhood index over the original generator's predictions.

Each training source is passed through the frozen generator, the prediction
is embedded, and every center keeps the ``k`` other predictions with the
highest cosine similarity. Search is exact brute force.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np
import torch

from ..data.datagen import Dataset
from ..models.networks import EncoderNet, GeneratorNet, encoder_embed, images_to_tensor, to_gan_range, to_unit_range
from ..utils.exceptions import ConfigurationError, ContractViolation, DataError, SampleLookupError
from ..utils.monitoring import monitor_performance

logger = logging.getLogger(__name__)

INDEX_HEADER = "index.json"
INDEX_TABLE = "index.bin"


@dataclass
class EmbeddingSet:
    ids: List[int]
    vectors: np.ndarray
    source: str = "encoder"

    def __post_init__(self) -> None:
        self.ids = [int(i) for i in self.ids]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ContractViolation(
                "embedding matrix must be N x d with one row per id",
                details={"shape": list(self.vectors.shape), "ids": len(self.ids)}
            )
        bad = np.flatnonzero(~np.isfinite(self.vectors).all(axis=1))
        if bad.size:
            raise ContractViolation(
                f"non-finite embedding for sample {self.ids[bad[0]]}",
                details={"ids": [self.ids[i] for i in bad[:10]]}
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class NeighborhoodIndex:
    """Per-center top-k neighbors with their similarities, descending."""
    k: int
    neighbors: Dict[int, List[Tuple[int, float]]]
    include_center: bool = True
    source: str = "encoder"
    similarity: str = "signed"
    encoder_checksum: str = ""
    ids: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = list(self.neighbors)

    def __len__(self) -> int:
        return len(self.ids)

    def neighbor_ids(self, center: int) -> List[int]:
        try:
            return [n for n, _ in self.neighbors[int(center)]]
        except KeyError:
            raise SampleLookupError(f"no neighborhood for id {center}", details={"id": int(center)}) from None

    def as_id_lists(self) -> Dict[int, List[int]]:
        return {c: [n for n, _ in rows] for c, rows in self.neighbors.items()}

    def save(self, directory: Union[str, Path]) -> Path:
        """JSON header plus a packed binary table of (center, k x (neighbor, similarity))."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        header = {
            "k": self.k,
            "n": len(self.ids),
            "source": self.source,
            "similarity": self.similarity,
            "include_center": self.include_center,
            "encoder_checksum": self.encoder_checksum,
        }
        with open(directory / INDEX_HEADER, "w") as f:
            json.dump(header, f, indent=2)
        table = np.zeros(len(self.ids), dtype=_table_dtype(self.k))
        for row, center in enumerate(self.ids):
            entries = self.neighbors[center]
            table["center"][row] = center
            table["neighbor"][row] = [n for n, _ in entries]
            table["similarity"][row] = [s for _, s in entries]
        table.tofile(directory / INDEX_TABLE)
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "NeighborhoodIndex":
        directory = Path(directory)
        try:
            with open(directory / INDEX_HEADER) as f:
                header = json.load(f)
            table = np.fromfile(directory / INDEX_TABLE, dtype=_table_dtype(header["k"]))
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"could not read neighborhood index in {directory}: {e}",
                            details={"path": str(directory)}) from e
        if table.shape[0] != header["n"]:
            raise DataError("index table length does not match its header",
                            details={"expected": header["n"], "got": int(table.shape[0])})
        neighbors = {
            int(rec["center"]): [(int(n), float(s)) for n, s in zip(rec["neighbor"], rec["similarity"])]
            for rec in table
        }
        return cls(
            k=header["k"],
            neighbors=neighbors,
            include_center=header["include_center"],
            source=header["source"],
            similarity=header["similarity"],
            encoder_checksum=header["encoder_checksum"],
            ids=[int(c) for c in table["center"]],
        )


def _table_dtype(k: int) -> np.dtype:
    return np.dtype([("center", "<i8"), ("neighbor", "<i8", (k,)), ("similarity", "<f4", (k,))])


def predict_images(
    gen: GeneratorNet,
    ds: Dataset,
    batch_size: int = 64,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Noise-free generator predictions, N x C x H x W in [-1, 1]."""
    if len(ds) == 0:
        return torch.zeros(0, 3, 0, 0)
    sources = to_gan_range(images_to_tensor(ds.sources()))
    was_training = gen.training
    gen.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            outputs.append(gen(sources[start:start + batch_size], mask, dropout_on=False))
    gen.train(was_training)
    return torch.cat(outputs)


@monitor_performance("embed_predictions")
def embed_predictions(
    gen: GeneratorNet,
    ds: Dataset,
    enc: EncoderNet,
    batch_size: int = 64,
    predictions: Optional[torch.Tensor] = None,
) -> EmbeddingSet:
    """Encoder embeddings of the generator's predictions, one row per sample id."""
    if predictions is None:
        predictions = predict_images(gen, ds, batch_size)
    rows = []
    for start in range(0, len(ds), batch_size):
        rows.append(encoder_embed(enc, to_unit_range(predictions[start:start + batch_size])).numpy())
    vectors = np.concatenate(rows) if rows else np.zeros((0, enc.embedding_dim))
    return EmbeddingSet(ds.ids, vectors, "encoder")


def oracle_embeddings(ds: Dataset, bandwidth: float = 1.0, n_shapes: int = 3) -> EmbeddingSet:
    """Kernel-lifted factor embedding.

    Rows ``e_i`` satisfy ``<e_i, e_j> = exp(-d_ij^2 / (2 bandwidth^2))`` with
    unit norms, so cosine similarity falls strictly with factor distance and
    the index reproduces the factor-space neighbors.
    """
    if bandwidth <= 0:
        raise ConfigurationError("oracle bandwidth must be positive", details={"bandwidth": bandwidth})
    features = ds.factor_matrix(n_shapes)
    diff = features[:, None, :] - features[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    kernel = np.exp(-sq / (2.0 * bandwidth ** 2))
    eigval, eigvec = np.linalg.eigh(kernel)
    vectors = eigvec * np.sqrt(np.clip(eigval, 0.0, None))
    return EmbeddingSet(ds.ids, vectors, "oracle-factors")


def cosine_similarity(a: Sequence[float], b: Sequence[float], absolute: bool = False) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractViolation("cosine similarity of a zero vector is undefined")
    value = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return abs(value) if absolute else value


def similarity_matrix(vectors: np.ndarray, absolute: bool = False) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ContractViolation(
            "cosine similarity of a zero vector is undefined",
            details={"rows": np.flatnonzero(norms == 0)[:10].tolist()}
        )
    unit = vectors / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    return np.abs(sims) if absolute else sims


@monitor_performance("build_index")
def build_index(
    emb: EmbeddingSet,
    k: int,
    include_center: bool = True,
    similarity: str = "signed",
    encoder_checksum: str = "",
) -> NeighborhoodIndex:
    """Exact top-k by cosine similarity, excluding the center; ties go to the lower id."""
    n = len(emb)
    if not 1 <= k < n:
        raise ConfigurationError(f"k must satisfy 1 <= k < N, got k={k}, N={n}", details={"k": k, "n": n})
    if similarity not in ("signed", "absolute"):
        raise ConfigurationError(f"unknown similarity {similarity!r}", details={"similarity": similarity})
    sims = similarity_matrix(emb.vectors, absolute=similarity == "absolute")
    ids = np.asarray(emb.ids)
    neighbors: Dict[int, List[Tuple[int, float]]] = {}
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        order = np.lexsort((ids, -row))[:k]
        neighbors[int(ids[i])] = [(int(ids[j]), float(row[j])) for j in order]
    logger.info(f"Built {emb.source} neighborhood index: N={n}, k={k}")
    return NeighborhoodIndex(
        k=k,
        neighbors=neighbors,
        include_center=include_center,
        source=emb.source,
        similarity=similarity,
        encoder_checksum=encoder_checksum,
        ids=[int(i) for i in ids],
    )


def neighborhood_overlap(idx: NeighborhoodIndex, oracle: Dict[int, List[int]]) -> float:
    """Mean over centers of |idx ∩ oracle| / k."""
    if set(oracle) != set(idx.neighbors):
        raise ContractViolation("index and oracle cover different ids",
                                details={"index": len(idx.neighbors), "oracle": len(oracle)})
    if not idx.neighbors:
        return 0.0
    total = 0.0
    for center, rows in idx.neighbors.items():
        expected = oracle[center]
        if len(expected) != idx.k:
            raise ContractViolation(
                f"oracle list for id {center} has {len(expected)} entries, expected k={idx.k}",
                details={"id": center, "k": idx.k}
            )
        total += len({n for n, _ in rows} & set(expected)) / idx.k
    return total / len(idx.neighbors)
