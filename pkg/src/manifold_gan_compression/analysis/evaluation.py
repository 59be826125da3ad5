"""
Encoder-feature Fréchet proxy and generator evaluation.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional
import logging

import numpy as np
import torch

from ..core.manifold import predict_images
from ..data.datagen import Dataset
from ..models.networks import EncoderNet, GeneratorNet, encoder_embed, images_to_tensor, to_unit_range
from ..utils.exceptions import ContractViolation
from ..utils.monitoring import monitor_performance

logger = logging.getLogger(__name__)


@dataclass
class FrechetStats:
    """Mean and unbiased covariance of a feature set."""
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self) -> None:
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ContractViolation("covariance shape does not match the mean",
                                    details={"mu": list(self.mu.shape), "sigma": list(self.sigma.shape)})
        if self.n < 2:
            raise ContractViolation(f"Fréchet statistics need n >= 2 samples, got {self.n}", details={"n": self.n})
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8):
            raise ContractViolation("covariance is not symmetric")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FrechetStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ContractViolation(
                "need an N x d feature matrix with N >= 2",
                details={"shape": list(features.shape)}
            )
        return cls(features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False, ddof=1)), features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    sym = (matrix + matrix.T) / 2.0
    eigval, eigvec = np.linalg.eigh(sym)
    return (eigvec * np.sqrt(np.clip(eigval, 0.0, None))) @ eigvec.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of ``(S_a S_b)^(1/2)`` equals the sum of square roots of the
    eigenvalues of ``S_a^(1/2) S_b S_a^(1/2)``, which is symmetric.
    """
    if a.dim != b.dim:
        raise ContractViolation("Fréchet statistics differ in dimension", details={"a": a.dim, "b": b.dim})
    diff = a.mu - b.mu
    root_a = psd_sqrt(a.sigma)
    middle = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_covmean = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean)
    return max(value, 0.0)


def _features(encoder: EncoderNet, images: torch.Tensor, batch_size: int) -> np.ndarray:
    rows = [encoder_embed(encoder, images[s:s + batch_size]).numpy() for s in range(0, images.shape[0], batch_size)]
    return np.concatenate(rows)


@monitor_performance("eval_generator")
def eval_generator(
    gen: GeneratorNet,
    ds: Dataset,
    enc: EncoderNet,
    batch_size: int = 64,
    mask: Optional[torch.Tensor] = None,
) -> Dict[str, Any]:
    """
    Compare a generator's predictions with the ground-truth targets.

    Args:
        gen: Generator to evaluate (dropout off, eval-mode normalization)
        ds: Split with at least two samples
        enc: Frozen encoder providing the feature space
        batch_size: Inference batch size
        mask: Optional architecture vector applied to ``gen``

    Returns:
        Dictionary with the Fréchet proxy, the mean L1 in [0, 1] and the sample count
    """
    if len(ds) < 2:
        raise ContractViolation(f"evaluation needs at least two samples, got {len(ds)}", details={"n": len(ds)})
    predictions = to_unit_range(predict_images(gen, ds, batch_size, mask))
    targets = images_to_tensor(ds.targets())
    fake = FrechetStats.from_features(_features(enc, predictions, batch_size))
    real = FrechetStats.from_features(_features(enc, targets, batch_size))
    proxy = frechet_distance(fake, real)
    l1 = float((predictions - targets).abs().mean())
    logger.info(f"Fréchet proxy {proxy:.4f}, L1 {l1:.4f} on {len(ds)} samples")
    return {"frechet": proxy, "l1": l1, "n": len(ds)}
