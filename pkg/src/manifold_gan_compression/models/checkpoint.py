"""
Self-describing checkpoint archives: weights, architecture config, seed, step.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import hashlib
import logging

import torch
import torch.nn as nn

from ..utils.exceptions import DataError, MissingArtifactError
from .networks import DiscriminatorNet, EncoderNet, GeneratorNet

logger = logging.getLogger(__name__)

NET_KINDS = {
    "generator": GeneratorNet,
    "discriminator": DiscriminatorNet,
    "encoder": EncoderNet,
}


def weights_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    net: nn.Module,
    kind: str,
    seed: int,
    step: int,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": kind,
            "arch": net.arch_config(),
            "weights": net.state_dict(),
            "seed": seed,
            "step": step,
            "extra": extra or {},
        },
        path,
    )
    logger.debug(f"Saved {kind} checkpoint to {path} (step {step})")
    return path


def load_checkpoint(path: Union[str, Path], prerequisite: str = "pretrain") -> Tuple[nn.Module, Dict[str, Any]]:
    """Rebuild a network from its archive; returns ``(net, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(
            f"checkpoint {path} not found; run `{prerequisite}` first",
            prerequisite=prerequisite,
            details={"path": str(path)},
        )
    archive = torch.load(path, map_location="cpu", weights_only=False)
    kind = archive.get("kind")
    if kind not in NET_KINDS:
        raise DataError(f"checkpoint {path} has unknown kind {kind!r}", details={"path": str(path)})
    net = NET_KINDS[kind](**archive["arch"])
    net.load_state_dict(archive["weights"])
    meta = {k: archive[k] for k in ("kind", "seed", "step", "extra")}
    return net, meta
