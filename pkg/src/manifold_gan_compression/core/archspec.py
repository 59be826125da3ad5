"""
Prunable units, architecture vectors and the exact MACs model.

A conv contributes ``active_in * active_out * k_h * k_w * H_out * W_out``
multiply-accumulates, where ``active_in`` sums the (possibly soft) active
channel counts of every layer concatenated at its input and ``active_out``
is its own active count. Unprunable sides use their full channel counts.
The count is multilinear in the mask entries.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging

import numpy as np
import torch

from ..models.networks import ConvRecord, DiscriminatorNet, PrunableNet
from ..utils.exceptions import ContractViolation
from ..utils.validation import require

logger = logging.getLogger(__name__)


class ModelRole(str, Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


@dataclass(frozen=True)
class PrunableUnit:
    layer_id: str
    channel_index: int
    kernel_hw: Tuple[int, int]
    out_spatial: Tuple[int, int]
    consumers: Tuple[str, ...]


@dataclass
class PrunableSpec:
    """Prunable-unit graph of one network; unit order is the architecture-vector index space."""
    units: List[PrunableUnit]
    fixed_macs: float
    t_total: float
    records: List[ConvRecord]
    layout: List[Tuple[str, int]]
    owner: ModelRole

    def __len__(self) -> int:
        return len(self.units)

    def layer_slices(self) -> Dict[str, slice]:
        slices: Dict[str, slice] = {}
        offset = 0
        for name, channels in self.layout:
            slices[name] = slice(offset, offset + channels)
            offset += channels
        return slices

    def layer_sizes(self) -> List[int]:
        return [c for _, c in self.layout]

    def to_table(self) -> List[Dict[str, object]]:
        """Per-conv layer table with full-width MAC subtotals."""
        table = []
        for rec in self.records:
            kh, kw = rec.kernel
            ho, wo = rec.out_spatial
            table.append({
                "layer": rec.name,
                "sources": [src for src, _ in rec.sources],
                "in_channels": rec.in_channels,
                "out_channels": rec.out_channels,
                "kernel": [kh, kw],
                "out_spatial": [ho, wo],
                "prunable": rec.prunable,
                "macs": rec.in_channels * rec.out_channels * kh * kw * ho * wo,
            })
        return table

    def to_dict(self) -> Dict[str, object]:
        return {
            "owner": self.owner.value,
            "units": len(self.units),
            "fixed_macs": self.fixed_macs,
            "t_total": self.t_total,
            "layers": self.to_table(),
        }

    def checksum(self) -> str:
        payload = json.dumps({"layout": self.layout, "layers": self.to_table()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path


@dataclass(eq=False)
class ArchitectureVector:
    """Hard binary mask over a model's prunable channels."""
    bits: np.ndarray
    owner: ModelRole = ModelRole.GENERATOR

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.int8).reshape(-1)
        require(bool(np.isin(self.bits, (0, 1)).all()), "architecture vector entries must be 0 or 1")

    def __len__(self) -> int:
        return int(self.bits.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ArchitectureVector):
            return NotImplemented
        return self.owner == other.owner and np.array_equal(self.bits, other.bits)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.bits, dtype=dtype)

    def active_fraction(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0

    def layer_counts(self, spec: PrunableSpec) -> Dict[str, int]:
        return {name: int(self.bits[sl].sum()) for name, sl in spec.layer_slices().items()}

    def to_list(self) -> List[int]:
        return [int(b) for b in self.bits]

    @classmethod
    def ones(cls, spec: PrunableSpec) -> "ArchitectureVector":
        return cls(np.ones(len(spec), dtype=np.int8), spec.owner)


def build_spec(net: PrunableNet, owner: Optional[ModelRole] = None) -> PrunableSpec:
    """Enumerate the prunable output channels of every intermediate conv."""
    if not hasattr(net, "conv_records") or not hasattr(net, "mask_slots"):
        raise ContractViolation(
            f"{type(net).__name__} exposes no mask slots",
            details={"type": type(net).__name__}
        )
    if owner is None:
        owner = ModelRole.DISCRIMINATOR if isinstance(net, DiscriminatorNet) else ModelRole.GENERATOR
    records = list(net.conv_records())
    layout = [(r.name, r.out_channels) for r in records if r.prunable]
    require(len(layout) > 0, f"{type(net).__name__} has no prunable layers")
    consumers: Dict[str, List[str]] = {name: [] for name, _ in layout}
    for rec in records:
        for src, _ in rec.sources:
            if src in consumers:
                consumers[src].append(rec.name)
    by_name = {r.name: r for r in records}
    units = [
        PrunableUnit(
            layer_id=name,
            channel_index=c,
            kernel_hw=by_name[name].kernel,
            out_spatial=by_name[name].out_spatial,
            consumers=tuple(consumers[name]),
        )
        for name, channels in layout
        for c in range(channels)
    ]
    spec = PrunableSpec(units=units, fixed_macs=0.0, t_total=0.0, records=records, layout=layout, owner=owner)
    spec.fixed_macs = float(macs_of(spec, torch.zeros(len(units), dtype=torch.float64)))
    spec.t_total = float(macs_of(spec, torch.ones(len(units), dtype=torch.float64))) - spec.fixed_macs
    logger.debug(f"Built {owner.value} spec: {len(units)} units, t_total={spec.t_total:.0f}")
    return spec


VectorLike = Union[ArchitectureVector, torch.Tensor, np.ndarray, Sequence[float]]


def _as_vector(spec: PrunableSpec, v: VectorLike) -> torch.Tensor:
    if isinstance(v, ArchitectureVector):
        v = v.bits
    t = v if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=np.float64))
    t = t.to(torch.float64).reshape(-1)
    if t.numel() != len(spec):
        raise ContractViolation(
            f"vector length {t.numel()} does not match {len(spec)} prunable units",
            details={"expected": len(spec), "got": int(t.numel())}
        )
    return t


def macs_of(spec: PrunableSpec, v: VectorLike) -> torch.Tensor:
    """Total conv MACs of the sub-network selected by ``v`` (differentiable in soft entries)."""
    vec = _as_vector(spec, v)
    counts = {name: vec[sl].sum() for name, sl in spec.layer_slices().items()}
    total = torch.zeros((), dtype=torch.float64)
    for rec in spec.records:
        active_in = sum(counts[src] if src in counts else float(ch) for src, ch in rec.sources)
        active_out = counts[rec.name] if rec.prunable else float(rec.out_channels)
        kh, kw = rec.kernel
        ho, wo = rec.out_spatial
        total = total + active_in * active_out * (kh * kw * ho * wo)
    return total


def prunable_macs(spec: PrunableSpec, v: VectorLike) -> torch.Tensor:
    """T(v): MACs above the fixed part, comparable against ``p * t_total``."""
    return macs_of(spec, v) - spec.fixed_macs


def min_prunable_macs(spec: PrunableSpec) -> float:
    """Smallest T(v) reachable when every layer keeps one channel."""
    v = torch.zeros(len(spec), dtype=torch.float64)
    for sl in spec.layer_slices().values():
        v[sl.start] = 1.0
    return float(prunable_macs(spec, v))


def harden(
    v_soft: VectorLike,
    layout: Union[PrunableSpec, Sequence[int], None] = None,
    owner: Optional[ModelRole] = None,
) -> ArchitectureVector:
    """Round to {0, 1} (0.5 goes to 1); an all-zero layer keeps its largest soft entry."""
    if isinstance(v_soft, ArchitectureVector):
        v_soft = v_soft.bits
    if isinstance(v_soft, torch.Tensor):
        v_soft = v_soft.detach().cpu().numpy()
    soft = np.asarray(v_soft, dtype=np.float64).reshape(-1)
    require(bool(((soft >= 0.0) & (soft <= 1.0)).all()), "soft vector entries must lie in [0, 1]")
    if isinstance(layout, PrunableSpec):
        sizes = layout.layer_sizes()
        owner = owner or layout.owner
    elif layout is None:
        sizes = [soft.size]
    else:
        sizes = list(layout)
    require(sum(sizes) == soft.size, "layout does not cover the vector", expected=sum(sizes), got=int(soft.size))
    bits = (soft >= 0.5).astype(np.int8)
    offset = 0
    for size in sizes:
        block = slice(offset, offset + size)
        if size and bits[block].sum() == 0:
            bits[offset + int(np.argmax(soft[block]))] = 1
        offset += size
    return ArchitectureVector(bits, owner or ModelRole.GENERATOR)


def extract_subnetwork(net: PrunableNet, v: ArchitectureVector) -> PrunableNet:
    """Physically remove masked channels; the result matches the masked net exactly."""
    spec = build_spec(net)
    if len(v) != len(spec):
        raise ContractViolation(
            f"vector length {len(v)} does not match {len(spec)} prunable units",
            details={"expected": len(spec), "got": len(v)}
        )
    keep: Dict[str, np.ndarray] = {}
    for name, sl in spec.layer_slices().items():
        idx = np.flatnonzero(v.bits[sl])
        if idx.size == 0:
            raise ContractViolation(f"layer {name} has no active channel", details={"layer": name})
        keep[name] = idx
    pruned = net.with_widths({name: int(idx.size) for name, idx in keep.items()})

    with torch.no_grad():
        for rec in spec.records:
            old, new = net.units[rec.name], pruned.units[rec.name]
            out_idx = torch.as_tensor(keep[rec.name] if rec.prunable else np.arange(rec.out_channels))
            pieces, offset = [], 0
            for src, channels in rec.sources:
                local = keep[src] if src in keep else np.arange(channels)
                pieces.append(local + offset)
                offset += channels
            in_idx = torch.as_tensor(np.concatenate(pieces))
            new.conv.weight.copy_(old.conv.weight[out_idx][:, in_idx])
            if old.conv.bias is not None:
                new.conv.bias.copy_(old.conv.bias[out_idx])
            if old.norm is not None and getattr(old.norm, "weight", None) is not None:
                new.norm.weight.copy_(old.norm.weight[out_idx])
                new.norm.bias.copy_(old.norm.bias[out_idx])
            if isinstance(old.norm, torch.nn.BatchNorm2d):
                new.norm.running_mean.copy_(old.norm.running_mean[out_idx])
                new.norm.running_var.copy_(old.norm.running_var[out_idx])
                new.norm.num_batches_tracked.copy_(old.norm.num_batches_tracked)
    pruned.train(net.training)
    return pruned


def survival_counts(spec: PrunableSpec, v: ArchitectureVector) -> Dict[str, Dict[str, int]]:
    """Per-layer kept/total channel counts."""
    return {
        name: {"kept": int(v.bits[sl].sum()), "total": sl.stop - sl.start}
        for name, sl in spec.layer_slices().items()
    }


__all__ = [
    "ArchitectureVector",
    "ModelRole",
    "PrunableSpec",
    "PrunableUnit",
    "build_spec",
    "extract_subnetwork",
    "harden",
    "macs_of",
    "min_prunable_macs",
    "prunable_macs",
    "survival_counts",
]
