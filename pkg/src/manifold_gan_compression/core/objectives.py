"""
Loss terms for pretraining, agent training and distillation finetuning.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import math

import torch
import torch.nn as nn

from ..utils.exceptions import ConfigurationError, ContractViolation, DataError
from ..utils.validation import require
from .archspec import PrunableSpec, prunable_macs


@dataclass
class LossBundle:
    """One pruning iteration's objective terms, as floats for logging."""
    loss_G: float
    loss_D: float
    resource: float
    sparsity: float
    components: Dict[str, float] = field(default_factory=dict)

    def as_row(self, step: int) -> Dict[str, float]:
        return {
            "step": step,
            "loss_G": self.loss_G,
            "loss_D": self.loss_D,
            "resource": self.resource,
            "sparsity": self.sparsity,
            **self.components,
        }

    def is_finite(self) -> bool:
        values = [self.loss_G, self.loss_D, self.resource, self.sparsity, *self.components.values()]
        return all(math.isfinite(v) for v in values)


def gan_losses(
    real_scores: Sequence[torch.Tensor],
    fake_scores: torch.Tensor,
    flavor: str = "hinge",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator terms; several real maps are averaged."""
    if len(real_scores) == 0:
        raise ContractViolation("at least one real score map is required")
    if flavor == "hinge":
        real = torch.stack([torch.relu(1.0 - s).mean() for s in real_scores]).mean()
        d_term = real + torch.relu(1.0 + fake_scores).mean()
    elif flavor == "lsgan":
        real = torch.stack([((s - 1.0) ** 2).mean() for s in real_scores]).mean()
        d_term = real + (fake_scores ** 2).mean()
    else:
        raise ConfigurationError(f"unknown GAN loss flavor {flavor!r}", details={"flavor": flavor})
    return d_term, generator_term(fake_scores, flavor)


def generator_term(fake_scores: torch.Tensor, flavor: str = "hinge") -> torch.Tensor:
    if flavor == "hinge":
        return -fake_scores.mean()
    if flavor == "lsgan":
        return ((fake_scores - 1.0) ** 2).mean()
    raise ConfigurationError(f"unknown GAN loss flavor {flavor!r}", details={"flavor": flavor})


def resource_loss(spec: PrunableSpec, v: torch.Tensor, p: float) -> torch.Tensor:
    """log(max(T(v), p*T_total) / (p*T_total)); zero on or below budget."""
    if p <= 0:
        raise ConfigurationError(f"p must be positive, got {p}", details={"p": p})
    budget = p * spec.t_total
    t = prunable_macs(spec, v)
    return torch.log(torch.maximum(t, t.new_tensor(budget)) / budget)


def sparsity_loss(v_D: torch.Tensor) -> torch.Tensor:
    """Mean of the discriminator's architecture vector."""
    if v_D.numel() == 0:
        raise ContractViolation("sparsity of an empty vector is undefined")
    return v_D.sum() / v_D.numel()


@dataclass
class PruningBatch:
    """Sources ``x``, original predictions ``y'`` and their neighbor images."""
    x: torch.Tensor
    y_pred: torch.Tensor
    neighbors: torch.Tensor
    ids: List[int]

    def real_set(self, manifold_real_set: bool, include_center: bool) -> List[torch.Tensor]:
        """Images scored as real: neighbors (plus the center), or the center alone."""
        if not manifold_real_set:
            return [self.y_pred]
        if self.neighbors.dim() != 5 or self.neighbors.shape[1] == 0:
            raise DataError("batch carries no neighbors for its centers", details={"ids": self.ids})
        reals = [self.neighbors[:, j] for j in range(self.neighbors.shape[1])]
        if include_center:
            reals.append(self.y_pred)
        return reals


def discriminator_agent_loss(
    disc: nn.Module,
    batch: PruningBatch,
    fake: torch.Tensor,
    v_D: torch.Tensor,
    lambda2: float,
    flavor: str,
    manifold_real_set: bool = True,
    include_center: bool = True,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """D-agent share of the objective: d_term + lambda2 * L(v_D); the fake is detached."""
    reals = batch.real_set(manifold_real_set, include_center)
    real_scores = [disc(batch.x, y, v_D) for y in reals]
    fake_scores = disc(batch.x, fake.detach(), v_D)
    d_term, _ = gan_losses(real_scores, fake_scores, flavor)
    sparsity = sparsity_loss(v_D)
    return d_term + lambda2 * sparsity, {"d_term": d_term, "sparsity": sparsity}


def generator_agent_loss(
    disc: nn.Module,
    spec_G: PrunableSpec,
    batch: PruningBatch,
    fake: torch.Tensor,
    v_G: torch.Tensor,
    v_D: torch.Tensor,
    lambda1: float,
    p: float,
    flavor: str,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """G-agent share: g_term + lambda1 * R(v_G); the discriminator mask is held constant."""
    fake_scores = disc(batch.x, fake, v_D.detach())
    g_term = generator_term(fake_scores, flavor)
    resource = resource_loss(spec_G, v_G, p)
    return g_term + lambda1 * resource, {"g_term": g_term, "resource": resource}


def pruning_step_losses(
    batch: PruningBatch,
    gen: nn.Module,
    disc: nn.Module,
    spec_G: PrunableSpec,
    v_G: torch.Tensor,
    v_D: torch.Tensor,
    lambda1: float,
    lambda2: float,
    p: float,
    flavor: str = "hinge",
    manifold_real_set: bool = True,
    include_center: bool = True,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor, LossBundle]:
    """Both agents' losses for one batch with the detachment of the alternating scheme.

    ``loss_D`` reaches only ``v_D`` and ``loss_G`` reaches only ``v_G``.
    Returns ``(loss_G, loss_D, bundle)``.
    """
    fake = gen(batch.x, v_G, dropout_on=True, generator=generator)
    loss_D, d_parts = discriminator_agent_loss(
        disc, batch, fake, v_D, lambda2, flavor, manifold_real_set, include_center
    )
    loss_G, g_parts = generator_agent_loss(disc, spec_G, batch, fake, v_G, v_D, lambda1, p, flavor)
    bundle = LossBundle(
        loss_G=float(loss_G.detach()),
        loss_D=float(loss_D.detach()),
        resource=float(g_parts["resource"].detach()),
        sparsity=float(d_parts["sparsity"].detach()),
        components={
            "d_term": float(d_parts["d_term"].detach()),
            "g_term": float(g_parts["g_term"].detach()),
            "macs_G": float(prunable_macs(spec_G, v_G.detach())),
            "active_fraction_D": float(v_D.detach().mean()),
        },
    )
    return loss_G, loss_D, bundle


def gram_matrix(feats: torch.Tensor) -> torch.Tensor:
    """Per-sample Gram matrix normalized by channels x spatial elements."""
    n, c, h, w = feats.shape
    flat = feats.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def distillation_losses(
    student_feats: Sequence[torch.Tensor],
    teacher_feats: Sequence[torch.Tensor],
    adaptors: Sequence[nn.Module],
    lambda_content: float,
    lambda_texture: float,
) -> torch.Tensor:
    """Content (squared norm) plus texture (Frobenius norm of Gram differences), batch-averaged."""
    require(
        len(student_feats) == len(teacher_feats) == len(adaptors),
        "student, teacher and adaptor lists must align",
    )
    total = torch.zeros((), dtype=torch.float32)
    if lambda_content == 0 and lambda_texture == 0:
        return total
    for fs, ft, adapt in zip(student_feats, teacher_feats, adaptors):
        if fs.shape[-2:] != ft.shape[-2:]:
            raise ContractViolation(
                "distillation feature maps differ in spatial size",
                details={"student": list(fs.shape), "teacher": list(ft.shape)},
            )
        mapped = adapt(fs)
        total = total.to(mapped.dtype)
        if lambda_content:
            content = ((mapped - ft) ** 2).flatten(1).sum(dim=1).mean()
            total = total + lambda_content * content
        if lambda_texture:
            diff = gram_matrix(mapped) - gram_matrix(ft)
            texture = torch.linalg.matrix_norm(diff, ord="fro").mean()
            total = total + lambda_texture * texture
    return total


def make_adaptors(
    student_channels: Sequence[int],
    teacher_channels: Sequence[int],
    kept: Optional[Sequence[Sequence[int]]] = None,
) -> nn.ModuleList:
    """1x1 student-to-teacher maps; student channel j starts on teacher channel ``kept[j]``."""
    adaptors = nn.ModuleList()
    for i, (cs, ct) in enumerate(zip(student_channels, teacher_channels)):
        conv = nn.Conv2d(cs, ct, kernel_size=1, bias=False)
        with torch.no_grad():
            if kept is not None:
                conv.weight.zero_()
                for j, t in enumerate(kept[i]):
                    conv.weight[int(t), j, 0, 0] = 1.0
            elif cs == ct:
                conv.weight.copy_(torch.eye(cs).view(cs, cs, 1, 1))
        adaptors.append(conv)
    return adaptors
