"""
Training of the original GAN and of the contrastive embedding encoder.
"""

from typing import Callable, Dict, List, Optional, Tuple
import logging
import math

import pandas as pd
import torch
import torch.nn.functional as F

from ..config import RunConfig
from ..core.objectives import gan_losses, generator_term
from ..data.datagen import Dataset
from ..utils.exceptions import DataError, DivergenceError, EncoderCollapseError
from ..utils.monitoring import monitor_performance
from ..utils.seeding import torch_generator
from .networks import (
    DiscriminatorNet,
    EncoderNet,
    GeneratorNet,
    build_discriminator,
    build_encoder,
    build_generator,
    encoder_embed,
    images_to_tensor,
    to_gan_range,
    to_unit_range,
)

logger = logging.getLogger(__name__)


def constant_then_linear(total_steps: int, decay_half: bool = True) -> Callable[[int], float]:
    """LR multiplier: flat for the first half, then linear to zero."""
    if not decay_half or total_steps <= 1:
        return lambda step: 1.0
    start = total_steps // 2
    span = max(total_steps - start, 1)
    return lambda step: 1.0 - max(0, step - start) / span


def sample_batch(n: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    """Batch indices; without replacement when the set is large enough."""
    if n >= batch_size:
        return torch.randperm(n, generator=generator)[:batch_size]
    return torch.randint(0, n, (batch_size,), generator=generator)


def random_flip(
    x: torch.Tensor,
    y: torch.Tensor,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Horizontally flip each (x, y) pair together with probability 0.5."""
    flip = torch.rand(x.shape[0], generator=generator) < 0.5
    if not bool(flip.any()):
        return x, y
    x, y = x.clone(), y.clone()
    x[flip] = x[flip].flip(-1)
    y[flip] = y[flip].flip(-1)
    return x, y


def _check_finite(step: int, **losses: float) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        raise DivergenceError(
            f"non-finite loss at step {step}",
            details={"step": step, **{k: float(v) for k, v in losses.items()}}
        )


def evaluate_l1(gen: GeneratorNet, ds: Dataset, batch_size: int = 64, mask: Optional[torch.Tensor] = None) -> float:
    """Mean absolute error in [0, 1] between noise-free predictions and targets."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty split", details={"split": ds.split})
    sources = to_gan_range(images_to_tensor(ds.sources()))
    targets = images_to_tensor(ds.targets())
    was_training = gen.training
    gen.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            pred = to_unit_range(gen(sources[start:start + batch_size], mask))
            total += float((pred - targets[start:start + batch_size]).abs().sum())
    gen.train(was_training)
    return total / targets.numel()


def gan_training_step(
    gen: GeneratorNet,
    disc: DiscriminatorNet,
    opt_G: torch.optim.Optimizer,
    opt_D: torch.optim.Optimizer,
    x: torch.Tensor,
    y: torch.Tensor,
    flavor: str,
    lambda_l1: float,
    dropout_gen: torch.Generator,
    disc_mask: Optional[torch.Tensor] = None,
    extra_g_loss: Optional[Callable[[], torch.Tensor]] = None,
) -> Dict[str, float]:
    """One discriminator update followed by one generator update.

    ``extra_g_loss`` is evaluated before the training-mode forward pass, while
    the generator's normalization statistics are still those of the last step.
    """
    kd = extra_g_loss() if extra_g_loss is not None else None
    fake = gen(x, dropout_on=True, generator=dropout_gen)

    opt_D.zero_grad()
    d_term, _ = gan_losses([disc(x, y, disc_mask)], disc(x, fake.detach(), disc_mask), flavor)
    d_term.backward()
    opt_D.step()

    opt_G.zero_grad()
    g_term = generator_term(disc(x, fake, disc_mask), flavor)
    l1 = (fake - y).abs().mean()
    loss_G = g_term + lambda_l1 * l1
    if kd is not None:
        loss_G = loss_G + kd
    loss_G.backward()
    opt_G.step()

    row = {"loss_D": float(d_term.detach()), "loss_G": float(loss_G.detach()),
           "g_term": float(g_term.detach()), "l1": float(l1.detach())}
    if kd is not None:
        row["kd"] = float(kd.detach())
    return row


@monitor_performance("pretrain_gan")
def pretrain_gan(
    ds: Dataset,
    cfg: RunConfig,
    val: Optional[Dataset] = None,
) -> Tuple[GeneratorNet, DiscriminatorNet, pd.DataFrame]:
    """Train the original generator and discriminator (GAN + L1 reconstruction)."""
    if len(ds) == 0:
        raise DataError("the train split is empty; nothing to pretrain on", details={"split": ds.split})
    pc = cfg.pretrain
    size = cfg.data.image_size
    gen = build_generator(cfg.models, size, cfg.seed)
    disc = build_discriminator(cfg.models, size, cfg.seed)
    opt_G = torch.optim.Adam(gen.parameters(), lr=pc.lr, betas=pc.betas)
    opt_D = torch.optim.Adam(disc.parameters(), lr=pc.lr, betas=pc.betas)
    schedule = constant_then_linear(pc.steps, pc.decay_half)
    sched_G = torch.optim.lr_scheduler.LambdaLR(opt_G, lr_lambda=schedule)
    sched_D = torch.optim.lr_scheduler.LambdaLR(opt_D, lr_lambda=schedule)

    sources = to_gan_range(images_to_tensor(ds.sources()))
    targets = to_gan_range(images_to_tensor(ds.targets()))
    batches = torch_generator(cfg.seed, "pretrain", "batches")
    dropout = torch_generator(cfg.seed, "pretrain", "dropout")
    flips = torch_generator(cfg.seed, "pretrain", "flip")

    gen.train()
    disc.train()
    history: List[Dict[str, float]] = []
    for step in range(pc.steps):
        idx = sample_batch(len(ds), pc.batch_size, batches)
        x, y = sources[idx], targets[idx]
        if pc.flip:
            x, y = random_flip(x, y, flips)
        row = gan_training_step(gen, disc, opt_G, opt_D, x, y, cfg.flavor, pc.lambda_l1, dropout)
        _check_finite(step, **row)
        row = {"step": step, **row, "lr": opt_G.param_groups[0]["lr"]}
        history.append(row)
        sched_G.step()
        sched_D.step()
        if step % pc.log_every == 0:
            logger.info(
                f"pretrain step {step}/{pc.steps}: loss_D={row['loss_D']:.4f} "
                f"loss_G={row['loss_G']:.4f} l1={row['l1']:.4f}"
            )

    check = val if val is not None and len(val) else ds
    val_l1 = evaluate_l1(gen, check)
    if val_l1 > pc.l1_threshold:
        logger.warning(
            f"validation L1 {val_l1:.4f} is above the threshold {pc.l1_threshold}",
            extra={"val_l1": val_l1, "threshold": pc.l1_threshold}
        )
    else:
        logger.info(f"validation L1 {val_l1:.4f}")
    return gen, disc, pd.DataFrame(history, columns=["step", "loss_D", "loss_G", "g_term", "l1", "lr"])


def augment_views(
    images: torch.Tensor,
    generator: torch.Generator,
    padding: int = 4,
    jitter: float = 0.2,
) -> torch.Tensor:
    """Random shifted crop, horizontal flip and brightness jitter of [0, 1] images."""
    n, _, h, w = images.shape
    out = images
    if padding > 0:
        padded = F.pad(images, (padding,) * 4, mode="replicate")
        offsets = torch.randint(0, 2 * padding + 1, (n, 2), generator=generator)
        out = torch.stack([
            padded[i, :, int(oy):int(oy) + h, int(ox):int(ox) + w]
            for i, (oy, ox) in enumerate(offsets)
        ])
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.where(flip.view(-1, 1, 1, 1), out.flip(-1), out)
    if jitter > 0:
        scale = 1.0 + (torch.rand(n, 1, 1, 1, generator=generator) * 2.0 - 1.0) * jitter
        out = out * scale
    return out.clamp(0.0, 1.0)


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross entropy over 2B views."""
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    n = z1.shape[0]
    logits = z @ z.T / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    labels = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(logits, labels)


def check_embedding_collapse(encoder: EncoderNet, images: torch.Tensor, threshold: float = 1e-6) -> float:
    """Mean per-dimension embedding variance; raises when it is below ``threshold``."""
    emb = encoder_embed(encoder, images)
    variance = float(emb.var(dim=0, unbiased=False).mean()) if emb.shape[0] > 1 else 0.0
    if not math.isfinite(variance) or variance < threshold:
        raise EncoderCollapseError(
            f"encoder embeddings collapsed (variance {variance:.3g} < {threshold:g})",
            details={"variance": variance, "threshold": threshold}
        )
    return variance


@monitor_performance("train_encoder")
def train_encoder(ds: Dataset, cfg: RunConfig) -> Tuple[EncoderNet, pd.DataFrame]:
    """Contrastive augmentation-invariance training on target images."""
    if len(ds) < 2:
        raise DataError("encoder training needs at least two target images", details={"n": len(ds)})
    ec = cfg.encoder
    encoder = build_encoder(cfg.models, cfg.seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=ec.lr)
    images = images_to_tensor(ds.targets())
    batches = torch_generator(cfg.seed, "encoder", "batches")
    views = torch_generator(cfg.seed, "encoder", "views")
    batch_size = min(ec.batch_size, len(ds))

    encoder.train()
    history: List[Dict[str, float]] = []
    for step in range(ec.steps):
        batch = images[sample_batch(len(ds), batch_size, batches)]
        v1 = augment_views(batch, views, ec.crop_padding, ec.jitter)
        v2 = augment_views(batch, views, ec.crop_padding, ec.jitter)
        loss = nt_xent(encoder(v1), encoder(v2), ec.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        _check_finite(step, loss=value)
        history.append({"step": step, "loss": value})
        if step % ec.log_every == 0:
            logger.info(f"encoder step {step}/{ec.steps}: loss={value:.4f}")

    check_embedding_collapse(encoder, images, ec.collapse_threshold)
    return encoder, pd.DataFrame(history, columns=["step", "loss"])
