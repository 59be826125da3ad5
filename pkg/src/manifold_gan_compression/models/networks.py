"""
Toy generator, discriminator and encoder with explicit prunable-channel slots.

Every network describes its convolutions as ``ConvRecord`` entries: which
layers feed each conv, how many channels it produces, its kernel and output
size, and whether its output channels are prunable. The resource model and
sub-network extraction are driven entirely by these records.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ModelsConfig
from ..utils.seeding import torch_generator
from ..utils.validation import require, require_range

logger = logging.getLogger(__name__)

MaskDict = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class ConvRecord:
    """One convolution in a network's layer table."""
    name: str
    sources: Tuple[Tuple[str, int], ...]
    out_channels: int
    kernel: Tuple[int, int]
    out_spatial: Tuple[int, int]
    prunable: bool

    @property
    def in_channels(self) -> int:
        return sum(c for _, c in self.sources)


class MaskSlot(nn.Module):
    """Named per-channel gate applied to a layer's outgoing activation."""

    def __init__(self, name: str, channels: int):
        super().__init__()
        self.name = name
        self.channels = channels

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        if mask is None:
            return x
        return x * mask.to(x.dtype).view(1, -1, 1, 1)

    def extra_repr(self) -> str:
        return f"name={self.name}, channels={self.channels}"


def seeded_dropout(x: torch.Tensor, rate: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout drawing its noise from ``generator``."""
    if rate <= 0.0:
        return x
    noise = torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype)
    return x * (noise >= rate).to(x.dtype) / (1.0 - rate)


class ConvUnit(nn.Module):
    """[upsample] -> conv -> [norm] -> [activation] -> [dropout] -> [mask]."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        norm: Optional[str] = None,
        activation: Optional[str] = None,
        upsample: bool = False,
        dropout: float = 0.0,
        slot: Optional[str] = None,
    ):
        super().__init__()
        padding = (kernel_size - stride) // 2 if stride > 1 else kernel_size // 2
        self.upsample = upsample
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
        if norm == "batch":
            self.norm: Optional[nn.Module] = nn.BatchNorm2d(out_channels)
        elif norm == "instance":
            self.norm = nn.InstanceNorm2d(out_channels, affine=True)
        else:
            self.norm = None
        self.activation = activation
        self.dropout = dropout
        self.slot = MaskSlot(slot, out_channels) if slot else None

    def forward(
        self,
        x: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        dropout_on: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.activation == "relu":
            x = F.relu(x)
        elif self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2)
        elif self.activation == "tanh":
            x = torch.tanh(x)
        if dropout_on and self.dropout > 0.0:
            x = seeded_dropout(x, self.dropout, generator)
        if self.slot is not None:
            x = self.slot(x, mask)
        return x


class PrunableNet(nn.Module):
    """Shared plumbing for networks with mask slots."""

    units: nn.ModuleDict

    def conv_records(self) -> List[ConvRecord]:
        raise NotImplementedError

    def arch_config(self) -> Dict[str, Any]:
        raise NotImplementedError

    def mask_slots(self) -> "OrderedDict[str, MaskSlot]":
        slots: "OrderedDict[str, MaskSlot]" = OrderedDict()
        for rec in self.conv_records():
            if rec.prunable:
                unit = self.units[rec.name]
                slots[rec.name] = unit.slot
        return slots

    def mask_layout(self) -> List[Tuple[str, int]]:
        return [(name, slot.channels) for name, slot in self.mask_slots().items()]

    def split_mask(self, mask: Optional[torch.Tensor]) -> MaskDict:
        """Cut a flat architecture vector into per-slot masks."""
        if mask is None:
            return {}
        layout = self.mask_layout()
        total = sum(c for _, c in layout)
        mask = torch.as_tensor(mask)
        require(
            mask.dim() == 1 and mask.numel() == total,
            f"mask length {mask.numel()} does not match {total} prunable channels",
            expected=total, got=int(mask.numel())
        )
        out: MaskDict = {}
        offset = 0
        for name, channels in layout:
            out[name] = mask[offset:offset + channels]
            offset += channels
        return out

    def with_widths(self, widths: Dict[str, int]) -> "PrunableNet":
        """Fresh network of the same architecture with the given prunable widths."""
        cfg = self.arch_config()
        cfg["widths"] = dict(widths)
        return type(self)(**cfg)

    def widths(self) -> Dict[str, int]:
        return {rec.name: rec.out_channels for rec in self.conv_records() if rec.prunable}


class GeneratorNet(PrunableNet):
    """U-Net or ResNet style image-to-image generator with tanh output."""

    def __init__(
        self,
        style: str = "unet",
        base_width: int = 16,
        depth: int = 3,
        n_blocks: int = 4,
        dropout_rate: float = 0.5,
        image_size: int = 32,
        in_channels: int = 3,
        out_channels: int = 3,
        widths: Optional[Dict[str, int]] = None,
    ):
        super().__init__()
        require(style in ("unet", "resnet"), f"unknown generator style {style!r}", style=style)
        self.style = style
        self.base_width = base_width
        self.depth = depth
        self.n_blocks = n_blocks
        self.dropout_rate = dropout_rate
        self.image_size = image_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self._widths = {**self._default_widths(), **(widths or {})}
        norm = "batch" if style == "unet" else "instance"
        self.units = nn.ModuleDict()
        for rec in self.conv_records():
            self.units[rec.name] = self._make_unit(rec, norm)

    def arch_config(self) -> Dict[str, Any]:
        return {
            "style": self.style,
            "base_width": self.base_width,
            "depth": self.depth,
            "n_blocks": self.n_blocks,
            "dropout_rate": self.dropout_rate,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "widths": dict(self._widths),
        }

    def _default_widths(self) -> Dict[str, int]:
        w = self.base_width
        if self.style == "unet":
            widths = {f"down{i}": w * min(2 ** i, 8) for i in range(1, self.depth + 1)}
            widths.update({f"up{i}": w * min(2 ** (i - 1), 8) for i in range(1, self.depth + 1)})
            return widths
        widths = {"down1": 2 * w, "up2": 2 * w, "up1": w}
        widths.update({f"block{b}": 4 * w for b in range(1, self.n_blocks + 1)})
        return widths

    @property
    def kd_taps(self) -> List[str]:
        """The two innermost decoder activations used for distillation."""
        if self.style == "unet":
            return [f"up{i}" for i in range(self.depth, max(self.depth - 2, 0), -1)]
        return ["up2", "up1"]

    def conv_records(self) -> List[ConvRecord]:
        s, w = self.image_size, self.base_width
        wd = self._widths
        recs: List[ConvRecord] = [ConvRecord("stem", (("input", self.in_channels),), w, (3, 3), (s, s), False)]
        if self.style == "unet":
            prev = ("stem", w)
            for i in range(1, self.depth + 1):
                size = s // 2 ** i
                recs.append(ConvRecord(f"down{i}", (prev,), wd[f"down{i}"], (4, 4), (size, size), True))
                prev = (f"down{i}", wd[f"down{i}"])
            for i in range(self.depth, 0, -1):
                size = s // 2 ** (i - 1)
                if i == self.depth:
                    sources: Tuple[Tuple[str, int], ...] = ((f"down{i}", wd[f"down{i}"]),)
                else:
                    sources = ((f"up{i + 1}", wd[f"up{i + 1}"]), (f"down{i}", wd[f"down{i}"]))
                recs.append(ConvRecord(f"up{i}", sources, wd[f"up{i}"], (3, 3), (size, size), True))
            recs.append(ConvRecord("head", (("up1", wd["up1"]), ("stem", w)), self.out_channels, (3, 3), (s, s), False))
            return recs

        trunk = 4 * w
        recs.append(ConvRecord("down1", (("stem", w),), wd["down1"], (4, 4), (s // 2, s // 2), True))
        recs.append(ConvRecord("down2", (("down1", wd["down1"]),), trunk, (4, 4), (s // 4, s // 4), False))
        for b in range(1, self.n_blocks + 1):
            recs.append(ConvRecord(f"block{b}", (("trunk", trunk),), wd[f"block{b}"], (3, 3), (s // 4, s // 4), True))
            recs.append(ConvRecord(f"block{b}_out", ((f"block{b}", wd[f"block{b}"]),), trunk, (3, 3), (s // 4, s // 4), False))
        recs.append(ConvRecord("up2", (("trunk", trunk),), wd["up2"], (3, 3), (s // 2, s // 2), True))
        recs.append(ConvRecord("up1", (("up2", wd["up2"]),), wd["up1"], (3, 3), (s, s), True))
        recs.append(ConvRecord("head", (("up1", wd["up1"]),), self.out_channels, (3, 3), (s, s), False))
        return recs

    def _make_unit(self, rec: ConvRecord, norm: str) -> ConvUnit:
        name = rec.name
        slot = name if rec.prunable else None
        if name == "stem":
            return ConvUnit(rec.in_channels, rec.out_channels, 3, norm=None, activation="relu")
        if name == "head":
            return ConvUnit(rec.in_channels, rec.out_channels, 3, activation="tanh")
        if name.startswith("down"):
            return ConvUnit(rec.in_channels, rec.out_channels, 4, stride=2, norm=norm, activation="lrelu", slot=slot)
        if name.endswith("_out"):
            return ConvUnit(rec.in_channels, rec.out_channels, 3, norm=norm)
        if name.startswith("block"):
            return ConvUnit(rec.in_channels, rec.out_channels, 3, norm=norm, activation="relu",
                            dropout=self.dropout_rate, slot=slot)
        level = int(name[2:])
        inner = self.style == "unet" and level > self.depth - 2
        return ConvUnit(rec.in_channels, rec.out_channels, 3, norm=norm, activation="relu", upsample=True,
                        dropout=self.dropout_rate if inner else 0.0, slot=slot)

    def forward(
        self,
        x: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        dropout_on: bool = False,
        generator: Optional[torch.Generator] = None,
        return_features: bool = False,
    ):
        masks = self.split_mask(mask)
        feats: Dict[str, torch.Tensor] = {}

        def run(name: str, inp: torch.Tensor) -> torch.Tensor:
            out = self.units[name](inp, masks.get(name), dropout_on, generator)
            feats[name] = out
            return out

        h = run("stem", x)
        if self.style == "unet":
            skips = {"stem": h}
            for i in range(1, self.depth + 1):
                h = run(f"down{i}", h)
                skips[f"down{i}"] = h
            h = run(f"up{self.depth}", skips[f"down{self.depth}"])
            for i in range(self.depth - 1, 0, -1):
                h = run(f"up{i}", torch.cat([h, skips[f"down{i}"]], dim=1))
            out = run("head", torch.cat([h, skips["stem"]], dim=1))
        else:
            h = run("down2", run("down1", h))
            for b in range(1, self.n_blocks + 1):
                h = h + run(f"block{b}_out", run(f"block{b}", h))
            out = run("head", run("up1", run("up2", h)))
        if return_features:
            return out, {name: feats[name] for name in self.kd_taps}
        return out


class DiscriminatorNet(PrunableNet):
    """Conditional patch discriminator over channel-concatenated (x, y)."""

    def __init__(
        self,
        depth: int = 3,
        base_width: int = 16,
        image_size: int = 32,
        in_channels: int = 6,
        widths: Optional[Dict[str, int]] = None,
    ):
        super().__init__()
        require(depth >= 2, "discriminator depth must be at least 2", depth=depth)
        self.depth = depth
        self.base_width = base_width
        self.image_size = image_size
        self.in_channels = in_channels
        defaults = {f"conv{i}": base_width * min(2 ** i, 8) for i in range(1, depth)}
        self._widths = {**defaults, **(widths or {})}
        self.units = nn.ModuleDict()
        for rec in self.conv_records():
            if rec.name == "stem":
                unit = ConvUnit(rec.in_channels, rec.out_channels, 4, stride=2, activation="lrelu")
            elif rec.name == "head":
                unit = ConvUnit(rec.in_channels, 1, 3)
            else:
                unit = ConvUnit(rec.in_channels, rec.out_channels, 4, stride=2, norm="instance",
                                activation="lrelu", slot=rec.name)
            self.units[rec.name] = unit

    def arch_config(self) -> Dict[str, Any]:
        return {
            "depth": self.depth,
            "base_width": self.base_width,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "widths": dict(self._widths),
        }

    def conv_records(self) -> List[ConvRecord]:
        s, w = self.image_size, self.base_width
        recs = [ConvRecord("stem", (("input", self.in_channels),), w, (4, 4), (s // 2, s // 2), False)]
        prev = ("stem", w)
        for i in range(1, self.depth):
            size = s // 2 ** (i + 1)
            recs.append(ConvRecord(f"conv{i}", (prev,), self._widths[f"conv{i}"], (4, 4), (size, size), True))
            prev = (f"conv{i}", self._widths[f"conv{i}"])
        final = s // 2 ** self.depth
        recs.append(ConvRecord("head", (prev,), 1, (3, 3), (final, final), False))
        return recs

    def forward(self, x: torch.Tensor, y: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        require(x.shape[-2:] == y.shape[-2:], "x and y must share spatial size")
        masks = self.split_mask(mask)
        h = torch.cat([x, y], dim=1)
        for name, unit in self.units.items():
            h = unit(h, masks.get(name))
        return h


class EncoderNet(nn.Module):
    """Four strided convs, global pooling and a projection head."""

    def __init__(self, width: int = 16, embedding_dim: int = 64, in_channels: int = 3):
        super().__init__()
        self.width = width
        self.embedding_dim = embedding_dim
        self.in_channels = in_channels
        chans = [in_channels, width, 2 * width, 4 * width, 4 * width]
        self.convs = nn.ModuleList(
            ConvUnit(chans[i], chans[i + 1], 4, stride=2, activation="relu") for i in range(4)
        )
        self.head = nn.Sequential(
            nn.Linear(chans[-1], 128),
            nn.ReLU(),
            nn.Linear(128, embedding_dim),
        )

    def arch_config(self) -> Dict[str, Any]:
        return {"width": self.width, "embedding_dim": self.embedding_dim, "in_channels": self.in_channels}

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        h = y
        for conv in self.convs:
            h = conv(h)
        return self.head(h.mean(dim=(2, 3)))


def encoder_embed(encoder: EncoderNet, y: torch.Tensor) -> torch.Tensor:
    """Embed images in [0, 1] (N×C×H×W, or a single C×H×W image)."""
    single = y.dim() == 3
    if single:
        y = y.unsqueeze(0)
    require_range(y, 0.0, 1.0, "encoder input")
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        emb = encoder(y)
    encoder.train(was_training)
    return emb[0] if single else emb


def tap_features(gen: GeneratorNet, x: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Distillation taps of ``gen`` on running normalization statistics, dropout off.

    The autograd graph is kept; wrap the call in ``torch.no_grad()`` for a frozen teacher.
    """
    was_training = gen.training
    gen.eval()
    try:
        _, feats = gen(x, dropout_on=False, return_features=True)
    finally:
        gen.train(was_training)
    return feats


def init_weights(net: nn.Module, seed: int, tag: str) -> nn.Module:
    """Normal(0, 0.02) conv weights, unit-centred norm scales, zero biases."""
    gen = torch_generator(seed, "init", tag)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(module.weight, 0.0, 0.02, generator=gen)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, (nn.BatchNorm2d, nn.InstanceNorm2d)) and module.weight is not None:
                nn.init.normal_(module.weight, 1.0, 0.02, generator=gen)
                nn.init.zeros_(module.bias)
    return net


def build_generator(cfg: ModelsConfig, image_size: int, seed: int) -> GeneratorNet:
    net = GeneratorNet(
        style=cfg.style,
        base_width=cfg.base_width,
        depth=cfg.depth,
        n_blocks=cfg.n_blocks,
        dropout_rate=cfg.dropout_rate,
        image_size=image_size,
    )
    return init_weights(net, seed, "generator")


def build_discriminator(cfg: ModelsConfig, image_size: int, seed: int) -> DiscriminatorNet:
    net = DiscriminatorNet(depth=cfg.disc_depth, base_width=cfg.disc_base_width, image_size=image_size)
    return init_weights(net, seed, "discriminator")


def build_encoder(cfg: ModelsConfig, seed: int) -> EncoderNet:
    net = EncoderNet(width=cfg.encoder_width, embedding_dim=cfg.embedding_dim)
    gen = torch_generator(seed, "init", "encoder")
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(module.bias)
    return net


def to_gan_range(images: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    return images * 2.0 - 1.0


def to_unit_range(images: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return ((images + 1.0) / 2.0).clamp(0.0, 1.0)


def images_to_tensor(images) -> torch.Tensor:
    """N×H×W×C numpy array in [0, 1] -> N×C×H×W float tensor."""
    return torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
