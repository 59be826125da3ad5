"""
Recurrent pruning agents and the straight-through Gumbel-Sigmoid.

An agent unrolls a weight-normalized GRU cell over one fixed input code per
prunable layer. Its initial hidden state is the peer agent's latest
architecture embedding, its per-step output goes through a ReLU and a
per-layer dense head, and the concatenated heads are the logits ``o``.
Gates are ``sigmoid(-(o + g) / tau)``: negative logits keep channels.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from ..utils.exceptions import ContractViolation, MissingArtifactError
from ..utils.seeding import torch_generator
from ..utils.validation import require, require_finite
from .archspec import ArchitectureVector, ModelRole, PrunableSpec, harden

logger = logging.getLogger(__name__)

Layers = Sequence[Tuple[str, int]]


@dataclass
class GumbelDraw:
    """Gumbel(0, 1) noise for one architecture vector plus its temperature."""
    g: torch.Tensor
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ContractViolation(f"temperature must be positive, got {self.tau}", details={"tau": self.tau})
        require_finite(self.g, "gumbel noise")

    @classmethod
    def sample(cls, n: int, generator: Optional[torch.Generator], tau: float = 1.0) -> "GumbelDraw":
        u = torch.rand(n, generator=generator).clamp(1e-10, 1.0 - 1e-7)
        return cls(-torch.log(-torch.log(u)), tau)

    @classmethod
    def zeros(cls, n: int, tau: float = 1.0) -> "GumbelDraw":
        return cls(torch.zeros(n), tau)


def gumbel_sigmoid_ste(o: torch.Tensor, draw: GumbelDraw) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(v, v_soft)``; ``v`` is binary forward and ``v_soft`` backward."""
    require(o.shape == draw.g.shape, "logits and noise differ in shape",
            logits=list(o.shape), noise=list(draw.g.shape))
    v_soft = torch.sigmoid(-(o + draw.g.to(o.dtype)) / draw.tau)
    hard = (v_soft >= 0.5).to(v_soft.dtype)
    v = hard + v_soft - v_soft.detach()
    return v, v_soft


def temperature_at(step: int, total_steps: int, tau: float, tau_end: Optional[float] = None) -> float:
    """Linear anneal from ``tau`` to ``tau_end``; constant when no end is set."""
    if tau_end is None or total_steps <= 1:
        return tau
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return tau + (tau_end - tau) * frac


class PruningAgent(nn.Module):
    """GRU controller emitting one logit per prunable channel of its model."""

    def __init__(
        self,
        layers: Layers,
        owner: Union[ModelRole, str] = ModelRole.GENERATOR,
        input_dim: int = 128,
        hidden_dim: int = 256,
        seed: int = 0,
        logit_init: float = -3.0,
    ):
        super().__init__()
        require(len(layers) > 0, "an agent needs at least one layer")
        self.layers: List[Tuple[str, int]] = [(str(name), int(c)) for name, c in layers]
        self.owner = ModelRole(owner)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        self.logit_init = logit_init

        gen = torch_generator(seed, "agent", self.owner.value)
        # fixed after initialization
        self.register_buffer("input_codes", torch.randn(len(self.layers), input_dim, generator=gen))
        self.register_buffer("last_embedding", torch.zeros(hidden_dim))

        cell = nn.GRUCell(input_dim, hidden_dim)
        bound = 1.0 / hidden_dim ** 0.5
        with torch.no_grad():
            for param in cell.parameters():
                nn.init.uniform_(param, -bound, bound, generator=gen)
        cell = weight_norm(cell, name="weight_ih")
        self.cell = weight_norm(cell, name="weight_hh")

        heads = []
        for _, channels in self.layers:
            head = nn.Linear(hidden_dim, channels)
            with torch.no_grad():
                nn.init.normal_(head.weight, 0.0, 0.01, generator=gen)
                head.bias.fill_(logit_init)
            heads.append(weight_norm(head))
        self.heads = nn.ModuleList(heads)

    @property
    def n_outputs(self) -> int:
        return sum(c for _, c in self.layers)

    def agent_config(self) -> Dict[str, Any]:
        return {
            "layers": [list(layer) for layer in self.layers],
            "owner": self.owner.value,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
            "logit_init": self.logit_init,
        }

    def forward(
        self,
        peer_embedding: torch.Tensor,
        treat_peer_constant: bool = True,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if peer_embedding.shape != (self.hidden_dim,):
            raise ContractViolation(
                f"peer embedding must have shape ({self.hidden_dim},)",
                details={"got": list(peer_embedding.shape)}
            )
        require_finite(peer_embedding, "peer embedding")
        h = peer_embedding.detach() if treat_peer_constant else peer_embedding
        h = h.unsqueeze(0)
        logits = []
        for code, head in zip(self.input_codes, self.heads):
            h = self.cell(code.unsqueeze(0), h)
            logits.append(head(F.relu(h)).squeeze(0))
        return torch.cat(logits), h.squeeze(0)

    def remember(self, embedding: torch.Tensor) -> None:
        """Store the latest architecture embedding for the peer to read."""
        require_finite(embedding, "architecture embedding")
        with torch.no_grad():
            self.last_embedding.copy_(embedding.detach())


class NaiveLogits(nn.Module):
    """Baseline: one free logit per channel, no recurrence and no embedding."""

    def __init__(
        self,
        layers: Layers,
        owner: Union[ModelRole, str] = ModelRole.GENERATOR,
        hidden_dim: int = 256,
        logit_init: float = -3.0,
        **_: Any,
    ):
        super().__init__()
        self.layers = [(str(name), int(c)) for name, c in layers]
        self.owner = ModelRole(owner)
        self.hidden_dim = hidden_dim
        self.logit_init = logit_init
        self.theta = nn.Parameter(torch.full((sum(c for _, c in self.layers),), float(logit_init)))
        self.register_buffer("last_embedding", torch.zeros(hidden_dim))

    @property
    def n_outputs(self) -> int:
        return int(self.theta.numel())

    def agent_config(self) -> Dict[str, Any]:
        return {
            "layers": [list(layer) for layer in self.layers],
            "owner": self.owner.value,
            "hidden_dim": self.hidden_dim,
            "logit_init": self.logit_init,
        }

    def forward(self, peer_embedding: torch.Tensor, treat_peer_constant: bool = True):
        return self.theta, torch.zeros(self.hidden_dim)

    def remember(self, embedding: torch.Tensor) -> None:
        pass


AgentModule = Union[PruningAgent, NaiveLogits]


def build_agent(
    spec: PrunableSpec,
    naive: bool = False,
    input_dim: int = 128,
    hidden_dim: int = 256,
    seed: int = 0,
    logit_init: float = -3.0,
) -> AgentModule:
    if naive:
        return NaiveLogits(spec.layout, spec.owner, hidden_dim=hidden_dim, logit_init=logit_init)
    return PruningAgent(spec.layout, spec.owner, input_dim, hidden_dim, seed, logit_init)


def output_order(layers: Layers, spec: PrunableSpec) -> np.ndarray:
    """Spec index of every agent output, matching layers by name."""
    slices = spec.layer_slices()
    sizes = dict(spec.layout)
    pieces = []
    for name, channels in layers:
        if name not in slices or sizes[name] != channels:
            raise ContractViolation(
                f"agent layer {name} ({channels} channels) is not a prunable layer of the network",
                details={"layer": name, "channels": channels}
            )
        sl = slices[name]
        pieces.append(np.arange(sl.start, sl.stop))
    order = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    if order.size != len(spec) or np.unique(order).size != order.size:
        raise ContractViolation("agent layers do not cover the prunable layers exactly", details={"expected": len(spec)})
    return order


def to_spec_order(v: torch.Tensor, order: np.ndarray) -> torch.Tensor:
    """Differentiable reordering from agent output order to spec order."""
    require(v.numel() == order.size, "vector length does not match the ordering",
            expected=int(order.size), got=int(v.numel()))
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return v[torch.as_tensor(inverse)]


def map_architecture(
    v: Union[torch.Tensor, np.ndarray, Sequence[float]],
    spec: PrunableSpec,
    order: Optional[np.ndarray] = None,
) -> ArchitectureVector:
    """Place agent-ordered binary outputs at their spec indices."""
    bits = np.asarray(v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v).reshape(-1)
    if bits.size != len(spec):
        raise ContractViolation(
            f"vector length {bits.size} does not match {len(spec)} prunable units",
            details={"expected": len(spec), "got": int(bits.size)}
        )
    if order is None:
        order = np.arange(len(spec))
    out = np.zeros(len(spec), dtype=np.int8)
    out[order] = np.rint(bits).astype(np.int8)
    return ArchitectureVector(out, spec.owner)


def unmap_architecture(v: ArchitectureVector, order: Optional[np.ndarray] = None) -> np.ndarray:
    """Inverse of map_architecture: spec-ordered bits back to agent order."""
    if order is None:
        return v.bits.copy()
    require(len(v) == order.size, "vector length does not match the ordering")
    return v.bits[order].copy()


def hard_decision(
    agent: AgentModule,
    peer_embedding: torch.Tensor,
    spec: PrunableSpec,
    tau: float = 1.0,
) -> ArchitectureVector:
    """Noise-free architecture, hardened with the at-least-one guard."""
    order = output_order(agent.layers, spec)
    with torch.no_grad():
        o, _ = agent(peer_embedding, treat_peer_constant=True)
        v_soft = torch.sigmoid(-o / tau)
        v_soft = to_spec_order(v_soft, order)
    return harden(v_soft.double(), spec)


def save_agent(
    path: Union[str, Path],
    agent: AgentModule,
    seed: int,
    spec_checksum: str,
    step: int = 0,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "naive" if isinstance(agent, NaiveLogits) else "agent",
            "config": agent.agent_config(),
            "weights": agent.state_dict(),
            "seed": seed,
            "step": step,
            "spec_checksum": spec_checksum,
        },
        path,
    )
    return path


def load_agent(path: Union[str, Path], spec: Optional[PrunableSpec] = None) -> Tuple[AgentModule, Dict[str, Any]]:
    """Restore an agent; with ``spec`` given, its checksum must match."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(
            f"agent checkpoint {path} not found; run `prune` first",
            prerequisite="prune",
            details={"path": str(path)},
        )
    archive = torch.load(path, map_location="cpu", weights_only=False)
    cls = NaiveLogits if archive["kind"] == "naive" else PruningAgent
    agent = cls(**archive["config"])
    agent.load_state_dict(archive["weights"])
    if spec is not None and archive["spec_checksum"] != spec.checksum():
        raise ContractViolation(
            "agent was trained for a different architecture",
            details={"agent": archive["spec_checksum"], "spec": spec.checksum()}
        )
    return agent, {k: archive[k] for k in ("seed", "step", "spec_checksum")}
