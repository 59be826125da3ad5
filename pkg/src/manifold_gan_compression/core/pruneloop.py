"""
The alternating agent-training loop, final extraction and distillation finetuning.

Per iteration the discriminator agent moves first: it reads the generator
agent's latest embedding as a constant, scores neighbors and a detached
fake, and takes one Adam step. The generator agent then draws a fresh
architecture, reads the discriminator agent's new embedding as a constant,
and takes its own step. Generator and discriminator weights never change.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union
import copy
import logging
import math

import numpy as np
import pandas as pd
import torch

from ..config import RunConfig
from ..data.datagen import Dataset
from ..models.checkpoint import weights_digest
from ..models.networks import DiscriminatorNet, GeneratorNet, images_to_tensor, tap_features, to_gan_range
from ..models.training import gan_training_step, random_flip
from ..utils.exceptions import ConfigurationError, ContractViolation, DataError, DivergenceError, SampleLookupError
from ..utils.monitoring import monitor_performance
from ..utils.seeding import torch_generator
from .agents import (
    AgentModule,
    GumbelDraw,
    build_agent,
    gumbel_sigmoid_ste,
    hard_decision,
    output_order,
    save_agent,
    temperature_at,
    to_spec_order,
)
from .archspec import (
    ArchitectureVector,
    PrunableSpec,
    build_spec,
    extract_subnetwork,
    macs_of,
    min_prunable_macs,
    survival_counts,
)
from .manifold import NeighborhoodIndex
from .objectives import (
    LossBundle,
    PruningBatch,
    distillation_losses,
    make_adaptors,
    pruning_step_losses,
)

logger = logging.getLogger(__name__)

PhaseHook = Callable[[str, int, "PruningRun"], None]


@dataclass(frozen=True)
class PruneBehavior:
    """Mechanisms enabled for one pruning run."""
    naive: bool
    prune_D: bool
    exchange_feedback: bool
    manifold_real_set: bool
    use_kd: bool
    label: str


ABLATION_LADDER: List[Tuple[str, Dict[str, bool]]] = [
    ("Baseline", dict(prune_D=False, use_agents=False, exchange_feedback=False, manifold_real_set=False, use_kd=False)),
    ("+ D pruning", dict(prune_D=True, use_agents=False, exchange_feedback=False, manifold_real_set=False, use_kd=False)),
    ("+ Pruning agents", dict(prune_D=True, use_agents=True, exchange_feedback=False, manifold_real_set=False, use_kd=False)),
    ("+ G-D feedback", dict(prune_D=True, use_agents=True, exchange_feedback=True, manifold_real_set=False, use_kd=False)),
    ("+ Manifold pruning", dict(prune_D=True, use_agents=True, exchange_feedback=True, manifold_real_set=True, use_kd=False)),
    ("+ Knowledge distillation", dict(prune_D=True, use_agents=True, exchange_feedback=True, manifold_real_set=True, use_kd=True)),
]


def ablation_variant(cfg: RunConfig) -> PruneBehavior:
    """Translate the ablation toggles into loop behavior."""
    ab = cfg.ablation
    ab.check()
    toggles = {k: getattr(ab, k) for k in ("prune_D", "use_agents", "exchange_feedback", "manifold_real_set", "use_kd")}
    label = next((name for name, row in ABLATION_LADDER if row == toggles), "Custom")
    return PruneBehavior(
        naive=not ab.use_agents,
        prune_D=ab.prune_D,
        exchange_feedback=ab.exchange_feedback,
        manifold_real_set=ab.manifold_real_set,
        use_kd=ab.use_kd,
        label=label,
    )


@dataclass
class PruningRun:
    """Mutable state of one pruning run."""
    cfg: RunConfig
    behavior: PruneBehavior
    spec_G: PrunableSpec
    spec_D: PrunableSpec
    agent_G: AgentModule
    agent_D: Optional[AgentModule]
    opt_G: torch.optim.Optimizer
    opt_D: Optional[torch.optim.Optimizer]
    step: int = 0
    tau: float = 1.0
    history: List[LossBundle] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)

    def peer_for_G(self) -> torch.Tensor:
        if self.agent_D is None or not self.behavior.exchange_feedback:
            return torch.zeros(self.agent_G.hidden_dim)
        return self.agent_D.last_embedding.clone()

    def peer_for_D(self) -> torch.Tensor:
        assert self.agent_D is not None
        if not self.behavior.exchange_feedback:
            return torch.zeros(self.agent_D.hidden_dim)
        return self.agent_G.last_embedding.clone()

    def history_frame(self) -> pd.DataFrame:
        rows = [b.as_row(i) for i, b in enumerate(self.history)]
        for row, epoch in zip(rows, self.epochs):
            row["epoch"] = epoch
        return pd.DataFrame(rows)


def pruning_batches(
    ds: Dataset,
    predictions: torch.Tensor,
    index: NeighborhoodIndex,
    batch_size: int,
    generator: torch.Generator,
) -> List[PruningBatch]:
    """One epoch of (x, y', neighbors) batches in a seeded order."""
    if predictions.shape[0] != len(ds):
        raise DataError("predictions do not cover the dataset",
                        details={"predictions": int(predictions.shape[0]), "samples": len(ds)})
    sources = to_gan_range(images_to_tensor(ds.sources()))
    ids = ds.ids
    order = torch.randperm(len(ds), generator=generator).tolist()
    batches = []
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        neighbor_rows = []
        for r in rows:
            try:
                neighbor_rows.append([ds.position(n) for n in index.neighbor_ids(ids[r])])
            except SampleLookupError as e:
                raise DataError(f"missing neighbors for center {ids[r]}", details={"id": ids[r]}) from e
        neighbors = torch.stack([predictions[torch.as_tensor(nr)] for nr in neighbor_rows])
        batches.append(PruningBatch(
            x=sources[rows],
            y_pred=predictions[rows],
            neighbors=neighbors,
            ids=[ids[r] for r in rows],
        ))
    return batches


def _freeze(net: torch.nn.Module) -> None:
    net.eval()
    for param in net.parameters():
        param.requires_grad_(False)


def check_budget(spec: PrunableSpec, p: float) -> None:
    """Reject budgets below what the at-least-one guard can reach."""
    budget = p * spec.t_total
    floor = min_prunable_macs(spec)
    if budget < floor:
        raise ConfigurationError(
            f"MAC budget {budget:.0f} is below the smallest reachable {floor:.0f}",
            details={"p": p, "budget": budget, "min_macs": floor, "t_total": spec.t_total}
        )


def _dump_last_good(checkpoint_dir: Optional[Path], snapshot: Dict[str, Any], run: PruningRun) -> None:
    if checkpoint_dir is None:
        return
    for role, state in snapshot.items():
        agent = run.agent_G if role == "G" else run.agent_D
        if agent is None or state is None:
            continue
        restored = copy.deepcopy(agent)
        restored.load_state_dict(state)
        spec = run.spec_G if role == "G" else run.spec_D
        save_agent(checkpoint_dir / f"agent_{role}.last_good.pt", restored, run.cfg.seed, spec.checksum(), run.step)
    logger.error(f"Wrote last-good agent checkpoints to {checkpoint_dir}")


@monitor_performance("prune")
def prune(
    gen: GeneratorNet,
    disc: DiscriminatorNet,
    index: NeighborhoodIndex,
    ds: Dataset,
    predictions: torch.Tensor,
    cfg: RunConfig,
    on_phase: Optional[PhaseHook] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> PruningRun:
    """Train the pruning agents against the frozen generator and discriminator."""
    pc = cfg.pruning
    behavior = ablation_variant(cfg)
    spec_G, spec_D = build_spec(gen), build_spec(disc)
    check_budget(spec_G, pc.p)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    _freeze(gen)
    _freeze(disc)
    digests = (weights_digest(gen), weights_digest(disc))

    agent_kw = dict(input_dim=pc.agent_input_dim, hidden_dim=pc.agent_hidden_dim,
                    seed=cfg.seed, logit_init=pc.logit_init)
    agent_G = build_agent(spec_G, naive=behavior.naive, **agent_kw)
    agent_D = build_agent(spec_D, naive=behavior.naive, **agent_kw) if behavior.prune_D else None
    adam = dict(lr=pc.lr, betas=pc.betas, weight_decay=pc.weight_decay)
    run = PruningRun(
        cfg=cfg,
        behavior=behavior,
        spec_G=spec_G,
        spec_D=spec_D,
        agent_G=agent_G,
        agent_D=agent_D,
        opt_G=torch.optim.Adam(agent_G.parameters(), **adam),
        opt_D=torch.optim.Adam(agent_D.parameters(), **adam) if agent_D is not None else None,
        tau=pc.tau,
    )
    order_G = output_order(agent_G.layers, spec_G)
    order_D = output_order(agent_D.layers, spec_D) if agent_D is not None else None
    ones_D = torch.ones(len(spec_D))

    shuffle = torch_generator(cfg.seed, "prune", "order")
    gumbel = torch_generator(cfg.seed, "prune", "gumbel")
    dropout = torch_generator(cfg.seed, "prune", "dropout")
    step_kw = dict(
        lambda1=pc.lambda1, lambda2=pc.lambda2, p=pc.p, flavor=cfg.flavor,
        manifold_real_set=behavior.manifold_real_set, include_center=pc.include_center,
        generator=dropout,
    )
    steps_per_epoch = math.ceil(len(ds) / pc.batch_size) if len(ds) else 0
    total_steps = pc.epochs * steps_per_epoch
    logger.info(
        f"Pruning ({behavior.label}): {total_steps} steps, p={pc.p}, "
        f"lambda1={pc.lambda1}, lambda2={pc.lambda2}, t_total={spec_G.t_total:.0f}"
    )

    for epoch in range(pc.epochs):
        for batch in pruning_batches(ds, predictions, index, pc.batch_size, shuffle):
            run.tau = temperature_at(run.step, total_steps, pc.tau, pc.tau_end)
            snapshot = {
                "G": copy.deepcopy(agent_G.state_dict()),
                "D": copy.deepcopy(agent_D.state_dict()) if agent_D is not None else None,
            }

            # D-agent phase
            d_bundle: Optional[LossBundle] = None
            if agent_D is not None and run.opt_D is not None:
                with torch.no_grad():
                    o_G, _ = agent_G(run.peer_for_G(), treat_peer_constant=True)
                    v_G_fixed, _ = gumbel_sigmoid_ste(o_G, GumbelDraw.sample(o_G.numel(), gumbel, run.tau))
                    v_G_fixed = to_spec_order(v_G_fixed, order_G)
                o_D, h_D = agent_D(run.peer_for_D(), treat_peer_constant=True)
                v_D, _ = gumbel_sigmoid_ste(o_D, GumbelDraw.sample(o_D.numel(), gumbel, run.tau))
                v_D = to_spec_order(v_D, order_D)
                _, loss_D, d_bundle = pruning_step_losses(batch, gen, disc, spec_G, v_G_fixed, v_D, **step_kw)
                run.opt_D.zero_grad()
                loss_D.backward()
                run.opt_D.step()
                agent_D.remember(h_D)
                v_D = v_D.detach()
                if on_phase is not None:
                    on_phase("D", run.step, run)
            else:
                v_D = ones_D

            # G-agent phase
            o_G, h_G = agent_G(run.peer_for_G(), treat_peer_constant=True)
            v_G, _ = gumbel_sigmoid_ste(o_G, GumbelDraw.sample(o_G.numel(), gumbel, run.tau))
            v_G = to_spec_order(v_G, order_G)
            loss_G, _, g_bundle = pruning_step_losses(batch, gen, disc, spec_G, v_G, v_D, **step_kw)
            run.opt_G.zero_grad()
            loss_G.backward()
            run.opt_G.step()
            agent_G.remember(h_G)
            if on_phase is not None:
                on_phase("G", run.step, run)

            bundle = LossBundle(
                loss_G=g_bundle.loss_G,
                loss_D=d_bundle.loss_D if d_bundle is not None else 0.0,
                resource=g_bundle.resource,
                sparsity=d_bundle.sparsity if d_bundle is not None else 1.0,
                components={
                    "d_term": d_bundle.components["d_term"] if d_bundle is not None else 0.0,
                    "g_term": g_bundle.components["g_term"],
                    "macs_G": g_bundle.components["macs_G"],
                    "active_fraction_D": g_bundle.components["active_fraction_D"],
                    "tau": run.tau,
                },
            )
            if not bundle.is_finite():
                _dump_last_good(checkpoint_dir, snapshot, run)
                raise DivergenceError(
                    f"non-finite pruning loss at step {run.step}",
                    details={"step": run.step, **bundle.as_row(run.step)}
                )
            run.history.append(bundle)
            run.epochs.append(epoch)
            if run.step % pc.log_every == 0:
                logger.info(
                    f"prune step {run.step}/{total_steps}: loss_G={bundle.loss_G:.4f} "
                    f"loss_D={bundle.loss_D:.4f} R={bundle.resource:.4f} L={bundle.sparsity:.3f}"
                )
            run.step += 1

    if (weights_digest(gen), weights_digest(disc)) != digests:
        raise ContractViolation("generator or discriminator weights changed during pruning")
    return run


@dataclass
class FinalizeOutcome:
    gen: GeneratorNet
    disc: DiscriminatorNet
    v_G: ArchitectureVector
    v_D: ArchitectureVector
    report: Dict[str, Any]


def _vector_report(spec: PrunableSpec, v: ArchitectureVector) -> Dict[str, Any]:
    original = spec.fixed_macs + spec.t_total
    achieved = float(macs_of(spec, v))
    return {
        "macs": achieved,
        "prunable_macs": achieved - spec.fixed_macs,
        "original_macs": original,
        "fixed_macs": spec.fixed_macs,
        "t_total": spec.t_total,
        "compression_ratio": 1.0 - achieved / original,
        "active_fraction": v.active_fraction(),
        "survival": survival_counts(spec, v),
        "bits": v.to_list(),
    }


def finalize(
    agent_G: AgentModule,
    agent_D: Optional[AgentModule],
    gen: GeneratorNet,
    disc: DiscriminatorNet,
    tau: float = 1.0,
    p: Optional[float] = None,
    exchange_feedback: bool = True,
) -> FinalizeOutcome:
    """Noise-free architectures from the agents, physically extracted."""
    spec_G, spec_D = build_spec(gen), build_spec(disc)
    if agent_D is not None and exchange_feedback:
        peer_G, peer_D = agent_D.last_embedding, agent_G.last_embedding
    else:
        peer_G = torch.zeros(agent_G.hidden_dim)
        peer_D = torch.zeros(agent_D.hidden_dim) if agent_D is not None else None
    v_G = hard_decision(agent_G, peer_G, spec_G, tau)
    v_D = hard_decision(agent_D, peer_D, spec_D, tau) if agent_D is not None else ArchitectureVector.ones(spec_D)

    gen_small = extract_subnetwork(gen, v_G)
    disc_small = extract_subnetwork(disc, v_D)
    report = {"generator": _vector_report(spec_G, v_G), "discriminator": _vector_report(spec_D, v_D)}
    for role, net in (("generator", gen_small), ("discriminator", disc_small)):
        small = build_spec(net)
        recomputed = small.fixed_macs + small.t_total
        if not math.isclose(recomputed, report[role]["macs"], rel_tol=1e-9):
            raise ContractViolation(
                f"extracted {role} MACs disagree with the architecture vector",
                details={"extracted": recomputed, "expected": report[role]["macs"]}
            )
    if p is not None:
        budget = p * spec_G.t_total
        report["generator"]["budget"] = budget
        report["generator"]["within_budget"] = report["generator"]["prunable_macs"] <= budget
    logger.info(
        f"Finalized: G compression {report['generator']['compression_ratio']:.1%}, "
        f"D compression {report['discriminator']['compression_ratio']:.1%}"
    )
    return FinalizeOutcome(gen_small, disc_small, v_G, v_D, report)


def kept_channels(spec: PrunableSpec, v: ArchitectureVector, layers: List[str]) -> List[List[int]]:
    slices = spec.layer_slices()
    return [np.flatnonzero(v.bits[slices[name]]).tolist() for name in layers]


@monitor_performance("finetune")
def finetune(
    gen: GeneratorNet,
    disc: DiscriminatorNet,
    teacher: GeneratorNet,
    ds: Dataset,
    cfg: RunConfig,
    v_G: Optional[ArchitectureVector] = None,
    use_kd: Optional[bool] = None,
) -> Tuple[GeneratorNet, DiscriminatorNet, pd.DataFrame]:
    """GAN + L1 finetuning of the extracted nets, with feature distillation from the teacher."""
    if len(ds) == 0:
        raise DataError("the train split is empty; nothing to finetune on", details={"split": ds.split})
    fc = cfg.finetune
    use_kd = cfg.ablation.use_kd if use_kd is None else use_kd
    _freeze(teacher)
    taps = gen.kd_taps
    teacher_widths = teacher.widths()
    student_widths = gen.widths()
    kept = kept_channels(build_spec(teacher), v_G, taps) if v_G is not None else None
    adaptors = make_adaptors([student_widths[t] for t in taps], [teacher_widths[t] for t in taps], kept)

    for param in list(gen.parameters()) + list(disc.parameters()):
        param.requires_grad_(True)
    gen.train()
    disc.train()
    g_params = list(gen.parameters()) + (list(adaptors.parameters()) if use_kd else [])
    opt_G = torch.optim.Adam(g_params, lr=fc.lr, betas=fc.betas)
    # fresh optimizer state for the extracted discriminator
    opt_D = torch.optim.Adam(disc.parameters(), lr=fc.lr, betas=fc.betas)

    sources = to_gan_range(images_to_tensor(ds.sources()))
    targets = to_gan_range(images_to_tensor(ds.targets()))
    shuffle = torch_generator(cfg.seed, "finetune", "order")
    dropout = torch_generator(cfg.seed, "finetune", "dropout")
    flips = torch_generator(cfg.seed, "finetune", "flip")

    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(fc.epochs):
        order = torch.randperm(len(ds), generator=shuffle)
        for start in range(0, len(ds), fc.batch_size):
            idx = order[start:start + fc.batch_size]
            x, y = sources[idx], targets[idx]
            if fc.flip:
                x, y = random_flip(x, y, flips)
            extra = None
            if use_kd:
                with torch.no_grad():
                    t_feats = tap_features(teacher, x)

                def extra(x=x, t_feats=t_feats):
                    s_feats = tap_features(gen, x)
                    return distillation_losses(
                        [s_feats[t] for t in taps], [t_feats[t] for t in taps], adaptors,
                        fc.lambda_content, fc.lambda_texture,
                    )

            row = gan_training_step(gen, disc, opt_G, opt_D, x, y, cfg.flavor, fc.lambda_l1, dropout,
                                    extra_g_loss=extra)
            if not all(math.isfinite(v) for v in row.values()):
                raise DivergenceError(f"non-finite finetune loss at step {step}", details={"step": step, **row})
            history.append({"step": step, "epoch": epoch, **row})
            if step % fc.log_every == 0:
                logger.info(f"finetune step {step}: loss_G={row['loss_G']:.4f} loss_D={row['loss_D']:.4f}")
            step += 1
    columns = ["step", "epoch", "loss_D", "loss_G", "g_term", "l1"] + (["kd"] if use_kd else [])
    return gen, disc, pd.DataFrame(history, columns=columns)


def stability_summary(history: pd.DataFrame, tail: float = 0.3, bound: float = 10.0) -> Dict[str, Any]:
    """Loss-balance and budget-convergence diagnostics of a pruning history."""
    n = len(history)
    if n == 0:
        return {"steps": 0}
    third = max(n // 3, 1)
    first, last = history.iloc[:third], history.iloc[-third:]
    first_gap = abs(first["loss_G"].mean() - first["loss_D"].mean())
    final_gap = abs(last["loss_G"].mean() - last["loss_D"].mean())
    losses = history[["loss_G", "loss_D"]].to_numpy()
    tail_rows = history.iloc[-max(int(math.ceil(n * tail)), 1):]
    resource_tail = float(tail_rows["resource"].max())
    return {
        "steps": n,
        "first_gap": float(first_gap),
        "final_gap": float(final_gap),
        "gap_shrinks": bool(final_gap <= first_gap),
        "finite": bool(np.isfinite(losses).all()),
        "bounded": bool(np.isfinite(losses).all() and (np.abs(losses) <= bound).all()),
        "resource_tail_max": resource_tail,
        "resource_converged": bool(resource_tail < 1e-3),
        "final_resource": float(history["resource"].iloc[-1]),
    }
