"""
Stage runners wiring the library into a reproducible run directory.

Each stage checks its prerequisites, snapshots the resolved configuration
into a fresh stage directory, does its work and registers the artifacts.
Library errors are returned as failed results, never raised.
"""

from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple
import hashlib
import json
import logging
import re

import numpy as np
import pandas as pd
import torch

from .analysis.evaluation import eval_generator
from .config import RunConfig
from .core.agents import load_agent, save_agent
from .core.archspec import ArchitectureVector, ModelRole, build_spec
from .core.manifold import (
    NeighborhoodIndex,
    build_index,
    embed_predictions,
    neighborhood_overlap,
    oracle_embeddings,
    predict_images,
)
from .core.pruneloop import ABLATION_LADDER, finalize, finetune, prune, stability_summary
from .core.run_manager import RunManager
from .data.datagen import Dataset, generate_splits, oracle_neighbor_table
from .data.storage import load_data_config, load_datasets, save_datasets
from .models.checkpoint import load_checkpoint, save_checkpoint, weights_digest
from .models.networks import DiscriminatorNet, EncoderNet, GeneratorNet
from .models.training import evaluate_l1, pretrain_gan, train_encoder
from .report.builder import emit_report, summarize_ablation
from .templates import ReportTemplates
from .utils.exceptions import DataError, GanPruneError
from .utils.monitoring import monitor_performance
from .utils.result import OperationResult

logger = logging.getLogger(__name__)


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def _dump_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


class StagePipeline:
    """
    Runs pipeline stages against one run directory.

    Attributes:
        manager: Registry and lock holder for the run directory
        cfg: Resolved configuration used by every stage of this invocation
        data_root: Optional shared dataset root
    """

    def __init__(self, manager: RunManager, cfg: RunConfig, data_root: Optional[Path] = None):
        self.manager = manager
        self.cfg = cfg
        self.data_root = Path(data_root) if data_root is not None else None
        self._runners: Dict[str, Callable[[], Dict[str, Any]]] = {
            "gen-data": self.stage_gen_data,
            "pretrain": self.stage_pretrain,
            "train-encoder": self.stage_train_encoder,
            "build-index": self.stage_build_index,
            "prune": self.stage_prune,
            "finalize": self.stage_finalize,
            "finetune": self.stage_finetune,
            "eval": self.stage_eval,
            "ablate": self.stage_ablate,
            "report": self.stage_report,
        }

    def run(self, stage: str) -> OperationResult[Dict[str, Any]]:
        """Run one stage; failures come back as an error result."""
        runner = self._runners.get(stage)
        if runner is None:
            return OperationResult.fail(f"unknown stage {stage!r}", error_type="ConfigurationError",
                                        details={"stage": stage, "stages": list(self._runners)})
        try:
            data = runner()
            return OperationResult.ok(data, metadata={"stage": stage, "run_dir": str(self.manager.run_dir)})
        except GanPruneError as e:
            logger.error(f"Stage {stage} failed: {e.message}", extra={"stage": stage, "error_type": e.error_type})
            return OperationResult.from_exception(e)

    # -- helpers ---------------------------------------------------------

    def _begin(self, stage: str, requires: Tuple[str, ...] = ()) -> Path:
        for prerequisite in requires:
            self.manager.latest(prerequisite)
        stage_dir = self.manager.new_stage_dir(stage)
        RunManager.snapshot_config(stage_dir, self.cfg)
        logger.info(f"Stage {stage} writing to {stage_dir}")
        return stage_dir

    def _datasets(self) -> Dict[str, Dataset]:
        record = self.manager.latest_record("gen-data")
        root = Path(record["artifacts"]["dataset"])
        if not root.is_absolute():
            root = self.manager.latest("gen-data") / root
        return load_datasets(root)

    def _split(self, name: str) -> Dataset:
        splits = self._datasets()
        if name not in splits:
            raise DataError(f"dataset has no {name} split", details={"split": name})
        return splits[name]

    def _net(self, stage: str, name: str) -> Any:
        net, _ = load_checkpoint(self.manager.latest(stage) / "checkpoints" / f"{name}.pt", prerequisite=stage)
        return net

    def _index_predictions(self, ds: Dataset) -> torch.Tensor:
        arrays = np.load(self.manager.latest("build-index") / "predictions.npz")
        if arrays["ids"].tolist() != ds.ids:
            raise DataError("stored predictions do not match the train split; rerun `build-index`",
                            details={"stored": int(arrays["ids"].shape[0]), "samples": len(ds)})
        return torch.from_numpy(arrays["predictions"])

    def _dataset_root(self, stage_dir: Path) -> Tuple[Path, str]:
        if self.data_root is None:
            return stage_dir, "."
        key = json.dumps({"data": self.cfg.data.model_dump(mode="json"), "seed": self.cfg.seed}, sort_keys=True)
        root = self.data_root / f"toy-{self.cfg.data.image_size}px-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
        return root, str(root.resolve())

    # -- stages ----------------------------------------------------------

    @monitor_performance("stage:gen-data")
    def stage_gen_data(self) -> Dict[str, Any]:
        stage_dir = self._begin("gen-data")
        root, location = self._dataset_root(stage_dir)
        if (root / "meta.json").exists():
            stored = load_data_config(root)
            if stored != self.cfg.data:
                raise DataError(
                    f"dataset at {root} was generated with a different data config",
                    details={"root": str(root), "stored": stored.model_dump(mode="json")},
                )
            logger.info(f"Reusing dataset at {root}")
            sizes = {name: len(ds) for name, ds in load_datasets(root).items()}
        else:
            splits = generate_splits(self.cfg.data, self.cfg.seed)
            save_datasets(root, self.cfg.data, self.cfg.seed, splits)
            sizes = {name: len(ds) for name, ds in splits.items()}
        self.manager.register("gen-data", stage_dir, {"dataset": location}, {"split_sizes": sizes})
        return {"dataset": str(root), "split_sizes": sizes}

    @monitor_performance("stage:pretrain")
    def stage_pretrain(self) -> Dict[str, Any]:
        stage_dir = self._begin("pretrain", ("gen-data",))
        splits = self._datasets()
        val = splits.get("val")
        gen, disc, history = pretrain_gan(splits["train"], self.cfg, val)
        history.to_csv(stage_dir / "history.csv", index=False)
        val_l1 = evaluate_l1(gen, val, self.cfg.evaluation.batch_size) if val is not None and len(val) else None
        steps = self.cfg.pretrain.steps
        save_checkpoint(stage_dir / "checkpoints" / "generator.pt", gen, "generator", self.cfg.seed, steps,
                        extra={"val_l1": val_l1})
        save_checkpoint(stage_dir / "checkpoints" / "discriminator.pt", disc, "discriminator", self.cfg.seed, steps)
        metadata = {"val_l1": val_l1, "steps": steps}
        self.manager.register("pretrain", stage_dir, {
            "generator": "checkpoints/generator.pt",
            "discriminator": "checkpoints/discriminator.pt",
            "history": "history.csv",
        }, metadata)
        return metadata

    @monitor_performance("stage:train-encoder")
    def stage_train_encoder(self) -> Dict[str, Any]:
        stage_dir = self._begin("train-encoder", ("gen-data",))
        encoder, history = train_encoder(self._split("train"), self.cfg)
        history.to_csv(stage_dir / "history.csv", index=False)
        save_checkpoint(stage_dir / "checkpoints" / "encoder.pt", encoder, "encoder", self.cfg.seed,
                        self.cfg.encoder.steps)
        metadata = {
            "digest": weights_digest(encoder)[:16],
            "final_loss": float(history["loss"].iloc[-1]) if len(history) else None,
        }
        self.manager.register("train-encoder", stage_dir,
                              {"encoder": "checkpoints/encoder.pt", "history": "history.csv"}, metadata)
        return metadata

    @monitor_performance("stage:build-index")
    def stage_build_index(self) -> Dict[str, Any]:
        mc = self.cfg.manifold
        requires = ("gen-data", "pretrain") + (("train-encoder",) if mc.source == "encoder" else ())
        stage_dir = self._begin("build-index", requires)
        train = self._split("train")
        gen: GeneratorNet = self._net("pretrain", "generator")
        batch_size = self.cfg.evaluation.batch_size
        predictions = predict_images(gen, train, batch_size)
        if mc.source == "encoder":
            encoder: EncoderNet = self._net("train-encoder", "encoder")
            emb = embed_predictions(gen, train, encoder, batch_size, predictions)
            checksum = weights_digest(encoder)[:16]
        else:
            emb = oracle_embeddings(train, mc.oracle_bandwidth, self.cfg.data.n_shapes)
            checksum = ""
        index = build_index(emb, mc.k, self.cfg.pruning.include_center, mc.similarity, checksum)
        index.save(stage_dir)
        np.savez_compressed(stage_dir / "predictions.npz", ids=np.asarray(train.ids, dtype=np.int64),
                            predictions=predictions.numpy())

        overlap = neighborhood_overlap(index, oracle_neighbor_table(train, mc.k, self.cfg.data.n_shapes))
        chance = mc.k / (len(train) - 1)
        logger.info(f"Index overlap with factor-space neighbors {overlap:.3f} (chance {chance:.3f})")
        metadata = {"source": mc.source, "k": mc.k, "n": len(index), "factor_overlap": overlap, "chance": chance}
        self.manager.register("build-index", stage_dir,
                              {"index": "index.json", "predictions": "predictions.npz"}, metadata)
        return metadata

    @monitor_performance("stage:prune")
    def stage_prune(self) -> Dict[str, Any]:
        stage_dir = self._begin("prune", ("gen-data", "pretrain", "build-index"))
        train = self._split("train")
        gen: GeneratorNet = self._net("pretrain", "generator")
        disc: DiscriminatorNet = self._net("pretrain", "discriminator")
        index = NeighborhoodIndex.load(self.manager.latest("build-index"))
        run = prune(gen, disc, index, train, self._index_predictions(train), self.cfg,
                    checkpoint_dir=stage_dir / "agents")

        save_agent(stage_dir / "agents" / "agent_G.pt", run.agent_G, self.cfg.seed, run.spec_G.checksum(), run.step)
        if run.agent_D is not None:
            save_agent(stage_dir / "agents" / "agent_D.pt", run.agent_D, self.cfg.seed, run.spec_D.checksum(),
                       run.step)
        run.spec_G.dump(stage_dir / "checkpoints" / "spec_G.json")
        run.spec_D.dump(stage_dir / "checkpoints" / "spec_D.json")
        history = run.history_frame()
        history.to_csv(stage_dir / "history.csv", index=False)

        metadata = {
            "variant": run.behavior.label,
            "behavior": asdict(run.behavior),
            "lambda1": self.cfg.pruning.lambda1,
            "p": self.cfg.pruning.p,
            "tau": run.tau,
            "steps": run.step,
            "stability": stability_summary(history),
        }
        self.manager.register("prune", stage_dir, {"agents": "agents", "history": "history.csv"}, metadata)
        return metadata

    @monitor_performance("stage:finalize")
    def stage_finalize(self) -> Dict[str, Any]:
        stage_dir = self._begin("finalize", ("pretrain", "prune"))
        prune_dir = self.manager.latest("prune")
        prune_meta = self.manager.latest_record("prune")["metadata"]
        gen: GeneratorNet = self._net("pretrain", "generator")
        disc: DiscriminatorNet = self._net("pretrain", "discriminator")
        agent_G, _ = load_agent(prune_dir / "agents" / "agent_G.pt", build_spec(gen))
        agent_D = None
        if (prune_dir / "agents" / "agent_D.pt").exists():
            agent_D, _ = load_agent(prune_dir / "agents" / "agent_D.pt", build_spec(disc))

        outcome = finalize(agent_G, agent_D, gen, disc, tau=prune_meta["tau"], p=self.cfg.pruning.p,
                           exchange_feedback=prune_meta["behavior"]["exchange_feedback"])
        save_checkpoint(stage_dir / "checkpoints" / "generator.pt", outcome.gen, "generator", self.cfg.seed,
                        prune_meta["steps"], extra={"bits": outcome.v_G.to_list()})
        save_checkpoint(stage_dir / "checkpoints" / "discriminator.pt", outcome.disc, "discriminator",
                        self.cfg.seed, prune_meta["steps"], extra={"bits": outcome.v_D.to_list()})
        report = {**outcome.report, "variant": prune_meta["variant"], "stability": prune_meta["stability"]}
        _dump_json(stage_dir / "report.json", report)

        generator = outcome.report["generator"]
        metadata = {
            "compression_ratio": generator["compression_ratio"],
            "within_budget": generator.get("within_budget"),
            "discriminator_compression_ratio": outcome.report["discriminator"]["compression_ratio"],
        }
        self.manager.register("finalize", stage_dir, {
            "generator": "checkpoints/generator.pt",
            "discriminator": "checkpoints/discriminator.pt",
            "report": "report.json",
        }, metadata)
        return metadata

    @monitor_performance("stage:finetune")
    def stage_finetune(self) -> Dict[str, Any]:
        stage_dir = self._begin("finetune", ("gen-data", "pretrain", "finalize"))
        teacher: GeneratorNet = self._net("pretrain", "generator")
        gen: GeneratorNet = self._net("finalize", "generator")
        disc: DiscriminatorNet = self._net("finalize", "discriminator")
        bits = _read_report(self.manager.latest("finalize"))["generator"]["bits"]
        v_G = ArchitectureVector(np.asarray(bits), ModelRole.GENERATOR)

        gen, disc, history = finetune(gen, disc, teacher, self._split("train"), self.cfg, v_G)
        history.to_csv(stage_dir / "history.csv", index=False)
        steps = len(history)
        save_checkpoint(stage_dir / "checkpoints" / "generator.pt", gen, "generator", self.cfg.seed, steps,
                        extra={"bits": bits})
        save_checkpoint(stage_dir / "checkpoints" / "discriminator.pt", disc, "discriminator", self.cfg.seed, steps)
        metadata = {"steps": steps, "use_kd": self.cfg.ablation.use_kd}
        self.manager.register("finetune", stage_dir, {
            "generator": "checkpoints/generator.pt",
            "discriminator": "checkpoints/discriminator.pt",
            "history": "history.csv",
        }, metadata)
        return metadata

    @monitor_performance("stage:eval")
    def stage_eval(self) -> Dict[str, Any]:
        stage_dir = self._begin("eval", ("gen-data", "pretrain", "train-encoder"))
        splits = self._datasets()
        split = self.cfg.evaluation.split
        if split not in splits:
            raise DataError(f"dataset has no {split} split", details={"split": split})
        batch_size = self.cfg.evaluation.batch_size
        encoder: EncoderNet = self._net("train-encoder", "encoder")
        original: GeneratorNet = self._net("pretrain", "generator")

        generators: Dict[str, GeneratorNet] = {"original": original}
        for stage, label in (("finalize", "pruned"), ("finetune", "finetuned")):
            if self.manager.has(stage):
                generators[label] = self._net(stage, "generator")
        metrics: Dict[str, Any] = {
            "split": split,
            "generators": {label: eval_generator(g, splits[split], encoder, batch_size)
                           for label, g in generators.items()},
        }

        compared = next((label for label in ("finetuned", "pruned") if label in generators), None)
        if compared is not None:
            metrics["compared"] = compared
            metrics.update(self._compare_manifolds(
                stage_dir, original, generators[compared], splits["train"], encoder
            ))
        _dump_json(stage_dir / "metrics.json", metrics)
        self.manager.register("eval", stage_dir, {"metrics": "metrics.json"}, {
            label: m["frechet"] for label, m in metrics["generators"].items()
        })
        return metrics

    def _compare_manifolds(
        self,
        stage_dir: Path,
        original: GeneratorNet,
        pruned: GeneratorNet,
        train: Dataset,
        encoder: EncoderNet,
    ) -> Dict[str, Any]:
        """Encoder neighborhoods of the original and pruned generators over the train split."""
        mc = self.cfg.manifold
        batch_size = self.cfg.evaluation.batch_size
        checksum = weights_digest(encoder)[:16]
        indices = {}
        predictions = {}
        for label, gen in (("original", original), ("pruned", pruned)):
            predictions[label] = predict_images(gen, train, batch_size)
            emb = embed_predictions(gen, train, encoder, batch_size, predictions[label])
            indices[label] = build_index(emb, mc.k, self.cfg.pruning.include_center, mc.similarity, checksum)
            indices[label].save(stage_dir / f"{label}_index")
        np.savez_compressed(
            stage_dir / "predictions.npz",
            ids=np.asarray(train.ids, dtype=np.int64),
            **{label: p.numpy() for label, p in predictions.items()},
        )
        overlap = neighborhood_overlap(indices["pruned"], indices["original"].as_id_lists())
        logger.info(f"Neighborhood overlap original vs pruned: {overlap:.3f}")
        return {"neighborhood_overlap": overlap, "chance": mc.k / (len(train) - 1)}

    @monitor_performance("stage:ablate")
    def stage_ablate(self) -> Dict[str, Any]:
        stage_dir = self._begin("ablate", ("gen-data", "pretrain", "train-encoder", "build-index"))
        splits = self._datasets()
        train, held_out = splits["train"], splits[self.cfg.evaluation.split]
        index = NeighborhoodIndex.load(self.manager.latest("build-index"))
        predictions = self._index_predictions(train)
        encoder: EncoderNet = self._net("train-encoder", "encoder")

        rows: List[Dict[str, Any]] = []
        for seed in self.cfg.ablation.seeds:
            for label, toggles in ABLATION_LADDER:
                row_cfg = self.cfg.with_updates(ablation=toggles, seed=seed)
                row_dir = stage_dir / _slug(label) / f"seed{seed}"
                row_dir.mkdir(parents=True)
                RunManager.snapshot_config(row_dir, row_cfg)
                logger.info(f"Ablation row {label!r}, seed {seed}")
                rows.append({
                    "variant": label,
                    "seed": seed,
                    **toggles,
                    **self._ablation_row(row_cfg, row_dir, index, train, held_out, predictions, encoder),
                })

        table = pd.DataFrame(rows)
        table.to_csv(stage_dir / "ablation.csv", index=False)
        summary = summarize_ablation(table)
        summary.to_csv(stage_dir / "ablation_summary.csv", index=False)
        (stage_dir / "ablation.md").write_text(
            ReportTemplates().render("ablation.md", rows=summary.to_dict("records"))
        )
        self.manager.register("ablate", stage_dir,
                              {"table": "ablation.csv", "summary": "ablation_summary.csv"},
                              {"rows": len(table), "seeds": list(self.cfg.ablation.seeds)})
        return {"rows": summary.to_dict("records")}

    def _ablation_row(
        self,
        cfg: RunConfig,
        row_dir: Path,
        index: NeighborhoodIndex,
        train: Dataset,
        held_out: Dataset,
        predictions: torch.Tensor,
        encoder: EncoderNet,
    ) -> Dict[str, Any]:
        """Prune, extract, finetune and evaluate one ladder row."""
        gen: GeneratorNet = self._net("pretrain", "generator")
        disc: DiscriminatorNet = self._net("pretrain", "discriminator")
        teacher: GeneratorNet = self._net("pretrain", "generator")
        run = prune(gen, disc, index, train, predictions, cfg, checkpoint_dir=row_dir / "agents")
        history = run.history_frame()
        history.to_csv(row_dir / "history.csv", index=False)

        outcome = finalize(run.agent_G, run.agent_D, gen, disc, tau=run.tau, p=cfg.pruning.p,
                           exchange_feedback=run.behavior.exchange_feedback)
        _dump_json(row_dir / "report.json", outcome.report)
        small, _, ft_history = finetune(outcome.gen, outcome.disc, teacher, train, cfg, outcome.v_G,
                                        use_kd=cfg.ablation.use_kd)
        ft_history.to_csv(row_dir / "finetune_history.csv", index=False)
        quality = eval_generator(small, held_out, encoder, cfg.evaluation.batch_size)
        stability = stability_summary(history)
        return {
            "macs": outcome.report["generator"]["macs"],
            "compression_ratio": outcome.report["generator"]["compression_ratio"],
            "within_budget": outcome.report["generator"]["within_budget"],
            "frechet": quality["frechet"],
            "l1": quality["l1"],
            "resource_tail_max": stability.get("resource_tail_max"),
        }

    @monitor_performance("stage:report")
    def stage_report(self) -> Dict[str, Any]:
        stage_dir = self._begin("report")
        manifest = emit_report(self.manager.run_dir, stage_dir)
        self.manager.register("report", stage_dir, {"manifest": "manifest.json"}, {"absent": manifest["absent"]})
        return manifest


def _read_report(finalize_dir: Path) -> Dict[str, Any]:
    path = finalize_dir / "report.json"
    if not path.exists():
        raise DataError(f"finalize report {path} is missing; rerun `finalize`", details={"path": str(path)})
    with open(path) as f:
        return json.load(f)
