import json

import pandas as pd
import pytest

from manifold_gan_compression.config import build_config
from manifold_gan_compression.core.manifold import EmbeddingSet, build_index, neighborhood_overlap
from manifold_gan_compression.core.run_manager import RunManager
from manifold_gan_compression.data.datagen import generate_dataset, oracle_neighbor_table
from manifold_gan_compression.models.networks import encoder_embed, images_to_tensor
from manifold_gan_compression.models.training import train_encoder
from manifold_gan_compression.pipeline import StagePipeline

from conftest import smoke_raw


def _pipeline(run_dir, **sections) -> StagePipeline:
    return StagePipeline(RunManager(run_dir), build_config(smoke_raw(**sections)))


def test_unknown_stage(tmp_path):
    result = _pipeline(tmp_path).run("distill")
    assert not result.success
    assert result.error.error_type == "ConfigurationError"


def test_prerequisites_are_checked_in_order(tmp_path):
    result = _pipeline(tmp_path).run("finetune")
    assert not result.success
    assert result.error.details["prerequisite"] == "gen-data"
    assert not (tmp_path / "finetune").exists()


def test_oracle_index_stage(tmp_path):
    pipeline = _pipeline(tmp_path, manifold={"source": "oracle-factors"})
    for stage in ("gen-data", "pretrain"):
        assert pipeline.run(stage).success
    result = pipeline.run("build-index")
    assert result.success, result.error
    assert result.data["factor_overlap"] == 1.0
    assert pipeline.manager.latest_record("build-index")["metadata"]["source"] == "oracle-factors"


def test_prune_stage_records_history(tmp_path):
    pipeline = _pipeline(tmp_path, manifold={"source": "oracle-factors"})
    for stage in ("gen-data", "pretrain", "build-index", "prune"):
        result = pipeline.run(stage)
        assert result.success, result.error
    prune_dir = pipeline.manager.latest("prune")
    assert (prune_dir / "agents" / "agent_G.pt").exists()
    assert (prune_dir / "agents" / "agent_D.pt").exists()
    assert len(pd.read_csv(prune_dir / "history.csv")) == result.data["steps"] == 6

    result = pipeline.run("finalize")
    assert result.success, result.error
    assert 0.0 <= result.data["compression_ratio"] < 1.0


@pytest.mark.slow
def test_runs_are_reproducible(tmp_path):
    histories = []
    for name in ("a", "b"):
        pipeline = _pipeline(tmp_path / name, manifold={"source": "oracle-factors"})
        for stage in ("gen-data", "pretrain", "build-index", "prune"):
            assert pipeline.run(stage).success
        histories.append(pd.read_csv(pipeline.manager.latest("prune") / "history.csv"))
    pd.testing.assert_frame_equal(*histories)


@pytest.mark.slow
def test_encoder_neighborhoods_beat_chance():
    cfg = build_config(smoke_raw(
        data={"train_count": 200},
        models={"embedding_dim": 32, "encoder_width": 16},
        encoder={"steps": 400, "batch_size": 64, "log_every": 100},
    ))
    ds = generate_dataset(cfg.data, seed=0)
    encoder, _ = train_encoder(ds, cfg)
    vectors = encoder_embed(encoder, images_to_tensor(ds.targets())).numpy()
    k = 5
    index = build_index(EmbeddingSet(ds.ids, vectors), k)
    chance = k / (len(ds) - 1)
    assert neighborhood_overlap(index, oracle_neighbor_table(ds, k)) >= 5 * chance


def test_shared_dataset_with_other_config_is_rejected(tmp_path):
    cfg = build_config(smoke_raw())
    first = StagePipeline(RunManager(tmp_path / "a"), cfg, data_root=tmp_path / "datasets")
    assert first.run("gen-data").success
    (root,) = (tmp_path / "datasets").iterdir()
    meta = json.loads((root / "meta.json").read_text())
    meta["config"]["n_shapes"] = 1
    (root / "meta.json").write_text(json.dumps(meta))

    second = StagePipeline(RunManager(tmp_path / "b"), cfg, data_root=tmp_path / "datasets")
    result = second.run("gen-data")
    assert not result.success
    assert result.error.error_type == "DataError"
    assert result.error.details["root"] == str(root)
