import copy

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import smoke_raw
from manifold_gan_compression.analysis.evaluation import eval_generator
from manifold_gan_compression.config import build_config
from manifold_gan_compression.core import objectives, pruneloop
from manifold_gan_compression.core.agents import NaiveLogits, build_agent
from manifold_gan_compression.core.archspec import ArchitectureVector, build_spec, extract_subnetwork, macs_of
from manifold_gan_compression.core.manifold import build_index, oracle_embeddings, predict_images
from manifold_gan_compression.core.pruneloop import (
    ABLATION_LADDER,
    ablation_variant,
    check_budget,
    finalize,
    finetune,
    prune,
    pruning_batches,
    stability_summary,
)
from manifold_gan_compression.data.datagen import generate_splits
from manifold_gan_compression.models.checkpoint import weights_digest
from manifold_gan_compression.models.networks import build_generator
from manifold_gan_compression.models.training import pretrain_gan, train_encoder
from manifold_gan_compression.utils.exceptions import ConfigurationError, DataError

BASELINE = dict(ABLATION_LADDER)["Baseline"]


def _inputs(cfg, train, gen):
    index = build_index(oracle_embeddings(train), k=cfg.manifold.k)
    return index, predict_images(gen, train)


def _states_equal(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("name,toggles", ABLATION_LADDER)
def test_ablation_rows_resolve_to_their_labels(smoke_cfg, name, toggles):
    behavior = ablation_variant(smoke_cfg.with_updates(ablation=toggles))
    assert behavior.label == name
    assert behavior.naive == (not toggles["use_agents"])


def test_unlisted_toggles_are_custom(smoke_cfg):
    toggles = {**BASELINE, "prune_D": True, "manifold_real_set": True}
    assert ablation_variant(smoke_cfg.with_updates(ablation=toggles)).label == "Custom"


def test_unreachable_budget(gen):
    with pytest.raises(ConfigurationError):
        check_budget(build_spec(gen), 1e-9)
    check_budget(build_spec(gen), 1.0)


def test_pruning_batches_cover_the_epoch(smoke_cfg, train, gen):
    index, predictions = _inputs(smoke_cfg, train, gen)
    batches = pruning_batches(train, predictions, index, 5, torch.Generator().manual_seed(0))
    assert sorted(i for b in batches for i in b.ids) == train.ids
    assert batches[0].neighbors.shape == (5, 3, 3, 16, 16)
    assert batches[-1].x.shape[0] == len(train) % 5
    with pytest.raises(DataError):
        pruning_batches(train, predictions[:-1], index, 5, torch.Generator())


def test_zero_epochs_leave_empty_history(train, gen, disc):
    cfg = build_config(smoke_raw(pruning={"epochs": 0}))
    index, predictions = _inputs(cfg, train, gen)
    run = prune(gen, disc, index, train, predictions, cfg)
    assert run.step == 0
    assert run.history_frame().empty


def test_prune_keeps_networks_frozen(smoke_cfg, train, gen, disc):
    index, predictions = _inputs(smoke_cfg, train, gen)
    before = (weights_digest(gen), weights_digest(disc))
    run = prune(gen, disc, index, train, predictions, smoke_cfg)
    assert (weights_digest(gen), weights_digest(disc)) == before
    assert not any(p.requires_grad for p in gen.parameters())
    assert run.step == 6
    frame = run.history_frame()
    assert {"step", "loss_G", "loss_D", "resource", "sparsity", "macs_G", "epoch"} <= set(frame.columns)


def test_each_phase_updates_only_its_own_agent(smoke_cfg, train, gen, disc):
    index, predictions = _inputs(smoke_cfg, train, gen)
    seen = []
    previous = {}

    def hook(phase, step, run):
        g = copy.deepcopy(run.agent_G.state_dict())
        d = copy.deepcopy(run.agent_D.state_dict())
        if phase == "D" and previous:
            assert _states_equal(previous["G"], g)
        if phase == "G":
            assert _states_equal(previous["D"], d)
        previous.update(G=g, D=d)
        seen.append((phase, step))

    prune(gen, disc, index, train, predictions, smoke_cfg, on_phase=hook)
    assert seen == [(phase, s) for s in range(6) for phase in ("D", "G")]


def test_phases_share_the_step_objective(monkeypatch, smoke_cfg, train, gen, disc):
    calls = []

    def recording(batch, gen_, disc_, spec_G, v_G, v_D, **kw):
        out = objectives.pruning_step_losses(batch, gen_, disc_, spec_G, v_G, v_D, **kw)
        calls.append((v_G.requires_grad, v_D.requires_grad, out[0].requires_grad, out[1].requires_grad))
        return out

    monkeypatch.setattr(pruneloop, "pruning_step_losses", recording)
    index, predictions = _inputs(smoke_cfg, train, gen)
    run = prune(gen, disc, index, train, predictions, smoke_cfg)
    assert len(calls) == 2 * run.step
    assert calls[0] == (False, True, False, True)
    assert calls[1] == (True, False, True, False)

    calls.clear()
    prune(gen, disc, index, train, predictions, smoke_cfg.with_updates(ablation=BASELINE))
    assert len(calls) == run.step


def test_prune_is_deterministic(smoke_cfg, train, gen, disc):
    index, predictions = _inputs(smoke_cfg, train, gen)
    a = prune(gen, disc, index, train, predictions, smoke_cfg)
    b = prune(gen, disc, index, train, predictions, smoke_cfg)
    pd.testing.assert_frame_equal(a.history_frame(), b.history_frame())
    assert _states_equal(a.agent_G.state_dict(), b.agent_G.state_dict())


def test_baseline_prunes_only_the_generator(smoke_cfg, train, gen, disc):
    cfg = smoke_cfg.with_updates(ablation=BASELINE)
    index, predictions = _inputs(cfg, train, gen)
    run = prune(gen, disc, index, train, predictions, cfg)
    assert run.agent_D is None
    assert isinstance(run.agent_G, NaiveLogits)
    frame = run.history_frame()
    assert (frame["loss_D"] == 0.0).all()
    assert (frame["active_fraction_D"] == 1.0).all()


def test_finalize_keeping_everything(gen, disc):
    spec_G, spec_D = build_spec(gen), build_spec(disc)
    agent_G = build_agent(spec_G, naive=True, hidden_dim=8, logit_init=-10.0)
    agent_D = build_agent(spec_D, naive=True, hidden_dim=8, logit_init=-10.0)
    outcome = finalize(agent_G, agent_D, gen, disc, p=0.5)
    report = outcome.report["generator"]
    assert report["compression_ratio"] == 0.0
    assert report["macs"] == report["original_macs"]
    assert report["within_budget"] is False
    assert outcome.report["discriminator"]["active_fraction"] == 1.0


def test_finalize_report_matches_vectors(smoke_cfg, train, gen, disc):
    index, predictions = _inputs(smoke_cfg, train, gen)
    run = prune(gen, disc, index, train, predictions, smoke_cfg)
    outcome = finalize(run.agent_G, run.agent_D, gen, disc, run.tau, smoke_cfg.pruning.p)
    for role, spec, v in (("generator", run.spec_G, outcome.v_G), ("discriminator", run.spec_D, outcome.v_D)):
        assert outcome.report[role]["macs"] == pytest.approx(float(macs_of(spec, v)))
        assert outcome.report[role]["bits"] == v.to_list()
    small = build_spec(outcome.gen)
    assert small.fixed_macs + small.t_total == pytest.approx(outcome.report["generator"]["macs"])


def test_finalize_without_discriminator_agent(gen, disc):
    agent_G = build_agent(build_spec(gen), naive=True, hidden_dim=8)
    outcome = finalize(agent_G, None, gen, disc)
    assert outcome.v_D == ArchitectureVector.ones(build_spec(disc))


@pytest.mark.parametrize("use_kd", [False, True])
def test_finetune_history(smoke_cfg, train, gen, disc, use_kd):
    teacher = copy.deepcopy(gen)
    agent_G = build_agent(build_spec(gen), naive=True, hidden_dim=8, logit_init=-10.0)
    outcome = finalize(agent_G, None, gen, disc)
    student, _, history = finetune(outcome.gen, outcome.disc, teacher, train, smoke_cfg,
                                   v_G=outcome.v_G, use_kd=use_kd)
    assert len(history) == 6
    assert ("kd" in history.columns) == use_kd
    assert np.isfinite(history.drop(columns=["step", "epoch"]).to_numpy()).all()
    if use_kd:
        assert (history["kd"] >= 0.0).all()
    assert weights_digest(teacher) == weights_digest(gen)


@pytest.mark.parametrize("dropout_rate", [0.0, 0.5])
def test_unpruned_student_starts_at_zero_content_loss(train, disc, dropout_rate):
    cfg = build_config(smoke_raw(
        models={"dropout_rate": dropout_rate},
        finetune={"lambda_content": 1.0, "lambda_texture": 0.0},
    ))
    gen = build_generator(cfg.models, cfg.data.image_size, seed=0)
    teacher = copy.deepcopy(gen)
    agent_G = build_agent(build_spec(gen), naive=True, hidden_dim=8, logit_init=-10.0)
    outcome = finalize(agent_G, None, gen, disc)
    assert outcome.report["generator"]["compression_ratio"] == 0.0
    _, _, history = finetune(outcome.gen, outcome.disc, teacher, train, cfg, v_G=outcome.v_G, use_kd=True)
    assert history["kd"].iloc[0] == pytest.approx(0.0, abs=1e-6)


def test_stability_summary():
    history = pd.DataFrame({
        "loss_G": [5.0, 4.0, 3.0, 2.0, 1.0, 1.0],
        "loss_D": [1.0] * 6,
        "resource": [1.0, 0.5, 0.0, 0.0, 0.0, 0.0],
    })
    summary = stability_summary(history)
    assert summary["first_gap"] == pytest.approx(3.5)
    assert summary["final_gap"] == 0.0
    assert summary["gap_shrinks"] and summary["finite"] and summary["bounded"]
    assert summary["resource_converged"]
    assert stability_summary(history.assign(loss_D=50.0))["bounded"] is False
    assert stability_summary(history.iloc[:0]) == {"steps": 0}


@pytest.mark.slow
def test_resource_term_falls_under_pressure(train, gen, disc):
    cfg = build_config(smoke_raw(pruning={"epochs": 30, "lr": 1e-2, "lambda1": 5.0, "p": 0.5}))
    index, predictions = _inputs(cfg, train, gen)
    run = prune(gen, disc, index, train, predictions, cfg)
    frame = run.history_frame()
    summary = stability_summary(frame)
    assert summary["finite"]
    assert frame["resource"].tail(20).mean() < frame["resource"].iloc[0]
    outcome = finalize(run.agent_G, run.agent_D, gen, disc, run.tau, cfg.pruning.p)
    assert outcome.report["generator"]["compression_ratio"] > 0.0


@pytest.mark.slow
def test_finetuning_recovers_the_extracted_generator():
    cfg = build_config(smoke_raw(
        data={"train_count": 64, "test_count": 32},
        models={"base_width": 8},
        pretrain={"steps": 400, "log_every": 100},
        encoder={"steps": 200, "batch_size": 32, "log_every": 100},
        finetune={"epochs": 10, "log_every": 50},
    ))
    splits = generate_splits(cfg.data, seed=0)
    train, test = splits["train"], splits["test"]
    teacher, disc, _ = pretrain_gan(train, cfg)
    encoder, _ = train_encoder(train, cfg)
    spec = build_spec(teacher)
    bits = np.zeros(len(spec), dtype=np.int8)
    for sl in spec.layer_slices().values():
        bits[sl.start:sl.start + (sl.stop - sl.start) // 2] = 1
    v_G = ArchitectureVector(bits, spec.owner)
    student = extract_subnetwork(teacher, v_G)
    before = eval_generator(student, test, encoder)["frechet"]
    tuned, _, history = finetune(student, copy.deepcopy(disc), teacher, train, cfg, v_G=v_G, use_kd=True)
    assert len(history) == 10 * 16
    assert eval_generator(tuned, test, encoder)["frechet"] < before
