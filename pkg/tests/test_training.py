import math

import pandas as pd
import pytest
import torch
import torch.nn.functional as F

from conftest import smoke_raw
from manifold_gan_compression.config import DataConfig, build_config
from manifold_gan_compression.data.datagen import generate_dataset
from manifold_gan_compression.models.checkpoint import weights_digest
from manifold_gan_compression.models.networks import build_encoder, build_generator, encoder_embed, images_to_tensor
from manifold_gan_compression.models.training import (
    augment_views,
    check_embedding_collapse,
    constant_then_linear,
    evaluate_l1,
    gan_training_step,
    nt_xent,
    pretrain_gan,
    random_flip,
    sample_batch,
    train_encoder,
)
from manifold_gan_compression.utils.exceptions import DataError, EncoderCollapseError


def test_schedule_is_flat_then_linear():
    schedule = constant_then_linear(10)
    values = [schedule(s) for s in range(10)]
    assert values[:6] == [1.0] * 6
    assert values[9] == pytest.approx(0.2)
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert constant_then_linear(10, decay_half=False)(9) == 1.0


def test_sample_batch_without_replacement():
    idx = sample_batch(10, 6, torch.Generator().manual_seed(0))
    assert len(set(idx.tolist())) == 6
    assert sample_batch(2, 5, torch.Generator().manual_seed(0)).shape == (5,)


def test_flip_moves_source_and_target_together(src_batch):
    x, y = random_flip(src_batch, src_batch.clone(), torch.Generator().manual_seed(1))
    assert torch.equal(x, y)


def test_nt_xent_single_pair_is_zero():
    z1, z2 = torch.randn(1, 4), torch.randn(1, 4)
    assert float(nt_xent(z1, z2, 0.5)) == pytest.approx(0.0, abs=1e-6)


def test_nt_xent_prefers_aligned_views():
    z = torch.eye(4)[:2]
    aligned = float(nt_xent(z, z, 0.1))
    assert aligned == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 2)), rel=1e-4)
    assert aligned < float(nt_xent(z, z.flip(0), 0.1))


def test_augment_views_stay_in_range():
    images = torch.rand(5, 3, 16, 16)
    a = augment_views(images, torch.Generator().manual_seed(3))
    b = augment_views(images, torch.Generator().manual_seed(3))
    assert a.shape == images.shape
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_collapsed_encoder_is_detected():
    enc = build_encoder(build_config(smoke_raw()).models, seed=0)
    with torch.no_grad():
        for param in enc.parameters():
            param.zero_()
    with pytest.raises(EncoderCollapseError):
        check_embedding_collapse(enc, torch.rand(6, 3, 16, 16))


def test_training_step_reports_every_loss(smoke_cfg, gen, disc, src_batch):
    opt_G = torch.optim.Adam(gen.parameters(), lr=1e-4)
    opt_D = torch.optim.Adam(disc.parameters(), lr=1e-4)
    row = gan_training_step(gen, disc, opt_G, opt_D, src_batch, src_batch, "hinge", 100.0,
                            torch.Generator().manual_seed(0))
    assert {"loss_D", "loss_G", "g_term", "l1"} <= set(row)
    assert all(math.isfinite(v) for v in row.values())


def test_pretrain_history_and_lr(smoke_cfg, splits):
    gen, disc, history = pretrain_gan(splits["train"], smoke_cfg, splits["val"])
    assert list(history.columns) == ["step", "loss_D", "loss_G", "g_term", "l1", "lr"]
    assert history["step"].tolist() == [0, 1, 2, 3]
    assert history["lr"].tolist() == pytest.approx([2e-4, 2e-4, 2e-4, 1e-4])


def test_pretrain_is_deterministic(smoke_cfg, splits):
    g1, d1, h1 = pretrain_gan(splits["train"], smoke_cfg)
    g2, d2, h2 = pretrain_gan(splits["train"], smoke_cfg)
    pd.testing.assert_frame_equal(h1, h2)
    assert weights_digest(g1) == weights_digest(g2)
    assert weights_digest(d1) == weights_digest(d2)


def test_pretrain_on_empty_split(smoke_cfg):
    empty = generate_dataset(DataConfig(train_count=0, image_size=16), seed=0)
    with pytest.raises(DataError):
        pretrain_gan(empty, smoke_cfg)
    with pytest.raises(DataError):
        evaluate_l1(build_generator(smoke_cfg.models, 16, 0), empty)


def test_encoder_training(smoke_cfg, train):
    enc, history = train_encoder(train, smoke_cfg)
    assert list(history.columns) == ["step", "loss"]
    assert len(history) == 4
    assert history["loss"].map(math.isfinite).all()
    assert check_embedding_collapse(enc, images_to_tensor(train.targets())) > 0.0


def test_encoder_needs_two_images(smoke_cfg):
    single = generate_dataset(DataConfig(train_count=1, image_size=16), seed=0)
    with pytest.raises(DataError):
        train_encoder(single, smoke_cfg)


@pytest.mark.slow
def test_generator_overfits_a_single_pair():
    cfg = build_config(smoke_raw(
        data={"train_count": 1},
        models={"dropout_rate": 0.0, "base_width": 8},
        pretrain={"steps": 200, "batch_size": 1, "lr": 1e-3, "log_every": 50},
    ))
    ds = generate_dataset(cfg.data, seed=0)
    assert evaluate_l1(build_generator(cfg.models, 16, cfg.seed), ds) > 0.05
    gen, _, _ = pretrain_gan(ds, cfg)
    assert evaluate_l1(gen, ds) < 0.05


@pytest.mark.slow
def test_views_of_one_image_embed_closer_than_other_images():
    cfg = build_config(smoke_raw(
        data={"train_count": 64},
        encoder={"steps": 300, "batch_size": 32, "log_every": 100},
    ))
    ds = generate_dataset(cfg.data, seed=0)
    encoder, _ = train_encoder(ds, cfg)
    images = images_to_tensor(ds.targets())
    views = torch.Generator().manual_seed(7)
    a = F.normalize(encoder_embed(encoder, augment_views(images, views)), dim=1)
    b = F.normalize(encoder_embed(encoder, augment_views(images, views)), dim=1)
    sims = a @ b.T
    n = len(ds)
    same = sims.diagonal().mean()
    other = (sims.sum() - sims.diagonal().sum()) / (n * (n - 1))
    assert same > other
