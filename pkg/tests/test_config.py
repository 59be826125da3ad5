import pytest
import yaml

from manifold_gan_compression.config import (
    RunConfig,
    apply_overrides,
    build_config,
    load_config,
    resolve_key,
)
from manifold_gan_compression.utils.exceptions import ConfigurationError

from conftest import smoke_raw


def test_defaults_follow_agent_training_settings():
    cfg = build_config({"seed": 3})
    assert cfg.pruning.lambda1 == 3.0
    assert cfg.pruning.p == 0.5
    assert cfg.pruning.betas == (0.9, 0.999)
    assert cfg.pruning.lr == 1e-3
    assert cfg.pruning.weight_decay == 1e-4
    assert cfg.finetune.betas == (0.5, 0.999)
    assert cfg.models.embedding_dim == 64
    assert cfg.manifold.k == 5


def test_seed_is_mandatory():
    with pytest.raises(ConfigurationError, match="seed"):
        load_config(None, ())


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError):
        build_config({"seed": 0, "pruning": {"lamda1": 2.0}})


@pytest.mark.parametrize("size", [0, 30, -8])
def test_image_size_must_divide_by_four(size):
    with pytest.raises(ConfigurationError):
        build_config(smoke_raw(data={"image_size": size}))


def test_p_must_be_positive():
    with pytest.raises(ConfigurationError):
        build_config(smoke_raw(pruning={"p": 0.0}))


def test_feedback_without_agents_is_inconsistent():
    with pytest.raises(ConfigurationError):
        build_config(smoke_raw(ablation={"use_agents": False, "exchange_feedback": True}))


def test_resolve_key_bare_and_dotted():
    assert resolve_key("lambda1") == "pruning.lambda1"
    assert resolve_key("finetune.lr") == "finetune.lr"
    with pytest.raises(ConfigurationError, match="ambiguous"):
        resolve_key("lr")
    with pytest.raises(ConfigurationError, match="unknown"):
        resolve_key("nonsense")


def test_overrides_parse_yaml_scalars():
    raw = apply_overrides({"seed": 1}, ["lambda1=4.0", "pruning.include_center=false", "flavor=lsgan"])
    assert raw["pruning"] == {"lambda1": 4.0, "include_center": False}
    assert raw["flavor"] == "lsgan"


def test_override_without_equals_sign():
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["lambda1"])


def test_load_config_applies_overrides_over_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(smoke_raw(pruning={"lambda1": 2.0})))
    cfg = load_config(path, ["lambda1=4.0"], seed=9)
    assert cfg.pruning.lambda1 == 4.0
    assert cfg.seed == 9
    assert cfg.data.image_size == 16


def test_yaml_snapshot_round_trips(smoke_cfg):
    again = build_config(yaml.safe_load(smoke_cfg.to_yaml()))
    assert again == smoke_cfg


def test_with_updates_merges_sections(smoke_cfg):
    updated = smoke_cfg.with_updates(ablation={"use_kd": False}, seed=5)
    assert updated.seed == 5
    assert updated.ablation.use_kd is False
    assert updated.ablation.prune_D is True
    assert smoke_cfg.ablation.use_kd is True


def test_sections_are_frozen(smoke_cfg):
    with pytest.raises(Exception):
        smoke_cfg.pruning.lambda1 = 1.0
    assert isinstance(smoke_cfg, RunConfig)
