import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from manifold_gan_compression.core.agents import (
    GumbelDraw,
    NaiveLogits,
    PruningAgent,
    build_agent,
    gumbel_sigmoid_ste,
    hard_decision,
    load_agent,
    map_architecture,
    output_order,
    save_agent,
    temperature_at,
    to_spec_order,
    unmap_architecture,
)
from manifold_gan_compression.core.archspec import build_spec
from manifold_gan_compression.models.networks import DiscriminatorNet, GeneratorNet
from manifold_gan_compression.utils.exceptions import ContractViolation, MissingArtifactError

HIDDEN = 32


@pytest.fixture(scope="module")
def spec():
    return build_spec(GeneratorNet("unet", base_width=4, depth=2, image_size=16))


@pytest.fixture
def agent(spec):
    return PruningAgent(spec.layout, spec.owner, input_dim=16, hidden_dim=HIDDEN, seed=0)


def _soft(o: float, g: float = 0.0, tau: float = 1.0):
    v, v_soft = gumbel_sigmoid_ste(torch.tensor([o]), GumbelDraw(torch.tensor([g]), tau))
    return float(v), float(v_soft)


def test_negative_logit_keeps_channel():
    v, v_soft = _soft(-2.0)
    assert v_soft == pytest.approx(0.8808, abs=1e-4)
    assert v == 1.0


def test_positive_logit_prunes_channel():
    v, v_soft = _soft(2.0)
    assert v_soft == pytest.approx(0.1192, abs=1e-4)
    assert v == 0.0


def test_tie_keeps_channel():
    assert _soft(0.7, -0.7) == (1.0, 0.5)


def test_non_positive_temperature():
    with pytest.raises(ContractViolation):
        GumbelDraw.zeros(3, tau=0.0)


@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
def test_straight_through_gradient_matches_finite_difference(tau):
    gen = torch.Generator().manual_seed(int(tau * 10))
    o = torch.randn(1000, generator=gen, dtype=torch.float64) * 2
    draw = GumbelDraw(GumbelDraw.sample(1000, gen, tau).g.double(), tau)
    o_var = o.clone().requires_grad_(True)
    v, _ = gumbel_sigmoid_ste(o_var, draw)
    v.sum().backward()
    eps = 1e-6
    # elementwise map, so one shifted pass covers every pair
    slope = (gumbel_sigmoid_ste(o + eps, draw)[1] - gumbel_sigmoid_ste(o - eps, draw)[1]) / (2 * eps)
    torch.testing.assert_close(o_var.grad, slope, rtol=1e-4, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(-5, 5), min_size=2, max_size=8),
    j=st.integers(0, 1),
    drop=st.floats(0.0, 5.0),
)
def test_lowering_a_logit_never_prunes(logits, j, drop):
    o = torch.tensor(logits, dtype=torch.float64)
    before, _ = gumbel_sigmoid_ste(o, GumbelDraw(torch.zeros_like(o)))
    lowered = o.clone()
    lowered[j] -= drop
    after, _ = gumbel_sigmoid_ste(lowered, GumbelDraw(torch.zeros_like(o)))
    if before[j] == 1.0:
        assert after[j] == 1.0


def test_low_temperature_approaches_step():
    o = torch.tensor([-2.0, -0.5, -0.11, 0.11, 0.5, 3.0])
    _, v_soft = gumbel_sigmoid_ste(o, GumbelDraw.zeros(6, tau=1e-3))
    assert torch.equal(v_soft.round(), (o < 0).float())


def test_shape_mismatch_between_logits_and_noise():
    with pytest.raises(ContractViolation):
        gumbel_sigmoid_ste(torch.zeros(3), GumbelDraw.zeros(4))


def test_temperature_schedule():
    assert temperature_at(5, 10, 1.0) == 1.0
    assert temperature_at(0, 11, 1.0, 0.5) == 1.0
    assert temperature_at(10, 11, 1.0, 0.5) == pytest.approx(0.5)
    assert temperature_at(5, 11, 1.0, 0.5) == pytest.approx(0.75)


def test_agent_output_shapes(agent, spec):
    o, h = agent(torch.zeros(HIDDEN))
    assert o.shape == (len(spec),)
    assert h.shape == (HIDDEN,)
    assert agent.n_outputs == len(spec)


def test_agent_forward_is_deterministic(agent):
    peer = torch.randn(HIDDEN, generator=torch.Generator().manual_seed(1))
    o1, h1 = agent(peer)
    o2, h2 = agent(peer)
    assert torch.equal(o1, o2) and torch.equal(h1, h2)


def test_agent_rejects_wrong_peer_size(agent):
    with pytest.raises(ContractViolation):
        agent(torch.zeros(HIDDEN + 1))


def test_constant_peer_receives_no_gradient(agent):
    peer = torch.randn(HIDDEN, requires_grad=True)
    o, _ = agent(peer, treat_peer_constant=True)
    o.sum().backward()
    assert peer.grad is None or torch.count_nonzero(peer.grad) == 0


def test_peer_gradient_flows_when_not_constant(agent):
    peer = torch.randn(HIDDEN, requires_grad=True)
    o, _ = agent(peer, treat_peer_constant=False)
    o.sum().backward()
    assert peer.grad is not None
    assert torch.count_nonzero(peer.grad) > 0


def test_agent_initialization_is_seeded(spec):
    a = PruningAgent(spec.layout, spec.owner, 16, HIDDEN, seed=3)
    b = PruningAgent(spec.layout, spec.owner, 16, HIDDEN, seed=3)
    for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y)
    assert torch.equal(a.input_codes, b.input_codes)


def test_initial_bias_keeps_most_channels(agent, spec):
    v = hard_decision(agent, torch.zeros(HIDDEN), spec)
    assert v.active_fraction() == 1.0


def test_hard_decision_strongly_negative_logits_keep_everything(spec):
    naive = NaiveLogits(spec.layout, spec.owner, hidden_dim=HIDDEN, logit_init=-10.0)
    assert hard_decision(naive, torch.zeros(HIDDEN), spec).active_fraction() == 1.0


def test_hard_decision_guard_keeps_one_per_layer(spec):
    naive = NaiveLogits(spec.layout, spec.owner, hidden_dim=HIDDEN, logit_init=10.0)
    v = hard_decision(naive, torch.zeros(HIDDEN), spec)
    assert all(count == 1 for count in v.layer_counts(spec).values())


def test_hard_decision_is_repeatable(agent, spec):
    peer = torch.randn(HIDDEN, generator=torch.Generator().manual_seed(2))
    assert hard_decision(agent, peer, spec) == hard_decision(agent, peer, spec)


def test_map_architecture_identity_and_permutation(spec):
    bits = np.random.default_rng(0).integers(0, 2, len(spec))
    assert map_architecture(bits, spec).to_list() == bits.tolist()

    reversed_layers = list(reversed(spec.layout))
    order = output_order(reversed_layers, spec)
    agent_bits = np.concatenate([bits[spec.layer_slices()[name]] for name, _ in reversed_layers])
    mapped = map_architecture(agent_bits, spec, order)
    assert mapped.to_list() == bits.tolist()
    np.testing.assert_array_equal(unmap_architecture(mapped, order), agent_bits)


def test_to_spec_order_agrees_with_map(spec):
    order = output_order(list(reversed(spec.layout)), spec)
    v = torch.arange(len(spec), dtype=torch.float32)
    reordered = to_spec_order(v, order)
    assert reordered[order[0]] == 0.0
    assert sorted(reordered.tolist()) == v.tolist()


def test_map_architecture_length_mismatch(spec):
    with pytest.raises(ContractViolation):
        map_architecture(np.ones(len(spec) - 1), spec)


def test_output_order_rejects_foreign_layers(spec):
    with pytest.raises(ContractViolation):
        output_order([("conv1", 8)], spec)


def test_remember_stores_embedding(agent):
    h = torch.randn(HIDDEN)
    agent.remember(h)
    assert torch.equal(agent.last_embedding, h)


def test_save_and_load_round_trip(tmp_path, agent, spec):
    agent.remember(torch.ones(HIDDEN))
    path = save_agent(tmp_path / "agent_G.pt", agent, seed=0, spec_checksum=spec.checksum(), step=4)
    restored, meta = load_agent(path, spec)
    assert meta["step"] == 4
    assert torch.equal(restored.last_embedding, torch.ones(HIDDEN))
    peer = torch.randn(HIDDEN, generator=torch.Generator().manual_seed(0))
    assert torch.equal(restored(peer)[0], agent(peer)[0])


def test_load_checks_architecture(tmp_path, agent):
    path = save_agent(tmp_path / "agent.pt", agent, seed=0, spec_checksum="feedface", step=0)
    with pytest.raises(ContractViolation):
        load_agent(path, build_spec(GeneratorNet("unet", base_width=4, depth=2, image_size=16)))


def test_missing_agent_names_prune(tmp_path):
    with pytest.raises(MissingArtifactError) as info:
        load_agent(tmp_path / "agent_G.pt")
    assert info.value.prerequisite == "prune"


def test_build_agent_variants():
    spec_D = build_spec(DiscriminatorNet(depth=2, base_width=4, image_size=16))
    assert isinstance(build_agent(spec_D, naive=True, hidden_dim=HIDDEN), NaiveLogits)
    agent = build_agent(spec_D, input_dim=8, hidden_dim=HIDDEN)
    assert isinstance(agent, PruningAgent)
    assert agent.n_outputs == len(spec_D)
