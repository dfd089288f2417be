import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeq import autodiff as ad
from moeq.autodiff import Tensor
from moeq.moe import (ExpertFFN, GateParams, MoELayer, active_total, dense_mixture, expert_load_stats,
                      gate_forward, importance_penalty, moe_forward, noisy_logits)


def fixed_gate(logits_row, k, d=None):
    """Gate whose clean logits for the token x = e_0 equal ``logits_row``."""
    n = len(logits_row)
    d = d or 2
    W = np.zeros((d, n))
    W[0] = logits_row
    return GateParams(Tensor(W, requires_grad=True), Tensor(np.zeros((d, n)), requires_grad=True), k)


def e0(d=2):
    x = np.zeros((1, d))
    x[0, 0] = 1.0
    return x


def experts(rng, n, d=4, dff=6):
    return [ExpertFFN.init(rng, d, dff) for _ in range(n)]


# ---------------------------------------------------------------- noisy logits


def test_noise_off_returns_clean_logits():
    rng = np.random.default_rng(0)
    gate = GateParams.init(rng, 4, 8, 2)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(noisy_logits(x, gate, rng).data, x @ gate.W_g.data)


def test_zero_noise_weights_give_log2_noise_scale():
    gate = fixed_gate([0.0, 0.0, 0.0], 1)
    gate.train_mode = True
    h = noisy_logits(e0(), gate, np.random.default_rng(3)).data
    nu = np.random.default_rng(3).standard_normal((1, 3))
    np.testing.assert_allclose(h, nu * np.log(2.0), rtol=1e-15)


def test_zero_token_gives_zero_logits():
    gate = GateParams.init(np.random.default_rng(1), 3, 4, 2)
    np.testing.assert_array_equal(noisy_logits(np.zeros(3), gate).data, np.zeros((1, 4)))


def test_non_finite_token_rejected():
    gate = GateParams.init(np.random.default_rng(1), 3, 4, 2)
    with pytest.raises(ValueError, match="non-finite"):
        noisy_logits(np.array([0.0, np.nan, 1.0]), gate)


def test_k_outside_range_is_a_configuration_error():
    with pytest.raises(ValueError):
        GateParams(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), 4)
    with pytest.raises(ValueError):
        GateParams(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), 0)


# ---------------------------------------------------------------- gate_forward


def test_uniform_logits_with_k_equal_n():
    d = gate_forward(e0(), fixed_gate([1.0, 1.0, 1.0, 1.0], 4))
    np.testing.assert_allclose(d.dense_weights(), [[0.25] * 4], atol=1e-15)


def test_top2_of_three():
    d = gate_forward(e0(), fixed_gate([2.0, 1.0, 0.5], 2))
    assert sorted(d.indices[0]) == [0, 1]
    # oracle: softmax over {2, 1}
    p0 = np.exp(2.0) / (np.exp(2.0) + np.exp(1.0))
    np.testing.assert_allclose(d.dense_weights()[0], [p0, 1 - p0, 0.0], atol=1e-12)
    assert d.dense_weights()[0, 2] == 0.0
    assert p0 == pytest.approx(0.7311, abs=5e-5)


def test_top1_singleton_weight_is_one():
    d = gate_forward(e0(), fixed_gate([0.3, 0.9], 1))
    assert d.indices[0].tolist() == [1]
    assert d.weights[0, 0] == 1.0


def test_ties_break_toward_lower_index():
    d = gate_forward(e0(), fixed_gate([0.5, 0.7, 0.7, 0.7], 2))
    assert d.indices[0].tolist() == [1, 2]


def test_gradient_reaches_kept_logits_only():
    gate = fixed_gate([2.0, 1.0, 0.5], 2)
    x = Tensor(e0())
    with ad.Tape() as tape:
        d = gate_forward(x, gate)
        loss = ad.sum(ad.mul(d.probs, Tensor([[1.0, 3.0, 5.0]])))
    g = ad.backprop(tape, loss, [gate.W_g])[gate.W_g.id]
    assert g[0, 2] == 0.0
    assert abs(g[0, 0]) > 0 and abs(g[0, 1]) > 0


def test_noise_changes_routing_of_borderline_token():
    gate = fixed_gate([1.0, 1.0 + 1e-6, -5.0, -5.0], 1)
    quiet = gate_forward(e0(), gate)
    gate.train_mode = True
    flips = {int(gate_forward(e0(), gate, np.random.default_rng(s)).indices[0, 0]) for s in range(20)}
    assert quiet.indices[0, 0] == 1
    assert flips == {0, 1}


# ---------------------------------------------------------------- moe_forward


def test_identical_experts_give_single_expert_output():
    rng = np.random.default_rng(0)
    base = ExpertFFN.init(rng, 4, 6)
    clones = [ExpertFFN(*(Tensor(p.data.copy()) for p in base.params().values())) for _ in range(4)]
    gate = GateParams.init(rng, 4, 4, 2)
    x = rng.normal(size=(7, 4))
    y = moe_forward(x, clones, gate_forward(x, gate)).data
    np.testing.assert_allclose(y, base(Tensor(x)).data, atol=1e-12)


def test_k_equal_n_matches_dense_mixture():
    rng = np.random.default_rng(1)
    ex = experts(rng, 5)
    gate = GateParams.init(rng, 4, 5, 5)
    x = rng.normal(size=(30, 4))
    y = moe_forward(x, ex, gate_forward(x, gate)).data
    np.testing.assert_allclose(y, dense_mixture(x, ex, gate), atol=1e-12)


def test_zero_expert_scales_other_output():
    rng = np.random.default_rng(2)
    live = ExpertFFN.init(rng, 2, 3)
    dead = ExpertFFN(*(Tensor(np.zeros_like(p.data)) for p in live.params().values()))
    gate = fixed_gate([0.2, 1.1], 2)
    x = e0()
    d = gate_forward(x, gate)
    w_dead = d.dense_weights()[0, 1]
    y = moe_forward(x, [live, dead], d).data
    np.testing.assert_allclose(y, (1 - w_dead) * live(Tensor(x)).data, atol=1e-15)


def test_expert_count_mismatch():
    rng = np.random.default_rng(0)
    gate = GateParams.init(rng, 4, 3, 2)
    x = rng.normal(size=(2, 4))
    with pytest.raises(ValueError, match="experts"):
        moe_forward(x, experts(rng, 4), gate_forward(x, gate))


def test_unselected_experts_are_not_run():
    rng = np.random.default_rng(0)
    ex = experts(rng, 3, d=2)
    calls = []
    for i, e in enumerate(ex):
        orig = e.__call__
        ex[i] = type("Spy", (), {"__call__": lambda self, t, i=i, f=orig: (calls.append(i), f(t))[1]})()
    moe_forward(e0(), ex, gate_forward(e0(), fixed_gate([3.0, -1.0, 2.0], 2)))
    assert sorted(calls) == [0, 2]


# ---------------------------------------------------------------- load stats and accounting


def test_load_stats_single_token():
    d = gate_forward(e0(), fixed_gate([np.log(0.7), np.log(0.3), -50.0, -50.0], 2))
    frac, mass = expert_load_stats([d])
    np.testing.assert_array_equal(frac, [1, 1, 0, 0])
    np.testing.assert_allclose(mass, [0.7, 0.3, 0, 0], atol=1e-12)


def test_load_fractions_at_init_are_bounded():
    rng = np.random.default_rng(4)
    n, k = 8, 2
    gate = GateParams.init(rng, 16, n, k)
    frac, mass = expert_load_stats(gate_forward(rng.normal(size=(10_000, 16)), gate))
    assert frac.sum() == pytest.approx(k)
    assert mass.sum() == pytest.approx(10_000)
    assert np.all(frac >= 1 / (4 * n)) and np.all(frac <= 4 * k / n)


def test_active_total_arithmetic():
    assert active_total(10, 2, 8, 2) == (26, 14)
    total, active = active_total(0, 100, 8, 2)
    assert active / total == 0.25


def test_importance_penalty_zero_when_balanced():
    d = gate_forward(np.eye(2), fixed_gate([0.0, 0.0], 2))
    assert importance_penalty(d).item() == pytest.approx(0.0, abs=1e-20)


# ---------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), data=st.data(), seed=st.integers(0, 2**31 - 1), noisy=st.booleans())
def test_gate_weight_invariants(n, data, seed, noisy):
    k = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    gate = GateParams.init(rng, 5, n, k)
    gate.W_noise.data[...] = rng.normal(size=gate.W_noise.shape)
    gate.train_mode = noisy
    d = gate_forward(rng.normal(size=(20, 5)) * 3, gate, rng)
    w = d.dense_weights()
    assert np.all((w > 0).sum(axis=1) == k)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert all(len(set(row)) == k for row in d.indices.tolist())
    outside = np.ones_like(w, dtype=bool)
    np.put_along_axis(outside, d.indices, False, axis=1)
    assert np.all(w[outside] == 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 4))
def test_permuting_experts_is_equivariant(seed, k):
    rng = np.random.default_rng(seed)
    n = 4
    ex = experts(rng, n)
    gate = GateParams.init(rng, 4, n, k)
    x = rng.normal(size=(9, 4))
    perm = rng.permutation(n)
    pgate = GateParams(Tensor(gate.W_g.data[:, perm]), Tensor(gate.W_noise.data[:, perm]), k)
    d, pd = gate_forward(x, gate), gate_forward(x, pgate)
    y = moe_forward(x, ex, d).data
    py = moe_forward(x, [ex[i] for i in perm], pd).data
    np.testing.assert_allclose(py, y, atol=1e-9)
    np.testing.assert_allclose(expert_load_stats(pd)[0], expert_load_stats(d)[0][perm])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_layer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = MoELayer(rng, 3, 4, n=4, k=2)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(5, 3)))
    params = [x, *layer.params().values()]
    fn = lambda: ad.sum(ad.mul(layer(x), proj))  # noqa: E731
    assert ad.finite_diff_check(fn, params, 1e-5) < 1e-4


def test_noise_gradient_flows_to_noise_weights():
    rng = np.random.default_rng(5)
    layer = MoELayer(rng, 3, 4, n=4, k=4)
    layer.gate.train_mode = True
    x = Tensor(rng.normal(size=(6, 3)))
    proj = Tensor(rng.normal(size=(6, 3)))
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(layer(x, np.random.default_rng(0)), proj))
    g = ad.backprop(tape, loss, [layer.gate.W_noise])[layer.gate.W_noise.id]
    assert np.abs(g).max() > 0
    # fixed noise draw: the reparameterised gradient is exact
    fn = lambda: ad.sum(ad.mul(layer(x, np.random.default_rng(0)), proj))  # noqa: E731
    assert ad.finite_diff_check(fn, [layer.gate.W_noise], 1e-5) < 1e-4


def test_noise_off_passes_are_bit_identical_and_seeded_noise_reproducible():
    rng = np.random.default_rng(6)
    layer = MoELayer(rng, 3, 4)
    x = rng.normal(size=(6, 3))
    assert layer(Tensor(x)).data.tobytes() == layer(Tensor(x)).data.tobytes()
    layer.gate.train_mode = True
    a = layer(Tensor(x), np.random.default_rng(9)).data
    b = layer(Tensor(x), np.random.default_rng(9)).data
    assert a.tobytes() == b.tobytes()
