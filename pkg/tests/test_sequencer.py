import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtmoe import autodiff as ad
from rtmoe.model import ModelConfig, RTModel
from rtmoe.routing import RoutingParams, init_routing_weights, routing_forward
from rtmoe.sequencer import build_sequence, build_sequences, sample_noise, sequence_prefixes


def zero_grid(L=2, N=2):
    return RoutingParams(ad.tensor(np.zeros((L - 1, N, N + 1, N))), L, N)


def random_batch(rng, B, L, N, tau=25.0, **kw):
    p = init_routing_weights(L, N, rng)
    f0 = ad.tensor(rng.dirichlet(np.ones(N), size=B))
    noise = ad.gumbel_noise(rng, (B, L * N + 1, L * N + 1))
    return p, f0, build_sequences(f0, p, tau, noise, **kw)


def test_first_pick_is_the_only_positive_candidate(rng):
    p = init_routing_weights(3, 4, rng)
    for _ in range(200):
        seq = build_sequence(ad.tensor([1.0, 0, 0, 0]), p, 25.0, rng)
        assert seq.nodes[0] == 0


def test_second_pick_uniform_on_zero_grid():
    B = 30_000
    keys = [(99, i) for i in range(B)]
    with ad.no_grad():
        f0 = ad.tensor(np.tile([1.0, 0.0], (B, 1)))
        batch = build_sequences(f0, zero_grid(), 25.0, sample_noise(keys, 5, 5))
    assert (batch.chosen[:, 0] == 0).all()
    np.testing.assert_allclose(batch.probs[0, 1], [0, 0, 1 / 3, 1 / 3, 1 / 3], rtol=1e-6)
    freq = np.bincount(batch.chosen[:, 1], minlength=5) / B
    for node in (2, 3, 4):
        assert abs(freq[node] - 1 / 3) < 0.01
    assert freq[1] == 0


def test_candidate_rates_sum_to_one(rng):
    p, f0, batch = random_batch(rng, 64, 4, 8)
    for b in range(len(batch)):
        for t in range(batch.lengths[b]):
            assert abs(batch.probs[b, t].sum() - 1) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 5), st.floats(0.5, 50), st.integers(0, 2**31))
def test_terminates_and_masks_grow_by_one(L, N, tau, seed):
    rng = np.random.default_rng(seed)
    p = init_routing_weights(L, N, rng)
    seq = build_sequence(ad.tensor(rng.dirichlet(np.ones(N))), p, tau, rng)
    M = L * N
    assert 2 <= seq.T <= M + 1
    assert seq.nodes[-1] == M
    assert seq.nodes.count(M) == 1
    for t, step in enumerate(seq.steps):
        assert step.mask.sum() == t + 1
        assert step.probs[step.node] > 0
    assert 1 <= len(seq.final_mask) <= M
    np.testing.assert_array_equal(seq.final_mask.experts, seq.steps[-2].mask[:M])


def test_dominant_stop_rule(rng):
    p, f0, batch = random_batch(rng, 128, 4, 8, stop_rule="dominant")
    M = 32
    assert (batch.lengths >= 2).all()
    for b in range(len(batch)):
        last = batch.lengths[b] - 1
        assert batch.chosen[b, last] == M
        # the output rate never dominated before the stop, otherwise it would have been taken
        for t in range(last):
            assert batch.probs[b, t, M] <= batch.probs[b, t, :M].max()


def test_output_never_drawn_first():
    # at t=1 the output node has zero rate, so even huge noise cannot select it
    noise = np.zeros((1, 5, 5))
    noise[0, 0, 4] = 1e30
    batch = build_sequences(ad.tensor([[0.3, 0.7]]), zero_grid(2, 2), 25.0, noise)
    assert batch.chosen[0, 0] in (0, 1)
    assert batch.n_active[0] >= 1


def test_reproducible_under_seed():
    p = init_routing_weights(4, 8, np.random.default_rng(0))
    f0 = ad.tensor(np.random.default_rng(1).dirichlet(np.ones(8)))
    a = build_sequence(f0, p, 25.0, np.random.default_rng(42))
    b = build_sequence(f0, p, 25.0, np.random.default_rng(42))
    assert a.nodes == b.nodes
    for x, y in zip(a.steps, b.steps):
        np.testing.assert_array_equal(x.probs, y.probs)


def test_noise_keys_make_samples_batch_independent(rng):
    p = init_routing_weights(3, 4, rng)
    f0 = rng.dirichlet(np.ones(4), size=6)
    keys = [(7, 0, i) for i in range(6)]
    full = build_sequences(ad.tensor(f0), p, 25.0, sample_noise(keys, 13, 13))
    part = build_sequences(ad.tensor(f0[3:]), p, 25.0, sample_noise(keys[3:], 13, 13))
    np.testing.assert_array_equal(full.chosen[3:], part.chosen)


def test_final_nodes_reachable_through_active_nodes(rng):
    L, N = 4, 4
    p, f0, batch = random_batch(rng, 64, L, N)
    for b in range(len(batch)):
        mask = batch.final_mask.data[b]
        rates = routing_forward(ad.tensor(f0.data[b]), mask, p).rates.data
        active = np.flatnonzero(mask)
        for node in active:
            if node >= N:
                assert rates[node] > 0


def test_prefixes():
    rng = np.random.default_rng(3)
    p = init_routing_weights(4, 8, rng)
    for _ in range(50):
        seq = build_sequence(ad.tensor(rng.dirichlet(np.ones(8))), p, 25.0, rng)
        pre = sequence_prefixes(seq)
        assert len(pre) == seq.T - 1
        assert [len(m) for m in pre] == list(range(1, seq.T))
        np.testing.assert_array_equal(pre[-1].experts, seq.final_mask.experts)
        if seq.T == 2:
            assert len(pre) == 1 and len(pre[0]) == 1


def test_bad_arguments(rng):
    p = init_routing_weights(2, 2, rng)
    f0 = ad.tensor([[0.5, 0.5]])
    with pytest.raises(ValueError):
        build_sequences(f0, p, 0.0, np.zeros((1, 5, 5)))
    with pytest.raises(ValueError):
        build_sequences(f0, p, 1.0, np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        build_sequences(f0, p, 1.0, np.zeros((1, 5, 5)), stop_rule="sometimes")


def test_gradient_reaches_participating_routing_matrices():
    cfg = ModelConfig(input_shape=(1, 6, 6), width=8, expert_hidden=(8, 8))
    model = RTModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    B = 32
    x = ad.tensor(rng.random((B, 1, 6, 6)))
    y = rng.integers(0, 10, B)
    with ad.Tape() as tape:
        res = model.forward_batch(x, model.noise_for([(0, i) for i in range(B)]))
        loss = ad.cross_entropy_logits(res.logits, y)
    g, = tape.grad(loss, [model.params["routing"]])
    L, N = cfg.n_layers, cfg.n_experts
    # a matrix participates once its node is active in some step before the stop
    participated = res.usage.any(axis=0).reshape(L, N)[:-1]
    nonzero = np.abs(g).reshape(L - 1, N, -1).max(axis=2) > 0
    assert participated.sum() > 0
    assert nonzero[participated].mean() >= 0.9
