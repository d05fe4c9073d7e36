import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rtmoe import autodiff as ad
from rtmoe.autodiff import DimensionError, NoCandidateError, NumericError

from conftest import gradcheck


def test_matmul_examples():
    out = ad.matmul(ad.tensor([[1, 0], [0, 1]]), ad.tensor([[2], [3]]))
    np.testing.assert_array_equal(out.data, [[2], [3]])
    assert ad.matmul(ad.tensor([[1, 2]]), ad.tensor([[3], [4]])).data.item() == 11


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.zeros((2, 3)), ad.zeros((2, 3)))


def test_matmul_gradcheck(f64, rng):
    err = gradcheck(lambda a, b: ad.sum(ad.matmul(a, b)), [rng.normal(size=(4, 3)), rng.normal(size=(3, 2))])
    assert err < 1e-5


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    assert ad.softmax(ad.tensor([5.0])).data.item() == 1.0


def test_softmax_gradcheck(f64, rng):
    w = rng.normal(size=8)
    err = gradcheck(lambda z: ad.sum(ad.mul(ad.softmax(z), ad.tensor(w))), [rng.normal(size=8)])
    assert err < 1e-5


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax(ad.tensor([0.0, np.nan]))


def test_softmax_handles_minus_inf():
    y = ad.softmax(ad.tensor([0.0, -np.inf, np.log(3.0)])).data
    np.testing.assert_allclose(y, [0.25, 0.0, 0.75], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-30, 30)))
def test_softmax_on_simplex(z):
    with ad.precision(np.float64):
        y = ad.softmax(ad.tensor(z)).data
    assert abs(y.sum() - 1) < 1e-6
    assert (y > 0).all()


# every differentiable op, checked against central differences in float64
OPS = {
    "add": (lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (3, 4)]),
    "bias_add": (lambda a, b: ad.sum(ad.relu(ad.add(a, b))), [(5, 3), (3,)]),
    "sub": (lambda a, b: ad.sum(ad.mul(ad.sub(a, b), a)), [(4,), (4,)]),
    "mul": (lambda a, b: ad.sum(ad.mul(a, b)), [(2, 3), (2, 3)]),
    "scalar_mul": (lambda a: ad.sum(ad.mul(ad.scalar_mul(a, -2.5), a)), [(6,)]),
    "scale_rows": (lambda a, s: ad.sum(ad.mul(ad.scale_rows(a, s), a)), [(4, 3), (4,)]),
    "sum_axis": (lambda a: ad.sum(ad.mul(ad.sum(a, axis=1), ad.sum(a, axis=1))), [(3, 5)]),
    "relu": (lambda a: ad.sum(ad.mul(ad.relu(a), a)), [(10,)]),
    "exp": (lambda a: ad.sum(ad.exp(a)), [(5,)]),
    "log": (lambda a: ad.sum(ad.log(ad.exp(a))), [(5,)]),
    "log_rates": (lambda a: ad.sum(ad.log_rates(ad.exp(a))), [(5,)]),
    "softmax_rows": (lambda a, w: ad.sum(ad.mul(ad.softmax(a), w)), [(3, 4), (3, 4)]),
    "concat": (lambda a, b: ad.sum(ad.mul(ad.concat([a, b], axis=1), ad.concat([b, a], axis=1))), [(2, 3), (2, 3)]),
    "stack": (lambda a, b: ad.sum(ad.mul(ad.stack([a, b], axis=1), ad.stack([b, b], axis=1))), [(3,), (3,)]),
    "slice": (lambda a: ad.sum(ad.mul(a[:, 1:3], a[:, 0:2])), [(3, 4)]),
    "reshape": (lambda a: ad.sum(ad.mul(ad.reshape(a, (6,)), ad.reshape(a, (6,)))), [(2, 3)]),
    "conv2d": (lambda x, w, b: ad.sum(ad.mul(ad.conv2d(x, w, b, padding=1), ad.conv2d(x, w, b, padding=1))),
               [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_nopad": (lambda x, w: ad.sum(ad.relu(ad.conv2d(x, w))), [(1, 2, 5, 4), (2, 2, 3, 3)]),
    "pool2d": (lambda x: ad.sum(ad.mul(ad.pool2d(x), ad.pool2d(x))), [(2, 2, 4, 5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name, f64, rng):
    build, shapes = OPS[name]
    assert gradcheck(build, [rng.normal(size=s) for s in shapes]) < 1e-4


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_cross_entropy_gradcheck(reduction, f64, rng):
    labels = rng.integers(0, 4, size=5)
    err = gradcheck(lambda z: ad.cross_entropy_logits(z, labels, reduction), [rng.normal(size=(5, 4))])
    assert err < 1e-4


def test_cross_entropy_value(f64):
    z = ad.tensor([[0.0, 0.0], [np.log(3.0), 0.0]])
    loss = ad.cross_entropy_logits(z, [0, 0], "sum").data
    assert loss == pytest.approx(np.log(2) + np.log(4 / 3))


def test_conv2d_matches_direct_loop(f64, rng):
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    out = ad.conv2d(ad.tensor(x), ad.tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pool2d_picks_window_max():
    x = ad.tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ad.pool2d(x).data[0, 0], [[5, 7], [13, 15]])


def test_backward_populates_every_reachable_grad(rng):
    a = ad.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = ad.tensor(rng.normal(size=(2, 2)), requires_grad=True)
    c = ad.tensor(rng.normal(size=(3, 2)))
    with ad.Tape() as tape:
        loss = ad.sum(ad.add(ad.matmul(a, b), c))
    tape.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert c.grad is None


def test_backward_needs_scalar():
    a = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(a, a)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_double_backward_is_deterministic(rng):
    a = ad.tensor(rng.normal(size=(4, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.softmax(ad.matmul(a, a)) * ad.tensor(rng.normal(size=(4, 4))))
    g1, = tape.grad(loss, [a])
    g2, = tape.grad(loss, [a])
    np.testing.assert_array_equal(g1, g2)


def test_grad_accumulates_across_backward_calls(rng):
    a = ad.tensor(rng.normal(size=3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(a, a))
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 4 * a.data, rtol=1e-6)


def test_no_grad_records_nothing():
    a = ad.tensor([1.0], requires_grad=True)
    with ad.Tape() as tape, ad.no_grad():
        ad.mul(a, a)
    assert len(tape) == 0


def test_shape_mismatch_without_broadcast():
    with pytest.raises(DimensionError):
        ad.add(ad.zeros((2, 3)), ad.zeros((3, 2)))
    with pytest.raises(DimensionError):
        ad.mul(ad.zeros((2, 3)), ad.zeros((3,)))


def test_default_precision_is_float32():
    assert ad.tensor([1.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert ad.tensor([1.0]).dtype == np.float64


# --- straight-through Gumbel-softmax ---------------------------------------

def test_ste_single_finite_candidate(rng):
    z = ad.tensor([0.0, -np.inf, -np.inf])
    for _ in range(100):
        np.testing.assert_array_equal(ad.gumbel_softmax_ste(z, 1.0, rng).data, [1, 0, 0])


def test_ste_all_minus_inf_raises(rng):
    with pytest.raises(NoCandidateError):
        ad.gumbel_softmax_ste(ad.tensor([-np.inf, -np.inf]), 1.0, rng)


def test_ste_rejects_bad_tau_and_nan(rng):
    with pytest.raises(ValueError):
        ad.gumbel_softmax_ste(ad.tensor([0.0, 1.0]), 0.0, rng)
    with pytest.raises(NumericError):
        ad.gumbel_softmax_ste(ad.tensor([0.0, np.nan]), 1.0, rng)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-20, 20)),
       st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_ste_forward_is_one_hot(z, tau, seed):
    out = ad.gumbel_softmax_ste(ad.tensor(z), tau, np.random.default_rng(seed)).data
    assert out.sum() == 1 and set(np.unique(out)) <= {0.0, 1.0}


def test_ste_frequency_matches_softmax():
    # Gumbel-max over logits samples softmax(logits); each class within 3 sigma at n=1e5
    n = 100_000
    logits = np.array([1.2, 0.3, -0.5, 0.0])
    p = np.exp(logits) / np.exp(logits).sum()
    noise = ad.gumbel_noise(np.random.default_rng(7), (n, 4), np.float64)
    with ad.precision(np.float64):
        hard = ad.gumbel_softmax_ste(ad.tensor(np.tile(logits, (n, 1))), 25.0, noise=noise).data
    sigma = np.sqrt(p * (1 - p) / n)
    assert (np.abs(hard.mean(axis=0) - p) < 3 * sigma).all()


def test_ste_self_gradient_positive(rng):
    for _ in range(50):
        z = ad.tensor(rng.normal(size=5), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.gumbel_softmax_ste(z, float(rng.uniform(0.5, 30)), rng)
            k = int(y.data.argmax())
            picked = y[k]
        g, = tape.grad(picked, [z])
        assert g[k] > 0


def test_ste_backward_uses_recorded_noise(f64, rng):
    z = rng.normal(size=4)
    noise = ad.gumbel_noise(rng, (4,), np.float64)
    tau = 2.0
    w = rng.normal(size=4)
    zt = ad.tensor(z, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(ad.gumbel_softmax_ste(zt, tau, noise=noise), ad.tensor(w)))
    g, = tape.grad(loss, [zt])
    soft = lambda v: np.exp((v + noise) / tau) / np.exp((v + noise) / tau).sum()
    h = 1e-6
    fd = [(w @ soft(z + h * e) - w @ soft(z - h * e)) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def test_ste_force_overrides_pick(rng):
    z = ad.tensor(np.array([[10.0, 0.0, 0.0], [0.0, 10.0, 0.0]]))
    out = ad.gumbel_softmax_ste(z, 1.0, rng, force=[2, -1]).data
    np.testing.assert_array_equal(out, [[0, 0, 1], [0, 1, 0]])


def test_gumbel_noise_is_finite():
    g = ad.gumbel_noise(np.random.default_rng(0), (100_000,), np.float64)
    assert np.isfinite(g).all()
    assert abs(g.mean() - 0.5772) < 0.02
