import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curionav import autodiff as ad
from curionav.autodiff import Tape, Tensor
from curionav.optim import (ParamStore, adam_apply, clip_by_global_norm, collect_grads, global_norm,
                            read_snapshot, write_snapshot, SnapshotError)

from gradcheck import check

TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def test_linear_identity_and_scalar():
    x = np.array([1.0, -2.0, 3.0])
    y = ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(y.data, x)
    y = ad.linear(Tensor([5.0]), Tensor([[2.0]]), Tensor([3.0]))
    assert y.data.tolist() == [13.0]


def test_linear_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


def test_linear_input_gradient_is_column_sums():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.linear(x, Tensor(w), Tensor(np.zeros(4))))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, w.sum(axis=0), rtol=1e-12)


@pytest.mark.parametrize("L, k, s", [(72, 5, 2), (34, 3, 2), (10, 3, 1), (9, 9, 4), (20, 4, 3)])
def test_conv1d_output_length(L, k, s):
    y = ad.conv1d(Tensor(np.ones((2, L))), Tensor(np.ones((3, 2, k))), stride=s)
    assert y.shape == (3, (L - k) // s + 1)


def test_conv1d_paper_shape_chain():
    x = Tensor(np.zeros((1, 72)))
    y1 = ad.conv1d(x, Tensor(np.zeros((8, 1, 5))), stride=2)
    y2 = ad.conv1d(y1, Tensor(np.zeros((8, 8, 3))), stride=2)
    assert y1.shape == (8, 34) and y2.shape == (8, 16)


def test_conv1d_averaging_kernel_constant():
    y = ad.conv1d(Tensor(np.ones((1, 12))), Tensor(np.full((1, 1, 4), 0.25)), stride=2)
    np.testing.assert_allclose(y.data, 1.0)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(3, 17)), rng.normal(size=(2, 3, 4))
    y = ad.conv1d(Tensor(x), Tensor(k), stride=3).data
    for o in range(2):
        for t in range(y.shape[1]):
            assert y[o, t] == pytest.approx(np.sum(x[:, 3 * t:3 * t + 4] * k[o]), abs=1e-12)


def test_conv1d_too_short():
    with pytest.raises(ad.ShapeError):
        ad.conv1d(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 5))))


def test_elu_softmax_concat_values():
    assert ad.elu(Tensor([0.0, 1.0])).data.tolist() == [0.0, 1.0]
    assert ad.elu(Tensor([-1.0])).data[0] == pytest.approx(math.exp(-1) - 1)
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-15)
    c = ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])])
    assert c.data.tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_simplex(xs):
    p = ad.softmax(Tensor(xs)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_lstm_zero_weights_zero_state():
    h, c = ad.lstm_cell(Tensor(np.ones(5)), Tensor(np.zeros(4)), Tensor(np.zeros(4)),
                        Tensor(np.zeros((16, 9))), Tensor(np.zeros(16)))
    assert np.array_equal(h.data, np.zeros(4))


def test_lstm_saturated_forget_keeps_cell():
    H = 4
    b = np.zeros(4 * H)
    b[:H] = -1e3      # input gate closed
    b[H:2 * H] = 1e3  # forget gate open
    c0 = np.array([0.5, -1.0, 2.0, 0.1])
    _, c = ad.lstm_cell(Tensor(np.ones(3)), Tensor(np.zeros(H)), Tensor(c0),
                        Tensor(np.zeros((4 * H, 3 + H))), Tensor(b))
    np.testing.assert_array_equal(c.data, c0)


def test_cross_entropy_and_mse_half():
    assert float(ad.cross_entropy(Tensor([1.0, 0.0, 0.0]), [1, 0, 0]).data) == pytest.approx(0.0, abs=1e-15)
    ce = float(ad.cross_entropy(Tensor([1 / 3] * 3), [0, 0, 1]).data)
    assert ce == pytest.approx(math.log(3), abs=1e-12)
    a = Tensor([1.0, 2.0])
    assert float(ad.mse_half(a, a).data) == 0.0
    assert float(ad.cross_entropy(Tensor([0.0, 1.0, 0.0]), [1, 0, 0]).data) == pytest.approx(-math.log(1e-12))


def test_backward_sum_of_parameter_is_ones():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(p)
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_accumulates():
    rng = np.random.default_rng(2)
    w = leaf(rng, 3, 4)
    x = Tensor(rng.normal(size=4))
    with Tape() as tape:
        loss = ad.sum(ad.elu(ad.linear(x, w)))
    tape.backward(loss)
    first = w.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * first, rtol=1e-15)


def test_unreached_parameters_get_zero():
    used = Tensor(np.ones(2), requires_grad=True, name="used")
    unused = Tensor(np.ones(3), requires_grad=True, name="unused")
    with Tape() as tape:
        loss = ad.sum(ad.square(used))
    tape.backward(loss)
    grads = collect_grads({"used": used, "unused": unused})
    assert np.array_equal(grads["unused"], np.zeros(3))
    assert np.array_equal(grads["used"], [2.0, 2.0])


def test_no_recording_outside_tape():
    p = Tensor(np.ones(2), requires_grad=True)
    out = ad.sum(ad.square(p))
    assert out.is_leaf and not out.requires_grad


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(1, 30)), rng.normal(size=(4, 1, 5)), rng.normal(size=4)
    a = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    c = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    assert np.array_equal(a, c)


# -- finite-difference checks over randomized small instances ---------------------

SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    build = lambda: ad.sum(ad.mul(ad.sub(ad.add(a, b), ad.tanh(a)), ad.sigmoid(b))) + \
        ad.sum(ad.mul(ad.log(pos), ad.exp(ad.mul(a, 0.3)))) + ad.mean(ad.square(a))  # noqa: E731
    assert check(build, [a, b, pos]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear_elu(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 2, 5), leaf(rng, 3, 5), leaf(rng, 3)
    target = rng.normal(size=(2, 3))
    build = lambda: ad.sum(ad.mul(ad.elu(ad.linear(x, w, b)), target))  # noqa: E731
    assert check(build, [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv1d(seed):
    rng = np.random.default_rng(seed)
    L, k, s = int(rng.integers(6, 15)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    x, w, b = leaf(rng, 2, 2, L), leaf(rng, 3, 2, k), leaf(rng, 3)
    out_len = (L - k) // s + 1
    target = rng.normal(size=(2, 3, out_len))
    build = lambda: ad.sum(ad.mul(ad.conv1d(x, w, b, stride=s), target))  # noqa: E731
    assert check(build, [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_log_softmax_entropy(seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng, 4, 3)
    t = rng.normal(size=(4, 3))
    build = lambda: ad.sum(ad.mul(ad.softmax(z), t)) + ad.sum(ad.mul(ad.log_softmax(z), t)) + \
        ad.sum(ad.entropy(ad.softmax(z)))  # noqa: E731
    assert check(build, [z]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_lstm_three_steps(seed):
    rng = np.random.default_rng(seed)
    n, H = 3, 4
    w, b = leaf(rng, 4 * H, n + H, scale=0.5), leaf(rng, 4 * H, scale=0.5)
    xs = [leaf(rng, n) for _ in range(3)]
    h0, c0 = leaf(rng, H), leaf(rng, H)
    t = rng.normal(size=H)

    def build():
        h, c = h0, c0
        for x in xs:
            h, c = ad.lstm_cell(x, h, c, w, b)
        return ad.sum(ad.mul(h, t)) + ad.sum(ad.square(c))

    assert check(build, [w, b, h0, c0] + xs) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_losses_and_shape_ops(seed):
    rng = np.random.default_rng(seed)
    z, a = leaf(rng, 2, 3), leaf(rng, 6)
    target = np.eye(3)[rng.integers(3, size=2)]
    other = rng.normal(size=(3, 2))
    build = lambda: ad.cross_entropy(ad.softmax(z), target) + \
        ad.mse_half(ad.reshape(a, (3, 2)), other) + ad.sum(ad.concat([a[1:4], a[:2]])) + \
        ad.sum(ad.mul(ad.concat([z, z], axis=0), 0.5))  # noqa: E731
    assert check(build, [z, a]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv_elu_linear_composite(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 1, 20)
    k1, b1 = leaf(rng, 4, 1, 5), leaf(rng, 4)
    w, b = leaf(rng, 2, 4 * 8), leaf(rng, 2)
    build = lambda: ad.sum(ad.square(ad.linear(ad.reshape(ad.elu(ad.conv1d(x, k1, b1, stride=2)), (-1,)), w, b)))  # noqa: E731
    assert check(build, [x, k1, b1, w, b]) < 1e-5


# -- optimizer -------------------------------------------------------------------------

def test_adam_zero_gradient():
    store = ParamStore({"w": np.array([1.0, -2.0])})
    adam_apply(store, {"w": np.zeros(2)}, lr=1e-4)
    assert np.array_equal(store.params["w"], [1.0, -2.0])
    assert store.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    store = ParamStore({"w": np.zeros(3)})
    adam_apply(store, {"w": g}, lr=1e-4)
    np.testing.assert_allclose(store.params["w"], -1e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_descends():
    store = ParamStore({"w": np.zeros(2)})
    for _ in range(100):
        adam_apply(store, {"w": np.array([1.0, -1.0])}, lr=1e-3)
    assert store.params["w"][0] < 0 < store.params["w"][1]
    assert store.step == 100


def test_adam_shape_mismatch():
    store = ParamStore({"w": np.zeros(2)})
    with pytest.raises(ValueError):
        adam_apply(store, {"w": np.zeros(3)})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(0.1, 50))
def test_clipping_never_increases_norm(values, max_norm):
    grads = {"a": np.array(values)}
    clipped, norm = clip_by_global_norm(grads, max_norm)
    assert global_norm(clipped) <= max(norm, 0) + 1e-12
    assert global_norm(clipped) <= max_norm + 1e-9
    if norm <= max_norm:
        assert clipped["a"] is grads["a"]


def test_snapshot_roundtrip(tmp_path):
    params = {"a.w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "s": np.array(2.0)}
    write_snapshot(tmp_path / "x.snap", params, {"k": 1})
    back, meta = read_snapshot(tmp_path / "x.snap")
    assert meta == {"k": 1}
    assert set(back) == set(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_snapshot_corrupt(tmp_path):
    write_snapshot(tmp_path / "x.snap", {"a": np.ones(3)})
    data = (tmp_path / "x.snap").read_bytes()
    (tmp_path / "bad.snap").write_bytes(data[:-5])
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "bad.snap")
    (tmp_path / "junk.snap").write_bytes(b"hello world")
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "junk.snap")
