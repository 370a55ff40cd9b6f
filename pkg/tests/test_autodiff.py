import numpy as np
import pytest

from gazerep import autodiff as ad
from gazerep.autodiff import Tensor
from oracles import central_difference, conv1d_loops

TOL = 1e-3


def check_grad(fn, *shapes, seed=0, positive=False, away_from_zero=False):
    """Compare reverse-mode grads of sum(fn(*xs) * R) against central differences."""
    rng = np.random.default_rng(seed)
    arrays = []
    for s in shapes:
        a = rng.normal(size=s)
        if positive:
            a = np.abs(a) + 0.5
        if away_from_zero:
            a = np.where(np.abs(a) < 0.1, 0.3, a)
        arrays.append(a)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    R = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * R).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    (out * Tensor(R)).sum().backward()
    numeric = central_difference(scalar, [a.copy() for a in arrays])
    for t, g in zip(ts, numeric):
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, g, atol=TOL, rtol=0)


def test_float64_is_preserved():
    assert Tensor(np.zeros(3)).dtype == np.float64
    assert Tensor([1.0, 2.0]).dtype == np.float32


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: a + b, [(3, 4), (3, 4)]),
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(2, 3), (2, 3)]),
    (lambda a: -a, [(5,)]),
    (lambda a: a * 2.5, [(3, 2)]),
    (lambda a: ad.scale(a, -0.7), [(4,)]),
    (lambda a, b: a * b, [(3, 4), (3, 4)]),
    (lambda a, b: a * b, [(2, 3, 4), (1, 3, 1)]),
    (lambda a: a.exp(), [(6,)]),
    (lambda a: a.reshape(6, 2), [(3, 4)]),
    (lambda a: ad.transpose(a), [(3, 5)]),
    (lambda a: a[1:, ::2], [(4, 6)]),
    (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 4)]),
    (lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    (lambda a: a.sum(axis=1), [(3, 4)]),
    (lambda a: a.sum(), [(3, 4)]),
    (lambda a: a.mean(axis=0, keepdims=True), [(3, 4)]),
    (lambda a: ad.sum_of_squares(a), [(2, 3, 4)]),
    (lambda a: ad.batch_mean(a), [(3, 2, 5)]),
    (lambda a: ad.batch_var(a), [(3, 2, 5)]),
    (lambda a: ad.global_avg_pool(a), [(2, 3, 7)]),
    (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    (lambda a, b: ad.add_over_time(a, b), [(2, 3, 5), (3,)]),
    (lambda a, b: ad.add_over_time(a, b), [(2, 3, 5), (2, 3)]),
    (lambda a: ad.log_softmax(a, axis=1), [(3, 5)]),
    (lambda a: ad.softmax(a, axis=1), [(3, 5)]),
])
def test_op_gradients(fn, shapes):
    check_grad(fn, *shapes)


def test_division_and_power_gradients():
    check_grad(lambda a, b: a / b, (3, 3), (3, 3), positive=True)
    check_grad(lambda a: a ** 3, (4,))
    check_grad(lambda a: a ** 0.5, (4,), positive=True)


def test_relu_gradient_away_from_kink():
    check_grad(lambda a: a.relu(), (4, 5), away_from_zero=True)


def test_mask_gradient():
    mask = np.array([[1, 0, 1], [0, 0, 1]], dtype=bool)
    check_grad(lambda a: ad.apply_mask(a, mask), (2, 3))


@pytest.mark.parametrize("dilation", [1, 2, 4])
@pytest.mark.parametrize("padding", ["same", "causal", (3, 1)])
def test_conv1d_gradients(dilation, padding):
    check_grad(lambda x, w: ad.conv1d(x, w, dilation, padding), (2, 3, 12), (4, 3, 3))


@pytest.mark.parametrize("padding", ["same", "causal", (0, 0)])
def test_conv1d_matches_direct_sum(padding):
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 20)), rng.normal(size=(4, 3, 3))
    d = 4
    left, right = {"same": (d, d), "causal": (2 * d, 0)}.get(padding, padding) if isinstance(padding, str) else padding
    got = ad.conv1d(Tensor(x), Tensor(w), d, padding).data
    np.testing.assert_allclose(got, conv1d_loops(x, w, d, left, right), atol=1e-12)


def test_causal_conv_hand_example():
    # x = [1, 2, 3, 4], ones kernel, causal: each output sums the current and two previous inputs
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    w = Tensor(np.ones((1, 1, 3)))
    np.testing.assert_array_equal(ad.conv1d(x, w, 1, "causal").data[0, 0], [1, 3, 6, 9])


def test_causal_conv_ignores_future():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 30)).astype(np.float32)
    w = Tensor(rng.normal(size=(3, 2, 3)).astype(np.float32))
    base = ad.conv1d(Tensor(x), w, 2, "causal").data
    x2 = x.copy()
    x2[0, :, 17] += 5.0
    out = ad.conv1d(Tensor(x2), w, 2, "causal").data
    assert np.array_equal(out[..., :17], base[..., :17])
    assert not np.array_equal(out[..., 17], base[..., 17])


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * 3.0).sum().backward()
    (a * 3.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])
    ad.zero_grads([a])
    np.testing.assert_array_equal(a.grad, [0.0, 0.0])


def test_shared_subexpression_gradient():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a
    (b + b * a).sum().backward()  # d/da (a^2 + a^3) = 2a + 3a^2
    np.testing.assert_allclose(a.grad, [16.0])


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        b = a * 2.0
    assert b.is_leaf and not b.requires_grad
    assert ad.grad_enabled()


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ValueError, match="conv1d"):
        ad.conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 3, 3))))


def test_deep_graph_does_not_recurse():
    a = Tensor(np.array([1.0]), requires_grad=True)
    h = a
    for _ in range(5000):
        h = h * 1.0001
    h.sum().backward()
    assert np.isfinite(a.grad).all()
