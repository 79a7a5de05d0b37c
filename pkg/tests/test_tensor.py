import itertools
import zlib

import numpy as np
import pytest

from crcnn import tensor as T
from crcnn.tensor import ShapeError, Tensor

from gradcheck import check_grads

TOL = 1e-4


def test_add_and_relu_values():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.elementwise("neg", Tensor([1.0])).data, [-1])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_matmul_values_and_errors():
    x = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_allclose(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_sum_of_ones_and_impulse():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data[0, 0, 0, 0] == 9
    k = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    resp = T.conv2d(Tensor(x), Tensor(k), pad=1).data[0, 0, 1:4, 1:4]
    # cross-correlation: an impulse reproduces the kernel flipped
    np.testing.assert_array_equal(resp, k[0, 0, ::-1, ::-1])


def test_conv2d_non_integral_extent():
    with pytest.raises(ShapeError, match="non-integral"):
        T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


def test_deconv_shape_and_constant_preservation():
    x = Tensor(np.ones((1, 5, 7, 7)))
    w = Tensor(np.ones((5, 3, 2, 2)))
    assert T.deconv2d(x, w, stride=2).shape == (1, 3, 14, 14)
    ident = np.ones((1, 1, 2, 2))
    out = T.deconv2d(Tensor(np.full((1, 1, 4, 4), 2.5)), Tensor(ident), stride=2)
    np.testing.assert_array_equal(out.data, 2.5)


def test_reductions():
    c = Tensor(np.full((1, 2, 3, 3), 1.75))
    np.testing.assert_array_equal(T.reduce("global_avg", c).data, 1.75)
    mp = T.reduce("max_pool2d", Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    np.testing.assert_array_equal(mp.data, [[[[4]]]])
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    T.backward(T.mean(x))
    assert np.all(x.grad == 1 / 12)


def test_max_pool_partial_windows_and_tie_routing():
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    out = T.max_pool2d(x, 2)
    assert out.shape == (1, 1, 2, 2)
    T.backward(T.sum(out))
    expected = np.zeros((3, 3))
    expected[0, 0] = expected[0, 2] = expected[2, 0] = expected[2, 2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)
    with pytest.raises(ShapeError):
        T.max_pool2d(Tensor(np.ones((1, 1, 1, 1))), 2, clamp=False)


def test_backward_sum_gives_ones_and_isolation():
    a = Tensor(np.random.default_rng(2).standard_normal((2, 3)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    other = T.sum(b * 3.0)
    T.backward(T.sum(a))
    assert np.all(a.grad == 1.0)
    assert b.grad is None
    T.backward(other)
    assert np.all(b.grad == 3.0)


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(a * 2.0)


def test_sum_of_leaves_exact_ones():
    leaves = [Tensor(np.random.default_rng(i).standard_normal((2, 2)), requires_grad=True) for i in range(4)]
    total = leaves[0].sum()
    for leaf in leaves[1:]:
        total = total + leaf.sum()
    T.backward(total)
    for leaf in leaves:
        assert np.all(leaf.grad == 1.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_broadcasting_matches_explicit_tiling():
    """Exhaustive over shape pairs up to rank 4, extents <= 4, that broadcast."""
    rng = np.random.default_rng(4)
    extents = [1, 2, 4]
    checked = 0
    for rank in range(1, 5):
        for a_shape in itertools.product(extents, repeat=rank):
            for mask in itertools.product([False, True], repeat=rank):
                b_shape = tuple(1 if m else s for s, m in zip(a_shape, mask))
                a = rng.standard_normal(a_shape)
                b = rng.standard_normal(b_shape)
                tiled = np.tile(b, [s // t for s, t in zip(a_shape, b_shape)])
                assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, a + tiled)
                assert np.array_equal(T.mul(Tensor(b), Tensor(a)).data, tiled * a)
                checked += 1
    assert checked > 500


# -- gradient checks (>= 20 random instances per op) -------------------------------------
N_INSTANCES = 20


def _instances(seed):
    rng = np.random.default_rng(seed)
    return [np.random.default_rng(rng.integers(1 << 31)) for _ in range(N_INSTANCES)]


def _nonkink(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


GRAD_CASES = {
    "add": (lambda a, b: T.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "mul": (lambda a, b: T.mul(a, b), lambda r: [r.standard_normal((2, 3, 1)), r.standard_normal((3, 4))]),
    "div": (lambda a, b: T.div(a, b), lambda r: [r.standard_normal((3,)), 1.5 + r.random((3,))]),
    "neg": (lambda a: T.neg(a), lambda r: [r.standard_normal((5,))]),
    "relu": (lambda a: T.relu(a), lambda r: [_nonkink(r, (4, 3))]),
    "sigmoid": (lambda a: T.sigmoid(a), lambda r: [3 * r.standard_normal((6,))]),
    "exp": (lambda a: T.exp(a), lambda r: [r.standard_normal((4,))]),
    "log": (lambda a: T.log(a), lambda r: [0.5 + r.random((4,))]),
    "matmul": (lambda a, b: T.matmul(a, b), lambda r: [r.standard_normal((4, 5)), r.standard_normal((5, 3))]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1),
               lambda r: [r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]),
    "conv2d_stride2": (lambda x, w: T.conv2d(x, w, stride=2, pad=1),
                       lambda r: [r.standard_normal((1, 2, 7, 7)), r.standard_normal((3, 2, 3, 3))]),
    "deconv2d": (lambda x, w, b: T.deconv2d(x, w, b, stride=2),
                 lambda r: [r.standard_normal((1, 3, 3, 3)), r.standard_normal((3, 2, 2, 2)), r.standard_normal(2)]),
    "deconv2d_overlap": (lambda x, w: T.deconv2d(x, w, stride=2, pad=1),
                         lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((2, 2, 4, 4))]),
    "max_pool2d": (lambda x: T.max_pool2d(x, 2), lambda r: [r.permutation(50).reshape(1, 2, 5, 5) * 0.1]),
    "max_pool2d_overlap": (lambda x: T.max_pool2d(x, 3, 2), lambda r: [r.permutation(49).reshape(1, 1, 7, 7) * 0.1]),
    "avg_pool2d": (lambda x: T.avg_pool2d(x, 2), lambda r: [r.standard_normal((1, 2, 5, 5))]),
    "global_avg": (lambda x: T.global_avg_pool(x), lambda r: [r.standard_normal((2, 3, 4, 4))]),
    "global_max": (lambda x: T.global_max_pool(x), lambda r: [r.permutation(32).reshape(2, 1, 4, 4) * 0.1]),
    "max_axis": (lambda x: T.max(x, axis=1, keepdims=True), lambda r: [r.permutation(24).reshape(2, 3, 4) * 0.1]),
    "sum_axis": (lambda x: T.sum(x, axis=1), lambda r: [r.standard_normal((3, 4))]),
    "mean_axis": (lambda x: T.mean(x, axis=(0, 2), keepdims=True), lambda r: [r.standard_normal((3, 4, 2))]),
    "softmax": (lambda x: T.softmax(x, axis=1), lambda r: [r.standard_normal((3, 4))]),
    "log_softmax": (lambda x: T.log_softmax(x, axis=-1), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 1, 3)), r.standard_normal((2, 2, 3))]),
    "reshape_transpose": (lambda a: T.transpose(T.reshape(a, (3, 8)), (1, 0)), lambda r: [r.standard_normal((2, 3, 4))]),
    "getitem": (lambda a: a[np.array([0, 2, 2])], lambda r: [r.standard_normal((3, 2))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck(name):
    build, make = GRAD_CASES[name]
    worst = max(check_grads(build, make(rng)) for rng in _instances(zlib.crc32(name.encode())))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


def test_micro_network_gradcheck():
    """A 5-parameter composed model: conv -> relu -> pool -> linear -> sigmoid."""
    from gradcheck import numeric_grad, rel_error

    for rng in _instances(77):
        x = rng.standard_normal((1, 1, 4, 4))
        params = [rng.standard_normal((1, 1, 2, 2)), rng.standard_normal(1),
                  rng.standard_normal((4, 1)), rng.standard_normal(1), rng.standard_normal((1, 1))]

        def model(ps):
            h = T.relu(T.conv2d(Tensor(x), ps[0], ps[1], stride=1, pad=0))
            h = T.reshape(T.max_pool2d(h, 2, 1, clamp=False), (1, 4))
            h = T.sigmoid(T.matmul(h, ps[2]) + ps[3])
            return T.sum(T.matmul(h, ps[4]))

        ts = [Tensor(p, requires_grad=True) for p in params]
        T.backward(model(ts))
        numeric = numeric_grad(lambda: float(model([Tensor(p) for p in params]).data), params)
        for t, n in zip(ts, numeric):
            assert rel_error(t.grad, n) < TOL
