
import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegmoe.tensor import RngStream, Tensor, svd_topk, rfft_magnitude, no_grad
from eegmoe.tensor import ops
from eegmoe.tensor.gradcheck import check_gradients, numerical_grad
from eegmoe.tensor.linalg import _round_robin, fft, ifft


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    out = ops.matmul(T([[1, 0], [0, 1]]), T([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_hand_expansion():
    out = ops.matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_grad_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 5)))
    ops.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T)


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ops.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(1)
    a, b = T(rng.normal(size=(2, 1, 3, 4))), T(rng.normal(size=(5, 4, 2)))
    errs = check_gradients(lambda: (ops.matmul(a, b) ** 2).sum(), [a, b])
    assert max(errs) < 1e-6


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(T([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = ops.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    den = sum(mpmath.e ** x for x in xs)
    expected = [float(mpmath.e ** x / den) for x in xs]
    np.testing.assert_allclose(ops.softmax(T(xs)).data, expected, atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    assert abs(ops.softmax(T(xs)).data.sum() - 1.0) < 1e-12


# --- svd ------------------------------------------------------------------

def test_round_robin_covers_every_pair_once():
    for n in (2, 4, 6, 10):
        seen = set()
        for p, q in _round_robin(n):
            cols = list(p) + list(q)
            assert len(set(cols)) == n
            for i, j in zip(p, q):
                seen.add(frozenset((int(i), int(j))))
        assert len(seen) == n * (n - 1) // 2


def test_svd_identity():
    u, s = svd_topk(np.eye(3), 2)
    np.testing.assert_allclose(s, [1, 1])
    np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-8)


def test_svd_rank_one():
    uvec, vvec = np.array([1.0, 2.0, -2.0]), np.array([3.0, 0.0, 4.0, 1.0])
    u, s = svd_topk(np.outer(uvec, vvec), 1)
    np.testing.assert_allclose(s, [np.linalg.norm(uvec) * np.linalg.norm(vvec)])
    np.testing.assert_allclose(abs(u[:, 0] @ uvec) / np.linalg.norm(uvec), 1.0)


def _power_iteration_topk(x, k, iters=3000):
    """Deflated power iteration on X X^T: independent oracle for top-k left vectors."""
    gram = x @ x.T
    vecs = []
    rng = np.random.default_rng(123)
    for _ in range(k):
        v = rng.normal(size=gram.shape[0])
        for _ in range(iters):
            for w in vecs:
                v = v - (w @ v) * w
            v = gram @ v
            v /= np.linalg.norm(v)
        vecs.append(v)
    return np.stack(vecs, axis=1)


@pytest.mark.parametrize("shape", [(10, 6), (6, 10)])
def test_svd_reconstruction_matches_power_iteration(shape):
    x = np.random.default_rng(7).normal(size=shape)
    u, s = svd_topk(x, 3)
    ref = _power_iteration_topk(x, 3)
    err = np.linalg.norm(x - u @ u.T @ x)
    err_ref = np.linalg.norm(x - ref @ ref.T @ x)
    assert abs(err - err_ref) < 1e-6
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-8)
    assert np.all(np.diff(s) <= 0)


def test_svd_rank_deficient_still_orthonormal():
    x = np.outer(np.arange(1.0, 9.0), np.ones(3))
    u, s = svd_topk(x, 3)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-8)
    assert s[1] < 1e-8


def test_svd_k_out_of_range():
    with pytest.raises(ValueError):
        svd_topk(np.eye(3), 4)
    with pytest.raises(ValueError):
        svd_topk(np.eye(3), 0)


# --- FFT -------------------------------------------------------------------

def _naive_dft(x):
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n)


def test_rfft_zero():
    np.testing.assert_array_equal(rfft_magnitude(np.zeros(256)), np.zeros(129))


def test_rfft_single_tone():
    t = np.arange(256)
    mag = rfft_magnitude(np.cos(2 * np.pi * 4 * t / 256))
    assert mag.shape == (129,)
    assert np.argmax(mag) == 4
    assert np.sort(mag)[-2] < 1e-9 * mag[4]


def test_rfft_matches_naive_dft():
    x = np.random.default_rng(3).normal(size=(4, 256))
    mag = rfft_magnitude(x)
    np.testing.assert_allclose(mag, np.abs(_naive_dft(x))[:, :129], atol=1e-9)
    # Parseval over the full spectrum
    full = np.abs(fft(x)) ** 2
    np.testing.assert_allclose(full.sum(-1) / 256, (x ** 2).sum(-1), rtol=1e-9)


def test_ifft_inverts_fft():
    x = np.random.default_rng(4).normal(size=64) + 1j
    np.testing.assert_allclose(ifft(fft(x)), x, atol=1e-12)


def test_rfft_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="power of two"):
        rfft_magnitude(np.zeros(100))


# --- backward ---------------------------------------------------------------

def test_backward_sum():
    x = T([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = T([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = T([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_shared_subexpression_visited_once():
    x = T([3.0])
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = T([1.0])
    with no_grad():
        y = x * 2
    assert not y.requires_grad


_rng = np.random.default_rng(11)


def _pos(shape):
    return T(_rng.uniform(0.5, 2.0, size=shape))


def _rand(shape):
    return T(_rng.normal(size=shape))


PRIMITIVES = {
    "add_broadcast": lambda: ((a := _rand((3, 4))), (b := _rand((4,))), lambda: ((a + b) ** 2).sum()),
    "sub": lambda: ((a := _rand((3, 4))), (b := _rand((3, 1))), lambda: ((a - b) ** 3).sum()),
    "mul": lambda: ((a := _rand((2, 3))), (b := _rand((2, 3))), lambda: (a * b * a).sum()),
    "div": lambda: ((a := _rand((2, 3))), (b := _pos((2, 3))), lambda: (a / b).sum()),
    "exp_log": lambda: ((a := _pos((5,))), None, lambda: (ops.exp(a) * ops.log(a)).sum()),
    "sqrt": lambda: ((a := _pos((5,))), None, lambda: ops.sqrt(a).sum()),
    "tanh_sigmoid": lambda: ((a := _rand((6,))), None, lambda: (ops.tanh(a) * ops.sigmoid(a)).sum()),
    "gelu": lambda: ((a := _rand((8,))), None, lambda: (ops.gelu(a) ** 2).sum()),
    "where": lambda: ((a := _rand((6,))), (b := _rand((6,))),
                      lambda: (ops.where(np.arange(6) % 2 == 0, a, b) ** 2).sum()),
    "mean_axis": lambda: ((a := _rand((3, 4, 2))), None, lambda: (a.mean(axis=1) ** 2).sum()),
    "reshape_transpose": lambda: ((a := _rand((2, 3, 4))), (w := _rand((2, 4, 3))),
                                  lambda: (a.transpose(1, 0, 2).reshape(3, 8) * w.reshape(3, 8)).sum()),
    "getitem_basic": lambda: ((a := _rand((4, 5))), None, lambda: (a[1:3, ::2] ** 2).sum()),
    "getitem_fancy_repeat": lambda: ((a := _rand((4, 3))), None, lambda: (a[np.array([0, 2, 0, 3])] ** 2).sum()),
    "take_along_axis": lambda: ((a := _rand((3, 5))), None,
                                lambda: (ops.take_along_axis(a, np.array([[0, 4], [1, 1], [2, 3]]), 1) ** 2).sum()),
    "scatter_add": lambda: ((a := _rand((5, 2))), None,
                            lambda: (ops.scatter_add(a, np.array([0, 1, 0, 2, 1]), 3) ** 2).sum()),
    "concat_stack": lambda: ((a := _rand((2, 3))), (b := _rand((2, 3))),
                             lambda: (ops.concat([a, b], 1) ** 2).sum() + (ops.stack([a, b], 0) ** 3).sum()),
    "softmax": lambda: ((a := _rand((3, 4))), (w := _rand((3, 4))), lambda: (ops.softmax(a, -1) * w).sum()),
    "softmax_axis0": lambda: ((a := _rand((3, 4))), (w := _rand((3, 4))), lambda: (ops.softmax(a, 0) * w).sum()),
    "log_softmax": lambda: ((a := _rand((3, 4))), (w := _rand((3, 4))), lambda: (ops.log_softmax(a) * w).sum()),
    "layer_norm": lambda: ((a := _rand((3, 6))), (w := _rand((3, 6))), lambda: (ops.layer_norm(a) * w).sum()),
    "rms_norm": lambda: ((a := _rand((3, 6))), (w := _rand((3, 6))), lambda: (ops.rms_norm(a) * w).sum()),
    "zscore": lambda: ((a := _rand((3, 6))), (w := _rand((3, 6))), lambda: (ops.zscore(a) * w).sum()),
    "l2norm": lambda: ((a := _rand((3, 6))), None, lambda: ops.l2norm(a).sum()),
    "unfold1d": lambda: ((a := _rand((2, 2, 11))), (w := _rand((2, 6, 6))),
                         lambda: (ops.unfold1d(a, 3, stride=2, pad=1) * w).sum()),
    "power_spectrum": lambda: ((a := _rand((2, 16))), (w := _rand((2, 9))),
                               lambda: (ops.power_spectrum(a, np.hanning(16)) * w).sum()),
    "swapaxes_T": lambda: ((a := _rand((2, 3, 4))), None, lambda: (a.T ** 2 * np.arange(24.0).reshape(2, 4, 3)).sum()),
    "broadcast_to": lambda: ((a := _rand((3, 1))), None, lambda: (ops.broadcast_to(a, (2, 3, 4)) ** 2).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    a, b, fn = PRIMITIVES[name]()
    inputs = [t for t in (a, b) if t is not None]
    errs = check_gradients(fn, inputs)
    assert max(errs) < 1e-4, (name, errs)


def test_straight_through_forwards_hard_value_exactly():
    soft = T([0.2, 0.7])
    out = ops.straight_through(np.array([0.0, 1.0]), soft)
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    (out * T([2.0, 3.0], grad=False)).sum().backward()
    np.testing.assert_array_equal(soft.grad, [2.0, 3.0])


def test_dropout_is_identity_in_eval():
    x = T([1.0, 2.0])
    assert ops.dropout(x, 0.5, RngStream(0), training=False) is x


def test_l2norm_subgradient_zero_at_origin():
    x = T(np.zeros((2, 3)))
    ops.l2norm(x).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


# --- normalisations ---------------------------------------------------------

def test_normalisations_unit_statistics():
    x = np.random.default_rng(5).normal(3.0, 7.0, size=(10, 64))
    z = ops.zscore(T(x)).data
    np.testing.assert_allclose(z.mean(-1), 0, atol=1e-6)
    np.testing.assert_allclose(z.std(-1), 1, atol=1e-6)
    r = ops.rms_norm(T(x)).data
    np.testing.assert_allclose(np.sqrt((r ** 2).mean(-1)), 1, atol=1e-6)


def test_zscore_constant_is_zero():
    np.testing.assert_array_equal(ops.zscore(T(np.full((2, 5), 4.0))).data, 0.0)


# --- rng -----------------------------------------------------------------------

def test_rng_reproducible_and_independent_streams():
    a = RngStream(42, "mask").normal(5)
    b = RngStream(42, "mask").normal(5)
    c = RngStream(42, "gumbel").normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_rng_state_round_trip():
    r = RngStream(9, "x")
    r.normal(7)
    st = r.state()
    expected = r.uniform(11)
    np.testing.assert_array_equal(RngStream.from_state(st).uniform(11), expected)


def test_numerical_grad_on_subset_of_indices():
    x = T([1.0, 2.0, 3.0])
    g = numerical_grad(lambda: (x * x).sum(), x, index=[0, 2])
    np.testing.assert_allclose(g, [2.0, 6.0], rtol=1e-8)
