"""Tensor engine: hand examples, error cases and finite-difference gradient checks."""
import math
import zlib

import numpy as np
import pytest

from fedselectkd import autodiff as ad
from fedselectkd.autodiff import DimensionError, GraphError, Tensor

from helpers import OPS, gradcheck, op_case


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- hand examples ----------------------------------------------------------

def test_matmul_examples():
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(M)).data, M)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    assert not ad.matmul(Tensor([[0.0, 0.0]]), Tensor(M)).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(ad.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75])
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)


def test_softmax_mask_zeroes_masked_slots():
    out = ad.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
    assert out[1] == 0.0 and out.sum() == pytest.approx(1.0)


def test_layer_norm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.allclose(ad.layer_norm(Tensor([[3.0, 3.0]]), g, b).data, 0.0)
    assert np.allclose(ad.layer_norm(Tensor([[1.0, -1.0]]), g, b).data, [[1.0, -1.0]], atol=1e-4)
    bias = Tensor([0.5, -2.0])
    assert np.array_equal(ad.layer_norm(Tensor([[1.0, 7.0]]), Tensor(np.zeros(2)), bias).data, [[0.5, -2.0]])


def test_relu_examples():
    assert ad.relu(Tensor(-2.0)).data == 0.0
    assert ad.relu(Tensor(3.0)).data == 3.0


def test_embedding_out_of_vocab():
    table = Tensor(np.ones((5, 3)))
    with pytest.raises(IndexError):
        ad.embedding_lookup(table, np.array([0, 5]))
    with pytest.raises(IndexError):
        ad.embedding_lookup(table, np.array([-1]))


def test_cross_entropy_examples():
    assert ad.cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).data == pytest.approx(0.0)
    assert ad.cross_entropy(Tensor(np.full(4, 0.25)), 3).data == pytest.approx(math.log(4))
    assert ad.cross_entropy(Tensor([0.5, 0.5]), 0).data == pytest.approx(math.log(2))


def test_cross_entropy_floor():
    q = np.array([[1.0, 0.0]])
    assert float(ad.cross_entropy(Tensor(q), [1]).data[0]) == pytest.approx(-math.log(1e-12))
    assert ad.clamped_count(q, [1]) == 1


def test_kl_examples():
    q = np.array([0.2, 0.3, 0.5])
    assert ad.kl_divergence(q, Tensor(q)).data == pytest.approx(0.0, abs=1e-15)
    assert ad.kl_divergence(np.array([1.0, 0.0]), Tensor([0.5, 0.5])).data == pytest.approx(math.log(2))
    u = np.full(7, 1 / 7)
    assert ad.kl_divergence(u, Tensor(u)).data == pytest.approx(0.0, abs=1e-15)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_detached_branch_gets_no_grad():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    z = x * y.detach()
    z.backward()
    assert x.grad == pytest.approx(5.0)
    assert y.grad is None


def test_unused_parameter_gets_zero_buffer():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.tsum(x), [x, unused])
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.tsum(ad.mul(x, x))
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and not y._parents


def test_broadcast_add_grad_reduces():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    ad.backward(ad.tsum(ad.add(a, b)), [a, b])
    assert np.array_equal(b.grad, np.full(4, 3.0))


# -- finite differences -----------------------------------------------------

@pytest.mark.parametrize("op", OPS)
def test_gradcheck_op(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    worst = 0.0
    for _ in range(100):
        fn, arrays = op_case(op, rng)
        worst = max(worst, gradcheck(fn, arrays, rng))
    assert worst <= 1e-4, f"{op}: relative error {worst:.2e}"


def test_gradcheck_composite(rng):
    """attention-style block: softmax(x W x^T) x, then layer norm."""
    def fn(x, w, g, b):
        s = ad.softmax(ad.matmul(ad.matmul(x, w), ad.transpose(x, (0, 2, 1))))
        return ad.layer_norm(ad.matmul(s, x), g, b)

    for _ in range(10):
        B, T, n = 2, 3, 4
        arrays = [rng.standard_normal((B, T, n)), rng.standard_normal((n, n)) * 0.5,
                  rng.standard_normal(n), rng.standard_normal(n)]
        assert gradcheck(fn, arrays, rng) <= 1e-4
