import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advmesh import autodiff as ad
from advmesh.autodiff import Tensor, backward, grad_check


def _conv_oracle(x, w, stride, pad, dil=1):
    n, c, h, wd = x.shape
    k = w.shape[2]
    ek = (k - 1) * dil + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - ek) // stride + 1
    wo = (wd + 2 * pad - ek) // stride + 1
    out = np.zeros((n, w.shape[0], ho, wo))
    for b in range(n):
        for o in range(w.shape[0]):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + ek:dil, j * stride:j * stride + ek:dil]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


# -- concrete values ---------------------------------------------------------

def test_sum_of_2x2():
    assert Tensor([[1.0, 2.0], [3.0, 4.0]]).sum().item() == 10.0


def test_relu_value_and_grad_at_negative():
    x = Tensor(-3.0, requires_grad=True)
    y = ad.relu(x)
    backward(y)
    assert y.item() == 0.0 and x.grad == 0.0


def test_conv_all_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    assert ad.conv2d(x, w).data.reshape(-1).tolist() == [9.0]


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (2, 0, 1), (1, 2, 2), (2, 2, 2)])
def test_conv_matches_loop_oracle(stride, pad, dil):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, dilation=dil).data
    np.testing.assert_allclose(got, _conv_oracle(x, w, stride, pad, dil), atol=1e-12)


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 6.0


def test_dot_grads():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    backward(ad.dot(a, b))
    assert a.grad.tolist() == [3.0, 4.0]
    assert b.grad.tolist() == [1.0, 2.0]


def test_cosine_similarity_fd():
    v = np.array([0.6, 0.8])
    assert grad_check(lambda u: ad.cosine_similarity(u, Tensor(v)), np.array([1.0, 0.0])) < 1e-5
    u = np.array([1.0, 0.0])
    assert grad_check(lambda w: ad.cosine_similarity(Tensor(u), w), v) < 1e-5


def test_grad_check_polynomial_and_constant():
    assert grad_check(lambda x: (x * x).sum(), np.array([1.0, 2.0, 3.0])) < 1e-6
    assert grad_check(lambda x: Tensor(5.0) + 0.0 * x.sum(), np.zeros(3)) == 0.0


def test_grad_check_sigmoid():
    x = np.random.default_rng(0).uniform(-2, 2, 8)
    assert grad_check(lambda t: ad.sigmoid(t).sum(), x) < 1e-4


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ad.ShapeError):
        grad_check(lambda t: t * 2.0, np.ones(3))


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        backward(x * 2.0)


def test_root_gradient_is_ones():
    x = Tensor(np.ones(2), requires_grad=True)
    y = (x * 3.0).sum()
    backward(y)
    assert y.grad == 1.0


def test_unreachable_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    out = (x * 2.0).sum() + 0.0 * y.sum()
    backward(out)
    assert np.all(y.grad == 0.0)


def test_detached_gets_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    d = x.detach()
    backward((d * x).sum())
    assert d.grad is None
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_constants_record_no_graph():
    a = Tensor(np.ones(3))
    out = ad.sigmoid(a * 2.0)
    assert not out.requires_grad and out.is_leaf


def test_no_grad_context():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_branch_accumulation():
    rng = np.random.default_rng(1)
    v = rng.normal(size=4)
    x = Tensor(v, requires_grad=True)
    backward((ad.sigmoid(x) * x).sum() + ad.exp(x).sum())
    both = x.grad.copy()
    x1 = Tensor(v, requires_grad=True)
    backward((ad.sigmoid(x1) * x1).sum())
    x2 = Tensor(v, requires_grad=True)
    backward(ad.exp(x2).sum())
    np.testing.assert_allclose(both, x1.grad + x2.grad, rtol=1e-14)


def test_repeated_backward_accumulates():
    x = Tensor([2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    assert x.grad.tolist() == [8.0]


def test_tape_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.exp(x) * x
    z = y.sum() + x.sum()
    order = ad.Tape(z).nodes
    pos = {n.node_id: i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[n.node_id]
    assert len(pos) == len(order)


# -- shape errors ------------------------------------------------------------

@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_binary_shape_error_names_shapes(op):
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        op(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_zero_spatial_error():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((1, 1, 0, 3))), Tensor(np.ones((1, 1, 1, 1))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- finite-difference suite over every op ------------------------------------

def _ops():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 2, 3, 3))
    b2 = rng.normal(size=(4, 3))
    m = sp.random(5, 6, density=0.5, random_state=2, format="csr")
    c46 = rng.normal(size=(4, 6))
    xin = rng.normal(size=(2, 2, 6, 7))
    return {
        "add": ((4, 3), lambda x: (x + Tensor(b2)).sum()),
        "sub": ((4, 3), lambda x: (Tensor(b2) - x * x).sum()),
        "mul": ((4, 3), lambda x: (x * Tensor(b2) * x).sum()),
        "div": ((4, 3), lambda x: (x / (2.0 + x * x)).sum()),
        "matmul": ((4, 3), lambda x: (x @ Tensor(b2.T)).sum() + (x @ x.T).sum()),
        "sum_axis": ((4, 3), lambda x: (x.sum(axis=0) * Tensor([1.0, 2.0, 3.0])).sum()),
        "mean": ((4, 3), lambda x: (x.mean(axis=1) ** 2).sum()),
        "abs": ((6,), lambda x: ad.abs(x + 0.05).sum()),
        "relu": ((6,), lambda x: (ad.relu(x + 0.05) * x).sum()),
        "sigmoid": ((6,), lambda x: ad.sigmoid(3.0 * x).sum()),
        "log_sigmoid": ((6,), lambda x: ad.log_sigmoid(3.0 * x).sum()),
        "exp": ((6,), lambda x: ad.exp(x).sum()),
        "log": ((6,), lambda x: ad.log(x * x + 1.0).sum()),
        "sqrt": ((6,), lambda x: ad.sqrt(x * x + 0.5).sum()),
        "pow": ((6,), lambda x: ((x * x + 1.0) ** 1.5).sum()),
        "dot": ((6,), lambda x: ad.dot(x, ad.exp(x))),
        "norm2": ((6,), lambda x: ad.norm2(x + 2.0)),
        "cosine": ((6,), lambda x: ad.cosine_similarity(x + 0.1, Tensor(np.arange(6.0) - 2.0))),
        "broadcast": ((3,), lambda x: (ad.broadcast_to(x, (4, 3)) * Tensor(b2)).sum()),
        "slice": ((4, 3), lambda x: (x[1:3, ::2] * x[0:2, 0:2]).sum()),
        "gather": ((5, 3), lambda x: (x[np.array([0, 2, 2, 4])] ** 2).sum()),
        "concat": ((4, 3), lambda x: (ad.concat([x, x * x], axis=1) * Tensor(c46)).sum()),
        "reshape_transpose": ((4, 3), lambda x: (x.reshape(3, 4).T * Tensor(b2)).sum()),
        "conv2d": ((1, 2, 5, 6), lambda x: (ad.conv2d(x, Tensor(w), stride=2, padding=1) ** 2).sum()),
        "conv2d_dilated": ((1, 2, 6, 7), lambda x: (ad.conv2d(x, Tensor(w), padding=2, dilation=2) ** 2).sum()),
        "conv2d_weight": ((3, 2, 3, 3), lambda k: (ad.conv2d(Tensor(xin), k, stride=2, padding=2, dilation=2) ** 2).sum()),
        "max_pool2d": ((1, 2, 4, 6), lambda x: (ad.max_pool2d(x, 2) ** 2).sum()),
        "clamp": ((6,), lambda x: (ad.clamp(x, -0.5, 0.5) * x).sum()),
        "minimum_maximum": ((6,), lambda x: (ad.minimum(x, 0.3 - x) + ad.maximum(x, Tensor(np.zeros(6)) + 0.1)).sum()),
        "where": ((6,), lambda x: ad.where(np.arange(6) % 2 == 0, x * x, ad.exp(x)).sum()),
        "segment_sum": ((5,), lambda x: (ad.segment_sum(x, np.array([0, 1, 0, 2, 1]), 3) ** 2).sum()),
        "sparse_matmul": ((6, 2), lambda x: (ad.sparse_matmul(m, x) ** 2).sum()),
        "atan2": ((2, 4), lambda x: ad.atan2(x[0], x[1] + 2.5).sum()),
        "stack": ((3,), lambda x: (ad.stack([x, x * 2.0], axis=1) ** 2).sum()),
    }


OPS = _ops()


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_finite_differences(name):
    shape, f = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(grad_check(f, rng.uniform(-1, 1, shape)) for _ in range(10))
    assert worst < 1e-4, f"{name}: {worst}"


# -- properties --------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_grad_sums_over_rows(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    backward((ta + tb).sum())
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5,), elements=finite))
def test_grad_shape_matches_data(x):
    t = Tensor(x, requires_grad=True)
    backward((ad.sigmoid(t) * t).sum())
    assert t.grad.size == t.data.size


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_matches_numpy(a, b):
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)
