import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btload import autodiff as ad
from btload.autodiff import Tensor


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(op, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    weights = None
    for k in range(len(arrays)):
        def f(xk, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(xk)
            out = op(*args).data
            return float(np.sum(out * weights))

        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = op(*ts)
        if weights is None:
            weights = np.random.default_rng(seed + 1).standard_normal(out.shape)
        (out * weights).sum().backward()
        num = numeric_grad(f, arrays[k].copy())
        np.testing.assert_allclose(ts[k].grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "op,shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(2, 3), (2, 1)]),
        (lambda a, b: a * b, [(3, 4), (1, 4)]),
        (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
        (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
        (lambda a: ad.tanh(a), [(5,)]),
        (lambda a: ad.sigmoid(a), [(5,)]),
        (lambda a: ad.softplus(a), [(5,)]),
        (lambda a: ad.gelu(a), [(6,)]),
        (lambda a: ad.exp(a), [(4,)]),
        (lambda a: ad.softmax(a, axis=-1), [(3, 5)]),
        (lambda a: ad.normalize(a), [(3, 6)]),
        (lambda a: a.reshape(6, 2).transpose(1, 0), [(3, 4)]),
        (lambda a: a.sum(axis=0), [(3, 4)]),
        (lambda a: a.mean(axis=1, keepdims=True), [(3, 4)]),
    ],
)
def test_op_gradients(op, shapes):
    check(op, *shapes)


def test_positive_domain_ops():
    check(lambda a, b: a / b, (3,), (3,), positive=True)
    check(lambda a: ad.log(a), (4,), positive=True)
    check(lambda a: ad.power(a, 0.5), (4,), positive=True)


def test_shared_node_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(Tensor(np.array(vals)), axis=-1).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_global_norm():
    assert ad.global_norm([np.array([3.0]), np.array([[4.0]])]) == 5.0
