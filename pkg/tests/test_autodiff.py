"""Reverse-mode autodiff tape tests.

Oracle: central finite differences of scalar-valued compositions, op by op,
plus structural checks (gradient accumulation through shared parents,
broadcasting reductions).
"""

import numpy as np
import pytest

from irlplan.autodiff import Var, as_var, concat, logsumexp, stack


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    g = np.zeros_like(x, dtype=float)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grad(build, x0, rtol=1e-5, atol=1e-7):
    """build(Var) -> scalar Var; compares tape gradient to FD."""
    v = Var(x0.copy())
    out = build(v)
    out.backward()
    num = fd_grad(lambda x: float(build(Var(x)).data), x0.copy())
    np.testing.assert_allclose(v.grad, num, rtol=rtol, atol=atol)


RNG = np.random.default_rng(42)


def test_arithmetic_chain():
    x0 = RNG.normal(size=(3, 4))
    check_grad(lambda v: ((v * 2.0 + 1.0 - v / 3.0) ** 2.0).sum(), x0)


def test_elementwise_nonlinearities():
    x0 = RNG.normal(size=(5,))
    check_grad(lambda v: v.tanh().sum(), x0)
    check_grad(lambda v: v.sigmoid().sum(), x0)
    check_grad(lambda v: (v * v + 0.5).log().sum(), x0)
    check_grad(lambda v: v.exp().sum(), x0)
    check_grad(lambda v: (v * v + 1.0).sqrt().sum(), x0)


def test_relu_away_from_kink():
    x0 = RNG.normal(size=(6,))
    x0[np.abs(x0) < 0.1] = 0.5
    check_grad(lambda v: (v.relu() * v.relu()).sum(), x0)


def test_matmul_both_sides():
    a0 = RNG.normal(size=(3, 4))
    b = Var(RNG.normal(size=(4, 2)))

    def build_a(v):
        return (v @ b).sum()

    check_grad(build_a, a0)
    a = Var(a0)

    def build_b(v):
        return (a @ v).sum()

    check_grad(build_b, RNG.normal(size=(4, 2)))


def test_broadcast_add_mul_unbroadcasts():
    a = Var(RNG.normal(size=(3, 4)))
    b = Var(RNG.normal(size=(4,)))
    out = (a * b + b).sum()
    out.backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    num = fd_grad(lambda x: float(((Var(a.data) * Var(x) + Var(x)).sum()).data),
                  b.data.copy())
    np.testing.assert_allclose(b.grad, num, rtol=1e-5, atol=1e-8)


def test_sum_mean_axes():
    x0 = RNG.normal(size=(2, 3, 4))
    check_grad(lambda v: (v.sum(axis=1) ** 2.0).sum(), x0)
    check_grad(lambda v: (v.mean(axis=(0, 2)) ** 2.0).sum(), x0)
    check_grad(lambda v: (v.sum(axis=2, keepdims=True) * v).sum(), x0)


def test_reshape_transpose():
    x0 = RNG.normal(size=(2, 6))
    check_grad(lambda v: (v.reshape(3, 4).transpose(1, 0) ** 2.0).sum(), x0)


def test_getitem_slices_and_fancy():
    x0 = RNG.normal(size=(4, 5))
    check_grad(lambda v: (v[1:3, ::2] ** 2.0).sum(), x0)
    idx = np.array([0, 2, 2, 3])
    check_grad(lambda v: (v[idx] ** 2.0).sum(), x0)


def test_getitem_repeated_fancy_indices_accumulate():
    # duplicated indices must add gradients, not overwrite
    x = Var(np.ones(3))
    idx = np.array([1, 1, 1])
    out = x[idx].sum()
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 3.0, 0.0])


def test_concat_stack():
    a0 = RNG.normal(size=(2, 3))
    b = Var(RNG.normal(size=(2, 3)))
    check_grad(lambda v: (concat([v, b], axis=0) ** 2.0).sum(), a0)
    check_grad(lambda v: (stack([v, b], axis=1) ** 2.0).sum(), a0)


def test_logsumexp_matches_fd_and_is_stable():
    x0 = RNG.normal(size=(3, 4))
    check_grad(lambda v: logsumexp(v, axis=1).sum(), x0)
    big = Var(np.array([1000.0, 1000.0]))
    out = logsumexp(big)
    assert np.isfinite(out.data)
    assert out.data == pytest.approx(1000.0 + np.log(2.0))


def test_shared_parent_accumulates():
    x = Var(np.array([2.0]))
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_diamond_graph_single_backward_pass():
    x = Var(np.array([1.5]))
    a = x * 2.0
    b = x * 3.0
    out = (a * b).sum()  # 6 x^2 -> grad 12 x = 18
    out.backward()
    assert x.grad[0] == pytest.approx(18.0)


def test_as_var_passthrough():
    v = Var(np.zeros(2))
    assert as_var(v) is v
    w = as_var(np.ones(2))
    assert isinstance(w, Var)
