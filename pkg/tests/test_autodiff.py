import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taxograph import autodiff as ad
from taxograph.autodiff import ShapeError, Tensor, backward, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def central_diff(f, x, h=1e-5):
    """Independent numerical gradient of a scalar numpy function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_hand_product():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_gradient_rows():
    A = leaf([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[5.0, 6.0], [7.0, 8.0]])
    backward(ad.sum(A @ Tensor(B)))
    np.testing.assert_allclose(A.grad, [[11, 15], [11, 15]])
    num = central_diff(lambda a: (a @ B).sum(), A.data.copy())
    np.testing.assert_allclose(A.grad, num, rtol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ------------------------------------------------------------------ activations

def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_leaky_relu_value():
    np.testing.assert_allclose(ad.leaky_relu(Tensor([-1.0]), 0.2).data, [-0.2])


def test_relu_gradient():
    x = leaf([-1.0, 2.0])
    backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_relu_subgradient_at_zero():
    x = leaf([0.0])
    backward(ad.sum(ad.relu(x)))
    assert x.grad[0] == 0.0
    y = leaf([0.0])
    backward(ad.sum(ad.leaky_relu(y, 0.2)))
    assert y.grad[0] == pytest.approx(0.2)


def test_leaky_slope_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        ad.leaky_relu(Tensor([1.0]), 1.5)


def test_unknown_activation():
    with pytest.raises(ValueError):
        ad.activation(Tensor([1.0]), "tanhish")


# ------------------------------------------------------------------ softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_inputs():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_ln2():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


def test_softmax_mask_zeroes_entries():
    s = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert s[0, 1] == 0.0
    np.testing.assert_allclose(s[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-500, 500, allow_nan=False)))
def test_softmax_rows_stochastic(x):
    s = ad.softmax_rows(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ concat

def test_concat_values():
    np.testing.assert_array_equal(ad.concat_channels(Tensor([1.0, 2.0]), Tensor([3.0])).data, [1, 2, 3])


def test_concat_empty_operand():
    a = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(ad.concat_channels(a, Tensor(np.zeros((1, 0)))).data, a.data)


def test_concat_gradient_splits():
    a, b = leaf([0.0, 0.0]), leaf([0.0])
    g = np.array([2.0, 3.0, 5.0])
    backward(ad.sum(ad.concat_channels(a, b) * Tensor(g)))
    np.testing.assert_array_equal(a.grad, [2, 3])
    np.testing.assert_array_equal(b.grad, [5])


def test_concat_leading_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


# ------------------------------------------------------------------ cross-entropy

def test_cross_entropy_saturated():
    assert ad.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-4)


def test_cross_entropy_ln2():
    assert ad.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("L", [2, 5, 11])
def test_cross_entropy_uniform(L):
    assert ad.cross_entropy(Tensor(np.full((3, L), 0.7)), [0, 1, L - 1]).item() == pytest.approx(math.log(L))


def test_cross_entropy_target_range():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_gradient_matches_oracle(rng):
    z = rng.normal(size=(4, 3))
    t = np.array([0, 2, 1, 1])

    def ce(x):
        x = x - x.max(axis=1, keepdims=True)
        return float(np.mean(np.log(np.exp(x).sum(axis=1)) - x[np.arange(4), t]))

    Z = leaf(z)
    backward(ad.cross_entropy(Z, t))
    np.testing.assert_allclose(Z.grad, central_diff(ce, z), rtol=1e-6, atol=1e-10)


# ------------------------------------------------------------------ backward

@pytest.mark.parametrize("shape", [(3,), (2, 4), (2, 2, 3)])
def test_sum_gradient_ones(shape):
    x = leaf(np.zeros(shape))
    backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_accumulation_across_reuse():
    x = leaf(np.arange(3.0))
    backward(ad.sum(ad.concat_channels(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_diamond_graph_accumulates():
    x = leaf([1.5])
    y = x * x + x * Tensor([3.0])
    backward(ad.sum(y))
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        backward(leaf([1.0, 2.0]) * Tensor([1.0, 1.0]))


def test_composite_relu_matmul_matches_fd(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    rep = grad_check(lambda a, b: ad.sum(ad.relu(a @ b)), [leaf(A), leaf(B)])
    assert rep.passed and rep.checked > 0


def test_backward_deterministic(rng):
    A, B = leaf(rng.normal(size=(5, 5))), leaf(rng.normal(size=(5, 5)))
    loss = ad.cross_entropy(ad.relu(A @ B), [0, 1, 2, 3, 4])
    first = backward(loss)
    g1 = (A.grad.copy(), B.grad.copy())
    backward(loss)
    assert np.array_equal(g1[0], A.grad) and np.array_equal(g1[1], B.grad)
    assert len(first) >= 3


def test_tape_topological_order(rng):
    A, B = leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 2)))
    C = A @ B
    loss = ad.sum(ad.relu(C + A) * C)
    tape = ad.Tape.record(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


def test_non_differentiable_inputs_get_no_grad():
    x, c = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
    backward(ad.sum(x * c))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3, 4])


# ------------------------------------------------------------------ grad_check

def test_grad_check_matmul_tight(rng):
    rep = grad_check(lambda a, b: ad.sum(a @ b), [leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(2, 4)))])
    assert rep.max_rel_error < 1e-6


def test_grad_check_cross_entropy(rng):
    t = [0, 1, 2, 1]
    rep = grad_check(lambda z: ad.cross_entropy(z, t), [leaf(rng.normal(size=(4, 3)))], tol=1e-4)
    assert rep.passed


def test_grad_check_constant():
    rep = grad_check(lambda x: ad.sum(Tensor([2.0])), [leaf([1.0, 2.0])])
    assert rep.passed and rep.max_rel_error == 0.0


def test_grad_check_skips_kinks():
    rep = grad_check(lambda x: ad.sum(ad.relu(x)), [leaf([1e-7, 1.0])], step=1e-5)
    assert rep.skipped == 1 and rep.checked == 1


def test_grad_check_catches_wrong_gradient():
    def bad(x):
        return ad._make(np.asarray((x.data ** 2).sum()), (x,), lambda g: (g * x.data,), "bad")

    rep = grad_check(bad, [leaf([1.0, -2.0])])
    assert not rep.passed and rep.failures


def test_grad_check_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: ad.sum(x), [leaf([1.0])], step=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recorded_ops_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    A, B = leaf(r.normal(size=(3, 3))), leaf(r.normal(size=(3, 3)))
    c = Tensor(r.normal(size=(3, 6)))

    def f(a, b):
        s = ad.softmax_rows(ad.leaky_relu(a @ b, 0.2))
        j = ad.concat_channels(s, ad.relu(a - b))
        return ad.mean(j * c) + ad.sum(ad.cosine_similarity(a, b))

    assert grad_check(f, [A, B]).passed


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    q = [np.linalg.qr(r.normal(size=(8, 8)))[0] + 2 * np.eye(8) for _ in range(3)]
    A, B, C = (Tensor(m) for m in q)
    np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, atol=1e-9, rtol=0)
