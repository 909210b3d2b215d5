import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxograph.autodiff import ShapeError, Tensor
from taxograph.projection import SemanticGraph
from taxograph.reasoning import (AttentionParams, GcnStack, attention_adjacency, gcn_layer, intra_reason,
                                 normalize_adjacency)


def random_adjacency(r, n, p=0.5):
    A = np.triu((r.random((n, n)) < p).astype(float), 1)
    return A + A.T


def test_normalize_pair():
    np.testing.assert_allclose(normalize_adjacency([[0, 1], [1, 0]]), [[0.5, 0.5], [0.5, 0.5]])


def test_normalize_isolated():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((4, 4))), np.eye(4))


def test_normalize_triangle():
    np.testing.assert_allclose(normalize_adjacency(np.ones((3, 3)) - np.eye(3)), np.full((3, 3), 1 / 3))


def test_normalize_rejects_asymmetric():
    with pytest.raises(ValueError):
        normalize_adjacency([[0, 1], [0, 0]])
    with pytest.raises(ShapeError):
        normalize_adjacency(np.zeros((2, 3)))


def _power_iteration(M, iters=500):
    v = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        lam = np.linalg.norm(w)
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_normalize_symmetric_and_contractive(n, p, seed):
    A_hat = normalize_adjacency(random_adjacency(np.random.default_rng(seed), n, p))
    np.testing.assert_allclose(A_hat, A_hat.T, atol=1e-12)
    assert _power_iteration(A_hat) <= 1 + 1e-9


def test_intra_identity_fixed_point(rng):
    Z = np.abs(rng.normal(size=(4, 3)))
    out = intra_reason(SemanticGraph(Tensor(Z)), np.eye(4), GcnStack([Tensor(np.eye(3)) for _ in range(3)]))
    np.testing.assert_array_equal(out.Z.data, Z)


def test_intra_zero_input(rng):
    stack = GcnStack.init(3, 3, rng)
    out = intra_reason(SemanticGraph(Tensor(np.zeros((4, 3)))), normalize_adjacency(np.zeros((4, 4))), stack)
    assert not np.any(out.Z.data)


def test_intra_hand_example():
    out = intra_reason(SemanticGraph(Tensor([[2.0], [0.0]])), np.array([[0.5, 0.5], [0.5, 0.5]]),
                       GcnStack([Tensor([[1.0]])]))
    np.testing.assert_array_equal(out.Z.data, [[1], [1]])


def test_two_layer_composition(rng):
    Z = rng.normal(size=(4, 3))
    A = normalize_adjacency(random_adjacency(rng, 4))
    W1, W2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    out = intra_reason(SemanticGraph(Tensor(Z)), A, GcnStack([Tensor(W1), Tensor(W2)])).Z.data
    oracle = np.maximum(A @ np.maximum(A @ Z @ W1, 0) @ W2, 0)
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_gcn_shape_checks(rng):
    with pytest.raises(ShapeError):
        gcn_layer(Tensor(np.zeros((3, 2))), np.eye(2), Tensor(np.eye(2)))
    with pytest.raises(ShapeError):
        gcn_layer(Tensor(np.zeros((3, 2))), np.eye(3), Tensor(np.eye(3)))
    with pytest.raises(ShapeError):
        GcnStack([Tensor(np.zeros((2, 3)))])
    with pytest.raises(ValueError):
        GcnStack([])


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(5))))
def test_gcn_permutation_equivariant(perm):
    r = np.random.default_rng(3)
    Z, A, W = r.normal(size=(5, 2)), normalize_adjacency(random_adjacency(r, 5)), Tensor(r.normal(size=(2, 2)))
    p = np.array(perm)
    base = gcn_layer(Tensor(Z), A, W).data
    moved = gcn_layer(Tensor(Z[p]), A[np.ix_(p, p)], W).data
    np.testing.assert_allclose(moved, base[p], atol=1e-12)


# ------------------------------------------------------------------ attention

def test_attention_identical_nodes_uniform(rng):
    Z = Tensor(np.tile(rng.normal(size=3), (4, 1)))
    A = attention_adjacency(Z, AttentionParams.init(3, rng)).data
    np.testing.assert_allclose(A, np.full((4, 4), 0.25), atol=1e-15)


def test_attention_single_node(rng):
    A = attention_adjacency(Tensor(rng.normal(size=(1, 2))), AttentionParams.init(2, rng)).data
    np.testing.assert_array_equal(A, [[1.0]])


def test_attention_zero_scorer(rng):
    A = attention_adjacency(Tensor(rng.normal(size=(2, 3))), AttentionParams(Tensor(np.zeros((6, 1))))).data
    np.testing.assert_array_equal(A, [[0.5, 0.5], [0.5, 0.5]])


def test_attention_oracle(rng):
    Z, w = rng.normal(size=(3, 2)), rng.normal(size=(4, 1))
    e = np.array([[float(np.concatenate([Z[i], Z[j]]) @ w[:, 0]) for j in range(3)] for i in range(3)])
    e = np.where(e > 0, e, 0.2 * e)
    oracle = np.exp(e) / np.exp(e).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attention_adjacency(Tensor(Z), AttentionParams(Tensor(w))).data, oracle, atol=1e-14)


def test_attention_mask_respected(rng):
    mask = np.array([[True, False, True], [False, True, False], [True, True, True]])
    A = attention_adjacency(Tensor(rng.normal(size=(3, 2))), AttentionParams.init(2, rng), mask).data
    assert np.all(A[~mask] == 0)
    np.testing.assert_array_equal(A[1], [0, 1, 0])


def test_attention_empty_row_rejected(rng):
    mask = np.array([[False, False], [True, True]])
    with pytest.raises(ValueError):
        attention_adjacency(Tensor(rng.normal(size=(2, 2))), AttentionParams.init(2, rng), mask)


def test_attention_param_shape():
    with pytest.raises(ShapeError):
        AttentionParams(Tensor(np.zeros((3, 1))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_attention_row_stochastic(n, d, seed):
    r = np.random.default_rng(seed)
    A = attention_adjacency(Tensor(r.normal(size=(n, d)) * 3), AttentionParams(Tensor(r.normal(size=(2 * d, 1))))).data
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
