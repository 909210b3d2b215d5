import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxograph.autodiff import ShapeError, Tensor
from taxograph.projection import (InstanceGraph, ProjectionParams, instance_project, instance_reproject,
                                  pooling_matrix, project, project_closed_form, region_owner, reproject,
                                  validate_box)


def params(P, W1, W_re):
    return ProjectionParams(Tensor(np.asarray(P, float)), Tensor(np.asarray(W1, float)), Tensor(np.asarray(W_re, float)))


def random_params(r, C, N, D):
    return params(r.normal(size=(C, N)), r.normal(size=(C, D)), r.normal(size=(D, C)))


def test_project_hand_example():
    p = params([[1], [1]], np.eye(2), np.eye(2))
    g = project(Tensor([[[3.0, 4.0]]]), p, pixel_mean=False)
    np.testing.assert_array_equal(g.assignment.data, [[7]])
    np.testing.assert_array_equal(g.Z.data, [[21, 28]])


def test_project_pixel_mean_divides_by_area(rng):
    X = Tensor(rng.normal(size=(3, 4, 2)))
    p = random_params(rng, 2, 3, 5)
    np.testing.assert_allclose(project(X, p, pixel_mean=True).Z.data * 12, project(X, p, pixel_mean=False).Z.data,
                               rtol=1e-12)


def test_project_zero_input(rng):
    g = project(Tensor(np.zeros((2, 3, 4))), random_params(rng, 4, 3, 2))
    assert not np.any(g.Z.data)


def test_project_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        project(Tensor(np.zeros((2, 2, 3))), random_params(rng, 4, 2, 2))


def test_params_shape_checks(rng):
    with pytest.raises(ShapeError):
        params(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        params(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.integers(1, 5),
       st.booleans(), st.integers(0, 2**32 - 1))
def test_stepwise_equals_closed_form(H, W, C, N, D, mean, seed):
    r = np.random.default_rng(seed)
    X, p = Tensor(r.normal(size=(H, W, C))), random_params(r, C, N, D)
    np.testing.assert_allclose(project(X, p, pixel_mean=mean).Z.data, project_closed_form(X, p, mean).data,
                               atol=1e-9, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 2**32 - 1))
def test_project_linear_in_W1(alpha, seed):
    r = np.random.default_rng(seed)
    X, p = Tensor(r.normal(size=(3, 3, 4))), random_params(r, 4, 3, 2)
    scaled = params(p.P.data, alpha * p.W1.data, p.W_re.data)
    np.testing.assert_allclose(project(X, scaled).Z.data, alpha * project(X, p).Z.data, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_project_pixel_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(4, 3, 2))
    p = random_params(r, 2, 3, 3)
    perm = r.permutation(12)
    Xp = X.reshape(12, 2)[perm].reshape(4, 3, 2)
    np.testing.assert_allclose(project(Tensor(Xp), p).Z.data, project(Tensor(X), p).Z.data, atol=1e-12)


# ------------------------------------------------------------------ reproject

def test_reproject_hand_example():
    p = params([[1], [1]], np.eye(2), np.eye(2))
    X = Tensor([[[3.0, 4.0]]])
    g = project(X, p, pixel_mean=False).with_features(Tensor([[1.0, 0.0]]))
    np.testing.assert_array_equal(reproject(g, X, p).data, [[[10, 4]]])


def test_reproject_zero_nodes_identity(rng):
    X = Tensor(rng.normal(size=(3, 3, 4)))
    p = random_params(rng, 4, 2, 3)
    g = project(X, p).with_features(Tensor(np.zeros((2, 3))))
    assert np.array_equal(reproject(g, X, p).data, X.data)


def test_reproject_zero_weights_identity(rng):
    X = Tensor(rng.normal(size=(3, 3, 4)))
    p = random_params(rng, 4, 2, 3)
    p0 = params(p.P.data, p.W1.data, np.zeros((3, 4)))
    assert np.array_equal(reproject(project(X, p0), X, p0).data, X.data)


def test_reproject_needs_assignment(rng):
    p = random_params(rng, 2, 2, 2)
    from taxograph.projection import SemanticGraph
    with pytest.raises(ValueError):
        reproject(SemanticGraph(Tensor(np.zeros((2, 2)))), Tensor(np.zeros((1, 1, 2))), p)


# ------------------------------------------------------------------ instances

def test_instance_constant_map():
    v = np.array([1.0, -2.0, 0.5])
    X = Tensor(np.broadcast_to(v, (4, 5, 3)).copy())
    W = np.arange(6.0).reshape(3, 2)
    g = instance_project(X, [(0, 0, 4, 5)], Tensor(W))
    np.testing.assert_allclose(g.Z.data, [v @ W])


def test_instance_identical_regions(rng):
    X = Tensor(rng.normal(size=(4, 4, 2)))
    g = instance_project(X, [(1, 0, 3, 2), (1, 0, 3, 2)], Tensor(rng.normal(size=(2, 3))))
    assert np.array_equal(g.Z.data[0], g.Z.data[1])


def test_instance_mean_oracle():
    g = instance_project(Tensor([[[1.0]], [[3.0]]]), [(0, 0, 2, 1)], Tensor([[1.0]]))
    np.testing.assert_array_equal(g.Z.data, [[2.0]])


@pytest.mark.parametrize("box", [(0, 0, 0, 1), (0, 0, 3, 1), (-1, 0, 1, 1), (1, 1, 1, 2)])
def test_invalid_boxes(box):
    with pytest.raises(ValueError):
        validate_box(box, 2, 2)


def test_pooling_rows_average():
    M = pooling_matrix([(0, 0, 2, 2), (1, 1, 3, 3)], 3, 3)
    np.testing.assert_allclose(M.sum(axis=1), 1.0)
    assert np.count_nonzero(M[0]) == 4


def test_instance_reproject_zero_nodes(rng):
    X = Tensor(rng.normal(size=(2, 2, 3)))
    out = instance_reproject(InstanceGraph(Tensor(np.zeros((1, 2))), [(0, 0, 1, 2)]), X)
    np.testing.assert_array_equal(out.data[..., :3], X.data)
    assert not np.any(out.data[..., 3:])


def test_instance_reproject_single_pixel():
    out = instance_reproject(InstanceGraph(Tensor([[5.0, 6.0]]), [(0, 0, 1, 1)]), Tensor([[[1.0]]]))
    np.testing.assert_array_equal(out.data, [[[1, 5, 6]]])


def test_instance_reproject_later_region_wins():
    X = Tensor(np.zeros((1, 3, 1)))
    g = InstanceGraph(Tensor([[1.0], [2.0]]), [(0, 0, 1, 2), (0, 1, 1, 3)])
    np.testing.assert_array_equal(instance_reproject(g, X).data[0, :, 1], [1, 2, 2])
    np.testing.assert_array_equal(region_owner(g.regions, 1, 3), [[0, 1, 1]])


def test_instance_reproject_no_regions():
    out = instance_reproject(InstanceGraph(Tensor(np.zeros((0, 2))), []), Tensor(np.ones((2, 2, 1))))
    assert out.shape == (2, 2, 3)
    assert not np.any(out.data[..., 1:])
