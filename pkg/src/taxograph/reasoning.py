"""Intra-graph reasoning: graph convolution and attention-derived adjacency."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .projection import uniform_init


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric renormalisation ``D^-1/2 (A + I) D^-1/2`` with D the degree of A + I."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency matrix is not symmetric")
    At = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(At.sum(axis=1))
    return At * d[:, None] * d[None, :]


@dataclass
class GcnStack:
    layers: list[Tensor]
    kind: str = "relu"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a GCN stack needs at least one layer")
        for W in self.layers:
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ShapeError(f"GCN weights must be square, got {W.shape}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].shape[0]

    @classmethod
    def init(cls, D: int, T: int, rng: np.random.Generator, kind: str = "relu") -> "GcnStack":
        # He-uniform bound: keeps node-feature scale roughly constant through ReLU layers
        bound = np.sqrt(6.0 / D)
        return cls([Tensor(rng.uniform(-bound, bound, size=(D, D)), requires_grad=True) for _ in range(T)], kind)


def gcn_layer(Z: Tensor, A_hat, W: Tensor, kind: str = "relu") -> Tensor:
    """One propagation step ``sigma(A_hat Z W)``."""
    A = A_hat if isinstance(A_hat, Tensor) else Tensor(A_hat)
    if A.shape != (Z.shape[0], Z.shape[0]):
        raise ShapeError(f"adjacency {A.shape} does not match {Z.shape[0]} nodes")
    if W.shape[0] != Z.shape[1]:
        raise ShapeError(f"GCN weight {W.shape} does not match node dim {Z.shape[1]}")
    return ad.activation(A @ Z @ W, kind)


def intra_reason(g, A_hat, stack: GcnStack):
    """Run every layer of ``stack`` over graph ``g``; returns a graph of the same kind."""
    Z = g.Z
    for W in stack.layers:
        Z = gcn_layer(Z, A_hat, W, stack.kind)
    return g.with_features(Z)


@dataclass
class AttentionParams:
    W_att: Tensor  # 2D x 1
    slope: float = 0.2

    def __post_init__(self) -> None:
        if self.W_att.ndim != 2 or self.W_att.shape[1] != 1 or self.W_att.shape[0] % 2:
            raise ShapeError(f"attention scorer must be 2D x 1, got {self.W_att.shape}")

    @property
    def dim(self) -> int:
        return self.W_att.shape[0] // 2

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, slope: float = 0.2) -> "AttentionParams":
        return cls(uniform_init(rng, (2 * D, 1)), slope)


def attention_scores(Zq: Tensor, Zk: Tensor, params: AttentionParams) -> Tensor:
    """``leaky_relu(W^T [zq_i || zk_j])`` for every query/key pair."""
    D = params.dim
    if Zq.shape[1] != D or Zk.shape[1] != D:
        raise ShapeError(f"attention expects node dim {D}, got {Zq.shape} and {Zk.shape}")
    left = Zq @ ad.slice_rows(params.W_att, 0, D)  # Nq x 1
    right = Zk @ ad.slice_rows(params.W_att, D, 2 * D)  # Nk x 1
    return ad.leaky_relu(left + right.T, params.slope)


def attention_matrix(Zq: Tensor, Zk: Tensor, params: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    if Zq.shape[0] == 0 or Zk.shape[0] == 0:
        return Tensor(np.zeros((Zq.shape[0], Zk.shape[0])))
    return ad.softmax_rows(attention_scores(Zq, Zk, params), mask)


def attention_adjacency(Z: Tensor, params: AttentionParams, neighborhood: np.ndarray | None = None) -> Tensor:
    """Row-stochastic N x N adjacency from pairwise attention over ``neighborhood``."""
    return attention_matrix(Z, Z, params, neighborhood)
