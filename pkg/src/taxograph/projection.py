"""Feature-map <-> graph projections.

Semantic graphs use a learned soft pixel-to-node assignment ``X1 = X P``;
node features are ``Z = X1^T X W1``, optionally divided by the pixel count
(``pixel_mean``) so node magnitudes do not grow with image area.  The same
assignment is reused on the way back: ``X_p = X1 (Z_e W_re)``.

Instance graphs pool features inside region boxes (one node per box).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, int], fan_in: int | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in if fan_in is not None else shape[0])
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class ProjectionParams:
    P: Tensor  # C x N
    W1: Tensor  # C x D
    W_re: Tensor  # D x C

    def __post_init__(self) -> None:
        C, N = self.P.shape
        if self.W1.shape[0] != C:
            raise ShapeError(f"W1 {self.W1.shape} inconsistent with P {self.P.shape}")
        if self.W_re.shape != (self.W1.shape[1], C):
            raise ShapeError(f"W_re {self.W_re.shape} must be D x C = {(self.W1.shape[1], C)}")

    @property
    def channels(self) -> int:
        return self.P.shape[0]

    @property
    def nodes(self) -> int:
        return self.P.shape[1]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, C: int, N: int, D: int, rng: np.random.Generator) -> "ProjectionParams":
        return cls(uniform_init(rng, (C, N)), uniform_init(rng, (C, D)), uniform_init(rng, (D, C)))


@dataclass
class SemanticGraph:
    Z: Tensor  # N x D
    assignment: Tensor | None = None  # HW x N, cached X1
    domain: str = ""

    @property
    def nodes(self) -> int:
        return self.Z.shape[0]

    def with_features(self, Z: Tensor) -> "SemanticGraph":
        return SemanticGraph(Z, self.assignment, self.domain)


def _flatten(X: Tensor) -> Tensor:
    if X.ndim == 3:
        H, W, C = X.shape
        return ad.reshape(X, (H * W, C))
    if X.ndim == 2:
        return X
    raise ShapeError(f"expected an H x W x C feature map, got {X.shape}")


def _scale(n_pixels: int, pixel_mean: bool) -> float:
    return 1.0 / n_pixels if pixel_mean and n_pixels else 1.0


def project(X: Tensor, params: ProjectionParams, domain: str = "", pixel_mean: bool = True) -> SemanticGraph:
    flat = _flatten(X)
    if flat.shape[1] != params.channels:
        raise ShapeError(f"feature map has {flat.shape[1]} channels, projection expects {params.channels}")
    X1 = flat @ params.P
    X2 = X1.T @ flat
    s = _scale(flat.shape[0], pixel_mean)
    if s != 1.0:
        X2 = X2 * s
    return SemanticGraph(X2 @ params.W1, X1, domain)


def project_closed_form(X: Tensor, params: ProjectionParams, pixel_mean: bool = True) -> Tensor:
    """``P^T X^T X W1`` evaluated left to right as a single product chain."""
    flat = _flatten(X)
    Z = params.P.T @ flat.T @ flat @ params.W1
    s = _scale(flat.shape[0], pixel_mean)
    return Z * s if s != 1.0 else Z


def reproject(g: SemanticGraph, X: Tensor, params: ProjectionParams) -> Tensor:
    """Residual re-projection ``X + X1 (Z W_re)`` back onto the feature map."""
    if g.assignment is None:
        raise ValueError("reproject needs a graph produced by project() (no cached assignment)")
    flat = _flatten(X)
    if g.assignment.shape[0] != flat.shape[0]:
        raise ShapeError(f"cached assignment covers {g.assignment.shape[0]} pixels, map has {flat.shape[0]}")
    Xp = g.assignment @ (g.Z @ params.W_re)
    return X + ad.reshape(Xp, X.shape)


# --------------------------------------------------------------------------
# instance graphs
# --------------------------------------------------------------------------

Box = tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive


@dataclass
class InstanceGraph:
    Z: Tensor  # N_ins x D
    regions: list[Box]

    @property
    def nodes(self) -> int:
        return len(self.regions)

    def with_features(self, Z: Tensor) -> "InstanceGraph":
        return InstanceGraph(Z, self.regions)


def validate_box(box: Sequence[int], H: int, W: int) -> Box:
    y0, x0, y1, x1 = (int(v) for v in box)
    if not (0 <= y0 < y1 <= H and 0 <= x0 < x1 <= W):
        raise ValueError(f"degenerate or out-of-bounds box {tuple(box)} for a {H}x{W} map")
    return y0, x0, y1, x1


def pooling_matrix(regions: Sequence[Box], H: int, W: int) -> np.ndarray:
    """N_ins x HW matrix whose rows average the pixels of each box."""
    M = np.zeros((len(regions), H * W))
    for i, box in enumerate(regions):
        y0, x0, y1, x1 = validate_box(box, H, W)
        cover = np.zeros((H, W))
        cover[y0:y1, x0:x1] = 1.0 / ((y1 - y0) * (x1 - x0))
        M[i] = cover.reshape(-1)
    return M


def region_owner(regions: Sequence[Box], H: int, W: int) -> np.ndarray:
    """Per-pixel index of the covering region (last one wins), -1 where uncovered."""
    owner = np.full((H, W), -1, dtype=np.int64)
    for i, box in enumerate(regions):
        y0, x0, y1, x1 = validate_box(box, H, W)
        owner[y0:y1, x0:x1] = i
    return owner


def instance_project(X: Tensor, regions: Sequence[Sequence[int]], W: Tensor) -> InstanceGraph:
    H, Wd, C = X.shape
    if W.shape[0] != C:
        raise ShapeError(f"instance weight {W.shape} does not match {C} channels")
    boxes = [validate_box(b, H, Wd) for b in regions]
    if not boxes:
        return InstanceGraph(Tensor(np.zeros((0, W.shape[1]))), [])
    pooled = Tensor(pooling_matrix(boxes, H, Wd)) @ _flatten(X)
    return InstanceGraph(pooled @ W, boxes)


def instance_reproject(g: InstanceGraph, X: Tensor) -> Tensor:
    """Append each pixel's region node feature to its channels (C + D output).

    Pixels outside every region get zeros in the appended block; where boxes
    overlap, the highest-index region wins.
    """
    H, W, C = X.shape
    D = g.Z.shape[1]
    flat = _flatten(X)
    if not g.regions:
        return ad.reshape(ad.concat_channels(flat, Tensor(np.zeros((H * W, D)))), (H, W, C + D))
    owner = region_owner(g.regions, H, W).reshape(-1)
    S = np.zeros((H * W, len(g.regions)))
    covered = owner >= 0
    S[np.nonzero(covered)[0], owner[covered]] = 1.0
    return ad.reshape(ad.concat_channels(flat, Tensor(S) @ g.Z), (H, W, C + D))
