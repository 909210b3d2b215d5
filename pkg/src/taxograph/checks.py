"""Finite-difference gradient checks over every differentiable path of the model.

Each path builds a small random instance from a seeded generator and hands
``grad_check`` a scalar function of all of its tensors.  Outputs are reduced
against a fixed random weighting so that no gradient is trivially uniform.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .panoptic import PanopticConfig, PanopticModel
from .projection import ProjectionParams, SemanticGraph, project, reproject
from .reasoning import AttentionParams, GcnStack, attention_adjacency, intra_reason, normalize_adjacency
from .taxonomy import embedding_table, taxonomy_from_dict
from .training import GraphModel, ModelConfig
from .transfer import apply_transfer, make_transfer_spec

Instance = tuple[Callable[..., Tensor], list[Tensor]]


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _weighted_sum(out: Tensor, R: np.ndarray) -> Tensor:
    return ad.sum(out * Tensor(R))


def _random_adjacency(rng: np.random.Generator, n: int) -> np.ndarray:
    A = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    return A + A.T


def projection_instance(rng: np.random.Generator) -> Instance:
    H, W, C, N, D = (int(v) for v in rng.integers(2, 4, size=5))
    X = _param(rng, H, W, C)
    params = ProjectionParams(_param(rng, C, N), _param(rng, C, D), _param(rng, D, C))
    R = rng.normal(size=(H, W, C))

    def f(X, P, W1, W_re):
        p = ProjectionParams(P, W1, W_re)
        return _weighted_sum(reproject(project(X, p), X, p), R)

    return f, [X, params.P, params.W1, params.W_re]


def intra_instance(rng: np.random.Generator, T: int = 3) -> Instance:
    N, D = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    A_hat = normalize_adjacency(_random_adjacency(rng, N))
    Z = _param(rng, N, D)
    layers = [_param(rng, D, D) for _ in range(T)]
    R = rng.normal(size=(N, D))

    def f(Z, *Ws):
        return _weighted_sum(intra_reason(SemanticGraph(Z), A_hat, GcnStack(list(Ws))).Z, R)

    return f, [Z, *layers]


def _transfer_instance(rng: np.random.Generator, scheme: str) -> Instance:
    Nt, Ns, D = (int(v) for v in rng.integers(2, 5, size=3))
    spec = make_transfer_spec(scheme, [f"t{i}" for i in range(Nt)], [f"s{i}" for i in range(Ns)], D, D, rng)
    spec.W_tr = _param(rng, D, D)
    Zt, Zs = _param(rng, Nt, D), _param(rng, Ns, D)
    R = rng.normal(size=(Nt, D))
    extra = []
    if spec.learnable is not None:
        extra.append(spec.learnable)
    if spec.attention is not None:
        spec.attention.W_att.data = rng.normal(size=spec.attention.W_att.shape)
        extra.append(spec.attention.W_att)

    # grad_check perturbs the listed tensors in place, so the TransferSpec sees every change
    return (lambda Zt, Zs, *_: _weighted_sum(apply_transfer(spec, Zt, Zs), R)), [Zt, Zs, spec.W_tr, *extra]


def transfer_feature_instance(rng: np.random.Generator) -> Instance:
    return _transfer_instance(rng, "feature")


def transfer_learnable_instance(rng: np.random.Generator) -> Instance:
    return _transfer_instance(rng, "learnable")


def transfer_attention_instance(rng: np.random.Generator) -> Instance:
    return _transfer_instance(rng, "attention")


def attention_instance(rng: np.random.Generator) -> Instance:
    N, D = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    Z = _param(rng, N, D)
    W_att = _param(rng, 2 * D, 1)
    R = rng.normal(size=(N, N))
    mask = None
    if rng.random() < 0.5:
        mask = rng.random((N, N)) < 0.7
        mask[np.arange(N), np.arange(N)] = True

    def f(Z, W_att):
        return _weighted_sum(attention_adjacency(Z, AttentionParams(W_att), mask), R)

    return f, [Z, W_att]


TOY_TAXONOMY = {
    "domains": [
        {"name": "fine", "labels": ["background", "p", "q"]},
        {"name": "coarse", "labels": ["background", "r"]},
    ],
    "adjacency": {"fine": [["p", "q"]]},
    "subordinate": [["fine:background", "coarse:background"], ["p", "r"], ["q", "r"]],
}


def composite_instance(rng: np.random.Generator, scheme: str = "feature+semantic+learnable") -> Instance:
    """Whole forward pass (T=3 rounds of reasoning and transfer) into a cross-entropy loss."""
    t = taxonomy_from_dict(TOY_TAXONOMY)
    emb = embedding_table({lab: rng.normal(size=4) for lab in ("background", "p", "q", "r")})
    C, D = 3, 3
    model = GraphModel(t, ModelConfig(channels=C, dim=D, depth=3, scheme=scheme), emb,
                       seed=int(rng.integers(2**31)))
    model.add_domain("fine")
    model.add_domain("coarse")
    for p in model.params.values():
        p.data = rng.normal(size=p.shape) * 0.5
    H = W = 3
    X = _param(rng, H, W, C)
    active = "fine" if rng.random() < 0.5 else "coarse"
    targets = rng.integers(0, len(model.labels(active)), size=H * W)
    inputs = [X, *model.params.values()]
    return (lambda X, *_: ad.cross_entropy(model.logits(X, active), targets)), inputs


def panoptic_instance(rng: np.random.Generator) -> Instance:
    """Semantic + instance graphs with attention coupling into a cross-entropy loss."""
    t = taxonomy_from_dict({
        "domains": [{"name": "stuff", "labels": ["a", "b"]}, {"name": "thing", "labels": ["c"]}],
        "things": ["c"],
    })
    model = PanopticModel(t, PanopticConfig(channels=3, dim=3, depth=2), seed=int(rng.integers(2**31)))
    for p in model.params.values():
        p.data = rng.normal(size=p.shape) * 0.5
    H = W = 4
    X = _param(rng, H, W, 3)
    boxes = []
    for _ in range(int(rng.integers(1, 3))):
        y0, x0 = (int(v) for v in rng.integers(0, 3, size=2))
        boxes.append((y0, x0, int(rng.integers(y0 + 1, H + 1)), int(rng.integers(x0 + 1, W + 1))))
    targets = rng.integers(0, len(model.names), size=H * W)
    inputs = [X, *model.params.values()]
    return (lambda X, *_: ad.cross_entropy(model.logits(X, boxes), targets)), inputs


PATHS: dict[str, Callable[[np.random.Generator], Instance]] = {
    "projection": projection_instance,
    "intra": intra_instance,
    "transfer-feature": transfer_feature_instance,
    "transfer-learnable": transfer_learnable_instance,
    "transfer-attention": transfer_attention_instance,
    "attention": attention_instance,
    "composite": composite_instance,
    "panoptic": panoptic_instance,
}


@dataclass
class PathResult:
    path: str
    instances: int
    max_rel_error: float
    checked: int
    skipped: int
    failed: int
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.failed == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.path:<20} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g} "
                f"instances={self.instances} checked={self.checked} skipped={self.skipped} "
                f"failed={self.failed} time={self.seconds:.2f}s")


def check_path(path: str, instances: int = 20, seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> PathResult:
    if path not in PATHS:
        raise KeyError(f"unknown gradcheck path {path!r}; choose from {', '.join(PATHS)}")
    build = PATHS[path]
    start = time.perf_counter()
    worst, checked, skipped, failed = 0.0, 0, 0, 0
    for i in range(instances):
        rng = np.random.default_rng([seed, zlib.crc32(path.encode()), i])
        f, inputs = build(rng)
        rep: GradCheckReport = grad_check(f, inputs, step=step, tol=tol)
        worst = max(worst, rep.max_rel_error)
        checked += rep.checked
        skipped += rep.skipped
        failed += 0 if rep.passed else 1
    return PathResult(path, instances, worst, checked, skipped, failed, time.perf_counter() - start, tol)


def run_gradchecks(paths: list[str] | None = None, instances: int = 20, seed: int = 0,
                   tol: float = 1e-4) -> list[PathResult]:
    return [check_path(p, instances, seed, tol) for p in (paths or list(PATHS))]
