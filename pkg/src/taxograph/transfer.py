"""Inter-graph transfer: moving node features from a source graph into a target graph.

The update is residual, ``Z_t + sigma(A_tr Z_s W_tr)``.  ``A_tr`` (N_t x N_s)
comes from one of several schemes:

* ``handcraft``  fixed 0/1 subordination indicator from the taxonomy
* ``learnable``  a trainable matrix
* ``feature``    row softmax of cosine similarity between current node features
* ``semantic``   row softmax of cosine similarity between label embeddings
* ``attention``  cross-graph attention scores (target queries, source keys)

Schemes joined with ``+`` are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import ConfigError
from .projection import uniform_init
from .reasoning import AttentionParams, attention_matrix
from .taxonomy import EmbeddingTable, LabelTaxonomy, handcraft_transfer, semantic_transfer

SCHEMES = ("handcraft", "learnable", "feature", "semantic", "attention")
_ALIASES = {
    "feature_similarity": "feature",
    "semantic_similarity": "semantic",
    "handcrafted": "handcraft",
}


def parse_scheme(text: str | Sequence[str]) -> tuple[str, ...]:
    parts = text.split("+") if isinstance(text, str) else list(text)
    out = []
    for p in parts:
        p = _ALIASES.get(p.strip(), p.strip())
        if p not in SCHEMES:
            raise ConfigError(f"unknown transfer scheme {p!r}; choose from {', '.join(SCHEMES)}")
        if p not in out:
            out.append(p)
    if not out:
        raise ConfigError("empty transfer scheme")
    return tuple(out)


@dataclass
class TransferSpec:
    scheme: tuple[str, ...]
    W_tr: Tensor  # D_s x D_t
    fixed: dict[str, np.ndarray] = field(default_factory=dict)  # handcraft / semantic
    learnable: Tensor | None = None
    attention: AttentionParams | None = None
    weights: tuple[float, ...] | None = None
    activation: str = "relu"

    @property
    def name(self) -> str:
        return "+".join(self.scheme)

    def parameters(self) -> dict[str, Tensor]:
        out = {"W_tr": self.W_tr}
        if self.learnable is not None:
            out["A_tr"] = self.learnable
        if self.attention is not None:
            out["W_att"] = self.attention.W_att
        return out


def init_learnable(n_target: int, n_source: int, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(0.0, 2.0 / n_source, size=(n_target, n_source)), requires_grad=True)


def make_transfer_spec(
    scheme: str | Sequence[str],
    target_labels: Sequence[str],
    source_labels: Sequence[str],
    dim_target: int,
    dim_source: int,
    rng: np.random.Generator,
    *,
    taxonomy: LabelTaxonomy | None = None,
    target: str | None = None,
    source: str | None = None,
    embeddings: EmbeddingTable | None = None,
    weights: Sequence[float] | None = None,
    activation: str = "relu",
    precomputed: dict[str, np.ndarray] | None = None,
) -> TransferSpec:
    """Build a spec; ``precomputed`` supplies fixed matrices (e.g. from a checkpoint)."""
    parts = parse_scheme(scheme)
    nt, ns = len(target_labels), len(source_labels)
    fixed: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in (precomputed or {}).items()
                                    if k in parts}
    if "handcraft" in parts and "handcraft" not in fixed:
        if taxonomy is None or target is None or source is None:
            raise ConfigError("handcraft transfer needs a taxonomy and both domain names")
        fixed["handcraft"] = handcraft_transfer(taxonomy, source, target)
    if "semantic" in parts and "semantic" not in fixed:
        if embeddings is None:
            raise ConfigError("semantic transfer needs an embedding table")
        fixed["semantic"] = semantic_transfer(embeddings, target_labels, source_labels)
    W_tr = uniform_init(rng, (dim_source, dim_target))
    learnable = init_learnable(nt, ns, rng) if "learnable" in parts else None
    attention = None
    if "attention" in parts:
        if dim_source != dim_target:
            raise ConfigError("attention transfer needs equal node dimensions")
        attention = AttentionParams.init(dim_target, rng)
    if weights is not None and len(weights) != len(parts):
        raise ConfigError(f"{len(weights)} combination weights for {len(parts)} schemes")
    return TransferSpec(parts, W_tr, fixed, learnable, attention,
                        tuple(weights) if weights is not None else None, activation)


def feature_similarity_matrix(Z_t: Tensor, Z_s: Tensor) -> Tensor:
    """Row softmax over source nodes of cosine similarity (rows = target nodes)."""
    if Z_t.shape[0] == 0 or Z_s.shape[0] == 0:
        return Tensor(np.zeros((Z_t.shape[0], Z_s.shape[0])))
    return ad.softmax_rows(ad.cosine_similarity(Z_t, Z_s))


def build_transfer(spec: TransferSpec, Z_t: Tensor, Z_s: Tensor) -> Tensor:
    members: list[Tensor] = []
    for part in spec.scheme:
        if part in spec.fixed:
            members.append(Tensor(spec.fixed[part]))
        elif part == "learnable":
            if spec.learnable is None:
                raise ConfigError("learnable scheme without a parameter matrix")
            members.append(spec.learnable)
        elif part == "feature":
            members.append(feature_similarity_matrix(Z_t, Z_s))
        elif part == "attention":
            if spec.attention is None:
                raise ConfigError("attention scheme without attention parameters")
            members.append(attention_matrix(Z_t, Z_s, spec.attention))
        else:
            raise ConfigError(f"scheme {part!r} is missing its context")
    expected = (Z_t.shape[0], Z_s.shape[0])
    for m in members:
        if m.shape != expected:
            raise ShapeError(f"transfer matrix {m.shape} does not match {expected}")
    if len(members) == 1:
        return members[0]
    w = spec.weights or tuple(1.0 / len(members) for _ in members)
    out = members[0] * w[0]
    for m, wi in zip(members[1:], w[1:]):
        out = out + m * wi
    return out


def inter_transfer(Z_t: Tensor, Z_s: Tensor, A_tr, W_tr: Tensor, kind: str = "relu") -> Tensor:
    A = A_tr if isinstance(A_tr, Tensor) else Tensor(A_tr)
    if A.shape != (Z_t.shape[0], Z_s.shape[0]):
        raise ShapeError(f"A_tr {A.shape} does not map {Z_s.shape[0]} source to {Z_t.shape[0]} target nodes")
    if W_tr.shape != (Z_s.shape[1], Z_t.shape[1]):
        raise ShapeError(f"W_tr {W_tr.shape} must be {(Z_s.shape[1], Z_t.shape[1])}")
    return Z_t + ad.activation(A @ Z_s @ W_tr, kind)


def transfer_message(spec: TransferSpec, Z_t: Tensor, Z_s: Tensor) -> Tensor:
    """``sigma(A_tr Z_s W_tr)`` for this spec; the residual add is left to the caller."""
    A = build_transfer(spec, Z_t, Z_s)
    return ad.activation(A @ Z_s @ spec.W_tr, spec.activation)


def apply_transfer(spec: TransferSpec, Z_t: Tensor, Z_s: Tensor) -> Tensor:
    return inter_transfer(Z_t, Z_s, build_transfer(spec, Z_t, Z_s), spec.W_tr, spec.activation)


def bidirectional_step(g_a, g_b, spec_ab: TransferSpec | None, spec_ba: TransferSpec | None,
                       mode: str = "sync"):
    """Exchange messages between two graphs.

    ``spec_ab`` carries b into a, ``spec_ba`` carries a into b; ``None``
    disables that direction.  In ``sync`` mode both updates read the
    pre-step states; ``sequential`` updates a first and lets b see the new a.
    """
    if mode not in ("sync", "sequential"):
        raise ConfigError(f"unknown bidirectional mode {mode!r}")
    Za, Zb = g_a.Z, g_b.Z
    new_a = apply_transfer(spec_ab, Za, Zb) if spec_ab is not None else Za
    src_for_b = new_a if mode == "sequential" else Za
    new_b = apply_transfer(spec_ba, Zb, src_for_b) if spec_ba is not None else Zb
    return g_a.with_features(new_a), g_b.with_features(new_b)
