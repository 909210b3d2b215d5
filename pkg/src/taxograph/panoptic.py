"""Panoptic variant: a semantic graph coupled to a region-based instance graph.

The semantic graph is projected from the feature map over the combined
stuff + thing label space.  The instance graph has one node per proposal
box (mean-pooled features times a learned matrix).  Each round runs a GCN
layer on the semantic graph, an attention-adjacency layer on the instance
graph, and attention transfer in both directions.  The semantic graph is
re-projected residually; the instance nodes are then concatenated onto the
pixels of their boxes, and a linear head labels every pixel.

At inference, thing pixels inherit the identity of the box that owns them,
which turns the per-pixel labels into panoptic segments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .metrics import panoptic_quality_dataset
from .projection import (InstanceGraph, ProjectionParams, SemanticGraph, instance_project,
                         instance_reproject, project, region_owner, reproject, uniform_init)
from .reasoning import AttentionParams, GcnStack, attention_adjacency, gcn_layer, normalize_adjacency
from .synthetic import SceneSample, panoptic_label_space, panoptic_segments
from .taxonomy import LabelTaxonomy, intra_adjacency
from .transfer import TransferSpec, bidirectional_step, make_transfer_spec

DYNAMIC_SCHEMES = ("attention", "feature")


@dataclass
class PanopticConfig:
    channels: int = 16
    dim: int = 32
    depth: int = 2
    scheme: str = "attention"
    bidirectional: str = "sync"
    pixel_mean: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth (graph layers) must be at least 1")
        parts = self.scheme.split("+")
        bad = [p for p in parts if p not in DYNAMIC_SCHEMES]
        if bad:
            raise ConfigError(f"panoptic transfer supports {', '.join(DYNAMIC_SCHEMES)}; got {bad}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PanopticConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown panoptic model keys: {sorted(extra)}")
        return cls(**doc)


def _semantic_adjacency(t: LabelTaxonomy, names: Sequence[str]) -> np.ndarray:
    A = np.zeros((len(names), len(names)))
    for dom in t.domains:
        sub = intra_adjacency(t, dom.name)
        for i, a in enumerate(dom.labels):
            for j, b in enumerate(dom.labels):
                if sub[i, j]:
                    A[names.index(a), names.index(b)] = 1.0
    return A


class PanopticModel:
    kind = "panoptic"
    domain = "panoptic"

    def __init__(self, taxonomy: LabelTaxonomy, config: PanopticConfig, seed: int = 0) -> None:
        self.taxonomy = taxonomy
        self.config = config
        self.rng = rng = np.random.default_rng(seed)
        self.names, self.things = panoptic_label_space(taxonomy)
        self.domains = [self.domain]
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        C, D, L = config.channels, config.dim, len(self.names)

        self.projection = ProjectionParams.init(C, L, D, rng)
        self.sem_stack = GcnStack.init(D, config.depth, rng)
        self.ins_W = uniform_init(rng, (C, D))
        self.ins_stack = GcnStack.init(D, config.depth, rng)
        self.ins_attention = [AttentionParams.init(D, rng) for _ in range(config.depth)]
        self.adjacency = normalize_adjacency(_semantic_adjacency(taxonomy, self.names))
        self.transfers: dict[tuple[str, str], TransferSpec] = {
            ("semantic", "instance"): make_transfer_spec(config.scheme, self.names, (), D, D, rng),
            ("instance", "semantic"): make_transfer_spec(config.scheme, (), self.names, D, D, rng),
        }
        self.head_W = uniform_init(rng, (C + D, L))
        self.head_b = Tensor(np.zeros(L), requires_grad=True)

        self._register("sem.P", self.projection.P)
        self._register("sem.W1", self.projection.W1)
        self._register("sem.W_re", self.projection.W_re)
        for i, W in enumerate(self.sem_stack.layers):
            self._register(f"sem.gcn.{i}", W)
        self._register("ins.W", self.ins_W)
        for i, (W, att) in enumerate(zip(self.ins_stack.layers, self.ins_attention)):
            self._register(f"ins.gcn.{i}", W)
            self._register(f"ins.att.{i}", att.W_att)
        for (t, s), spec in self.transfers.items():
            for key, p in spec.parameters().items():
                self._register(f"transfer.{t}<-{s}.{key}", p)
        self._register("head.W", self.head_W)
        self._register("head.b", self.head_b)

    def _register(self, name: str, t: Tensor) -> None:
        t.requires_grad = True
        self.params[name] = t

    def labels(self, domain: str) -> tuple[str, ...]:
        return tuple(self.names)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -------------------------------------------------------------- forward
    def graphs(self, X: Tensor, boxes: Sequence[Sequence[int]]) -> tuple[SemanticGraph, InstanceGraph]:
        cfg = self.config
        g_s = project(X, self.projection, self.domain, cfg.pixel_mean)
        g_i = instance_project(X, boxes, self.ins_W)
        for layer in range(cfg.depth):
            g_s = g_s.with_features(gcn_layer(g_s.Z, self.adjacency, self.sem_stack.layers[layer]))
            if g_i.nodes:
                A = attention_adjacency(g_i.Z, self.ins_attention[layer])
                g_i = g_i.with_features(gcn_layer(g_i.Z, A, self.ins_stack.layers[layer]))
                g_s, g_i = bidirectional_step(g_s, g_i, self.transfers[("semantic", "instance")],
                                              self.transfers[("instance", "semantic")], cfg.bidirectional)
        return g_s, g_i

    def logits(self, X: Tensor, boxes: Sequence[Sequence[int]]) -> Tensor:
        g_s, g_i = self.graphs(X, boxes)
        enhanced = instance_reproject(g_i, reproject(g_s, X, self.projection))
        flat = ad.reshape(enhanced, (-1, enhanced.shape[-1]))
        return flat @ self.head_W + self.head_b

    def predict(self, sample: SceneSample) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel category map and identity map (0 for stuff / unowned pixels)."""
        H, W, _ = sample.features.shape
        boxes = [r.box for r in sample.regions]
        sem = self.logits(Tensor(sample.features), boxes).data.argmax(axis=1).reshape(H, W)
        owner = region_owner(boxes, H, W) if boxes else np.full((H, W), -1)
        ids = np.array([r.identity for r in sample.regions] + [0], dtype=np.int64)
        inst = np.where(owner >= 0, ids[owner], 0)
        is_thing = np.isin(sem, sorted(self.things))
        return sem, np.where(is_thing, inst, 0)


def panoptic_loss(model: PanopticModel, batch: Sequence[SceneSample]) -> Tensor:
    if not batch:
        raise ValueError("empty batch")
    loss = None
    for s in batch:
        z = model.logits(Tensor(s.features), [r.box for r in s.regions])
        ce = ad.cross_entropy(z, s.labels["panoptic"].reshape(-1))
        loss = ce if loss is None else loss + ce
    return loss * (1.0 / len(batch))


def evaluate_panoptic(model: PanopticModel, samples: Sequence[SceneSample]) -> dict[str, float]:
    scenes = []
    for s in samples:
        sem, inst = model.predict(s)
        gt_inst = s.instances if s.instances is not None else np.zeros_like(sem)
        scenes.append((panoptic_segments(sem, inst, model.things),
                       panoptic_segments(s.labels["panoptic"], gt_inst, model.things)))
    return panoptic_quality_dataset(scenes, model.things)


def train_panoptic(model: PanopticModel, samples: Sequence[SceneSample], opt, batch_size: int = 4,
                   seed: int = 0, iterations: int | None = None, on_record=None):
    from .training import LogRecord, UniversalSampler, gradients, sgd_step

    sampler = UniversalSampler({model.domain: len(samples)}, batch_size, seed)
    records = []
    n = opt.max_iter - opt.iteration if iterations is None else iterations
    for _ in range(n):
        _, idx = sampler.next_batch()
        batch = [samples[i] for i in idx]
        loss = panoptic_loss(model, batch)
        lr = sgd_step(model, gradients(model, loss), opt)
        rec = LogRecord(opt.iteration, model.domain, loss.item(), lr, tuple(s.ref for s in batch))
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return records
