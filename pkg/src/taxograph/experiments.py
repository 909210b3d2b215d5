"""Desk-scale experiment protocols: ablation rows, universal training, incremental extension."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .metrics import random_baseline_miou
from .synthetic import DatasetSpec, SceneSample, generate_split
from .taxonomy import EmbeddingTable, LabelTaxonomy
from .training import (GraphModel, LogRecord, ModelConfig, OptimState, evaluate, incremental_extend,
                       parameter_digests, train)

log = logging.getLogger(__name__)


@dataclass
class Benchmark:
    """Train / test pools per domain, each generated from its own scene stream."""

    train: dict[str, list[SceneSample]]
    test: dict[str, list[SceneSample]]

    @classmethod
    def generate(cls, taxonomy: LabelTaxonomy, domains: Sequence[str], base: DatasetSpec | None = None,
                 train_count: int = 200, test_count: int = 50) -> "Benchmark":
        base = base or DatasetSpec(domain="")
        tr, te = {}, {}
        for d in domains:
            spec = replace(base, domain=d)
            tr[d] = generate_split(spec, taxonomy, "train", train_count)
            te[d] = generate_split(spec, taxonomy, "test", test_count)
        return cls(tr, te)


def domain_miou(model: GraphModel, samples: Sequence[SceneSample], domain: str) -> float:
    return evaluate(model, samples, domain).summary()["miou"]


# ------------------------------------------------------------------ ablation

# Each row: model-config overrides and whether the source domain is pretrained and linked.
ABLATION_ROWS: dict[str, tuple[dict, bool]] = {
    "baseline": ({"intra_enabled": False, "use_adjacency": False}, False),
    "intra-noadj": ({"use_adjacency": False}, False),
    "intra": ({}, False),
    "handcraft": ({"scheme": "handcraft"}, True),
    "learnable": ({"scheme": "learnable"}, True),
    "feature": ({"scheme": "feature"}, True),
    "semantic": ({"scheme": "semantic"}, True),
    "full": ({"scheme": "feature+semantic"}, True),
}


@dataclass
class AblationSettings:
    rows: tuple[str, ...] = ("baseline", "intra", "full")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    target: str = "medium"
    source: str = "fine"
    iterations: int = 1500
    pretrain_iterations: int = 1500
    lr: float = 0.03
    clip_norm: float | None = 5.0
    batch_size: int = 4
    model: dict = field(default_factory=dict)


@dataclass
class AblationReport:
    scores: dict[str, list[float]]
    seconds: float

    def mean(self, row: str) -> float:
        return float(np.mean(self.scores[row]))

    def table(self) -> str:
        lines = [f"{'row':<12} {'mean mIoU':>10}  per seed"]
        for row, vals in self.scores.items():
            lines.append(f"{row:<12} {self.mean(row):>10.4f}  " + " ".join(f"{v:.4f}" for v in vals))
        return "\n".join(lines)


def train_row(row: str, settings: AblationSettings, taxonomy: LabelTaxonomy, embeddings: EmbeddingTable | None,
              bench: Benchmark, seed: int) -> GraphModel:
    overrides, pretrain = ABLATION_ROWS[row]
    cfg = ModelConfig(**{**settings.model, **overrides})
    model = GraphModel(taxonomy, cfg, embeddings, seed=seed)
    if pretrain:
        model.add_domain(settings.source)
        opt = OptimState(lr=settings.lr, max_iter=settings.pretrain_iterations, clip_norm=settings.clip_norm)
        train(model, {settings.source: bench.train[settings.source]}, opt, settings.batch_size, seed)
    model.add_domain(settings.target)
    opt = OptimState(lr=settings.lr, max_iter=settings.iterations, clip_norm=settings.clip_norm)
    train(model, {settings.target: bench.train[settings.target]}, opt, settings.batch_size, seed)
    return model


def run_ablation(taxonomy: LabelTaxonomy, embeddings: EmbeddingTable | None, bench: Benchmark,
                 settings: AblationSettings | None = None,
                 progress: Callable[[str, int, float], None] | None = None) -> AblationReport:
    settings = settings or AblationSettings()
    start = time.perf_counter()
    scores: dict[str, list[float]] = {r: [] for r in settings.rows}
    for seed in settings.seeds:
        for row in settings.rows:
            model = train_row(row, settings, taxonomy, embeddings, bench, seed)
            score = domain_miou(model, bench.test[settings.target], settings.target)
            scores[row].append(score)
            if progress is not None:
                progress(row, seed, score)
    return AblationReport(scores, time.perf_counter() - start)


# ------------------------------------------------------------------ universal


@dataclass
class UniversalReport:
    miou: dict[str, float]
    random: dict[str, float]
    records: list[LogRecord]

    def margin(self, domain: str) -> float:
        return self.miou[domain] - self.random[domain]


def run_universal(taxonomy: LabelTaxonomy, embeddings: EmbeddingTable | None, bench: Benchmark,
                  config: ModelConfig | None = None, iterations: int = 600, lr: float = 0.03,
                  batch_size: int = 4, seed: int = 0) -> tuple[GraphModel, UniversalReport]:
    """One model, one head per domain, batches drawn one domain at a time."""
    config = config or ModelConfig(scheme="feature+semantic")
    model = GraphModel(taxonomy, config, embeddings, seed=seed)
    for d in bench.train:
        model.add_domain(d)
    records = train(model, bench.train, OptimState(lr=lr, max_iter=iterations), batch_size, seed)
    miou = {d: domain_miou(model, bench.test[d], d) for d in bench.test}
    rand = {d: random_baseline_miou([s.labels[d] for s in bench.test[d]], len(model.labels(d)), seed)
            for d in bench.test}
    return model, UniversalReport(miou, rand, records)


def audit_single_domain(lines: Sequence[str]) -> list[str]:
    """Problems found in a training log: batches mixing datasets or mislabelled."""
    problems = []
    for line in lines:
        if not line.strip():
            continue
        rec = LogRecord.parse(line)
        origins = {ref.split("/", 1)[0] for ref in rec.batch}
        if not rec.batch:
            problems.append(f"iteration {rec.iteration}: empty batch")
        elif origins != {rec.domain}:
            problems.append(f"iteration {rec.iteration}: domain {rec.domain} but samples from {sorted(origins)}")
    return problems


# ------------------------------------------------------------------ incremental


@dataclass
class IncrementalReport:
    changed: list[str]
    miou: float
    random: float
    records: list[LogRecord]


def run_incremental(taxonomy: LabelTaxonomy, embeddings: EmbeddingTable | None, bench: Benchmark,
                    base_domains: Sequence[str], new_domain: str, config: ModelConfig | None = None,
                    base_iterations: int = 300, steps: int = 100, lr: float = 0.03, batch_size: int = 4,
                    seed: int = 0) -> tuple[GraphModel, IncrementalReport]:
    config = config or ModelConfig(scheme="feature+semantic")
    model = GraphModel(taxonomy, config, embeddings, seed=seed)
    for d in base_domains:
        model.add_domain(d)
    train(model, {d: bench.train[d] for d in base_domains}, OptimState(lr=lr, max_iter=base_iterations),
          batch_size, seed)
    before = parameter_digests(model)
    incremental_extend(model, new_domain)
    records = train(model, {new_domain: bench.train[new_domain]}, OptimState(lr=lr, max_iter=steps),
                    batch_size, seed)
    after = parameter_digests(model)
    changed = sorted(k for k in before if before[k] != after[k])
    test = bench.test[new_domain]
    rand = random_baseline_miou([s.labels[new_domain] for s in test], len(model.labels(new_domain)), seed)
    return model, IncrementalReport(changed, domain_miou(model, test, new_domain), rand, records)
