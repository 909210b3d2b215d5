"""Multi-domain graph parsing model, its forward pass, optimiser and training loop.

One forward pass for an active domain:

1. project the (shared) feature map into the graph of every participating domain;
2. repeat ``depth`` times: one graph-convolution layer on every graph, then a
   round of bidirectional transfer between the active graph and each partner;
3. re-project the active graph residually onto the feature map;
4. classify every pixel with the active domain's linear head.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, IntegrityError
from .projection import ProjectionParams, SemanticGraph, project, reproject, uniform_init
from .reasoning import GcnStack, gcn_layer, normalize_adjacency
from .synthetic import SceneSample
from .taxonomy import EmbeddingTable, LabelTaxonomy, intra_adjacency, taxonomy_from_dict
from .transfer import TransferSpec, make_transfer_spec, parse_scheme, transfer_message

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    channels: int = 16
    dim: int = 32
    depth: int = 3
    intra_enabled: bool = True
    use_adjacency: bool = True
    scheme: str | None = None
    bidirectional: str = "sync"
    activation: str = "relu"
    transfer_activation: str = "relu"
    pixel_mean: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth (graph layers) must be at least 1")
        if self.use_adjacency and not self.intra_enabled:
            raise ConfigError("intra.use_adjacency requires intra.enabled")
        if self.scheme in ("", "none"):
            self.scheme = None
        if self.scheme is not None:
            self.scheme = "+".join(parse_scheme(self.scheme))
        if self.bidirectional not in ("sync", "sequential"):
            raise ConfigError(f"bidirectional must be 'sync' or 'sequential', not {self.bidirectional!r}")

    @property
    def graph_enabled(self) -> bool:
        return self.intra_enabled or self.scheme is not None

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown model keys: {sorted(extra)}")
        return cls(**doc)


class GraphModel:
    """Per-domain projections, GCN stacks and heads plus cross-domain transfers.

    All trainable tensors live in :attr:`params` under dotted names; the
    structured views (``projections``, ``stacks``, ``transfers``) point at the
    same tensors.
    """

    kind = "parsing"

    def __init__(self, taxonomy: LabelTaxonomy, config: ModelConfig,
                 embeddings: EmbeddingTable | None = None, seed: int = 0) -> None:
        self.taxonomy = taxonomy
        self.config = config
        self.embeddings = embeddings
        self.rng = np.random.default_rng(seed)
        self.domains: list[str] = []
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.adjacency: dict[str, np.ndarray] = {}
        self.projections: dict[str, ProjectionParams] = {}
        self.stacks: dict[str, GcnStack] = {}
        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        self.transfers: dict[tuple[str, str], TransferSpec] = {}

    # ---------------------------------------------------------------- build
    def labels(self, domain: str) -> tuple[str, ...]:
        return self.taxonomy.domain(domain).labels

    def add_domain(self, domain: str, link: bool = True) -> None:
        if domain in self.domains:
            raise ConfigError(f"domain {domain!r} already in the model")
        labels = self.labels(domain)
        if not labels:
            raise ConfigError(f"domain {domain!r} has no labels")
        cfg, rng = self.config, self.rng
        C, D, N, L = cfg.channels, cfg.dim, len(labels), len(labels)
        if cfg.graph_enabled:
            proj = ProjectionParams.init(C, N, D, rng)
            self.projections[domain] = proj
            self._register(f"{domain}.P", proj.P)
            self._register(f"{domain}.W1", proj.W1)
            self._register(f"{domain}.W_re", proj.W_re)
            if cfg.intra_enabled:
                stack = GcnStack.init(D, cfg.depth, rng, cfg.activation)
                self.stacks[domain] = stack
                for i, W in enumerate(stack.layers):
                    self._register(f"{domain}.gcn.{i}", W)
                A = intra_adjacency(self.taxonomy, domain) if cfg.use_adjacency else np.zeros((N, N))
                self.adjacency[domain] = normalize_adjacency(A)
        Wc = uniform_init(rng, (C, L))
        b = Tensor(np.zeros(L), requires_grad=True)
        self.heads[domain] = (Wc, b)
        self._register(f"{domain}.head.W", Wc)
        self._register(f"{domain}.head.b", b)
        existing = list(self.domains)
        self.domains.append(domain)
        if link and cfg.scheme is not None:
            for other in existing:
                self.link(domain, other)
                self.link(other, domain)

    def link(self, target: str, source: str, fixed: Mapping[str, np.ndarray] | None = None) -> TransferSpec:
        """Create the transfer carrying ``source`` node features into ``target``."""
        cfg = self.config
        if cfg.scheme is None:
            raise ConfigError("model has no transfer scheme configured")
        spec = make_transfer_spec(
            cfg.scheme, self.labels(target), self.labels(source), cfg.dim, cfg.dim, self.rng,
            taxonomy=self.taxonomy, target=target, source=source, embeddings=self.embeddings,
            activation=cfg.transfer_activation, precomputed=dict(fixed or {}),
        )
        self.transfers[(target, source)] = spec
        for key, t in spec.parameters().items():
            self._register(f"transfer.{target}<-{source}.{key}", t)
        return spec

    def _register(self, name: str, t: Tensor) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t.requires_grad = True
        self.params[name] = t

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def partners(self, active: str) -> list[str]:
        return [d for d in self.domains if d != active
                and ((active, d) in self.transfers or (d, active) in self.transfers)]

    # -------------------------------------------------------------- forward
    def head(self, domain: str, X: Tensor) -> Tensor:
        Wc, b = self.heads[domain]
        flat = ad.reshape(X, (-1, X.shape[-1])) if X.ndim == 3 else X
        return flat @ Wc + b

    def build_graphs(self, X: Tensor, domains: Sequence[str]) -> dict[str, SemanticGraph]:
        return {d: project(X, self.projections[d], d, self.config.pixel_mean) for d in domains}

    def intra_step(self, graphs: dict[str, SemanticGraph], layer: int) -> dict[str, SemanticGraph]:
        out = {}
        for d, g in graphs.items():
            stack = self.stacks[d]
            out[d] = g.with_features(gcn_layer(g.Z, self.adjacency[d], stack.layers[layer], stack.kind))
        return out

    def transfer_step(self, graphs: dict[str, SemanticGraph], active: str) -> dict[str, SemanticGraph]:
        """One bidirectional exchange between ``active`` and each partner graph."""
        pre = graphs
        Za = pre[active].Z
        new_a = Za
        for d in graphs:
            if d != active and (active, d) in self.transfers:
                new_a = new_a + transfer_message(self.transfers[(active, d)], Za, pre[d].Z)
        src = new_a if self.config.bidirectional == "sequential" else Za
        out = {active: pre[active].with_features(new_a)}
        for d in graphs:
            if d == active:
                continue
            Zd = pre[d].Z
            if (d, active) in self.transfers:
                Zd = Zd + transfer_message(self.transfers[(d, active)], Zd, src)
            out[d] = pre[d].with_features(Zd)
        return out

    def enhance(self, X: Tensor, active: str) -> Tensor:
        """Graph stage: project, alternate reasoning with transfer, re-project residually."""
        cfg = self.config
        if not cfg.graph_enabled:
            return X
        graphs = self.build_graphs(X, [active, *self.partners(active)])
        for layer in range(cfg.depth):
            if cfg.intra_enabled:
                graphs = self.intra_step(graphs, layer)
            if cfg.scheme is not None and len(graphs) > 1:
                graphs = self.transfer_step(graphs, active)
        return reproject(graphs[active], X, self.projections[active])

    def logits(self, X: Tensor, active: str) -> Tensor:
        if active not in self.heads:
            raise ConfigError(f"domain {active!r} is not part of this model")
        return self.head(active, self.enhance(X, active))

    def predict(self, features: np.ndarray, active: str) -> np.ndarray:
        H, W, _ = features.shape
        return self.logits(Tensor(features), active).data.argmax(axis=1).reshape(H, W)


def forward(model: GraphModel, batch: Sequence[SceneSample], active: str) -> tuple[list[Tensor], Tensor]:
    """Per-sample pixel logits and the batch-mean cross-entropy for ``active``."""
    if active not in model.domains:
        raise ConfigError(f"unknown domain {active!r}")
    if not batch:
        raise ValueError("empty batch")
    outs, loss = [], None
    for s in batch:
        if active not in s.labels:
            raise ConfigError(f"sample has no labels for domain {active!r}")
        z = model.logits(Tensor(s.features), active)
        ce = ad.cross_entropy(z, s.labels[active].reshape(-1))
        outs.append(z)
        loss = ce if loss is None else loss + ce
    return outs, loss * (1.0 / len(batch))


# ------------------------------------------------------------------ optimiser


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iter: int = 300
    power: float = 0.9
    clip_norm: float | None = None
    iteration: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * (1.0 - self.iteration / self.max_iter) ** self.power


def sgd_step(model: GraphModel, grads: Mapping[str, np.ndarray], opt: OptimState) -> float:
    """Momentum SGD with poly decay on every non-frozen parameter; returns the lr used.

    With ``opt.clip_norm`` set, the gradient over all trainable parameters is
    rescaled so its global L2 norm does not exceed it.
    """
    if opt.iteration >= opt.max_iter:
        raise RuntimeError(f"optimizer already ran its {opt.max_iter} iterations")
    lr = opt.current_lr()
    scale = 1.0
    if opt.clip_norm is not None:
        total = np.sqrt(sum(float((grads[k] ** 2).sum()) for k in model.params
                            if k not in model.frozen and grads.get(k) is not None))
        if total > opt.clip_norm:
            scale = opt.clip_norm / total
    for name, theta in model.params.items():
        if name in model.frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta.data)
        v = opt.buffers.get(name)
        step = scale * g + opt.weight_decay * theta.data
        v = step if v is None else opt.momentum * v + step
        opt.buffers[name] = v
        theta.data = theta.data - lr * v
    opt.iteration += 1
    return lr


def gradients(model: GraphModel, loss: Tensor) -> dict[str, np.ndarray]:
    store = ad.backward(loss)
    out = {}
    for name, t in model.params.items():
        g = store.get(t)
        out[name] = g if g is not None else np.zeros_like(t.data)
    return out


# ------------------------------------------------------------------ sampling


class UniversalSampler:
    """Emits single-domain batches; domains interleave in proportion to pool size.

    Domain order follows smooth weighted round robin, which is deterministic
    and hits the exact pool-size ratio over every full cycle.  Within a pool,
    samples are drawn from seeded permutations.
    """

    def __init__(self, pools: Mapping[str, int], batch_size: int, seed: int = 0) -> None:
        self.sizes = {d: int(n) for d, n in pools.items() if n > 0}
        if not self.sizes:
            raise ValueError("universal sampler needs at least one non-empty pool")
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.credit = {d: 0 for d in self.sizes}
        self.order: dict[str, np.ndarray] = {}
        self.cursor: dict[str, int] = {}

    def _pick_domain(self) -> str:
        total = sum(self.sizes.values())
        for d, n in self.sizes.items():
            self.credit[d] += n
        best = max(self.sizes, key=lambda d: self.credit[d])
        self.credit[best] -= total
        return best

    def _take(self, domain: str) -> list[int]:
        n = self.sizes[domain]
        k = min(self.batch_size, n)
        pos = self.cursor.get(domain, n)
        if pos + k > n:
            self.order[domain] = self.rng.permutation(n)
            pos = 0
        self.cursor[domain] = pos + k
        return [int(i) for i in self.order[domain][pos:pos + k]]

    def next_batch(self) -> tuple[str, list[int]]:
        d = self._pick_domain()
        return d, self._take(d)

    def __iter__(self) -> Iterator[tuple[str, list[int]]]:
        while True:
            yield self.next_batch()


# ------------------------------------------------------------------ training


@dataclass
class LogRecord:
    iteration: int
    domain: str
    loss: float
    lr: float
    batch: tuple[str, ...] = ()

    def line(self) -> str:
        """Tab-separated ``iteration domain loss lr batch``; batch lists sample refs."""
        return f"{self.iteration}\t{self.domain}\t{self.loss!r}\t{self.lr!r}\t{','.join(self.batch)}"

    @classmethod
    def parse(cls, line: str) -> "LogRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"malformed log line: {line!r}")
        it, dom, loss, lr, batch = parts
        return cls(int(it), dom, float(loss), float(lr), tuple(b for b in batch.split(",") if b))


def train(
    model: GraphModel,
    pools: Mapping[str, Sequence[SceneSample]],
    opt: OptimState,
    batch_size: int = 4,
    seed: int = 0,
    iterations: int | None = None,
    on_record: Callable[[LogRecord], None] | None = None,
) -> list[LogRecord]:
    sampler = UniversalSampler({d: len(p) for d, p in pools.items()}, batch_size, seed)
    records = []
    n = opt.max_iter - opt.iteration if iterations is None else iterations
    for _ in range(n):
        domain, idx = sampler.next_batch()
        batch = [pools[domain][i] for i in idx]
        _, loss = forward(model, batch, domain)
        lr = sgd_step(model, gradients(model, loss), opt)
        refs = tuple(s.ref or f"unknown/{i}" for s, i in zip(batch, idx))
        rec = LogRecord(opt.iteration, domain, loss.item(), lr, refs)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return records


def incremental_extend(model: GraphModel, new_domain: str, taxonomy: LabelTaxonomy | None = None) -> GraphModel:
    """Add a branch for ``new_domain`` linked to every existing graph; freeze the rest."""
    if taxonomy is not None:
        for d in model.domains:
            taxonomy.domain(d)
        model.taxonomy = taxonomy
    if new_domain in model.domains:
        raise ConfigError(f"domain {new_domain!r} already in the model")
    model.frozen.update(model.params)
    model.add_domain(new_domain, link=True)
    return model


def evaluate(model: GraphModel, samples: Sequence[SceneSample], domain: str):
    from .metrics import ConfusionMatrix

    cm = ConfusionMatrix(len(model.labels(domain)))
    for s in samples:
        cm.update(model.predict(s.features, domain), s.labels[domain])
    return cm


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_FORMAT = 1


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(model: GraphModel, directory: str | Path, extra: Mapping | None = None) -> Path:
    """Write ``model.bin`` (params, little-endian float64, manifest order) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "frozen": name in model.frozen, "sha256": _digest(t.data)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    (directory / "model.bin").write_bytes(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "config": asdict(model.config),
        "domains": model.domains,
        "links": [[t, s] for (t, s) in model.transfers],
        "taxonomy": model.taxonomy.to_dict(),
        "fixed_transfers": {f"{t}<-{s}": {k: v.tolist() for k, v in spec.fixed.items()}
                            for (t, s), spec in model.transfers.items() if spec.fixed},
        "params": entries,
        "size": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "rng_state": model.rng.bit_generator.state,
        "extra": dict(extra or {}),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    return path


def load_checkpoint(directory: str | Path):
    """Rebuild a :class:`GraphModel` (or panoptic model) and verify every checksum."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        blob = (directory / "model.bin").read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"checkpoint incomplete: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"checkpoint manifest unreadable: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if len(blob) != manifest["size"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise IntegrityError("checkpoint manifest mismatch: model.bin does not match its recorded size/sha256")

    taxonomy = taxonomy_from_dict(manifest["taxonomy"])
    if manifest.get("kind", "parsing") == "panoptic":
        from .panoptic import PanopticConfig, PanopticModel

        model = PanopticModel(taxonomy, PanopticConfig(**manifest["config"]), seed=0)
    else:
        model = GraphModel(taxonomy, ModelConfig(**manifest["config"]), embeddings=None, seed=0)
        fixed = manifest.get("fixed_transfers", {})
        for d in manifest["domains"]:
            model.add_domain(d, link=False)
        for t, s in manifest["links"]:
            model.link(t, s, fixed={k: np.asarray(v) for k, v in fixed.get(f"{t}<-{s}", {}).items()})

    entries = {e["name"]: e for e in manifest["params"]}
    if set(entries) != set(model.params):
        raise IntegrityError("checkpoint manifest mismatch: parameter names differ from the rebuilt model")
    for name, t in model.params.items():
        e = entries[name]
        n = int(np.prod(e["shape"])) * 8
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + n], dtype="<f8").reshape(e["shape"]).astype(np.float64)
        if _digest(arr) != e["sha256"]:
            raise IntegrityError(f"checkpoint manifest mismatch: parameter {name!r} checksum differs")
        t.data = arr
        if e["frozen"]:
            model.frozen.add(name)
    state = manifest.get("rng_state")
    if state:
        model.rng.bit_generator.state = state
    model.extra = dict(manifest.get("extra") or {})
    return model


def parameter_digests(model: GraphModel) -> dict[str, str]:
    return {k: _digest(v.data) for k, v in model.params.items()}
