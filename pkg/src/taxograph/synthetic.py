"""Desk-scale synthetic parsing and panoptic scenes.

A parsing scene is painted at the finest granularity of a taxonomy: a few
elliptical parts, chosen as a connected patch of the fine adjacency graph,
on a background.  Every coarser label map is derived by rolling labels up
the subordination hierarchy, so all granularities agree pixel for pixel.

Features stand in for a backbone output: each label has a prototype vector
and pixels get ``prototype + noise * N(0, 1)``.  Prototypes of the fine
labels are grouped so that each group mixes labels of different parents;
group members sit close together, so telling them apart per pixel is hard
and scene-level context (which labels are present) carries signal.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .taxonomy import LabelTaxonomy, TaxonomyError


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    domain: str
    count: int = 200
    H: int = 24
    W: int = 24
    C: int = 16
    seed: int = 0
    noise: float = 1.0
    instance: bool = False
    min_parts: int = 2
    max_parts: int = 5
    spread: float = 0.6
    radius: tuple[float, float] = (4.0, 7.0)
    max_instances: int = 4
    jitter: float = 0.1


@dataclass
class Region:
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive
    identity: int
    category: int


@dataclass
class SceneSample:
    features: np.ndarray  # H x W x C
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    regions: list[Region] = field(default_factory=list)
    instances: np.ndarray | None = None  # H x W identity map, 0 = stuff
    ref: str = ""  # "<dataset>/<split>/<index>" provenance tag

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape  # type: ignore[return-value]


def _code(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def scene_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, _code(spec.domain), _code(split), index])


def finest_domain(t: LabelTaxonomy) -> str:
    for name in t.domain_names:
        if all(other == name or t.is_finer(name, other) for other in t.domain_names):
            return name
    raise TaxonomyError("taxonomy has no domain that refines every other domain")


def _background(labels: Sequence[str]) -> int | None:
    return labels.index("background") if "background" in labels else None


def prototypes(labels: Sequence[str], C: int, seed: int, spread: float, group_size: int = 3) -> np.ndarray:
    """One C-vector per label; non-background labels grouped by stride."""
    rng = np.random.default_rng([seed, _code("prototypes"), len(labels), C])
    bg = _background(labels)
    parts = [i for i in range(len(labels)) if i != bg]
    n_groups = max(1, math.ceil(len(parts) / group_size))
    centers = rng.normal(size=(n_groups, C)) * 1.5
    protos = np.zeros((len(labels), C))
    for k, i in enumerate(parts):
        offset = rng.normal(size=C)
        protos[i] = centers[k % n_groups] + spread * offset / np.linalg.norm(offset)
    if bg is not None:
        protos[bg] = rng.normal(size=C) * 1.5
    return protos


def relabel_granularity(label_map: np.ndarray, source: str, target: str, taxonomy: LabelTaxonomy) -> np.ndarray:
    """Map a ``source``-domain label map onto the coarser ``target`` domain."""
    if source == target:
        return label_map.copy()
    src, tgt = taxonomy.domain(source), taxonomy.domain(target)
    lut = np.array([tgt.index(taxonomy.ancestor_in(lab, source, target)) for lab in src.labels], dtype=np.int64)
    return lut[label_map]


def _connected_parts(rng: np.random.Generator, taxonomy: LabelTaxonomy, domain: str, k: int) -> list[int]:
    d = taxonomy.domain(domain)
    bg = _background(d.labels)
    nbrs: dict[int, set[int]] = {i: set() for i in range(len(d)) if i != bg}
    for a, b in taxonomy.adjacency_pairs.get(domain, ()):
        ia, ib = d.index(a), d.index(b)
        if ia in nbrs and ib in nbrs:
            nbrs[ia].add(ib)
    pool = sorted(nbrs)
    chosen = [int(rng.choice(pool))]
    while len(chosen) < k:
        frontier = sorted({n for c in chosen for n in nbrs[c]} - set(chosen))
        if not frontier:
            frontier = sorted(set(pool) - set(chosen))
            if not frontier:
                break
        chosen.append(int(rng.choice(frontier)))
    return chosen


def _ellipse(H: int, W: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_parsing_scene(spec: DatasetSpec, taxonomy: LabelTaxonomy, split: str = "train",
                           index: int = 0, fine: str | None = None) -> SceneSample:
    fine = fine or finest_domain(taxonomy)
    d = taxonomy.domain(fine)
    H, W = spec.H, spec.W
    if H * W < 16 * spec.max_parts or min(H, W) < 8:
        raise GenerationError(f"{H}x{W} map is too small for up to {spec.max_parts} parts")
    rng = scene_rng(spec, split, index)
    bg = _background(d.labels)
    k = int(rng.integers(spec.min_parts, spec.max_parts + 1))
    parts = _connected_parts(rng, taxonomy, fine, k)

    lab = np.full((H, W), bg if bg is not None else 0, dtype=np.int64)
    scale = min(H, W) / 24.0
    centers: dict[int, tuple[float, float, float]] = {}
    placed: list[int] = []
    adj = taxonomy.adjacency_pairs.get(fine, frozenset())
    for p in parts:
        r = float(rng.uniform(*spec.radius)) * scale
        anchors = [q for q in placed if (d.labels[p], d.labels[q]) in adj] or placed
        if anchors:
            q = anchors[int(rng.integers(len(anchors)))]
            qy, qx, qr = centers[q]
            theta = float(rng.uniform(0, 2 * math.pi))
            dist = 0.8 * (qr + r)
            cy = min(max(qy + dist * math.sin(theta), r), H - 1 - r)
            cx = min(max(qx + dist * math.cos(theta), r), W - 1 - r)
        else:
            cy = float(rng.uniform(r, H - 1 - r))
            cx = float(rng.uniform(r, W - 1 - r))
        ry = r * float(rng.uniform(0.7, 1.3))
        rx = r * float(rng.uniform(0.7, 1.3))
        lab[_ellipse(H, W, cy, cx, ry, rx, float(rng.uniform(0, math.pi)))] = p
        centers[p] = (cy, cx, r)
        placed.append(p)

    protos = prototypes(d.labels, spec.C, spec.seed, spec.spread)
    feats = protos[lab] + spec.noise * rng.normal(size=(H, W, spec.C))
    labels = {name: relabel_granularity(lab, fine, name, taxonomy) for name in taxonomy.domain_names
              if taxonomy.is_finer(fine, name)}
    return SceneSample(feats, labels, ref=f"{spec.domain}/{split}/{index}")


# --------------------------------------------------------------------------
# panoptic scenes
# --------------------------------------------------------------------------


def panoptic_label_space(taxonomy: LabelTaxonomy) -> tuple[list[str], set[int]]:
    """Combined label list (stuff first, then things) and the thing indices."""
    names: list[str] = []
    for dom in taxonomy.domains:
        for lab in dom.labels:
            if lab not in taxonomy.things and lab not in names:
                names.append(lab)
    n_stuff = len(names)
    for dom in taxonomy.domains:
        for lab in dom.labels:
            if lab in taxonomy.things and lab not in names:
                names.append(lab)
    return names, set(range(n_stuff, len(names)))


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def jitter_box(box, rng: np.random.Generator, frac: float, H: int, W: int):
    y0, x0, y1, x1 = box
    h, w = y1 - y0, x1 - x0
    dy = np.round(rng.uniform(-frac, frac, size=2) * h).astype(int)
    dx = np.round(rng.uniform(-frac, frac, size=2) * w).astype(int)
    ny0, ny1 = max(0, y0 + dy[0]), min(H, y1 + dy[1])
    nx0, nx1 = max(0, x0 + dx[0]), min(W, x1 + dx[1])
    if ny1 <= ny0 or nx1 <= nx0:
        return box
    return int(ny0), int(nx0), int(ny1), int(nx1)


def generate_panoptic_scene(spec: DatasetSpec, taxonomy: LabelTaxonomy, split: str = "train",
                            index: int = 0, num_instances: int | None = None) -> SceneSample:
    if not spec.instance:
        raise GenerationError("panoptic scenes need a spec with instance mode set")
    names, thing_ids = panoptic_label_space(taxonomy)
    stuff_ids = [i for i in range(len(names)) if i not in thing_ids]
    if not stuff_ids:
        raise GenerationError("panoptic taxonomy has no stuff labels")
    H, W = spec.H, spec.W
    if min(H, W) < 8:
        raise GenerationError(f"{H}x{W} map is too small")
    rng = scene_rng(spec, split, index)

    n_bands = int(rng.integers(1, min(3, len(stuff_ids)) + 1))
    band_classes = rng.choice(stuff_ids, size=n_bands, replace=False)
    cuts = np.sort(rng.choice(np.arange(3, H - 2), size=n_bands - 1, replace=False)) if n_bands > 1 else []
    sem = np.empty((H, W), dtype=np.int64)
    edges = [0, *[int(c) for c in cuts], H]
    for b in range(n_bands):
        sem[edges[b]:edges[b + 1]] = band_classes[b]

    inst = np.zeros((H, W), dtype=np.int64)
    K = int(rng.integers(0, spec.max_instances + 1)) if num_instances is None else num_instances
    things = sorted(thing_ids)
    cats: dict[int, int] = {}
    scale = min(H, W) / 24.0
    for ident in range(1, K + 1):
        cat = int(rng.choice(things)) if things else stuff_ids[0]
        ry = float(rng.uniform(2.5, 5.0)) * scale
        rx = float(rng.uniform(2.0, 4.0)) * scale
        cy, cx = float(rng.uniform(ry, H - 1 - ry)), float(rng.uniform(rx, W - 1 - rx))
        m = _ellipse(H, W, cy, cx, ry, rx, 0.0)
        inst[m] = ident
        sem[m] = cat
        cats[ident] = cat

    regions = []
    for ident in range(1, K + 1):
        m = inst == ident
        if not m.any():
            continue
        tb = tight_box(m)
        box = jitter_box(tb, rng, spec.jitter, H, W) if spec.jitter > 0 else tb
        y0, x0, y1, x1 = box
        if not m[y0:y1, x0:x1].any():
            box = tb
        regions.append(Region(box, ident, cats[ident]))

    protos = prototypes(names, spec.C, spec.seed, spec.spread, group_size=2)
    ident_offsets = rng.normal(size=(K + 1, spec.C)) * 0.3
    ident_offsets[0] = 0.0
    feats = protos[sem] + ident_offsets[inst] + spec.noise * rng.normal(size=(H, W, spec.C))
    return SceneSample(feats, {"panoptic": sem}, regions, inst, ref=f"{spec.domain}/{split}/{index}")


def panoptic_segments(sem: np.ndarray, inst: np.ndarray, thing_ids: set[int]):
    """(mask, category, identity) triples: one per stuff class, one per instance."""
    segs = []
    for c in np.unique(sem):
        c = int(c)
        if c in thing_ids:
            for ident in np.unique(inst[sem == c]):
                segs.append(((sem == c) & (inst == ident), c, int(ident)))
        else:
            segs.append((sem == c, c, 0))
    return segs


# --------------------------------------------------------------------------
# datasets and serialisation
# --------------------------------------------------------------------------


def generate_split(spec: DatasetSpec, taxonomy: LabelTaxonomy, split: str, count: int | None = None) -> list[SceneSample]:
    n = spec.count if count is None else count
    if spec.instance:
        return [generate_panoptic_scene(spec, taxonomy, split, i) for i in range(n)]
    fine = finest_domain(taxonomy)
    return [generate_parsing_scene(spec, taxonomy, split, i, fine) for i in range(n)]


def save_sample(sample: SceneSample, path: str | Path) -> None:
    """Write ``<path>.bin`` (little-endian float64 features) and ``<path>.meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(sample.features, dtype="<f8").tobytes())
    meta = {
        "shape": list(sample.features.shape),
        "labels": {k: v.tolist() for k, v in sorted(sample.labels.items())},
        "regions": [asdict(r) for r in sample.regions],
        "domains": sorted(sample.labels),
        "ref": sample.ref,
    }
    if sample.instances is not None:
        meta["instances"] = sample.instances.tolist()
    path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")


def load_sample(path: str | Path) -> SceneSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(".meta.json").read_text(encoding="utf-8"))
    shape = tuple(meta["shape"])
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {raw.size} values on disk, metadata says {shape}")
    regions = [Region(tuple(r["box"]), r["identity"], r["category"]) for r in meta.get("regions", [])]
    inst = np.asarray(meta["instances"], dtype=np.int64) if "instances" in meta else None
    labels = {k: np.asarray(v, dtype=np.int64) for k, v in meta["labels"].items()}
    return SceneSample(raw.reshape(shape).astype(np.float64), labels, regions, inst, meta.get("ref", ""))


def iter_split(root: str | Path, domain: str, split: str) -> Iterator[Path]:
    folder = Path(root) / domain / split
    for meta in sorted(folder.glob("*.meta.json")):
        yield meta.with_name(meta.name[: -len(".meta.json")])


def load_split(root: str | Path, domain: str, split: str) -> list[SceneSample]:
    return [load_sample(p) for p in iter_split(root, domain, split)]


def domain_spec(base: DatasetSpec, domain: str) -> DatasetSpec:
    return replace(base, domain=domain)
