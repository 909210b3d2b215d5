"""Label taxonomies: per-domain label sets, adjacency priors, subordination, embeddings."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TaxonomyError(ValueError):
    """Raised for malformed or inconsistent taxonomy / embedding data."""


LabelRef = tuple[str, str]  # (domain, label)


@dataclass(frozen=True)
class Domain:
    name: str
    labels: tuple[str, ...]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise TaxonomyError(f"label {label!r} not in domain {self.name!r}") from None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class LabelTaxonomy:
    domains: tuple[Domain, ...]
    adjacency_pairs: dict[str, frozenset[tuple[str, str]]]
    subordinate_pairs: frozenset[tuple[LabelRef, LabelRef]]
    things: frozenset[str] = frozenset()
    _closure: dict[LabelRef, frozenset[LabelRef]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def domain(self, name: str) -> Domain:
        for d in self.domains:
            if d.name == name:
                return d
        raise TaxonomyError(f"unknown domain {name!r}")

    def node_counts(self) -> list[int]:
        return [len(d) for d in self.domains]

    def ancestors(self, ref: LabelRef) -> frozenset[LabelRef]:
        """All labels that ``ref`` is (transitively) subordinate to."""
        if not self._closure:
            self._closure.update(_transitive_closure(self.subordinate_pairs))
        return self._closure.get(ref, frozenset())

    def related(self, a: LabelRef, b: LabelRef) -> bool:
        return b in self.ancestors(a) or a in self.ancestors(b)

    def ancestor_in(self, label: str, source: str, target: str) -> str:
        """Label of ``target`` that ``label`` (from ``source``) rolls up into."""
        if source == target:
            return label
        hits = [lab for dom, lab in self.ancestors((source, label)) if dom == target]
        if not hits:
            raise TaxonomyError(f"label {label!r} of {source!r} has no ancestor in {target!r}")
        if len(hits) > 1:
            raise TaxonomyError(f"label {label!r} of {source!r} has several ancestors in {target!r}: {sorted(hits)}")
        return hits[0]

    def to_dict(self) -> dict:
        def ref(r: LabelRef) -> str:
            return f"{r[0]}:{r[1]}"

        return {
            "domains": [{"name": d.name, "labels": list(d.labels)} for d in self.domains],
            "adjacency": {dom: sorted([a, b] for a, b in pairs if a < b)
                          for dom, pairs in self.adjacency_pairs.items()},
            "subordinate": sorted([ref(f), ref(c)] for f, c in self.subordinate_pairs),
            "things": sorted(self.things),
        }

    def is_finer(self, fine: str, coarse: str) -> bool:
        """True when every label of ``fine`` has exactly one ancestor in ``coarse``."""
        try:
            for lab in self.domain(fine).labels:
                self.ancestor_in(lab, fine, coarse)
        except TaxonomyError:
            return False
        return True


def _transitive_closure(pairs: Iterable[tuple[LabelRef, LabelRef]]) -> dict[LabelRef, frozenset[LabelRef]]:
    up: dict[LabelRef, set[LabelRef]] = {}
    for fine, coarse in pairs:
        up.setdefault(fine, set()).add(coarse)
    out: dict[LabelRef, frozenset[LabelRef]] = {}
    for start in up:
        seen: set[LabelRef] = set()
        stack = list(up[start])
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(up.get(node, ()))
        out[start] = frozenset(seen)
    return out


def _resolve(name: str, domains: Sequence[Domain]) -> LabelRef:
    if ":" in name:
        dom, lab = name.split(":", 1)
        for d in domains:
            if d.name == dom:
                if lab not in d.labels:
                    raise TaxonomyError(f"unknown label {lab!r} in domain {dom!r}")
                return dom, lab
        raise TaxonomyError(f"unknown domain {dom!r} in label reference {name!r}")
    owners = [d.name for d in domains if name in d.labels]
    if not owners:
        raise TaxonomyError(f"unknown label {name!r}")
    if len(owners) > 1:
        raise TaxonomyError(f"label {name!r} is ambiguous (domains {owners}); qualify it as 'domain:{name}'")
    return owners[0], name


def taxonomy_from_dict(doc: dict) -> LabelTaxonomy:
    try:
        raw_domains = doc["domains"]
    except (KeyError, TypeError):
        raise TaxonomyError("taxonomy needs a 'domains' list") from None
    domains: list[Domain] = []
    for d in raw_domains:
        name, labels = d["name"], list(d["labels"])
        if not labels:
            raise TaxonomyError(f"domain {name!r} has no labels")
        dup = {lab for lab in labels if labels.count(lab) > 1}
        if dup:
            raise TaxonomyError(f"duplicate label {sorted(dup)[0]!r} in domain {name!r}")
        if any(x.name == name for x in domains):
            raise TaxonomyError(f"duplicate domain {name!r}")
        domains.append(Domain(name, tuple(labels)))

    adjacency: dict[str, frozenset[tuple[str, str]]] = {d.name: frozenset() for d in domains}
    for dom, pairs in (doc.get("adjacency") or {}).items():
        if dom not in adjacency:
            raise TaxonomyError(f"adjacency given for unknown domain {dom!r}")
        labels = next(d for d in domains if d.name == dom).labels
        sym = set()
        for a, b in pairs:
            for lab in (a, b):
                if lab not in labels:
                    raise TaxonomyError(f"unknown label {lab!r} in adjacency of {dom!r}")
            if a == b:
                raise TaxonomyError(f"self-pair ({a!r}, {b!r}) in adjacency of {dom!r}")
            sym.add((a, b))
            sym.add((b, a))
        adjacency[dom] = frozenset(sym)

    subordinate = set()
    for fine, coarse in doc.get("subordinate") or []:
        f, c = _resolve(fine, domains), _resolve(coarse, domains)
        if f[0] == c[0]:
            raise TaxonomyError(f"subordinate pair ({fine!r}, {coarse!r}) must span two domains")
        subordinate.add((f, c))

    things = frozenset(doc.get("things") or ())
    return LabelTaxonomy(tuple(domains), adjacency, frozenset(subordinate), things)


def load_taxonomy(path: str | Path) -> LabelTaxonomy:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"{path}: not valid JSON ({exc})") from None
    return taxonomy_from_dict(doc)


def builtin_path(name: str) -> Path:
    """Path of a data file shipped with the package (``human_body.json`` etc.)."""
    return Path(str(resources.files("taxograph") / "data" / name))


def human_body_taxonomy() -> LabelTaxonomy:
    return load_taxonomy(builtin_path("human_body.json"))


def intra_adjacency(t: LabelTaxonomy, domain: str) -> np.ndarray:
    d = t.domain(domain)
    A = np.zeros((len(d), len(d)))
    for a, b in t.adjacency_pairs.get(domain, ()):
        A[d.index(a), d.index(b)] = 1.0
    return A


def handcraft_transfer(t: LabelTaxonomy, source: str, target: str) -> np.ndarray:
    """Binary N_t x N_s indicator of (transitive) subordination in either direction."""
    src, tgt = t.domain(source), t.domain(target)
    M = np.zeros((len(tgt), len(src)))
    for i, a in enumerate(tgt.labels):
        for j, b in enumerate(src.labels):
            if t.related((target, a), (source, b)):
                M[i, j] = 1.0
    return M


# --------------------------------------------------------------------------
# word embeddings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __getitem__(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise TaxonomyError(f"no embedding for label {label!r}") from None

    def __contains__(self, label: str) -> bool:
        return label in self.vectors


def embedding_table(vectors: dict[str, Sequence[float]]) -> EmbeddingTable:
    out = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
    if not out:
        raise TaxonomyError("empty embedding table")
    dims = {v.shape for v in out.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise TaxonomyError(f"embedding vectors disagree in dimension: {sorted(dims)}")
    for k, v in out.items():
        if not np.any(v):
            raise TaxonomyError(f"zero-norm embedding for label {k!r}")
    return EmbeddingTable(out)


def load_embeddings(path: str | Path) -> EmbeddingTable:
    vectors: dict[str, list[float]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            vectors[parts[0]] = [float(x) for x in parts[1:]]
        except ValueError:
            raise TaxonomyError(f"{path}:{lineno}: non-numeric embedding entry") from None
    return embedding_table(vectors)


def semantic_transfer(e: EmbeddingTable, target_labels: Sequence[str], source_labels: Sequence[str]) -> np.ndarray:
    """Row-softmax over sources of embedding cosine similarities (N_t x N_s)."""
    T = np.stack([e[lab] for lab in target_labels])
    S = np.stack([e[lab] for lab in source_labels])
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    sim = T @ S.T
    ex = np.exp(sim - sim.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)
