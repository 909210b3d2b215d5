"""Command-line entry point: ``gen``, ``train``, ``eval``, ``gradcheck``, ``render``.

Exit codes: 0 success, 1 failed checks, 2 configuration or input error,
3 data / checkpoint integrity error.  The seed comes from ``--seed``, else
the ``GRAPHONOMY_SEED`` environment variable, else the config file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError
from .synthetic import DatasetSpec, GenerationError, SceneSample, finest_domain, generate_panoptic_scene, \
    generate_parsing_scene, load_split, save_sample
from .taxonomy import LabelTaxonomy, TaxonomyError, load_embeddings, load_taxonomy

log = logging.getLogger("taxograph")

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_INTEGRITY = 0, 1, 2, 3
SEED_ENV = "GRAPHONOMY_SEED"
MODES = ("single", "transfer", "universal", "incremental", "panoptic")


# ------------------------------------------------------------------ helpers


def resolve_path(ref: str, *, must_exist: bool = True) -> Path:
    """A filesystem path, or ``builtin:<name>`` for files shipped in the package.

    A bare name that does not exist on disk but matches a shipped config or
    data file also resolves to the shipped copy.
    """
    root = resources.files("taxograph")
    if ref.startswith("builtin:"):
        name = ref[len("builtin:"):]
        for sub in ("configs", "data"):
            cand = Path(str(root / sub / name))
            if cand.exists():
                return cand
        raise ConfigError(f"no shipped file named {name!r}")
    path = Path(ref)
    if path.exists() or not must_exist:
        return path
    if path.parent == Path("."):
        for sub in ("configs", "data"):
            cand = Path(str(root / sub / ref))
            if cand.exists():
                return cand
    raise ConfigError(f"{ref}: no such file or directory")


def resolve_seed(flag: int | None, configured: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return configured


def read_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ gen


@dataclass
class GenSpec:
    taxonomy: str = "builtin:human_body.json"
    domains: list[str] | None = None
    train: int = 200
    test: int = 50
    base: DatasetSpec = DatasetSpec(domain="")

    @classmethod
    def load(cls, path: Path) -> "GenSpec":
        doc = read_json(path)
        ds_keys = {f.name for f in fields(DatasetSpec)} - {"domain", "count"}
        _check_keys(doc, {"taxonomy", "domains", "train", "test"} | ds_keys, str(path))
        ds = {k: doc[k] for k in ds_keys if k in doc}
        if "radius" in ds:
            ds["radius"] = tuple(ds["radius"])
        spec = cls(doc.get("taxonomy", cls.taxonomy), doc.get("domains"), int(doc.get("train", 200)),
                   int(doc.get("test", 50)), DatasetSpec(domain="", **ds))
        if spec.train < 0 or spec.test < 0:
            raise ConfigError("scene counts must be non-negative")
        return spec


def _gen_scene(job: tuple[DatasetSpec, LabelTaxonomy, str, int, str | None]) -> SceneSample:
    spec, taxonomy, split, index, fine = job
    if spec.instance:
        return generate_panoptic_scene(spec, taxonomy, split, index)
    return generate_parsing_scene(spec, taxonomy, split, index, fine)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def cmd_gen(args: argparse.Namespace) -> int:
    if not args.spec or not args.out:
        raise ConfigError("gen needs --spec and --out")
    spec = GenSpec.load(resolve_path(args.spec))
    taxonomy = load_taxonomy(resolve_path(spec.taxonomy))
    base = replace(spec.base, seed=resolve_seed(args.seed, spec.base.seed))
    if base.instance:
        domains = spec.domains or ["panoptic"]
        fine = None
    else:
        domains = spec.domains or taxonomy.domain_names
        for d in domains:
            taxonomy.domain(d)
        fine = finest_domain(taxonomy)
    out = Path(args.out)
    for d in domains:
        ds = replace(base, domain=d)
        counts = {}
        for split, n in (("train", spec.train), ("test", spec.test)):
            samples = _map(_gen_scene, [(ds, taxonomy, split, i, fine) for i in range(n)], args.workers)
            for i, s in enumerate(samples):
                save_sample(s, out / d / split / f"{i:05d}")
            counts[split] = n
        print(f"{d}: {counts['train']} train, {counts['test']} test")
    manifest = {"taxonomy": taxonomy.to_dict(), "domains": domains, "train": spec.train, "test": spec.test,
                "spec": {k: v for k, v in base.__dict__.items() if k != "domain"}}
    write_text(out / "dataset.json", json.dumps(manifest, sort_keys=True, indent=1))
    return EXIT_OK


# ------------------------------------------------------------------ experiment config


@dataclass
class ExperimentConfig:
    mode: str
    taxonomy: str
    embeddings: str | None
    data: str
    checkpoint: str
    domains: list[str]
    source: str | None
    new_domain: str | None
    base_checkpoint: str | None
    model: dict
    optimizer: dict
    seed: int

    OPTIMIZER_KEYS = ("lr", "momentum", "weight_decay", "max_iter", "power", "clip_norm", "batch_size", "pretrain_iter")

    @classmethod
    def from_dict(cls, doc: dict, where: str = "config") -> "ExperimentConfig":
        _check_keys(doc, {"mode", "paths", "domains", "source", "new_domain", "model", "intra", "transfer",
                          "optimizer", "seed"}, where)
        mode = doc.get("mode", "single")
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, not {mode!r}")
        paths = doc.get("paths", {})
        _check_keys(paths, {"taxonomy", "embeddings", "data", "checkpoint", "from"}, f"{where}.paths")
        opt = doc.get("optimizer", {})
        _check_keys(opt, set(cls.OPTIMIZER_KEYS), f"{where}.optimizer")
        model = dict(doc.get("model", {}))
        intra = doc.get("intra", {})
        _check_keys(intra, {"enabled", "use_adjacency"}, f"{where}.intra")
        transfer = doc.get("transfer", {})
        _check_keys(transfer, {"scheme", "bidirectional", "activation"}, f"{where}.transfer")
        if "enabled" in intra:
            model["intra_enabled"] = bool(intra["enabled"])
        if "use_adjacency" in intra:
            model["use_adjacency"] = bool(intra["use_adjacency"])
        if "scheme" in transfer:
            model["scheme"] = transfer["scheme"]
        if "bidirectional" in transfer:
            model["bidirectional"] = transfer["bidirectional"]
        if "activation" in transfer and mode != "panoptic":
            model["transfer_activation"] = transfer["activation"]
        default_tax = "builtin:panoptic_taxonomy.json" if mode == "panoptic" else "builtin:human_body.json"
        domains = list(doc.get("domains", ["panoptic"] if mode == "panoptic" else ["medium"]))
        if not domains:
            raise ConfigError("config lists no domains")
        return cls(mode, paths.get("taxonomy", default_tax), paths.get("embeddings"), paths.get("data", "data"),
                   paths.get("checkpoint", f"runs/{mode}"), domains, doc.get("source"), doc.get("new_domain"),
                   paths.get("from"), model, dict(opt), int(doc.get("seed", 0)))

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        return cls.from_dict(read_json(path), str(path))

    def optim(self):
        from .training import OptimState

        kw = {k: v for k, v in self.optimizer.items() if k not in ("batch_size", "pretrain_iter")}
        state = OptimState(**kw)
        if state.max_iter < 1:
            raise ConfigError("optimizer.max_iter must be at least 1")
        return state

    @property
    def batch_size(self) -> int:
        n = int(self.optimizer.get("batch_size", 4))
        if n < 1:
            raise ConfigError("optimizer.batch_size must be at least 1")
        return n


def _model_config(cfg: ExperimentConfig):
    if cfg.mode == "panoptic":
        from .panoptic import PanopticConfig

        return PanopticConfig.from_dict(cfg.model)
    from .training import ModelConfig

    return ModelConfig.from_dict(cfg.model)


def _load_pool(data: Path, domain: str, split: str) -> list[SceneSample]:
    folder = data / domain / split
    if not folder.is_dir():
        raise ConfigError(f"no {split} data for domain {domain!r} under {data} (run gen first)")
    try:
        samples = load_split(data, domain, split)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable sample under {folder}: {exc}") from None
    if not samples:
        raise ConfigError(f"{folder} holds no samples")
    return samples


def _checkpoint_dir(ref: str) -> Path:
    p = Path(ref)
    return p.parent if p.is_file() else p


# ------------------------------------------------------------------ train


def cmd_train(args: argparse.Namespace) -> int:
    from .panoptic import PanopticModel, train_panoptic
    from .training import (GraphModel, LogRecord, incremental_extend, load_checkpoint, save_checkpoint,
                           train)

    if not args.config:
        raise ConfigError("train needs --config")
    cfg = ExperimentConfig.load(resolve_path(args.config))
    seed = resolve_seed(args.seed, cfg.seed)
    mcfg = _model_config(cfg)
    opt = cfg.optim()
    taxonomy = load_taxonomy(resolve_path(cfg.taxonomy))
    embeddings = load_embeddings(resolve_path(cfg.embeddings)) if cfg.embeddings else None
    if cfg.mode != "panoptic":
        for d in [*cfg.domains, *([cfg.source] if cfg.source else []), *([cfg.new_domain] if cfg.new_domain else [])]:
            taxonomy.domain(d)
        if "semantic" in (getattr(mcfg, "scheme", None) or "") and embeddings is None:
            raise ConfigError("semantic transfer needs paths.embeddings")
    data = resolve_path(cfg.data)
    out = Path(args.out or cfg.checkpoint)

    # every check that can fail on input happens before the first optimiser step
    base_ref = args.from_ or cfg.base_checkpoint
    if cfg.mode == "incremental":
        if not base_ref:
            raise ConfigError("incremental mode needs --from <checkpoint>")
        if not cfg.new_domain:
            raise ConfigError("incremental mode needs new_domain")
        model = load_checkpoint(_checkpoint_dir(base_ref))
        if cfg.new_domain in model.domains:
            raise ConfigError(f"domain {cfg.new_domain!r} already in the checkpoint")
        if embeddings is not None:
            model.embeddings = embeddings
        pools = {cfg.new_domain: _load_pool(data, cfg.new_domain, "train")}
    elif cfg.mode == "panoptic":
        model = PanopticModel(taxonomy, mcfg, seed=seed)
        pools = {"panoptic": _load_pool(data, cfg.domains[0], "train")}
    else:
        if cfg.mode == "single" and len(cfg.domains) != 1:
            raise ConfigError("single mode trains exactly one domain")
        if cfg.mode == "transfer":
            if not cfg.source or len(cfg.domains) != 1:
                raise ConfigError("transfer mode needs a source and exactly one target domain")
            if mcfg.scheme is None:
                raise ConfigError("transfer mode needs transfer.scheme")
        model = GraphModel(taxonomy, mcfg, embeddings, seed=seed)
        needed = cfg.domains + ([cfg.source] if cfg.mode == "transfer" else [])
        pools = {d: _load_pool(data, d, "train") for d in needed}
    out.mkdir(parents=True, exist_ok=True)

    lines: list[str] = []

    def keep(rec: LogRecord) -> None:
        lines.append(rec.line())

    bs = cfg.batch_size
    if cfg.mode == "panoptic":
        train_panoptic(model, pools["panoptic"], opt, bs, seed, on_record=keep)
    elif cfg.mode == "incremental":
        incremental_extend(model, cfg.new_domain)
        train(model, pools, opt, bs, seed, on_record=keep)
    elif cfg.mode == "transfer":
        from .training import OptimState

        model.add_domain(cfg.source)
        pre = OptimState(**{**cfg.optim().__dict__, "max_iter": int(cfg.optimizer.get("pretrain_iter", opt.max_iter))})
        train(model, {cfg.source: pools[cfg.source]}, pre, bs, seed, on_record=keep)
        model.add_domain(cfg.domains[0])
        train(model, {cfg.domains[0]: pools[cfg.domains[0]]}, opt, bs, seed, on_record=keep)
    else:
        for d in cfg.domains:
            model.add_domain(d)
        train(model, pools, opt, bs, seed, on_record=keep)

    write_text(out / "train.log", "".join(line + "\n" for line in lines))
    save_checkpoint(model, out, extra={"mode": cfg.mode, "data": str(cfg.data), "seed": seed,
                                       "test_domains": model.domains if cfg.mode != "panoptic" else cfg.domains})
    print(f"{cfg.mode}: {len(lines)} iterations, domains {', '.join(model.domains)}; checkpoint in {out}")
    return EXIT_OK


# ------------------------------------------------------------------ eval


def _eval_context(args: argparse.Namespace):
    from .training import load_checkpoint

    if not args.from_:
        raise ConfigError(f"{args.command} needs --from <checkpoint>")
    ckpt = _checkpoint_dir(args.from_)
    model = load_checkpoint(ckpt)
    extra = getattr(model, "extra", {}) or {}
    if args.config:
        data = resolve_path(ExperimentConfig.load(resolve_path(args.config)).data)
    else:
        data = resolve_path(extra.get("data", "data"))
    if getattr(model, "kind", "parsing") == "panoptic":
        folders = list(extra.get("test_domains") or ["panoptic"])
        if args.domain not in (None, "all", *folders, "panoptic"):
            raise ConfigError(f"domain {args.domain!r} is not in this panoptic checkpoint")
        return ckpt, model, data, folders[:1]
    if args.domain in (None, "all"):
        domains = list(model.domains)
    else:
        if args.domain not in model.domains:
            raise ConfigError(f"domain {args.domain!r} is not in the checkpoint (has {', '.join(model.domains)})")
        domains = [args.domain]
    return ckpt, model, data, domains


_worker_model = None


def _init_worker(ckpt: str) -> None:
    global _worker_model
    from .training import load_checkpoint

    _worker_model = load_checkpoint(ckpt)


def _predict_chunk(job: tuple[str, list[SceneSample]]) -> np.ndarray:
    from .metrics import ConfusionMatrix

    domain, samples = job
    cm = ConfusionMatrix(len(_worker_model.labels(domain)))
    for s in samples:
        cm.update(_worker_model.predict(s.features, domain), s.labels[domain])
    return cm.counts


def _confusion(model, ckpt: Path, domain: str, samples: list[SceneSample], workers: int):
    from .metrics import ConfusionMatrix
    from .training import evaluate

    if workers <= 1:
        return evaluate(model, samples, domain)
    chunks = [samples[i::workers] for i in range(workers)]
    cm = ConfusionMatrix(len(model.labels(domain)))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(str(ckpt),)) as pool:
        for counts in pool.map(_predict_chunk, [(domain, c) for c in chunks if c]):
            cm.counts += counts
    return cm


def cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import ConfusionMatrix, metrics_report, random_baseline_miou

    ckpt, model, data, domains = _eval_context(args)
    seed = resolve_seed(args.seed, 0)
    report: dict[str, Any] = {"checkpoint": str(ckpt), "domains": {}}
    if getattr(model, "kind", "parsing") == "panoptic":
        from .panoptic import evaluate_panoptic

        samples = _load_pool(data, domains[0], "test")
        cm = ConfusionMatrix(len(model.names))
        for s in samples:
            cm.update(model.predict(s)[0], s.labels["panoptic"])
        entry = metrics_report(cm, model.names)
        entry.update(evaluate_panoptic(model, samples))
        entry["random_miou"] = random_baseline_miou([s.labels["panoptic"] for s in samples], len(model.names), seed)
        report["domains"]["panoptic"] = entry
    else:
        for d in domains:
            samples = _load_pool(data, d, "test")
            if any(d not in s.labels for s in samples):
                raise ConfigError(f"test samples under {data / d} carry no {d!r} labels")
            cm = _confusion(model, ckpt, d, samples, args.workers)
            entry = metrics_report(cm, model.labels(d))
            entry["random_miou"] = random_baseline_miou([s.labels[d] for s in samples], len(model.labels(d)), seed)
            entry["scenes"] = len(samples)
            report["domains"][d] = entry
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        write_text(Path(args.out), text + "\n")
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .checks import PATHS, run_gradchecks

    paths: list[str] = []
    for p in args.path or []:
        paths += [x for x in p.split(",") if x]
    unknown = [p for p in paths if p not in PATHS]
    if unknown:
        raise ConfigError(f"unknown gradcheck path(s) {unknown}; choose from {', '.join(PATHS)}")
    results = run_gradchecks(paths or None, instances=args.instances, seed=resolve_seed(args.seed, 0), tol=args.tol)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all paths passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_FAILED


# ------------------------------------------------------------------ render


def cmd_render(args: argparse.Namespace) -> int:
    from .render import label_image, magnitude_image, write_ppm

    ckpt, model, data, domains = _eval_context(args)
    out = Path(args.out or "render")
    written = 0
    for d in domains:
        samples = _load_pool(data, d, "test")[: args.limit]
        panoptic = getattr(model, "kind", "parsing") == "panoptic"
        names = model.names if panoptic else model.labels(d)
        key = "panoptic" if panoptic else d
        for i, s in enumerate(samples):
            pred = model.predict(s)[0] if panoptic else model.predict(s.features, d)
            stem = out / key / f"{i:05d}"
            write_ppm(f"{stem}_input.ppm", magnitude_image(s.features), args.scale)
            write_ppm(f"{stem}_gt.ppm", label_image(s.labels[key], len(names)), args.scale)
            write_ppm(f"{stem}_pred.ppm", label_image(pred, len(names)), args.scale)
            written += 3
    print(f"wrote {written} images under {out}")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taxograph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        if "seed" in names:
            sp.add_argument("--seed", type=int, default=None, help=f"overrides ${SEED_ENV} and the config")
        if "workers" in names:
            sp.add_argument("--workers", type=int, default=1, help="worker processes (1 = deterministic serial)")
        if "from" in names:
            sp.add_argument("--from", dest="from_", default=None, help="checkpoint directory or its model.bin")
        if "domain" in names:
            sp.add_argument("--domain", default=None, help="domain name or 'all'")
        if "config" in names:
            sp.add_argument("--config", default=None, help="experiment config (JSON)")
        if "out" in names:
            sp.add_argument("--out", default=None)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", default=None, help="generation spec (JSON)")
    common(g, "out", "seed", "workers")

    t = sub.add_parser("train", help="train a model from an experiment config")
    common(t, "config", "out", "from", "seed")

    e = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    common(e, "config", "out", "from", "domain", "seed", "workers")

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--path", action="append", help="restrict to these paths (repeat or comma-separate)")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--instances", type=int, default=20)
    common(c, "seed")

    r = sub.add_parser("render", help="write PPM images of inputs, ground truth and predictions")
    r.add_argument("--limit", type=int, default=8, help="test scenes per domain")
    r.add_argument("--scale", type=int, default=8, help="pixel upscale factor")
    common(r, "config", "out", "from", "domain", "seed")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "render": cmd_render}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, TaxonomyError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
