from dataclasses import replace

import pytest

from taxograph.experiments import (ABLATION_ROWS, AblationSettings, Benchmark, audit_single_domain,
                                   run_ablation, run_incremental, run_universal)
from taxograph.synthetic import DatasetSpec
from taxograph.training import LogRecord, ModelConfig

TINY = DatasetSpec(domain="", H=12, W=12)
CFG = ModelConfig(channels=16, dim=8, depth=2, scheme="feature+semantic")


@pytest.fixture(scope="module")
def bench():
    from taxograph.taxonomy import human_body_taxonomy
    return Benchmark.generate(human_body_taxonomy(), ["coarse", "medium", "fine"], TINY, 8, 4)


def test_benchmark_shapes(bench):
    assert set(bench.train) == {"coarse", "medium", "fine"}
    assert len(bench.train["fine"]) == 8 and len(bench.test["fine"]) == 4
    assert bench.train["fine"][0].ref == "fine/train/0"


def test_ablation_rows_defined():
    assert set(AblationSettings().rows) <= set(ABLATION_ROWS)


def test_ablation_smoke(body, embeddings, bench):
    s = AblationSettings(rows=tuple(ABLATION_ROWS), seeds=(0,), iterations=2, pretrain_iterations=2,
                         model={"dim": 8, "depth": 2})
    rep = run_ablation(body, embeddings, bench, s)
    assert set(rep.scores) == set(ABLATION_ROWS)
    assert all(len(v) == 1 and 0 <= v[0] <= 1 for v in rep.scores.values())
    assert "baseline" in rep.table()


def test_universal_smoke(body, embeddings, bench):
    model, rep = run_universal(body, embeddings, bench, CFG, iterations=6)
    assert set(rep.miou) == {"coarse", "medium", "fine"}
    assert audit_single_domain([r.line() for r in rep.records]) == []
    assert {r.domain for r in rep.records} == {"coarse", "medium", "fine"}


def test_audit_flags_mixed_batches():
    lines = [LogRecord(1, "fine", 1.0, 0.1, ("fine/train/0", "coarse/train/3")).line(),
             LogRecord(2, "fine", 1.0, 0.1, ()).line(),
             LogRecord(3, "coarse", 1.0, 0.1, ("coarse/train/1",)).line()]
    problems = audit_single_domain(lines)
    assert len(problems) == 2 and "iteration 1" in problems[0] and "empty" in problems[1]


def test_incremental_smoke(body, embeddings, bench):
    _, rep = run_incremental(body, embeddings, bench, ["coarse", "fine"], "medium", CFG, base_iterations=3, steps=4)
    assert rep.changed == []
    assert len(rep.records) == 4
