import json
import math

import numpy as np
import pytest

from conftest import make_function
from corpus import CorpusIndex, write_normalized
from error_recovery import ContaminationError, EvaluationError
from evaluate import (TASK_FIXED_FIELDS, TASK_VARYING_FIELD, ArrayEmbedder, Evaluator, RankResult, SearchPool, build_pools,
                      rank_pool, summarize, vuln_search, zero_shot_eval)

ARCHS = ("x86-64", "arm64")
OPTS = ("O0", "O2")


def corpus(labels=30, compilers=("gcc",)):
    return [make_function(f"f{i:03d}", f"op{i},r{a},{o},{cc}", binary_id=f"{arch}-{opt}-{cc}",
                          architecture=arch, opt_level=opt, compiler=cc)
            for i in range(labels) for a, arch in enumerate(ARCHS) for o, opt in enumerate(OPTS)
            for cc in compilers]


def random_embedder(functions, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    vectors = {}
    for fn in functions:
        v = rng.normal(size=dim)
        vectors[fn.record_id] = v / np.linalg.norm(v)
    return ArrayEmbedder(vectors)


def unit(*components, dim=8):
    v = np.zeros(dim)
    for axis, value in components:
        v[axis] = value
    return v / np.linalg.norm(v)


# --- Metrics ---

def test_summary_recall_and_mrr():
    s = summarize([1, 1, 2, 11])
    assert s.recall_at_1 == 0.5
    assert s.mrr_at_10 == pytest.approx((1 + 1 + 0.5 + 0) / 4)
    assert s.mrr_at_10 == pytest.approx(0.625)


def test_summary_mean_and_median():
    s = summarize([3, 7])
    assert s.mean_rank == 5.0
    assert s.median_rank == 5.0
    s = summarize([1, 5, 1, 1])
    assert s.mean_rank == 2.0
    assert s.median_rank == 1.0


def test_summary_skips_absent_results():
    results = [RankResult(0, "q0", "x86-64", rank_of_positive=2), RankResult(1, "q1", "x86-64")]
    s = summarize(results)
    assert s.ranks == [2] and s.absent == 1
    with pytest.raises(EvaluationError):
        summarize([])


def test_metric_bounds():
    rng = np.random.default_rng(4)
    for _ in range(100):
        ranks = rng.integers(1, 102, size=int(rng.integers(1, 20))).tolist()
        s = summarize(ranks)
        assert 0.0 <= s.recall_at_1 <= s.mrr_at_10 <= 1.0
        assert s.mean_rank >= 1.0


# --- Pools ---

def test_pool_invariants():
    index = CorpusIndex(corpus())
    pools = build_pools(index, 50, negatives=10, seed=1)
    assert len(pools) == 50
    for pool in pools:
        assert pool.positive.label == pool.query.label
        assert pool.positive is not pool.query
        labels = [fn.label for fn in pool.negatives]
        assert len(set(labels)) == 10
        assert pool.query.label not in labels
        assert len(pool.candidates) == 11
        assert {id(fn) for fn in pool.candidates} == {id(pool.positive)} | {id(fn) for fn in pool.negatives}


def test_pools_are_deterministic():
    index = CorpusIndex(corpus())
    first = [p.to_dict() for p in build_pools(index, 20, negatives=5, seed=9)]
    assert first == [p.to_dict() for p in build_pools(index, 20, negatives=5, seed=9)]
    assert first != [p.to_dict() for p in build_pools(index, 20, negatives=5, seed=10)]


def test_single_negative_pool():
    pools = build_pools(CorpusIndex(corpus(labels=2)), 5, negatives=1)
    assert all(len(p.candidates) == 2 for p in pools)


def test_pool_errors():
    index = CorpusIndex(corpus(labels=5))
    with pytest.raises(EvaluationError):
        build_pools(index, 3, negatives=5)
    with pytest.raises(EvaluationError):
        build_pools(index, 3, negatives=2, task="bogus")
    singletons = CorpusIndex([make_function(f"s{i}", "x") for i in range(4)])
    with pytest.raises(EvaluationError):
        build_pools(singletons, 1, negatives=2)


@pytest.mark.parametrize("task", sorted(TASK_FIXED_FIELDS))
def test_task_constraints_hold(task):
    index = CorpusIndex(corpus(compilers=("gcc", "clang")))
    varying = TASK_VARYING_FIELD[task]
    for pool in build_pools(index, 30, negatives=5, seed=2, task=task):
        for member in [pool.positive] + pool.negatives:
            for name in TASK_FIXED_FIELDS[task]:
                assert getattr(member.meta, name) == getattr(pool.query.meta, name)
        if varying is not None:
            assert getattr(pool.positive.meta, varying) != getattr(pool.query.meta, varying)


def test_cross_architecture_positive_never_shares_architecture():
    index = CorpusIndex(corpus(labels=12))
    for pool in build_pools(index, 200, negatives=5, seed=0, task="xa"):
        assert pool.positive.meta.architecture != pool.query.meta.architecture
        assert pool.positive.meta.opt_level == pool.query.meta.opt_level


def test_cross_compiler_needs_a_second_compiler():
    with pytest.raises(EvaluationError, match="xc"):
        build_pools(CorpusIndex(corpus(labels=6)), 1, negatives=2, task="xc")


def test_unsatisfiable_task_fails_after_bounded_attempts():
    fns = [make_function(f"f{i}", f"x{i},{v}", binary_id=f"{arch}", architecture=arch)
           for i in range(6) for v, arch in enumerate(ARCHS)]
    with pytest.raises(EvaluationError, match="xc"):
        build_pools(CorpusIndex(fns), 1, negatives=2, task="xc")


# --- Ranking ---

def manual_pool(candidate_vectors, positive_at):
    query = make_function("q", "a", binary_id="query")
    candidates = []
    vectors = {query.record_id: unit((0, 1.0))}
    for i, vector in enumerate(candidate_vectors):
        fn = make_function("q" if i == positive_at else f"n{i}", "b", binary_id=f"c{i}")
        candidates.append(fn)
        vectors[fn.record_id] = vector
    pool = SearchPool(0, query, candidates[positive_at],
                      [c for i, c in enumerate(candidates) if i != positive_at], candidates)
    return pool, ArrayEmbedder(vectors)


def test_rank_counts_strictly_better_candidates():
    vectors = [unit((0, 0.2), (1, 1.0)), unit((0, 1.0), (2, 0.1)), unit((0, 0.5), (3, 1.0)),
               unit((0, 1.0), (4, 0.01))]
    pool, embedder = manual_pool(vectors, positive_at=2)
    result = rank_pool(pool, embedder)
    assert result.rank_of_positive == 3
    assert result.similarities == sorted(result.similarities, reverse=True)
    assert result.ranked_ids[2] == pool.positive.record_id


def test_ties_keep_candidate_order():
    same = unit((0, 1.0))
    pool, embedder = manual_pool([same, same, same], positive_at=1)
    assert rank_pool(pool, embedder).rank_of_positive == 2


def test_rank_oracle_over_random_pools():
    fns = corpus()
    index = CorpusIndex(fns)
    embedder = random_embedder(fns)
    pools = build_pools(index, 1000, negatives=20, seed=5)
    ranks = []
    for pool in pools:
        q = embedder([pool.query])[0].astype(np.float64)
        sp = float(embedder([pool.positive])[0] @ q)
        expected = 1 + sum(1 for fn in pool.negatives if float(embedder([fn])[0] @ q) > sp)
        result = rank_pool(pool, embedder)
        assert result.rank_of_positive == expected
        ranks.append(expected)

    s = summarize(ranks)
    assert s.recall_at_1 == pytest.approx(np.mean([r == 1 for r in ranks]))
    assert s.mrr_at_10 == pytest.approx(np.mean([1 / r if r <= 10 else 0 for r in ranks]))
    # random embeddings sit near chance
    assert s.recall_at_1 < 0.2


def test_perfect_embedder_scores_one():
    fns = corpus()
    vectors = {}
    for i, label in enumerate(sorted({fn.label for fn in fns})):
        for fn in fns:
            if fn.label == label:
                vectors[fn.record_id] = unit((i, 1.0), dim=len(fns))
    pools = build_pools(CorpusIndex(fns), 50, negatives=10)
    s = summarize([rank_pool(p, ArrayEmbedder(vectors)) for p in pools])
    assert s.recall_at_1 == 1.0 and s.mrr_at_10 == 1.0


# --- Vulnerability search ---

def vuln_fixture():
    queries = [make_function(label, "q", binary_id="query", architecture="x86-64") for label in "ABCD"]
    target = [make_function(label, "t", binary_id="target", architecture="arm64") for label in "ABCD"]
    decoys = [make_function(f"X{i}", "t", binary_id="target", architecture="arm64") for i in range(4)]
    vectors = {
        "query::A": unit((0, 1.0)), "query::B": unit((1, 1.0)),
        "query::C": unit((2, 1.0)), "query::D": unit((3, 1.0)),
        "target::A": unit((0, 1.0)), "target::B": unit((1, 0.5), (7, math.sqrt(0.75))),
        "target::C": unit((2, 1.0)), "target::D": unit((3, 1.0)),
    }
    for fn in decoys:
        vectors[fn.record_id] = unit((1, 0.9), (6, math.sqrt(0.19)))
    return queries, target + decoys, ArrayEmbedder(vectors)


def test_vuln_search_ranks():
    queries, target, embedder = vuln_fixture()
    report = vuln_search(queries, target, embedder)
    assert [r.rank_of_positive for r in report.results] == [1, 5, 1, 1]
    assert report.summary.mean_rank == 2.0
    assert report.summary.median_rank == 1.0
    assert report.rows() == [{"architecture": "x86-64", "ranks": "1:5:1:1",
                              "mean_rank": 2.0, "median_rank": 1.0}]
    assert "1:5:1:1" in report.table()


def test_vuln_search_marks_absent_labels():
    queries, target, embedder = vuln_fixture()
    missing = make_function("Z", "q", binary_id="query")
    embedder.vectors[missing.record_id] = unit((5, 1.0))
    report = vuln_search(queries + [missing], target, embedder)
    assert report.results[-1].absent
    assert report.rows()[0]["ranks"] == "1:5:1:1:-"
    assert report.summary.absent == 1
    assert report.summary.mean_rank == 2.0


def test_vuln_search_skips_the_query_own_record():
    query = make_function("A", "q", binary_id="fw")
    positive = make_function("A", "t", binary_id="lib")
    decoy = make_function("B", "t", binary_id="lib")
    embedder = ArrayEmbedder({
        "fw::A": unit((0, 1.0)),
        "lib::A": unit((1, 1.0)),
        "lib::B": unit((0, 0.99), (2, math.sqrt(1 - 0.99 ** 2))),
    })

    report = vuln_search([query], [query, positive, decoy], embedder)

    result = report.results[0]
    assert result.rank_of_positive == 2
    assert "fw::A" not in result.ranked_ids
    assert result.ranked_ids == ["lib::B", "lib::A"]


def test_vuln_search_query_alone_in_target_is_absent():
    query = make_function("A", "q", binary_id="fw")
    other = make_function("B", "t", binary_id="lib")
    embedder = ArrayEmbedder({"fw::A": unit((0, 1.0)), "lib::B": unit((1, 1.0))})
    report = vuln_search([query], [query, other], embedder)
    assert report.results[0].absent


def test_vuln_search_rejects_empty_target():
    queries, _, embedder = vuln_fixture()
    with pytest.raises(EvaluationError):
        vuln_search(queries, [], embedder)


# --- Zero-shot ---

def holdout_corpus():
    return [make_function(f"f{i}", f"x{i},{arch}", binary_id=arch, architecture=arch)
            for i in range(12) for arch in ("x86-64", "arm64", "mips64")]


def test_zero_shot_queries_only_from_holdout():
    fns = holdout_corpus()
    results, summary = zero_shot_eval(["x86-64", "arm64"], "mips64", fns, random_embedder(fns),
                                      num_pools=40, negatives=5, seed=3)
    assert len(results) == 40
    assert all(r.architecture == "mips64" for r in results)
    assert 0.0 <= summary.recall_at_1 <= 1.0


def test_zero_shot_detects_contamination():
    fns = holdout_corpus()
    with pytest.raises(ContaminationError):
        zero_shot_eval(["x86-64", "mips64"], "mips64", fns, random_embedder(fns))
    with pytest.raises(ContaminationError):
        zero_shot_eval(["amd64"], "x64", fns, random_embedder(fns))


def test_zero_shot_requires_holdout_functions():
    fns = holdout_corpus()
    with pytest.raises(EvaluationError, match="riscv64"):
        zero_shot_eval(["x86-64"], "riscv64", fns, random_embedder(fns))


def test_zero_shot_with_target_runs_vulnerability_search():
    fns = holdout_corpus()
    embedder = random_embedder(fns)
    target = [fn for fn in fns if fn.meta.architecture == "x86-64"]
    results, summary = zero_shot_eval(["x86-64"], "mips64", fns, embedder, target=target)
    assert len(results) == 12
    assert all(1 <= r.rank_of_positive <= 12 for r in results)
    assert summary.absent == 0


# --- Evaluator ---

def test_evaluator_writes_results_and_summary(tmp_path):
    fns = corpus(labels=12)
    path = tmp_path / "corpus.jsonl"
    write_normalized(path, fns)
    evaluator = Evaluator({"evaluate": {"num_pools": 15, "pool_negatives": 4, "seed": 1, "task": "xo"}})

    summary = evaluator.pools(path, random_embedder(fns), tmp_path / "eval")

    lines = (tmp_path / "eval" / "pools_results.jsonl").read_text().splitlines()
    assert len(lines) == 15
    assert set(json.loads(lines[0])) >= {"pool_id", "query_id", "rank_of_positive", "absent"}
    payload = json.loads((tmp_path / "eval" / "pools_summary.json").read_text())
    assert payload["task"] == "xo"
    assert payload["summary"]["recall_at_1"] == summary.recall_at_1
