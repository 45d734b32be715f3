#!/usr/bin/env python3
"""
Evaluate - Retrieval evaluation for function embeddings
Search pools of 1 positive + N negatives scored by Recall@1 and MRR@10,
whole-corpus vulnerability search with mean/median rank tables, and a
held-out-architecture (zero-shot) harness.
"""

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, configure_threads, load_config, log_operation, write_json, write_jsonl
from error_recovery import ContaminationError, EvaluationError
from corpus import CorpusIndex, NormalizedFunction, read_normalized
from normalize import canonical_architecture

logger = logging.getLogger('faser.evaluate')

MRR_CUTOFF = 10
MAX_POOL_ATTEMPTS = 1000
ABSENT = "-"

# Fields a pool member must share with the query under each task.
TASK_FIXED_FIELDS: Dict[str, Tuple[str, ...]] = {
    'xm': (),
    'xo': ('architecture', 'bitness', 'compiler'),
    'xc': ('architecture', 'bitness'),
    'xa': ('compiler', 'opt_level'),
}

# Field the positive must not share with the query.
TASK_VARYING_FIELD: Dict[str, Optional[str]] = {
    'xm': None,
    'xo': 'opt_level',
    'xc': 'compiler',
    'xa': 'architecture',
}

Embedder = Callable[[Sequence[NormalizedFunction]], np.ndarray]


def provenance_matches(task: str, query: NormalizedFunction, candidate: NormalizedFunction) -> bool:
    return all(getattr(query.meta, name) == getattr(candidate.meta, name)
               for name in TASK_FIXED_FIELDS[task])


def positive_matches(task: str, query: NormalizedFunction, candidate: NormalizedFunction) -> bool:
    varying = TASK_VARYING_FIELD[task]
    if varying is not None and getattr(query.meta, varying) == getattr(candidate.meta, varying):
        return False
    return provenance_matches(task, query, candidate)


@dataclass
class SearchPool:
    pool_id: int
    query: NormalizedFunction
    positive: NormalizedFunction
    negatives: List[NormalizedFunction]
    candidates: List[NormalizedFunction]

    def to_dict(self) -> Dict:
        return {
            'pool_id': self.pool_id,
            'query': self.query.record_id,
            'positive': self.positive.record_id,
            'candidates': [fn.record_id for fn in self.candidates],
        }


@dataclass
class RankResult:
    pool_id: int
    query_id: str
    architecture: str
    ranked_ids: List[str] = field(default_factory=list)
    similarities: List[float] = field(default_factory=list)
    rank_of_positive: Optional[int] = None

    @property
    def absent(self) -> bool:
        return self.rank_of_positive is None

    def to_dict(self) -> Dict:
        record = asdict(self)
        record['absent'] = self.absent
        return record


@dataclass
class EvalSummary:
    recall_at_1: float
    mrr_at_10: float
    ranks: List[int]
    mean_rank: float
    median_rank: float
    absent: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


# --- Pools ---

def build_pools(index: CorpusIndex, num_pools: int, negatives: int = 100, seed: int = 0,
                task: str = 'xm',
                query_filter: Optional[Callable[[NormalizedFunction], bool]] = None) -> List[SearchPool]:
    """Sample search pools of one query, one same-label positive and N other-label negatives.

    Negatives come from N distinct labels, so no two share a label. Under a
    task other than xm every member shares the task's fixed provenance
    fields with the query, and the positive differs from it in the task's
    varying field.
    """
    if task not in TASK_FIXED_FIELDS:
        raise EvaluationError(f"unknown pool task {task!r}; expected one of {', '.join(TASK_FIXED_FIELDS)}")
    if negatives < 1 or num_pools < 0:
        raise EvaluationError("pools need at least one negative")
    labels = index.labels
    if len(labels) < negatives + 1:
        raise EvaluationError(f"pools of 1+{negatives} need {negatives + 1} labels, corpus has {len(labels)}")

    functions = index.functions
    query_labels = [label for label in labels if len(index.members(label)) >= 2
                    and (query_filter is None or any(query_filter(functions[i]) for i in index.members(label)))]
    if not query_labels:
        raise EvaluationError("no label has two examples and a usable query")

    rng = np.random.default_rng(seed)
    pools = []
    for pool_id in range(num_pools):
        pool = _sample_pool(pool_id, index, query_labels, negatives, task, query_filter, rng)
        if pool is None:
            raise EvaluationError(f"could not satisfy the {task} constraints for pool {pool_id} "
                                  f"after {MAX_POOL_ATTEMPTS} attempts")
        pools.append(pool)
    return pools


def _pick(rng, items: List):
    return items[int(rng.integers(len(items)))]


def _sample_pool(pool_id, index: CorpusIndex, query_labels, n_negatives, task, query_filter, rng):
    functions = index.functions
    labels = index.labels
    for _ in range(MAX_POOL_ATTEMPTS):
        query_label = _pick(rng, query_labels)
        members = index.members(query_label)
        queries = [i for i in members if query_filter is None or query_filter(functions[i])]
        if not queries:
            continue
        q = _pick(rng, queries)
        query = functions[q]
        positives = [i for i in members if i != q and positive_matches(task, query, functions[i])]
        if not positives:
            continue
        positive = functions[_pick(rng, positives)]

        chosen: List[NormalizedFunction] = []
        for j in rng.permutation(len(labels)):
            label = labels[j]
            if label == query_label:
                continue
            candidates = [i for i in index.members(label) if provenance_matches(task, query, functions[i])]
            if candidates:
                chosen.append(functions[_pick(rng, candidates)])
            if len(chosen) == n_negatives:
                break
        if len(chosen) < n_negatives:
            continue

        members_in_pool = [positive] + chosen
        order = rng.permutation(len(members_in_pool))
        return SearchPool(pool_id, query, positive, chosen, [members_in_pool[i] for i in order])
    return None


def rank_candidates(query_vector: np.ndarray, candidate_vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate order by descending cosine (stable on ties) and the raw similarities."""
    sims = np.asarray(candidate_vectors, dtype=np.float64) @ np.asarray(query_vector, dtype=np.float64)
    return np.argsort(-sims, kind='stable'), sims


def rank_pool(pool: SearchPool, embedder: Embedder) -> RankResult:
    vectors = embedder([pool.query] + pool.candidates)
    order, sims = rank_candidates(vectors[0], vectors[1:])
    ranked = [pool.candidates[i] for i in order]
    rank = next(r for r, fn in enumerate(ranked, start=1) if fn is pool.positive)
    return RankResult(
        pool_id=pool.pool_id,
        query_id=pool.query.record_id,
        architecture=pool.query.meta.architecture,
        ranked_ids=[fn.record_id for fn in ranked],
        similarities=[float(sims[i]) for i in order],
        rank_of_positive=rank,
    )


def summarize(results: Sequence) -> EvalSummary:
    """Recall@1, MRR@10 and mean/median rank. Accepts RankResults or plain ranks; absent results are skipped."""
    ranks = []
    absent = 0
    for r in results:
        rank = r.rank_of_positive if isinstance(r, RankResult) else r
        if rank is None:
            absent += 1
            continue
        ranks.append(int(rank))
    if not ranks:
        raise EvaluationError("nothing to summarize")
    n = len(ranks)
    return EvalSummary(
        recall_at_1=sum(1 for r in ranks if r == 1) / n,
        mrr_at_10=sum(1.0 / r for r in ranks if r <= MRR_CUTOFF) / n,
        ranks=ranks,
        mean_rank=float(np.mean(ranks)),
        median_rank=float(np.median(ranks)),
        absent=absent,
    )


# --- Vulnerability search ---

@dataclass
class VulnSearchReport:
    results: List[RankResult]
    summary: Optional[EvalSummary]

    def rows(self) -> List[Dict]:
        """One row per query architecture, ranks colon-joined in query order."""
        grouped: Dict[str, List[Optional[int]]] = {}
        for r in self.results:
            grouped.setdefault(r.architecture, []).append(r.rank_of_positive)
        rows = []
        for arch, ranks in grouped.items():
            present = [r for r in ranks if r is not None]
            rows.append({
                'architecture': arch,
                'ranks': ":".join(ABSENT if r is None else str(r) for r in ranks),
                'mean_rank': float(np.mean(present)) if present else None,
                'median_rank': float(np.median(present)) if present else None,
            })
        return rows

    def table(self) -> str:
        lines = [f"{'Architecture':<14}{'Ranks':<24}{'Mean Rank':>10}{'Median Rank':>13}"]
        for row in self.rows():
            lines.append(f"{row['architecture']:<14}{row['ranks']:<24}"
                         f"{_fmt(row['mean_rank']):>10}{_fmt(row['median_rank']):>13}")
        if self.summary is not None:
            lines.append(f"{'all':<14}{'':<24}{_fmt(self.summary.mean_rank):>10}"
                         f"{_fmt(self.summary.median_rank):>13}")
        return "\n".join(lines)


def _fmt(value: Optional[float]) -> str:
    return ABSENT if value is None else f"{value:g}"


def vuln_search(queries: Sequence[NormalizedFunction], target: Sequence[NormalizedFunction],
                embedder: Embedder) -> VulnSearchReport:
    """Rank every target function against each query; the first same-label hit gives the rank.

    A target row carrying the query's own record id is left out of its ranking.
    """
    if not target:
        raise EvaluationError("target corpus is empty")
    target = list(target)
    target_vectors = embedder(target)
    query_vectors = embedder(list(queries))

    results = []
    for qid, (query, qvec) in enumerate(zip(queries, query_vectors)):
        order, sims = rank_candidates(qvec, target_vectors)
        order = [i for i in order if target[i].record_id != query.record_id]
        rank = next((r for r, i in enumerate(order, start=1) if target[i].label == query.label), None)
        if rank is None:
            logger.warning(f"{query.record_id}: label absent from target corpus")
        results.append(RankResult(
            pool_id=qid,
            query_id=query.record_id,
            architecture=query.meta.architecture,
            ranked_ids=[target[i].record_id for i in order[:MRR_CUTOFF]],
            similarities=[float(sims[i]) for i in order[:MRR_CUTOFF]],
            rank_of_positive=rank,
        ))

    present = [r for r in results if not r.absent]
    return VulnSearchReport(results, summarize(results) if present else None)


# --- Zero-shot ---

def zero_shot_eval(train_architectures: Sequence[str], holdout: str, eval_corpus: Sequence[NormalizedFunction],
                   embedder: Embedder, num_pools: int = 1000, negatives: int = 100, seed: int = 0,
                   target: Optional[Sequence[NormalizedFunction]] = None):
    """Evaluate with queries restricted to an architecture never seen in training.

    Without a target corpus, pools are built from eval_corpus; with one, a
    vulnerability search runs over it. Returns (results, summary).
    """
    holdout = canonical_architecture(holdout)
    trained = {canonical_architecture(a) for a in train_architectures}
    if holdout in trained:
        raise ContaminationError(f"holdout architecture {holdout} appears in the training corpus")
    queries = [fn for fn in eval_corpus if canonical_architecture(fn.meta.architecture) == holdout]
    if not queries:
        raise EvaluationError(f"evaluation corpus has no {holdout} functions")

    if target is not None:
        report = vuln_search(queries, target, embedder)
        if report.summary is None:
            raise EvaluationError(f"no {holdout} query label occurs in the target corpus")
        return report.results, report.summary

    index = CorpusIndex(eval_corpus)
    pools = build_pools(index, num_pools, negatives, seed, 'xm',
                        query_filter=lambda fn: canonical_architecture(fn.meta.architecture) == holdout)
    results = [rank_pool(pool, embedder) for pool in pools]
    return results, summarize(results)


# --- Embedders ---

class ArrayEmbedder:
    """Fixed vectors keyed by record id."""

    def __init__(self, vectors: Dict[str, np.ndarray]):
        self.vectors = vectors

    def __call__(self, functions: Sequence[NormalizedFunction]) -> np.ndarray:
        return np.stack([np.asarray(self.vectors[fn.record_id], dtype=np.float32) for fn in functions])


class ModelEmbedder:
    """Checkpoint + vocabulary embedder with a per-function cache."""

    def __init__(self, model, vocab, batch_size: int = 32, global_policy=None):
        self.model = model
        self.vocab = vocab
        self.batch_size = batch_size
        self.global_policy = global_policy
        self.cache: Dict[Tuple[str, str], np.ndarray] = {}

    @classmethod
    def from_files(cls, checkpoint_path, vocab_path, config: Optional[Dict] = None) -> 'ModelEmbedder':
        from checkpoint import load_checkpoint
        from vocab import GlobalAttentionPolicy, Vocabulary

        config = config if config is not None else load_config()
        model = load_checkpoint(checkpoint_path)
        vocab = Vocabulary.load(vocab_path)
        if model.cfg.vocab_size != len(vocab):
            raise EvaluationError(f"checkpoint expects {model.cfg.vocab_size} vocabulary ids, got {len(vocab)}")
        batch_size = int(config_section(config, 'evaluate').get('batch_size', 32))
        policy = GlobalAttentionPolicy(int(config_section(config, 'vocab').get('global_stride', 0)))
        return cls(model, vocab, batch_size, policy)

    @staticmethod
    def _key(fn: NormalizedFunction) -> Tuple[str, str]:
        return fn.record_id, fn.body

    def __call__(self, functions: Sequence[NormalizedFunction]) -> np.ndarray:
        from encoder import embed_functions

        missing = {}
        for fn in functions:
            key = self._key(fn)
            if key not in self.cache and key not in missing:
                missing[key] = fn
        if missing:
            vectors = embed_functions(self.model, list(missing.values()), self.vocab,
                                      batch_size=self.batch_size, global_policy=self.global_policy)
            self.cache.update(zip(missing.keys(), vectors))
        if not functions:
            return np.zeros((0, self.model.cfg.embed_dim), dtype=np.float32)
        return np.stack([self.cache[self._key(fn)] for fn in functions])


class Evaluator:
    """File-level facade used by the CLI: writes results.jsonl and summary.json."""

    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()
        settings = config_section(self.config, 'evaluate')
        self.num_pools = int(settings.get('num_pools', 1000))
        self.negatives = int(settings.get('pool_negatives', 100))
        self.seed = int(settings.get('seed', 0))
        self.task = settings.get('task', 'xm')

    def _write(self, out_dir, name: str, results: List[RankResult], summary: Optional[EvalSummary],
               extra: Optional[Dict] = None) -> Dict:
        out_dir = Path(out_dir)
        write_jsonl(out_dir / f"{name}_results.jsonl", (r.to_dict() for r in results))
        payload = dict(extra or {})
        payload['summary'] = summary.to_dict() if summary else None
        write_json(out_dir / f"{name}_summary.json", payload)
        log_operation('Evaluate', name, 'success', {
            k: v for k, v in (summary.to_dict() if summary else {}).items() if k != 'ranks'
        })
        return payload

    def pools(self, corpus_path, embedder: Embedder, out_dir, num_pools=None, negatives=None,
              seed=None, task=None) -> EvalSummary:
        num_pools = self.num_pools if num_pools is None else num_pools
        negatives = self.negatives if negatives is None else negatives
        seed = self.seed if seed is None else seed
        task = task or self.task
        index = CorpusIndex(read_normalized(corpus_path))
        pools = build_pools(index, num_pools, negatives, seed, task)
        results = [rank_pool(pool, embedder) for pool in tqdm(pools, desc="pools", leave=False, disable=None)]
        summary = summarize(results)
        logger.info(f"{task} pools 1+{negatives} x {num_pools}: "
                    f"Recall@1 {summary.recall_at_1:.3f}, MRR@10 {summary.mrr_at_10:.3f}")
        self._write(out_dir, 'pools', results, summary,
                    {'task': task, 'num_pools': num_pools, 'negatives': negatives, 'seed': seed})
        return summary

    def vuln(self, queries_path, target_path, embedder: Embedder, out_dir) -> VulnSearchReport:
        report = vuln_search(read_normalized(queries_path), read_normalized(target_path), embedder)
        self._write(out_dir, 'vuln', report.results, report.summary, {'table': report.rows()})
        return report

    def zero_shot(self, train_corpus_path, eval_corpus_path, holdout: str, embedder: Embedder, out_dir,
                  target_path=None, num_pools=None, negatives=None, seed=None) -> EvalSummary:
        trained = CorpusIndex(read_normalized(train_corpus_path)).architectures()
        target = read_normalized(target_path) if target_path else None
        results, summary = zero_shot_eval(
            trained, holdout, read_normalized(eval_corpus_path), embedder,
            num_pools=self.num_pools if num_pools is None else num_pools,
            negatives=self.negatives if negatives is None else negatives,
            seed=self.seed if seed is None else seed, target=target)
        self._write(out_dir, 'zero_shot', results, summary,
                    {'holdout': canonical_architecture(holdout), 'train_architectures': trained})
        return summary


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Evaluate - retrieval evaluation')
    sub = parser.add_subparsers(dest='action', required=True)

    def model_args(p):
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--vocab', required=True)
        p.add_argument('--out-dir', required=True)
        p.add_argument('--format', choices=('json', 'table'), default='json')
        p.add_argument('--threads', type=int)

    p_pools = sub.add_parser('pools', help='Recall@1 / MRR@10 over sampled search pools')
    p_pools.add_argument('--corpus', required=True)
    p_pools.add_argument('--num-pools', type=int)
    p_pools.add_argument('--negatives', type=int)
    p_pools.add_argument('--seed', type=int)
    p_pools.add_argument('--task', choices=sorted(TASK_FIXED_FIELDS))
    model_args(p_pools)

    p_vuln = sub.add_parser('vuln', help='Rank a whole target corpus for each query')
    p_vuln.add_argument('--queries', required=True)
    p_vuln.add_argument('--target', required=True)
    model_args(p_vuln)

    p_zero = sub.add_parser('zero-shot', help='Queries from an architecture unseen in training')
    p_zero.add_argument('--train-corpus', required=True)
    p_zero.add_argument('--eval-corpus', required=True)
    p_zero.add_argument('--holdout', required=True)
    p_zero.add_argument('--target', help='Run a vulnerability search over this corpus instead of pools')
    p_zero.add_argument('--num-pools', type=int)
    p_zero.add_argument('--negatives', type=int)
    p_zero.add_argument('--seed', type=int)
    model_args(p_zero)

    args = parser.parse_args(argv)
    configure_threads(args.threads)
    evaluator = Evaluator()
    embedder = ModelEmbedder.from_files(args.checkpoint, args.vocab, evaluator.config)

    if args.action == 'pools':
        summary = evaluator.pools(args.corpus, embedder, args.out_dir, args.num_pools, args.negatives,
                                  args.seed, args.task)
    elif args.action == 'vuln':
        report = evaluator.vuln(args.queries, args.target, embedder, args.out_dir)
        if args.format == 'table':
            print(report.table())
            return 0
        summary = report.summary
    else:
        summary = evaluator.zero_shot(args.train_corpus, args.eval_corpus, args.holdout, embedder,
                                      args.out_dir, args.target, args.num_pools, args.negatives, args.seed)

    if args.format == 'table' and summary is not None:
        print(f"Recall@1 {summary.recall_at_1:.4f}  MRR@10 {summary.mrr_at_10:.4f}  "
              f"Mean Rank {summary.mean_rank:g}  Median Rank {summary.median_rank:g}")
    else:
        print(json.dumps(summary.to_dict() if summary else None))
    return 0


if __name__ == "__main__":
    sys.exit(main())
