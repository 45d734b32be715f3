#!/usr/bin/env python3
"""
Embedding Index - Persistent function-embedding store with exact top-k cosine search

Store layout (little-endian):
    magic  b"FASX"
    u32    format version, u32 dim, u32 count
    16     checkpoint fingerprint (blake2b-128 of the checkpoint file)
    per row: u32 + utf-8 record id, u32 + utf-8 label, 16-byte meta digest, dim x float32
"""

import hashlib
import io
import json
import logging
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, configure_threads, load_config, log_operation
from error_recovery import StoreError
from corpus import NormalizedFunction, read_normalized

logger = logging.getLogger('faser.index')

MAGIC = b"FASX"
FORMAT_VERSION = 1
DIGEST_SIZE = 16
NORM_TOLERANCE = 1e-4


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def checkpoint_fingerprint(path) -> bytes:
    return _digest(Path(path).read_bytes())


def meta_digest(fn: NormalizedFunction) -> bytes:
    return _digest(json.dumps(fn.meta.to_dict(), sort_keys=True).encode('utf-8'))


@dataclass
class EmbeddingStore:
    dim: int
    fingerprint: bytes = bytes(DIGEST_SIZE)
    record_ids: List[str] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    meta_digests: List[bytes] = field(default_factory=list)
    vectors: np.ndarray = None

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(-1, self.dim)
        self.validate()

    def validate(self):
        n = len(self.record_ids)
        if not (len(self.labels) == len(self.meta_digests) == self.vectors.shape[0] == n):
            raise StoreError("store columns have different lengths")
        if len(set(self.record_ids)) != n:
            raise StoreError("record ids are not unique")
        if len(self.fingerprint) != DIGEST_SIZE:
            raise StoreError("fingerprint must be 16 bytes")
        if n:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > NORM_TOLERANCE:
                raise StoreError(f"row {self.record_ids[worst]} has norm {norms[worst]:.6f}")

    @property
    def count(self) -> int:
        return len(self.record_ids)

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def top_k(self, query, k: int) -> List[Tuple[str, float]]:
        """Exact k most similar rows, descending; equal scores keep store order."""
        if k < 1:
            raise StoreError(f"k must be >= 1, got {k}")
        query = np.asarray(query, dtype=np.float32).reshape(-1)
        if query.shape[0] != self.dim:
            raise StoreError(f"query has dimension {query.shape[0]}, store has {self.dim}")
        scores = self.vectors @ query
        order = np.argsort(-scores, kind='stable')[:k]
        return [(self.record_ids[i], float(scores[i])) for i in order]

    def find(self, name: str) -> List[int]:
        """Rows whose record id or label equals name."""
        return [i for i, (rid, label) in enumerate(zip(self.record_ids, self.labels))
                if rid == name or label == name]

    def search(self, name: str, k: int) -> List[Dict]:
        """Nearest neighbours of the first stored function matching name, itself excluded."""
        matches = self.find(name)
        if not matches:
            raise StoreError(f"no stored function named {name!r}")
        query_row = matches[0]
        hits = self.top_k(self.vectors[query_row], min(k + 1, max(self.count, 1)))
        query_id = self.record_ids[query_row]
        positions = {rid: i for i, rid in enumerate(self.record_ids)}
        results = []
        for rid, score in hits:
            if rid == query_id:
                continue
            results.append({'rank': len(results) + 1, 'record_id': rid,
                            'label': self.labels[positions[rid]], 'similarity': score})
        return results[:k]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<III", FORMAT_VERSION, self.dim, self.count))
        buf.write(self.fingerprint)
        for rid, label, digest, row in zip(self.record_ids, self.labels, self.meta_digests, self.vectors):
            for text in (rid, label):
                raw = text.encode('utf-8')
                buf.write(struct.pack("<I", len(raw)))
                buf.write(raw)
            buf.write(digest)
            buf.write(np.asarray(row, dtype='<f4').tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'EmbeddingStore':
        view = memoryview(data)
        offset = 0

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(view):
                raise StoreError("truncated store")
            chunk = bytes(view[offset:offset + n])
            offset += n
            return chunk

        if take(4) != MAGIC:
            raise StoreError("not a FASX store (bad magic)")
        version, dim, count = struct.unpack("<III", take(12))
        if version != FORMAT_VERSION:
            raise StoreError(f"unsupported store version {version}")
        fingerprint = take(DIGEST_SIZE)
        record_ids, labels, digests, rows = [], [], [], []
        for _ in range(count):
            for column in (record_ids, labels):
                (length,) = struct.unpack("<I", take(4))
                column.append(take(length).decode('utf-8'))
            digests.append(take(DIGEST_SIZE))
            rows.append(np.frombuffer(take(4 * dim), dtype='<f4'))
        if offset != len(view):
            raise StoreError(f"{len(view) - offset} trailing bytes after last row")
        vectors = np.stack(rows).astype(np.float32) if rows else np.zeros((0, dim), dtype=np.float32)
        return cls(dim, fingerprint, record_ids, labels, digests, vectors)


def save_store(store: EmbeddingStore, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(store.to_bytes())
    tmp.replace(path)


def load_store(path) -> EmbeddingStore:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StoreError(f"cannot read store {path}: {e}") from e
    return EmbeddingStore.from_bytes(data)


def unique_record_ids(functions: Sequence[NormalizedFunction]) -> List[str]:
    """Record ids with '#n' suffixes on repeats, in input order."""
    seen: Dict[str, int] = {}
    ids = []
    for fn in functions:
        rid = fn.record_id
        n = seen.get(rid, 0)
        seen[rid] = n + 1
        ids.append(rid if n == 0 else f"{rid}#{n}")
    return ids


def build_index(corpus: Sequence[NormalizedFunction], checkpoint_path, vocab,
                batch_size: int = 32, global_policy=None) -> EmbeddingStore:
    """Embed every corpus function; rows ordered by record id so input order does not matter."""
    from checkpoint import load_checkpoint
    from encoder import embed_functions

    model = load_checkpoint(checkpoint_path)
    if model.cfg.vocab_size != len(vocab):
        raise StoreError(f"checkpoint expects a vocabulary of {model.cfg.vocab_size} ids, "
                         f"vocabulary has {len(vocab)}")

    ids = unique_record_ids(corpus)
    order = sorted(range(len(corpus)), key=lambda i: ids[i])
    functions = [corpus[i] for i in order]
    vectors = embed_functions(model, functions, vocab, batch_size=batch_size, global_policy=global_policy)
    return EmbeddingStore(
        dim=model.cfg.embed_dim,
        fingerprint=checkpoint_fingerprint(checkpoint_path),
        record_ids=[ids[i] for i in order],
        labels=[fn.label for fn in functions],
        meta_digests=[meta_digest(fn) for fn in functions],
        vectors=vectors,
    )


class IndexBuilder:
    """Corpus + checkpoint + vocabulary -> FASX store file."""

    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()
        settings = config_section(self.config, 'index')
        self.batch_size = int(settings.get('batch_size', 32))

    def run(self, corpus_path, checkpoint_path, vocab_path, out_path,
            batch_size: Optional[int] = None) -> EmbeddingStore:
        from vocab import GlobalAttentionPolicy, Vocabulary

        vocab = Vocabulary.load(vocab_path)
        policy = GlobalAttentionPolicy(int(config_section(self.config, 'vocab').get('global_stride', 0)))
        corpus = read_normalized(corpus_path)
        store = build_index(corpus, checkpoint_path, vocab, batch_size or self.batch_size, policy)
        save_store(store, out_path)
        logger.info(f"Indexed {store.count} functions (dim {store.dim}) into {out_path}")
        log_operation('Index', 'build', 'success', {'count': store.count, 'dim': store.dim,
                                                     'fingerprint': store.fingerprint.hex()})
        return store


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Embedding Index - build and search')
    sub = parser.add_subparsers(dest='action', required=True)

    p_build = sub.add_parser('build', help='Embed a normalized corpus into a store')
    p_build.add_argument('--corpus', required=True)
    p_build.add_argument('--checkpoint', required=True)
    p_build.add_argument('--vocab', required=True)
    p_build.add_argument('--out', dest='out_path', required=True)
    p_build.add_argument('--batch-size', type=int)
    p_build.add_argument('--threads', type=int)

    p_search = sub.add_parser('search', help='Nearest stored functions to a stored function')
    p_search.add_argument('--store', required=True)
    p_search.add_argument('--query-fn', required=True, help='Function name or record id')
    p_search.add_argument('--k', type=int, default=10)

    args = parser.parse_args(argv)
    if args.action == 'build':
        configure_threads(args.threads)
        store = IndexBuilder().run(args.corpus, args.checkpoint, args.vocab, args.out_path, args.batch_size)
        print(json.dumps({'count': store.count, 'dim': store.dim}))
    else:
        for hit in load_store(args.store).search(args.query_fn, args.k):
            print(f"{hit['rank']:>4}  {hit['similarity']:+.4f}  {hit['record_id']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
