#!/usr/bin/env python3
"""
Dedup - Two-stage corpus deduplication
Stage 1 keeps the first occurrence of every (label, body) pair.
Stage 2 drops labels that cannot form a positive pair (one distinct body).
"""

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

sys.path.insert(0, str(Path(__file__).parent))
from utils import log_operation, write_json
from corpus import NormalizedFunction, read_normalized, write_normalized

logger = logging.getLogger('faser.dedup')


def dedup_key(fn: NormalizedFunction) -> bytes:
    """128-bit digest of body + NUL + label."""
    h = hashlib.blake2b(digest_size=16)
    h.update(fn.body.encode('utf-8'))
    h.update(b"\x00")
    h.update(fn.label.encode('utf-8'))
    return h.digest()


@dataclass
class DedupReport:
    input_count: int = 0
    exact_dup_removed: int = 0
    singleton_removed: int = 0
    output_count: int = 0
    removal_fraction: float = 0.0

    @classmethod
    def from_counts(cls, input_count: int, exact_dup_removed: int,
                    singleton_removed: int) -> 'DedupReport':
        output_count = input_count - exact_dup_removed - singleton_removed
        fraction = 1.0 - output_count / input_count if input_count else 0.0
        return cls(input_count, exact_dup_removed, singleton_removed, output_count, fraction)

    def to_dict(self) -> Dict:
        return asdict(self)


def dedup_exact(fns: List[NormalizedFunction]) -> Tuple[List[NormalizedFunction], int]:
    """Keep the first occurrence of each (label, body). Returns (kept, removed count)."""
    seen: Dict[bytes, List[Tuple[str, str]]] = {}
    kept = []
    for fn in fns:
        digest = dedup_key(fn)
        bucket = seen.setdefault(digest, [])
        # digest collisions fall back to comparing the strings themselves
        if any(label == fn.label and body == fn.body for label, body in bucket):
            continue
        bucket.append((fn.label, fn.body))
        kept.append(fn)
    return kept, len(fns) - len(kept)


def prune_singletons(fns: List[NormalizedFunction]) -> Tuple[List[NormalizedFunction], int]:
    """Remove every label with fewer than two distinct bodies."""
    bodies: Dict[str, set] = {}
    for fn in fns:
        bodies.setdefault(fn.label, set()).add(fn.body)
    kept = [fn for fn in fns if len(bodies[fn.label]) >= 2]
    return kept, len(fns) - len(kept)


def deduplicate(fns: List[NormalizedFunction]) -> Tuple[List[NormalizedFunction], DedupReport]:
    unique, exact_removed = dedup_exact(fns)
    kept, singleton_removed = prune_singletons(unique)
    return kept, DedupReport.from_counts(len(fns), exact_removed, singleton_removed)


class Deduplicator:
    """Normalized corpus file -> deduplicated corpus file + report. Takes no settings."""

    def run(self, in_path, out_path, report_path=None) -> DedupReport:
        functions = read_normalized(in_path)
        kept, report = deduplicate(functions)
        write_normalized(out_path, kept)
        if report_path:
            write_json(report_path, report.to_dict())

        logger.info(f"Dedup: {report.input_count} -> {report.output_count} "
                    f"({report.exact_dup_removed} duplicates, {report.singleton_removed} singletons, "
                    f"{report.removal_fraction:.1%} removed)")
        log_operation('Dedup', 'run', 'success', report.to_dict())
        return report


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Dedup - duplicate and singleton removal')
    parser.add_argument('--in', dest='in_path', required=True)
    parser.add_argument('--out', dest='out_path', required=True)
    parser.add_argument('--report', dest='report_path', help='Write the DedupReport JSON here')
    args = parser.parse_args(argv)

    report = Deduplicator().run(args.in_path, args.out_path, args.report_path)
    print(json.dumps(report.to_dict()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
