#!/usr/bin/env python3
"""
Vocab - Vocabulary construction and fixed-length encoding
Builds a frequency-ordered token vocabulary over normalized function strings
and turns functions into CLS-prefixed, padded id sequences with attention masks.
"""

import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, load_config, log_operation, write_jsonl
from error_recovery import VocabularyError
from corpus import NormalizedFunction, read_normalized

logger = logging.getLogger('faser.vocab')

PAD_TOKEN, UNK_TOKEN, CLS_TOKEN = "<PAD>", "<UNK>", "<CLS>"
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN)


class Vocabulary:
    """Token <-> id bijection; ids 0..2 are reserved for PAD/UNK/CLS."""

    def __init__(self, tokens: Sequence[str] = (), min_frequency: int = 1):
        self.min_frequency = min_frequency
        self.id_to_token: List[str] = list(RESERVED_TOKENS)
        self.token_to_id: Dict[str, int] = {}
        for tok in tokens:
            if tok in RESERVED_TOKENS:
                raise VocabularyError(f"reserved token {tok!r} cannot be a corpus token")
            if tok in self.token_to_id:
                raise VocabularyError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, tok: str) -> bool:
        return tok in self.token_to_id

    def id_of(self, tok: str) -> int:
        return self.token_to_id.get(tok, UNK_ID)

    def corpus_tokens(self) -> List[str]:
        return self.id_to_token[len(RESERVED_TOKENS):]

    def save(self, path):
        """Line k holds the token with id k."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for tok in self.id_to_token:
                f.write(f"{tok}\n")

    @classmethod
    def load(cls, path) -> 'Vocabulary':
        with open(path, encoding='utf-8') as f:
            lines = [line.rstrip("\n") for line in f]
        if tuple(lines[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise VocabularyError(f"{path}: first lines must be {', '.join(RESERVED_TOKENS)}")
        return cls(lines[len(RESERVED_TOKENS):])


@dataclass(frozen=True)
class GlobalAttentionPolicy:
    """Which positions get global attention. stride 0 means CLS only."""
    stride: int = 0

    def positions(self, true_length: int) -> List[int]:
        if self.stride <= 0:
            return [0]
        return list(range(0, true_length, self.stride))


@dataclass
class EncodedFunction:
    ids: List[int]
    attention_mask: List[int]
    global_mask: List[int]
    true_length: int
    truncated: bool = False


def build_vocab(corpus: Iterable[NormalizedFunction], min_frequency: int = 1) -> Vocabulary:
    """Vocabulary of every token seen at least min_frequency times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    counts: Counter = Counter()
    seen_any = False
    for fn in corpus:
        seen_any = True
        counts.update(tok for tok in fn.tokens() if tok not in RESERVED_TOKENS)
    if not seen_any:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")

    ordered = sorted((tok for tok, n in counts.items() if n >= min_frequency),
                     key=lambda tok: (-counts[tok], tok))
    return Vocabulary(ordered, min_frequency=min_frequency)


def encode(fn: NormalizedFunction, v: Vocabulary, input_len: int,
           global_policy: GlobalAttentionPolicy = GlobalAttentionPolicy()) -> EncodedFunction:
    """CLS + token ids, head-truncated to input_len and right-padded."""
    if input_len < 2:
        raise VocabularyError(f"input length must be >= 2, got {input_len}")

    tokens = fn.tokens()
    body_ids = [v.id_of(tok) for tok in tokens[:input_len - 1]]
    ids = [CLS_ID] + body_ids
    true_length = len(ids)
    padding = input_len - true_length

    global_mask = [0] * input_len
    for pos in global_policy.positions(true_length):
        global_mask[pos] = 1

    return EncodedFunction(
        ids=ids + [PAD_ID] * padding,
        attention_mask=[1] * true_length + [0] * padding,
        global_mask=global_mask,
        true_length=true_length,
        truncated=len(tokens) > input_len - 1,
    )


def decode(ids: Sequence[int], v: Vocabulary) -> List[str]:
    """Tokens of an encoded function, CLS and padding stripped."""
    tokens = []
    for i in ids:
        if i in (PAD_ID, CLS_ID):
            continue
        tokens.append(v.id_to_token[i] if 0 <= i < len(v) else UNK_TOKEN)
    return tokens


def encode_batch(functions: Sequence[NormalizedFunction], v: Vocabulary, input_len: int,
                 global_policy: GlobalAttentionPolicy = GlobalAttentionPolicy()):
    """Encode functions into (ids, attention_mask, global_mask) long/bool tensors."""
    import torch

    encoded = [encode(fn, v, input_len, global_policy) for fn in functions]
    ids = torch.tensor([e.ids for e in encoded], dtype=torch.long).reshape(len(encoded), input_len)
    attention = torch.tensor([e.attention_mask for e in encoded], dtype=torch.bool).reshape(len(encoded), input_len)
    global_mask = torch.tensor([e.global_mask for e in encoded], dtype=torch.bool).reshape(len(encoded), input_len)
    return ids, attention, global_mask


class VocabBuilder:
    """Normalized corpus -> vocabulary file, and corpus -> encoded id file."""

    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()
        settings = config_section(self.config, 'vocab')
        self.min_frequency = int(settings.get('min_frequency', 1))
        self.input_len = int(config_section(self.config, 'encoder').get('input_len', 128))
        self.global_policy = GlobalAttentionPolicy(int(settings.get('global_stride', 0)))

    def build(self, in_path, out_path, min_frequency: Optional[int] = None) -> Vocabulary:
        min_frequency = self.min_frequency if min_frequency is None else min_frequency
        vocab = build_vocab(read_normalized(in_path), min_frequency)
        vocab.save(out_path)
        logger.info(f"Vocabulary of {len(vocab)} ids written to {out_path}")
        log_operation('Vocab', 'build', 'success', {'size': len(vocab), 'min_frequency': min_frequency})
        return vocab

    def encode_file(self, in_path, vocab_path, out_path, input_len: Optional[int] = None) -> Dict:
        vocab = Vocabulary.load(vocab_path)
        input_len = input_len or self.input_len
        functions = read_normalized(in_path)
        encoded = [encode(fn, vocab, input_len, self.global_policy) for fn in functions]
        write_jsonl(out_path, (
            {"label": fn.label, "ids": e.ids, "attention_mask": e.attention_mask,
             "global_mask": e.global_mask, "true_length": e.true_length}
            for fn, e in zip(functions, encoded)
        ))

        unknown = sum(1 for fn in functions for tok in fn.tokens() if tok not in vocab)
        stats = {
            'functions': len(encoded),
            'input_len': input_len,
            'truncated': sum(1 for e in encoded if e.truncated),
            'unknown_tokens': unknown,
        }
        logger.info(f"Encoded {len(encoded)} functions, {stats['truncated']} truncated at {input_len}")
        log_operation('Vocab', 'encode', 'success', stats)
        return stats


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Vocab - vocabulary build and encoding')
    sub = parser.add_subparsers(dest='action', required=True)

    p_build = sub.add_parser('build', help='Build a vocabulary from a normalized corpus')
    p_build.add_argument('--in', dest='in_path', required=True)
    p_build.add_argument('--out', dest='out_path', required=True)
    p_build.add_argument('--min-frequency', type=int)

    p_encode = sub.add_parser('encode', help='Encode a normalized corpus to id sequences')
    p_encode.add_argument('--in', dest='in_path', required=True)
    p_encode.add_argument('--vocab', required=True)
    p_encode.add_argument('--out', dest='out_path', required=True)
    p_encode.add_argument('--input-len', type=int)

    args = parser.parse_args(argv)
    builder = VocabBuilder()
    if args.action == 'build':
        vocab = builder.build(args.in_path, args.out_path, args.min_frequency)
        print(json.dumps({'size': len(vocab)}))
    else:
        print(json.dumps(builder.encode_file(args.in_path, args.vocab, args.out_path, args.input_len)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
