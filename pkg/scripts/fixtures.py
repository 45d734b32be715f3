#!/usr/bin/env python3
"""
Fixtures - Synthetic paired ESIL corpora
Each label gets a base instruction sequence; every variant is tagged with a
pseudo-architecture, optionally has its registers consistently renamed into
that architecture's register alphabet, and then receives token-level
substitutions, insertions and deletions.
"""

import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, load_config, log_operation
from error_recovery import ConfigError
from ingest import EsilInstruction, RawFunction, serialize_corpus
from normalize import BUILTIN_TABLES, canonical_architecture

logger = logging.getLogger('faser.fixtures')

ESIL_OPERATORS = ("+", "-", "*", "/", "&", "|", "^", "<<", ">>", "%", "==", "<", ">", "<=", ">=",
                  "!", "$z", "$c", "$b", "$s", "ROL", "ROR", "SWAP", "DUP", "+=", "-=", "*=", "&=")
MEMORY_WIDTHS = ("1", "2", "4", "8")
COMPILERS = ("gcc", "clang")
OPT_LEVELS = ("O0", "O1", "O2", "O3")
CALL_BASE = 65536

# (slot,) marks a register slot, rendered per variant
Token = Union[str, Tuple[int]]


def register_alphabet(architecture: str) -> List[str]:
    """64-bit general purpose registers of an architecture, in table order."""
    arch = canonical_architecture(architecture)
    table = BUILTIN_TABLES.get(arch)
    if table is None:
        raise ConfigError(f"no register table for fixture architecture {architecture!r}")
    regs = [reg for reg, width in table.items() if width == 64]
    if not regs:
        raise ConfigError(f"fixture architecture {architecture!r} has no 64-bit registers")
    return regs


@dataclass
class SynthConfig:
    num_labels: int = 10
    variants_per_label: int = 2
    architectures: Tuple[str, ...] = ("arm64", "mips64", "x86-64")
    alphabet_size: int = 12
    min_instructions: int = 8
    max_instructions: int = 24
    registers_per_function: int = 4
    call_rate: float = 0.1
    substitution: float = 0.0
    insertion: float = 0.0
    deletion: float = 0.0
    register_renaming: float = 0.0
    seed: int = 0

    @classmethod
    def from_config(cls, config: Dict, **overrides) -> 'SynthConfig':
        settings = config_section(config, 'fixtures')
        unknown = set(settings) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown fixtures settings: {', '.join(sorted(unknown))}")
        settings.update({k: v for k, v in overrides.items() if v is not None})
        if 'architectures' in settings:
            settings['architectures'] = tuple(settings['architectures'])
        cfg = cls(**settings)
        cfg.validate()
        return cfg

    def validate(self):
        if self.num_labels < 1:
            raise ConfigError("fixtures.num_labels must be >= 1")
        if self.variants_per_label < 2:
            raise ConfigError("fixtures.variants_per_label must be >= 2")
        if not self.architectures:
            raise ConfigError("fixtures.architectures must not be empty")
        if not 1 <= self.alphabet_size <= len(ESIL_OPERATORS):
            raise ConfigError(f"fixtures.alphabet_size must be in [1, {len(ESIL_OPERATORS)}]")
        if not 1 <= self.min_instructions <= self.max_instructions:
            raise ConfigError("fixtures instruction range must satisfy 1 <= min <= max")
        smallest = min(len(register_alphabet(a)) for a in self.architectures)
        if not 1 <= self.registers_per_function <= smallest:
            raise ConfigError(f"fixtures.registers_per_function must be in [1, {smallest}]")
        for name in ("call_rate", "substitution", "insertion", "deletion", "register_renaming"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"fixtures.{name} must be in [0, 1], got {rate}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['architectures'] = list(self.architectures)
        return data


def _base_instructions(cfg: SynthConfig, rng) -> List[Tuple[List[Token], str]]:
    ops = ESIL_OPERATORS[:cfg.alphabet_size]
    slots = cfg.registers_per_function

    def reg() -> Tuple[int]:
        return (int(rng.integers(slots)),)

    def imm() -> str:
        return hex(int(rng.integers(1, 4096)))

    length = int(rng.integers(cfg.min_instructions, cfg.max_instructions + 1))
    instructions = []
    for _ in range(length):
        if rng.random() < cfg.call_rate:
            target = CALL_BASE + 16 * int(rng.integers(1, 1 << 16))
            instructions.append(([str(target), "pc", ":="], "call"))
            continue
        kind = int(rng.integers(4))
        if kind == 0:
            source = reg() if rng.random() < 0.5 else imm()
            tokens = [source, reg(), ops[int(rng.integers(len(ops)))], reg(), "="]
        elif kind == 1:
            tokens = [reg(), f"[{MEMORY_WIDTHS[int(rng.integers(4))]}]", reg(), "="]
        elif kind == 2:
            tokens = [reg(), reg(), f"=[{MEMORY_WIDTHS[int(rng.integers(4))]}]"]
        else:
            tokens = [imm(), reg(), "="]
        instructions.append((tokens, "other"))
    # every function touches at least one register
    if not any(isinstance(t, tuple) for tokens, _ in instructions for t in tokens):
        instructions.append(([imm(), (0,), "="], "other"))
    return instructions


def _mutate(instructions, cfg: SynthConfig, rng):
    ops = ESIL_OPERATORS[:cfg.alphabet_size]
    mutated = []
    for tokens, category in instructions:
        if category == "call":
            mutated.append((list(tokens), category))
            continue
        out: List[Token] = []
        for tok in tokens:
            if not isinstance(tok, tuple) and rng.random() < cfg.substitution:
                tok = ops[int(rng.integers(len(ops)))]
            if rng.random() < cfg.deletion and len(tokens) > 1:
                continue
            out.append(tok)
            if rng.random() < cfg.insertion:
                out.append(ops[int(rng.integers(len(ops)))])
        mutated.append((out or list(tokens[:1]), category))
    return mutated


def _render(instructions, registers: Sequence[str]) -> List[EsilInstruction]:
    return [
        EsilInstruction(",".join(registers[t[0]] if isinstance(t, tuple) else t for t in tokens), category)
        for tokens, category in instructions
    ]


def generate(cfg: SynthConfig) -> List[RawFunction]:
    """Deterministic synthetic corpus, labels in order, variants in order within a label."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    base_registers = register_alphabet(cfg.architectures[0])

    corpus = []
    for label_index in range(cfg.num_labels):
        name = f"fn_{label_index:05d}"
        base = _base_instructions(cfg, rng)
        for variant in range(cfg.variants_per_label):
            arch = cfg.architectures[variant % len(cfg.architectures)]
            compiler = COMPILERS[int(rng.integers(len(COMPILERS)))]
            opt_level = OPT_LEVELS[int(rng.integers(len(OPT_LEVELS)))]

            registers = base_registers
            if rng.random() < cfg.register_renaming:
                alphabet = register_alphabet(arch)
                registers = [alphabet[i] for i in rng.permutation(len(alphabet))]
            instructions = _render(_mutate(base, cfg, rng), registers)

            corpus.append(RawFunction(
                name=name,
                binary_id=f"synth-{arch}-{compiler}-{opt_level}-v{variant}",
                architecture=arch,
                bitness=64,
                compiler=compiler,
                opt_level=opt_level,
                instructions=instructions,
            ))
    return corpus


class FixtureGenerator:
    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()

    def run(self, out_path, **overrides) -> Dict:
        cfg = SynthConfig.from_config(self.config, **overrides)
        corpus = generate(cfg)
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, 'wb') as f:
            count = serialize_corpus(corpus, f)
        stats = {'functions': count, 'labels': cfg.num_labels, 'config': cfg.to_dict()}
        logger.info(f"Generated {count} functions ({cfg.num_labels} labels) -> {out_path}")
        log_operation('Fixtures', 'generate', 'success', stats)
        return stats


def add_synth_arguments(parser):
    parser.add_argument('--num-labels', type=int)
    parser.add_argument('--variants', dest='variants_per_label', type=int)
    parser.add_argument('--architectures', type=lambda s: tuple(s.split(",")),
                        help='Comma-separated pseudo-architectures')
    parser.add_argument('--substitution', type=float)
    parser.add_argument('--insertion', type=float)
    parser.add_argument('--deletion', type=float)
    parser.add_argument('--register-renaming', type=float)
    parser.add_argument('--seed', type=int)


SYNTH_FLAGS = ('num_labels', 'variants_per_label', 'architectures', 'substitution',
               'insertion', 'deletion', 'register_renaming', 'seed')


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Fixtures - synthetic corpus generation')
    sub = parser.add_subparsers(dest='action', required=True)
    p_gen = sub.add_parser('generate', help='Write a synthetic corpus')
    p_gen.add_argument('--out', dest='out_path', required=True)
    add_synth_arguments(p_gen)
    args = parser.parse_args(argv)

    stats = FixtureGenerator().run(args.out_path, **{k: getattr(args, k) for k in SYNTH_FLAGS})
    print(json.dumps({'functions': stats['functions'], 'labels': stats['labels']}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
