#!/usr/bin/env python3
"""
Normalize - ESIL function-string normalization
Rewrites immediates, memory addresses, call/data integers and (optionally)
general purpose registers into placeholder tokens.
"""

import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, load_config, log_operation
from error_recovery import RegisterTableError
from ingest import FunctionString, check_categories, read_function_strings
from corpus import NormalizedFunction, write_normalized

logger = logging.getLogger('faser.normalize')

DEFAULT_ADDR_MIN = 4096

IMM, MEM, FUNC, DATA, REG32, REG64 = "IMM", "MEM", "FUNC", "DATA", "reg32", "reg64"

_SIGN_EXTENDED = re.compile(r"^0x[fF]{5}[0-9a-fA-F]*$")
_SHORT_HEX = re.compile(r"^0x[0-9a-fA-F]{1,3}$")
_LONG_HEX = re.compile(r"^0x[0-9a-fA-F]{4,}$")
_DECIMAL = re.compile(r"^[0-9]+$")

WIDTH_OTHER = "other"


def _regs(names: Iterable[str], width) -> Dict[str, object]:
    return {name: width for name in names}


_X86_32 = ["eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp"]
_X86_64 = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp"] + [f"r{i}" for i in range(8, 16)]
_X86_64_LOW32 = _X86_32 + [f"r{i}d" for i in range(8, 16)]
_MIPS = ["at", "v0", "v1", "a0", "a1", "a2", "a3"] + [f"t{i}" for i in range(10)] \
    + [f"s{i}" for i in range(9)] + ["fp"]
_RISCV = [f"a{i}" for i in range(8)] + [f"t{i}" for i in range(7)] + [f"s{i}" for i in range(12)]

# General purpose registers only; sp/pc/flags style registers stay unchanged.
BUILTIN_TABLES: Dict[str, Dict[str, object]] = {
    "x86": _regs(_X86_32, 32),
    "x86-64": {**_regs(_X86_64, 64), **_regs(_X86_64_LOW32, 32)},
    "arm32": _regs([f"r{i}" for i in range(13)] + ["sb", "sl", "fp", "ip"], 32),
    "arm64": {**_regs([f"x{i}" for i in range(31)], 64), **_regs([f"w{i}" for i in range(31)], 32)},
    "mips32": _regs(_MIPS, 32),
    "mips64": _regs(_MIPS, 64),
    "riscv32": _regs(_RISCV, 32),
    "riscv64": _regs(_RISCV, 64),
}

ARCH_ALIASES = {
    "x86_64": "x86-64", "amd64": "x86-64", "x64": "x86-64",
    "i386": "x86", "x86-32": "x86",
    "arm": "arm32", "armv7": "arm32",
    "aarch64": "arm64",
    "mips": "mips32",
    "riscv": "riscv32", "rv32": "riscv32", "rv64": "riscv64",
}


def canonical_architecture(architecture: str) -> str:
    arch = architecture.strip().lower()
    return ARCH_ALIASES.get(arch, arch)


@dataclass(frozen=True)
class NormalizationMode:
    register_normalization: bool = False
    addr_min: int = DEFAULT_ADDR_MIN

    @property
    def name(self) -> str:
        return "RN" if self.register_normalization else "NRM"


class RegisterTable:
    """Per-architecture register -> width-class lookup (case-insensitive)."""

    def __init__(self, tables: Optional[Mapping[str, Mapping[str, object]]] = None):
        self._tables: Dict[str, Dict[str, object]] = {}
        for arch, table in (tables if tables is not None else BUILTIN_TABLES).items():
            self._tables[canonical_architecture(arch)] = {
                reg.lower(): self._width_class(arch, reg, width) for reg, width in table.items()
            }

    @staticmethod
    def _width_class(arch: str, reg: str, width) -> object:
        if width in (32, 64):
            return width
        if width in (WIDTH_OTHER, None):
            return WIDTH_OTHER
        raise RegisterTableError(f"{arch}: register {reg!r} has invalid width {width!r}")

    @classmethod
    def builtin(cls) -> 'RegisterTable':
        return cls(BUILTIN_TABLES)

    @classmethod
    def from_file(cls, path, merge_builtin: bool = True) -> 'RegisterTable':
        """Load a JSON file mapping architecture -> {register: 32|64}."""
        try:
            with open(path, encoding='utf-8') as f:
                overrides = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise RegisterTableError(f"cannot read register table {path}: {e}") from e
        if not isinstance(overrides, dict) or not all(isinstance(v, dict) for v in overrides.values()):
            raise RegisterTableError(f"{path}: expected an object of architecture -> register map")

        tables = {arch: dict(table) for arch, table in BUILTIN_TABLES.items()} if merge_builtin else {}
        for arch, table in overrides.items():
            tables.setdefault(canonical_architecture(arch), {}).update(table)
        return cls(tables)

    def has(self, architecture: str) -> bool:
        return canonical_architecture(architecture) in self._tables

    def architectures(self) -> List[str]:
        return sorted(self._tables)

    def width(self, architecture: str, register: str):
        """Width class of a register, or None if it is not in the table."""
        table = self._tables.get(canonical_architecture(architecture))
        if table is None:
            return None
        return table.get(register.lower())

    def registers(self, architecture: str) -> Dict[str, object]:
        return dict(self._tables.get(canonical_architecture(architecture), {}))


def _at_least(digits: str, bound: int) -> bool:
    # more digits than the bound means larger
    digits = digits.lstrip("0") or "0"
    if len(digits) > len(str(bound)):
        return True
    return int(digits) >= bound


def normalize_token(tok: str, opcode_category: str = "other", architecture: str = "",
                    mode: NormalizationMode = NormalizationMode(),
                    regs: Optional[RegisterTable] = None) -> str:
    """Rewrite a single ESIL token. Rules are tried in order, first match wins."""
    if _SIGN_EXTENDED.match(tok):
        return IMM
    if _SHORT_HEX.match(tok):
        return IMM
    if _LONG_HEX.match(tok):
        return MEM
    if _DECIMAL.match(tok) and _at_least(tok, mode.addr_min):
        return FUNC if opcode_category == "call" else DATA
    if mode.register_normalization and regs is not None:
        width = regs.width(architecture, tok)
        if width == 32:
            return REG32
        if width == 64:
            return REG64
    return tok


def normalize_function(fs: FunctionString, mode: NormalizationMode = NormalizationMode(),
                       regs: Optional[RegisterTable] = None) -> NormalizedFunction:
    """Normalize every token of a function string, one token in, one token out."""
    architecture = fs.meta.architecture
    if mode.register_normalization:
        if regs is None or not regs.has(architecture):
            raise RegisterTableError(f"no register table for architecture {architecture!r}")

    tokens = fs.tokens()
    check_categories(fs.label, tokens, fs.categories)
    categories = fs.categories or ("o" * len(tokens))
    out = [
        normalize_token(tok, "call" if cat == "c" else "other", architecture, mode, regs)
        for tok, cat in zip(tokens, categories)
    ]
    return NormalizedFunction(
        label=fs.label,
        meta=fs.meta,
        body=",".join(out),
        token_count=len(out),
        categories=fs.categories,
    )


class Normalizer:
    """Function-string file -> normalized function file."""

    def __init__(self, config: Optional[Dict] = None, register_normalization: Optional[bool] = None,
                 addr_min: Optional[int] = None, reg_table: Optional[str] = None):
        self.config = config if config is not None else load_config()
        settings = config_section(self.config, 'normalize')

        if register_normalization is None:
            register_normalization = bool(settings.get('register_normalization', False))
        if addr_min is None:
            addr_min = int(settings.get('addr_min', DEFAULT_ADDR_MIN))
        reg_table = reg_table or settings.get('reg_table')

        self.mode = NormalizationMode(register_normalization, addr_min)
        self.regs = RegisterTable.from_file(reg_table) if reg_table else RegisterTable.builtin()

    def normalize_corpus(self, strings: List[FunctionString]) -> List[NormalizedFunction]:
        return [normalize_function(fs, self.mode, self.regs) for fs in strings]

    def run(self, in_path, out_path) -> Dict:
        strings = read_function_strings(in_path)
        normalized = self.normalize_corpus(strings)
        write_normalized(out_path, normalized)

        vocab_before = {tok for fs in strings for tok in fs.tokens()}
        vocab_after = {tok for nf in normalized for tok in nf.tokens()}
        stats = {
            'mode': self.mode.name,
            'addr_min': self.mode.addr_min,
            'functions': len(normalized),
            'distinct_tokens_before': len(vocab_before),
            'distinct_tokens_after': len(vocab_after),
        }
        logger.info(f"Normalized {len(normalized)} functions ({self.mode.name}), "
                    f"distinct tokens {len(vocab_before)} -> {len(vocab_after)}")
        log_operation('Normalize', 'run', 'success', stats)
        return stats


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Normalize - ESIL token normalization')
    parser.add_argument('--in', dest='in_path', required=True)
    parser.add_argument('--out', dest='out_path', required=True)
    parser.add_argument('--register-norm', action='store_true', default=None,
                        help='Replace general purpose registers with reg32/reg64 (RN mode)')
    parser.add_argument('--addr-min', type=int, help=f'Smallest decimal treated as an address (default {DEFAULT_ADDR_MIN})')
    parser.add_argument('--reg-table', help='JSON register table overriding the built-in tables')
    args = parser.parse_args(argv)

    normalizer = Normalizer(register_normalization=args.register_norm,
                            addr_min=args.addr_min, reg_table=args.reg_table)
    print(json.dumps(normalizer.run(args.in_path, args.out_path)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
