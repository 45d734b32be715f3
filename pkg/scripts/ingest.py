#!/usr/bin/env python3
"""
Ingest - Lifted-function corpus parsing
Reads line-delimited JSON records of ESIL-lifted functions and assembles
each function's per-instruction ESIL strings into one function string.
"""

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, load_config, log_operation, read_jsonl, write_jsonl
from error_recovery import CorpusFormatError, DataError

logger = logging.getLogger('faser.ingest')

OPCODE_CATEGORIES = ("call", "other")
FUNCTION_FIELDS = ("name", "binary_id", "architecture", "bitness", "compiler",
                   "opt_level", "instructions")
META_FIELDS = ("name", "binary_id", "architecture", "bitness", "compiler", "opt_level")


@dataclass(frozen=True)
class EsilInstruction:
    """One lifted machine instruction."""
    esil: str
    opcode_category: str = "other"

    def tokens(self) -> List[str]:
        return self.esil.split(",")

    def validate(self) -> Optional[str]:
        if not self.esil:
            return "empty esil"
        if any(not tok.strip() for tok in self.tokens()):
            return f"whitespace-only token in esil {self.esil!r}"
        if self.opcode_category not in OPCODE_CATEGORIES:
            return f"opcode_category must be one of {OPCODE_CATEGORIES}, got {self.opcode_category!r}"
        return None


@dataclass(frozen=True)
class FunctionMeta:
    """Provenance of a function: which build of which binary it came from."""
    name: str
    binary_id: str
    architecture: str
    bitness: int
    compiler: str
    opt_level: str

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'FunctionMeta':
        return cls(**{key: data[key] for key in META_FIELDS})


@dataclass
class RawFunction:
    name: str
    binary_id: str
    architecture: str
    bitness: int
    compiler: str
    opt_level: str
    instructions: List[EsilInstruction] = field(default_factory=list)

    @property
    def meta(self) -> FunctionMeta:
        return FunctionMeta(self.name, self.binary_id, self.architecture,
                            self.bitness, self.compiler, self.opt_level)

    def to_dict(self) -> Dict:
        record = self.meta.to_dict()
        record["instructions"] = [
            {"esil": ins.esil, "opcode_category": ins.opcode_category}
            for ins in self.instructions
        ]
        return record


@dataclass
class FunctionString:
    """A whole function as one comma-joined ESIL string."""
    label: str
    meta: FunctionMeta
    body: str
    token_count: int
    # per-token opcode category, needed by the FUNC/DATA rule downstream
    categories: Optional[str] = None

    def tokens(self) -> List[str]:
        return self.body.split(",")

    def to_dict(self) -> Dict:
        record = {
            "label": self.label,
            "meta": self.meta.to_dict(),
            "body": self.body,
            "token_count": self.token_count,
        }
        if self.categories is not None:
            record["categories"] = self.categories
        return record

    @classmethod
    def from_dict(cls, data: Dict) -> 'FunctionString':
        fs = cls(
            label=data["label"],
            meta=FunctionMeta.from_dict(data["meta"]),
            body=data["body"],
            token_count=int(data["token_count"]),
            categories=data.get("categories"),
        )
        check_categories(fs.label, fs.tokens(), fs.categories)
        return fs


def check_categories(label: str, tokens: List[str], categories: Optional[str]):
    """Categories, when present, carry exactly one 'c'/'o' flag per token."""
    if categories is None:
        return
    if len(categories) != len(tokens):
        raise DataError(f"{label}: {len(categories)} categories for {len(tokens)} tokens")
    if set(categories) - {"c", "o"}:
        raise DataError(f"{label}: categories must be 'c' or 'o'")


def _parse_record(record, line_number: int) -> RawFunction:
    if not isinstance(record, dict):
        raise CorpusFormatError(line_number, "record is not a JSON object")
    for key in FUNCTION_FIELDS:
        if key not in record:
            raise CorpusFormatError(line_number, f"missing field {key}")

    for key in ("name", "binary_id", "architecture", "compiler", "opt_level"):
        if not isinstance(record[key], str):
            raise CorpusFormatError(line_number, f"field {key} must be a string")
    bitness = record["bitness"]
    if isinstance(bitness, bool) or bitness not in (32, 64):
        raise CorpusFormatError(line_number, f"bitness must be 32 or 64, got {bitness!r}")

    raw_instructions = record["instructions"]
    if not isinstance(raw_instructions, list) or not raw_instructions:
        raise CorpusFormatError(line_number, "instructions must be a non-empty list")

    instructions = []
    for i, item in enumerate(raw_instructions):
        if not isinstance(item, dict) or "esil" not in item:
            raise CorpusFormatError(line_number, f"instruction {i}: missing field esil")
        esil = item["esil"]
        if not isinstance(esil, str):
            raise CorpusFormatError(line_number, f"instruction {i}: esil must be a string")
        instruction = EsilInstruction(esil, item.get("opcode_category", "other"))
        problem = instruction.validate()
        if problem:
            raise CorpusFormatError(line_number, f"instruction {i}: {problem}")
        instructions.append(instruction)

    return RawFunction(
        name=record["name"],
        binary_id=record["binary_id"],
        architecture=record["architecture"],
        bitness=bitness,
        compiler=record["compiler"],
        opt_level=record["opt_level"],
        instructions=instructions,
    )


def parse_corpus(stream: BinaryIO) -> List[RawFunction]:
    """Parse a line-delimited corpus. Functions come back in file order."""
    functions: List[RawFunction] = []
    seen = set()
    for line_number, raw_line in enumerate(stream, start=1):
        try:
            line = raw_line.decode('utf-8') if isinstance(raw_line, bytes) else raw_line
        except UnicodeDecodeError as e:
            raise CorpusFormatError(line_number, f"invalid UTF-8: {e.reason}") from e
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(line_number, f"invalid JSON: {e.msg}") from e

        function = _parse_record(record, line_number)
        key = (function.name, function.binary_id)
        if key in seen:
            raise CorpusFormatError(
                line_number, f"duplicate function {function.name!r} in binary {function.binary_id!r}")
        seen.add(key)
        functions.append(function)
    return functions


def serialize_corpus(functions: Iterable[RawFunction], stream: BinaryIO) -> int:
    """Write functions in the corpus interchange format. Returns the record count."""
    count = 0
    for function in functions:
        stream.write(json.dumps(function.to_dict()).encode('utf-8'))
        stream.write(b"\n")
        count += 1
    return count


def to_function_string(f: RawFunction) -> FunctionString:
    """Concatenate all instructions of a function into one ESIL string."""
    body = ",".join(ins.esil for ins in f.instructions)
    categories = "".join(
        ("c" if ins.opcode_category == "call" else "o") * len(ins.tokens())
        for ins in f.instructions
    )
    return FunctionString(
        label=f.name,
        meta=f.meta,
        body=body,
        token_count=len(categories),
        categories=categories,
    )


def instruction_boundaries(f: RawFunction) -> List[int]:
    """Token offsets at which each instruction starts in the function string."""
    offsets, position = [], 0
    for ins in f.instructions:
        offsets.append(position)
        position += len(ins.tokens())
    return offsets


def read_function_strings(path) -> List[FunctionString]:
    return [FunctionString.from_dict(record) for record in read_jsonl(path)]


def write_function_strings(path, strings: Iterable[FunctionString]) -> int:
    return write_jsonl(path, (s.to_dict() for s in strings))


class Ingestor:
    """Corpus file -> function-string file."""

    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()
        settings = config_section(self.config, 'ingest')
        self.min_instructions = int(settings.get('min_instructions', 0))

    def run(self, in_path, out_path) -> Dict:
        with open(in_path, 'rb') as f:
            functions = parse_corpus(f)

        kept = [fn for fn in functions if len(fn.instructions) >= self.min_instructions]
        strings = [to_function_string(fn) for fn in kept]
        write_function_strings(out_path, strings)

        stats = {
            'functions_read': len(functions),
            'functions_filtered': len(functions) - len(kept),
            'functions_written': len(strings),
            'tokens_total': sum(s.token_count for s in strings),
        }
        logger.info(f"Ingested {len(strings)} functions from {in_path} -> {out_path}")
        log_operation('Ingest', 'run', 'success', stats)
        return stats


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Ingest - lifted corpus to function strings')
    parser.add_argument('--in', dest='in_path', required=True, help='Corpus file (JSONL)')
    parser.add_argument('--out', dest='out_path', required=True, help='Function-string output (JSONL)')
    args = parser.parse_args(argv)

    stats = Ingestor().run(args.in_path, args.out_path)
    print(json.dumps(stats))
    return 0


if __name__ == "__main__":
    sys.exit(main())
