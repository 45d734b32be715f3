"""
Corpus - Normalized function records and the label index over them
"""

import sys
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

sys.path.insert(0, str(Path(__file__).parent))
from utils import read_jsonl, write_jsonl
from ingest import FunctionMeta, check_categories


@dataclass
class NormalizedFunction:
    label: str
    meta: FunctionMeta
    body: str
    token_count: int
    categories: Optional[str] = None

    def tokens(self) -> List[str]:
        return self.body.split(",") if self.body else []

    @property
    def record_id(self) -> str:
        return f"{self.meta.binary_id}::{self.label}"

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
    def from_dict(cls, data: Dict) -> 'NormalizedFunction':
        fn = cls(
            label=data["label"],
            meta=FunctionMeta.from_dict(data["meta"]),
            body=data["body"],
            token_count=int(data["token_count"]),
            categories=data.get("categories"),
        )
        check_categories(fn.label, fn.tokens(), fn.categories)
        return fn


def read_normalized(path) -> List[NormalizedFunction]:
    return [NormalizedFunction.from_dict(record) for record in read_jsonl(path)]


def write_normalized(path, functions: Iterable[NormalizedFunction]) -> int:
    return write_jsonl(path, (fn.to_dict() for fn in functions))


class CorpusIndex:
    """Groups corpus positions by label, labels kept in first-seen order."""

    def __init__(self, functions: Sequence[NormalizedFunction]):
        self.functions = list(functions)
        self.by_label: "OrderedDict[str, List[int]]" = OrderedDict()
        for i, fn in enumerate(self.functions):
            self.by_label.setdefault(fn.label, []).append(i)

    def __len__(self) -> int:
        return len(self.functions)

    @property
    def labels(self) -> List[str]:
        return list(self.by_label)

    def members(self, label: str) -> List[int]:
        return self.by_label.get(label, [])

    def architectures(self) -> List[str]:
        return sorted({fn.meta.architecture for fn in self.functions})
