"""
RunManifest - Reproducibility record written next to every command's output
"""

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

sys.path.insert(0, str(Path(__file__).parent))
from utils import TOOL_VERSION, file_digest, utc_now, write_json


@dataclass
class RunManifest:
    command: List[str]
    config: Dict
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    status: str = "running"

    @classmethod
    def start(cls, argv: Sequence[str], config: Dict, inputs: Sequence = (),
              seed: Optional[int] = None) -> 'RunManifest':
        manifest = cls(command=list(argv), config=config, seed=seed)
        for path in inputs:
            manifest.add_input(path)
        return manifest

    @staticmethod
    def _digest_entry(path) -> Optional[str]:
        path = Path(path)
        return f"sha256:{file_digest(path)}" if path.is_file() else None

    def add_input(self, path):
        if path:
            self.inputs[str(path)] = self._digest_entry(path)

    def add_output(self, path):
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file() and p.suffix != ".tmp"):
                if child.name != "manifest.json":
                    self.outputs[str(child)] = self._digest_entry(child)
        elif path.is_file():
            self.outputs[str(path)] = self._digest_entry(path)

    def finish(self, status: str = "success") -> 'RunManifest':
        self.status = status
        self.finished_at = utc_now()
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        write_json(path, self.to_dict())
        return path


def manifest_path_for(output) -> Path:
    """manifest.json inside an output directory, <file>.manifest.json beside an output file."""
    output = Path(output)
    if output.is_dir() or not output.suffix:
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")
