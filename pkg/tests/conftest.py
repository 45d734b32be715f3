import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from ingest import FunctionMeta  # noqa: E402
from corpus import NormalizedFunction  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    """Keep operation and error logs out of the repository."""
    log_dir = tmp_path / "logs"
    monkeypatch.setenv("FASER_LOG_DIR", str(log_dir))
    monkeypatch.delenv("FASER_THREADS", raising=False)
    return log_dir


def make_function(label, body, binary_id="bin0", architecture="x86-64", bitness=64,
                  compiler="gcc", opt_level="O2", categories=None) -> NormalizedFunction:
    meta = FunctionMeta(label, binary_id, architecture, bitness, compiler, opt_level)
    return NormalizedFunction(label, meta, body, len(body.split(",")), categories)


@pytest.fixture
def fn():
    return make_function
