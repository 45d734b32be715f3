"""
Checkpoint - Versioned binary container for encoder parameters

Layout (all little-endian):
    magic  b"FASR"
    u32    format version
    u32    number of config fields, then one u32 per field in CONFIG_FIELDS order
    u32    tensor count
    per tensor: u32 name length, utf-8 name, u32 rank, u32 dims..., float32 data (row-major)
"""

import io
import struct
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))
from error_recovery import CheckpointError
from encoder import EncoderConfig, FaserEncoder

MAGIC = b"FASR"
FORMAT_VERSION = 1

# dropout is stored in parts per million so the header stays integral
CONFIG_FIELDS = ("input_len", "num_blocks", "hidden_dim", "intermediate_dim", "num_heads",
                 "window", "embed_dim", "vocab_size", "dropout_ppm", "tie_global_projections")


def _config_ints(cfg: EncoderConfig):
    return [cfg.input_len, cfg.num_blocks, cfg.hidden_dim, cfg.intermediate_dim, cfg.num_heads,
            cfg.window, cfg.embed_dim, cfg.vocab_size, int(round(cfg.dropout * 1_000_000)),
            int(cfg.tie_global_projections)]


def _config_from_ints(values) -> EncoderConfig:
    fields = dict(zip(CONFIG_FIELDS, values))
    return EncoderConfig(
        input_len=fields["input_len"], num_blocks=fields["num_blocks"],
        hidden_dim=fields["hidden_dim"], intermediate_dim=fields["intermediate_dim"],
        num_heads=fields["num_heads"], window=fields["window"], embed_dim=fields["embed_dim"],
        vocab_size=fields["vocab_size"], dropout=fields["dropout_ppm"] / 1_000_000,
        tie_global_projections=bool(fields["tie_global_projections"]),
    )


def encode_checkpoint(cfg: EncoderConfig, tensors: Dict[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    values = _config_ints(cfg)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(values)))
    buf.write(struct.pack(f"<{len(values)}I", *values))
    buf.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        raw_name = name.encode('utf-8')
        array = tensor.detach().cpu().to(torch.float32).numpy()
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", array.ndim))
        if array.ndim:
            buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Tuple[EncoderConfig, "OrderedDict[str, torch.Tensor]"]:
    view = memoryview(data)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    def u32s(count: int):
        return struct.unpack(f"<{count}I", take(4 * count))

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a FASR checkpoint (bad magic)")
    version, n_fields = u32s(2)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n_fields != len(CONFIG_FIELDS):
        raise CheckpointError(f"expected {len(CONFIG_FIELDS)} config fields, found {n_fields}")
    cfg = _config_from_ints(u32s(n_fields))

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    (count,) = u32s(1)
    for _ in range(count):
        (name_len,) = u32s(1)
        name = bytes(take(name_len)).decode('utf-8')
        (rank,) = u32s(1)
        shape = u32s(rank) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        array = np.frombuffer(bytes(take(4 * size)), dtype='<f4').reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np.float32))
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after last tensor")
    return cfg, tensors


def save_checkpoint(path, model: FaserEncoder):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model.cfg, model.state_dict()))
    tmp.replace(path)


def load_checkpoint(path) -> FaserEncoder:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    cfg, tensors = decode_checkpoint(data)
    model = FaserEncoder(cfg)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {unexpected})")
    model.eval()
    return model
