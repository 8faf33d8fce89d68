"""Versioned binary model checkpoints.

Layout (little-endian)::

    b"S2MF" | u16 version | u8 dtype code | u32 len + config text (key=value lines)
    u32 n_params  then per tensor: u16 len + name | u8 ndim | u32 dims... | f64 data
    u32 n_buffers then the same record layout for batch-norm running stats

Values are stored as 8-byte reals so float32 and float64 models both
round-trip bit-exactly.
"""
from __future__ import annotations

import dataclasses
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, S2MFormer

MAGIC = b"S2MF"
VERSION = 1
DTYPES = {0: torch.float64, 1: torch.float32}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())


def config_from_text(text: str) -> ModelConfig:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    kw = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, raw = line.partition("=")
        if key not in fields:
            raise CheckpointError(f"unknown config field {key!r} in checkpoint")
        kw[key] = _parse_value(fields[key].type, raw)
    return ModelConfig(**kw)


def _parse_value(kind: str, raw: str):
    if raw == "None":
        return None
    if "bool" in kind:
        if raw not in ("True", "False"):
            raise CheckpointError(f"bad boolean {raw!r}")
        return raw == "True"
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def _write_tensor(buf: io.BufferedIOBase, name: str, t: torch.Tensor) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", t.dim()))
    buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
    buf.write(t.detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes())


def _read(buf: io.BufferedIOBase, fmt: str, what: str):
    size = struct.calcsize(fmt)
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return struct.unpack(fmt, data)


def _read_tensor(buf: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (n,) = _read(buf, "<H", "tensor name length")
    name = buf.read(n).decode()
    (ndim,) = _read(buf, "<B", f"rank of {name}")
    shape = _read(buf, f"<{ndim}I", f"shape of {name}")
    count = int(np.prod(shape)) if ndim else 1
    data = buf.read(8 * count)
    if len(data) != 8 * count:
        raise CheckpointError(f"truncated data for {name}")
    return name, np.frombuffer(data, dtype="<f8").reshape(shape)


def _buffers(model: S2MFormer) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.named_buffers()}


def to_bytes(model: S2MFormer) -> bytes:
    dtype = next(model.parameters()).dtype
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"unsupported parameter dtype {dtype}")
    buf = io.BytesIO()
    cfg = config_to_text(model.cfg).encode()
    buf.write(MAGIC + struct.pack("<HBI", VERSION, DTYPE_CODES[dtype], len(cfg)) + cfg)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        _write_tensor(buf, name, p)
    bufs = _buffers(model)
    buf.write(struct.pack("<I", len(bufs)))
    for name, b in bufs.items():
        _write_tensor(buf, name, b)
    return buf.getvalue()


def from_bytes(data: bytes) -> S2MFormer:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, code, n = _read(buf, "<HBI", "header")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    if code not in DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    cfg = config_from_text(buf.read(n).decode())
    model = S2MFormer(cfg).to(DTYPES[code])
    params = dict(model.named_parameters())
    bufs = _buffers(model)
    for table, what in ((params, "parameter"), (bufs, "buffer")):
        (count,) = _read(buf, "<I", f"{what} count")
        if count != len(table):
            raise CheckpointError(f"{count} {what}s stored, model has {len(table)}")
        for _ in range(count):
            name, arr = _read_tensor(buf)
            if name not in table:
                raise CheckpointError(f"unexpected {what} {name!r}")
            target = table[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise CheckpointError(f"{name}: stored shape {arr.shape}, model {tuple(target.shape)}")
            with torch.no_grad():
                target.copy_(torch.from_numpy(arr.copy()).to(target.dtype))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return model


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: S2MFormer, path: str | os.PathLike) -> None:
    atomic_write(path, to_bytes(model))


def load_checkpoint(path: str | os.PathLike) -> S2MFormer:
    return from_bytes(Path(path).read_bytes())
