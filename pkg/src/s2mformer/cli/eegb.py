"""EEGB: a minimal binary container for continuous multichannel EEG.

Layout (little-endian)::

    b"EEGB" | u16 version | u16 channels | f32 sample_rate | u64 n_samples | u32 n_trials
    n_trials x (u64 start, u64 length, u8 label)
    channels x n_samples f32, channel-major

Only float32-representable sample values survive a round trip unchanged.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from ..features import EegRecording, ElectrodeLayout, Trial
from ..network.checkpoint import atomic_write

MAGIC = b"EEGB"
VERSION = 1
_HEADER = struct.Struct("<HHfQI")
_TRIAL = struct.Struct("<QQB")


class EegbError(ValueError):
    pass


def to_bytes(rec: EegRecording) -> bytes:
    samples = np.asarray(rec.samples)
    c, n = samples.shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEADER.pack(VERSION, c, rec.sample_rate, n, len(rec.trials)))
    for t in rec.trials:
        buf.write(_TRIAL.pack(t.start, t.length, t.label))
    buf.write(samples.astype("<f4").tobytes(order="C"))
    return buf.getvalue()


def from_bytes(data: bytes, subject: int = 0, layout: ElectrodeLayout | None = None) -> EegRecording:
    if len(data) < 4 or data[:4] != MAGIC:
        raise EegbError("bad EEGB header field 'magic'")
    if len(data) < 4 + _HEADER.size:
        raise EegbError("truncated EEGB header field 'header'")
    version, channels, sample_rate, n_samples, n_trials = _HEADER.unpack_from(data, 4)
    if version != VERSION:
        raise EegbError(f"bad EEGB header field 'version': {version} (expected {VERSION})")
    if channels == 0:
        raise EegbError("bad EEGB header field 'channels': 0")
    if not np.isfinite(sample_rate) or sample_rate <= 0:
        raise EegbError(f"bad EEGB header field 'sample_rate': {sample_rate}")
    offset = 4 + _HEADER.size
    table_end = offset + n_trials * _TRIAL.size
    if len(data) < table_end:
        raise EegbError(f"bad EEGB header field 'n_trials': table of {n_trials} trials exceeds file")
    trials = []
    for k in range(n_trials):
        start, length, label = _TRIAL.unpack_from(data, offset + k * _TRIAL.size)
        if label not in (0, 1):
            raise EegbError(f"bad EEGB trial table field 'label' in trial {k}: {label}")
        if start + length > n_samples:
            raise EegbError(f"bad EEGB trial table field 'length' in trial {k}: exceeds n_samples")
        trials.append(Trial(int(start), int(length), int(label)))
    payload = len(data) - table_end
    if payload != 4 * channels * n_samples:
        raise EegbError(f"bad EEGB header field 'n_samples': payload holds {payload} bytes, "
                        f"header declares {4 * channels * n_samples}")
    samples = np.frombuffer(data, dtype="<f4", offset=table_end).reshape(channels, n_samples)
    if layout is None and channels == 64:
        layout = ElectrodeLayout.default()
    return EegRecording(samples.astype(np.float32), float(sample_rate), trials, subject, layout)


def write_eegb(path: str | os.PathLike, rec: EegRecording) -> None:
    atomic_write(path, to_bytes(rec))


def read_eegb(path: str | os.PathLike, subject: int = 0) -> EegRecording:
    return from_bytes(Path(path).read_bytes(), subject)


def subject_files(directory: str | os.PathLike) -> list[tuple[int, Path]]:
    """``*.eegb`` files in a directory, numbered by sorted name."""
    files = sorted(Path(directory).glob("*.eegb"))
    if not files:
        raise FileNotFoundError(f"no .eegb files in {directory}")
    return list(enumerate(files))


def read_dataset(directory: str | os.PathLike) -> list[EegRecording]:
    return [read_eegb(p, subject) for subject, p in subject_files(directory)]
