"""Feature extraction over a dataset and the versioned feature archive.

Archive layout (little-endian)::

    b"S2FA" | u16 version | u32 len + header text (key=value lines)
    u32 n_windows | u32 C | u32 T | u16 bands | u16 H | u16 W
    n_windows x (u32 subject, u32 trial, u32 index, u8 label, u8 split, u16 filter)
    f32 E_S block (n_windows, C, T) | f32 E_F block (n_windows, bands, H, W)
    u32 n_filters, then per filter: u16 len + scope | u16 len + fitted_on |
        u32 rows | u32 cols | f64 projection | f64 eigenvalues

``filter`` indexes the CSP filter set that produced the window's E_S, which
records which training windows each test window was transformed with.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import (MAP_SIZE, SPLIT_TAGS, BANDS, CspFilters, DecisionWindow, EegRecording,
                        ElectrodeLayout, apply_csp, fit_csp, frequency_embedding, segment_windows)
from ..network.checkpoint import atomic_write
from ..training import FeatureSet, SplitPlan, make_splits

MAGIC = b"S2FA"
VERSION = 1
_RECORD = struct.Struct("<IIIBBH")
_DIMS = struct.Struct("<IIIHHH")
SPLIT_CODES = {s: i for i, s in enumerate(SPLIT_TAGS)}


class ArchiveError(ValueError):
    pass


@dataclass
class FeatureArchive:
    header: dict[str, str]
    keys: np.ndarray  # (N, 3) subject, trial, index
    labels: np.ndarray  # (N,) uint8
    splits: np.ndarray  # (N,) split codes
    filter_ids: np.ndarray  # (N,)
    e_s: np.ndarray  # (N, C, T) float32
    e_f: np.ndarray  # (N, bands, H, W) float32
    filters: list[CspFilters] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def mask(self, split: str) -> np.ndarray:
        return self.splits == SPLIT_CODES[split]

    def feature_set(self, split: str) -> FeatureSet:
        m = self.mask(split)
        return FeatureSet(self.e_s[m], self.e_f[m], self.labels[m].astype(np.int64), self.keys[m, 0].astype(np.int64))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        text = "".join(f"{k}={v}\n" for k, v in self.header.items()).encode()
        buf.write(MAGIC + struct.pack("<HI", VERSION, len(text)) + text)
        n, c, t = self.e_s.shape
        _, bands, h, w = self.e_f.shape
        buf.write(_DIMS.pack(n, c, t, bands, h, w))
        for k in range(n):
            s, tr, ix = (int(v) for v in self.keys[k])
            buf.write(_RECORD.pack(s, tr, ix, int(self.labels[k]), int(self.splits[k]), int(self.filter_ids[k])))
        buf.write(np.ascontiguousarray(self.e_s, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(self.e_f, dtype="<f4").tobytes())
        buf.write(struct.pack("<I", len(self.filters)))
        for f in self.filters:
            for s in (f.scope, f.fitted_on):
                raw = s.encode()
                buf.write(struct.pack("<H", len(raw)) + raw)
            rows, cols = f.projection.shape
            buf.write(struct.pack("<II", rows, cols))
            buf.write(np.ascontiguousarray(f.projection, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(f.eigenvalues, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureArchive":
        buf = io.BytesIO(data)

        def read(n: int, what: str) -> bytes:
            out = buf.read(n)
            if len(out) != n:
                raise ArchiveError(f"truncated feature archive while reading {what}")
            return out

        if read(4, "magic") != MAGIC:
            raise ArchiveError("bad feature archive field 'magic'")
        version, hlen = struct.unpack("<HI", read(6, "version"))
        if version != VERSION:
            raise ArchiveError(f"bad feature archive field 'version': {version} (expected {VERSION})")
        header = dict(line.split("=", 1) for line in read(hlen, "header").decode().splitlines() if line)
        n, c, t, bands, h, w = _DIMS.unpack(read(_DIMS.size, "dimensions"))
        recs = [_RECORD.unpack(read(_RECORD.size, "window table")) for _ in range(n)]
        table = np.array(recs, dtype=np.int64).reshape(n, 6)
        e_s = np.frombuffer(read(4 * n * c * t, "E_S block"), dtype="<f4").reshape(n, c, t).astype(np.float32)
        e_f = np.frombuffer(read(4 * n * bands * h * w, "E_F block"), dtype="<f4").reshape(n, bands, h, w).astype(np.float32)
        (nf,) = struct.unpack("<I", read(4, "filter count"))
        filters = []
        for _ in range(nf):
            names = []
            for what in ("filter scope", "filter provenance"):
                (ln,) = struct.unpack("<H", read(2, what))
                names.append(read(ln, what).decode())
            rows, cols = struct.unpack("<II", read(8, "filter shape"))
            proj = np.frombuffer(read(8 * rows * cols, "filter"), dtype="<f8").reshape(rows, cols).copy()
            eig = np.frombuffer(read(8 * rows, "eigenvalues"), dtype="<f8").copy()
            filters.append(CspFilters(proj, eig, fitted_on=names[1], scope=names[0]))
        if buf.read(1):
            raise ArchiveError("trailing bytes after feature archive")
        return cls(header, table[:, :3], table[:, 3].astype(np.uint8), table[:, 4].astype(np.uint8),
                   table[:, 5], e_s, e_f, filters)


def write_archive(path: str | os.PathLike, archive: FeatureArchive) -> None:
    atomic_write(path, archive.to_bytes())


def read_archive(path: str | os.PathLike) -> FeatureArchive:
    return FeatureArchive.from_bytes(Path(path).read_bytes())


def _scope_of(w: DecisionWindow, plan: SplitPlan) -> str:
    if plan.mode == "cross_subject":
        return f"holdout={plan.holdout_subject}"
    return f"subject={w.subject}"


def build_features(recordings: Sequence[EegRecording], mode: str, window_seconds: float = 2.0,
                   overlap: float = 0.5, seed: int = 200, holdout_subject: int | None = None,
                   purge_boundary: bool = False, map_size: int = MAP_SIZE) -> FeatureArchive:
    """Segment, split, fit CSP on training windows per scope, and embed every window."""
    if not recordings:
        raise ValueError("no recordings")
    rates = {r.sample_rate for r in recordings}
    if len(rates) != 1:
        raise ValueError(f"recordings disagree on sample rate: {sorted(rates)}")
    fs = rates.pop()
    windows = [w for r in recordings for w in segment_windows(r, window_seconds, overlap)]
    layouts = {r.subject: (r.layout or ElectrodeLayout.default()) for r in recordings}
    plan = make_splits(windows, mode, seed, holdout_subject, purge_boundary)
    windows = [w for w in plan.apply(windows) if w.split is not None]
    # one CSP fit per scope, on that scope's training windows only
    scopes: dict[str, list[DecisionWindow]] = {}
    for w in windows:
        scopes.setdefault(_scope_of(w, plan), [])
        if w.split == "train":
            scopes[_scope_of(w, plan)].append(w)
    filters, scope_ids = [], {}
    for scope, train_windows in scopes.items():
        scope_ids[scope] = len(filters)
        filters.append(fit_csp(train_windows, scope=scope))
    n = len(windows)
    c, t = windows[0].data.shape
    e_s = np.empty((n, c, t), dtype=np.float32)
    e_f = np.empty((n, len(BANDS), map_size, map_size), dtype=np.float32)
    keys = np.empty((n, 3), dtype=np.int64)
    labels = np.empty(n, dtype=np.uint8)
    splits = np.empty(n, dtype=np.uint8)
    fids = np.empty(n, dtype=np.int64)
    for k, w in enumerate(windows):
        fid = scope_ids[_scope_of(w, plan)]
        e_s[k] = apply_csp(filters[fid], w)
        e_f[k] = frequency_embedding(w, fs, layouts[w.subject], map_size)
        keys[k] = (w.subject, w.trial, w.index)
        labels[k] = w.label
        splits[k] = SPLIT_CODES[w.split]
        fids[k] = fid
    header = {"mode": mode, "window_seconds": repr(window_seconds), "overlap": repr(overlap),
              "sample_rate": repr(fs), "seed": str(seed), "holdout_subject": str(holdout_subject),
              "purge_boundary": str(purge_boundary), "subjects": str(len(recordings))}
    return FeatureArchive(header, keys, labels, splits, fids, e_s, e_f, filters)
