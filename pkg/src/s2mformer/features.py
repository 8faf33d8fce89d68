"""EEG feature embedding: windowing, CSP spatial filters and DE topographic maps."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, signal

log = logging.getLogger(__name__)

BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
    ("gamma", 30.0, 50.0),
)
FILTER_ORDER = 4
MAP_SIZE = 32
IDW_NEIGHBOURS = 3
IDW_POWER = 2.0
SPLIT_TAGS = ("train", "val", "test")


@dataclass
class Trial:
    start: int
    length: int
    label: int


@dataclass
class ElectrodeLayout:
    names: list[str]
    coords: np.ndarray  # (C, 2), x to the right, y towards the nose

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (len(self.names), 2):
            raise ValueError(f"layout needs one (x, y) per channel, got {self.coords.shape}")

    @classmethod
    def from_file(cls, path: str | Path) -> "ElectrodeLayout":
        return cls._parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "ElectrodeLayout":
        return _default_layout()

    @classmethod
    def _parse(cls, text: str) -> "ElectrodeLayout":
        names, xy = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"layout line {lineno}: expected 'name x y', got {line!r}")
            names.append(parts[0])
            xy.append((float(parts[1]), float(parts[2])))
        return cls(names, np.array(xy))

    def to_text(self) -> str:
        return "".join(f"{n} {x:.6f} {y:.6f}\n" for n, (x, y) in zip(self.names, self.coords))


@lru_cache(maxsize=1)
def _default_layout() -> ElectrodeLayout:
    text = resources.files("s2mformer.data").joinpath("biosemi64.txt").read_text()
    return ElectrodeLayout._parse(text)


@dataclass
class EegRecording:
    samples: np.ndarray  # (C, total_T)
    sample_rate: float
    trials: list[Trial]
    subject: int = 0
    layout: ElectrodeLayout | None = None

    def __post_init__(self):
        total = self.samples.shape[1]
        spans = sorted((t.start, t.start + t.length) for t in self.trials)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ValueError(f"trials overlap at sample {s1}")
        for t in self.trials:
            if t.start < 0 or t.start + t.length > total:
                raise ValueError(f"trial [{t.start}, {t.start + t.length}) outside recording of {total} samples")
            if t.label not in (0, 1):
                raise ValueError(f"trial label must be 0 or 1, got {t.label}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]


@dataclass
class DecisionWindow:
    data: np.ndarray  # (C, T)
    label: int
    trial: int
    subject: int
    start: int = 0
    split: str | None = None
    index: int = 0  # position of the window inside its trial


@dataclass
class CspFilters:
    projection: np.ndarray  # (d_n, C), unit-norm rows, descending eigenvalue
    eigenvalues: np.ndarray
    fitted_on: str = "train"
    scope: str = ""


def segment_windows(rec: EegRecording, window_seconds: float, overlap_fraction: float = 0.5,
                    trial_ids: Sequence[int] | None = None) -> list[DecisionWindow]:
    """Slice every trial into windows; windows never cross a trial boundary."""
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must lie in [0, 1)")
    size = int(round(window_seconds * rec.sample_rate))
    if size < 1:
        raise ValueError("window shorter than one sample")
    stride = max(1, int(round(size * (1 - overlap_fraction))))
    out = []
    for k, trial in enumerate(rec.trials):
        tid = trial_ids[k] if trial_ids is not None else k
        if trial.length < size:
            warnings.warn(f"trial {tid} ({trial.length} samples) shorter than one window ({size}); skipped")
            continue
        count = (trial.length - size) // stride + 1
        for i in range(count):
            s = trial.start + i * stride
            out.append(DecisionWindow(rec.samples[:, s:s + size], trial.label, tid, rec.subject, s, index=i))
    return out


def class_covariances(windows: Sequence[DecisionWindow]) -> tuple[np.ndarray, np.ndarray]:
    covs: dict[int, list[np.ndarray]] = {0: [], 1: []}
    for w in windows:
        x = np.asarray(w.data, dtype=np.float64)
        c = x @ x.T
        tr = np.trace(c)
        covs[w.label].append(c / tr if tr > 0 else c)
    return np.mean(covs[0], axis=0), np.mean(covs[1], axis=0)


def fit_csp(train_windows: Sequence[DecisionWindow], d_n: int | None = None, scope: str = "") -> CspFilters:
    """Fit CSP filters on training windows only.

    Solves ``cov_0 w = lambda (cov_0 + cov_1) w``; row ``i`` of the projection
    maximises the class-0 share of projected variance ``lambda_i``.
    """
    bad = [w for w in train_windows if w.split != "train"]
    if bad:
        raise ValueError(f"fit_csp refuses windows not tagged 'train' (got split={bad[0].split!r})")
    counts = [sum(1 for w in train_windows if w.label == c) for c in (0, 1)]
    if min(counts) < 2:
        raise ValueError(f"CSP needs at least 2 windows per class, got {counts}")
    cov0, cov1 = class_covariances(train_windows)
    c = cov0.shape[0]
    d_n = c if d_n is None else d_n
    if not 1 <= d_n <= c:
        raise ValueError(f"d_n must lie in [1, {c}]")
    composite = cov0 + cov1
    ev = linalg.eigvalsh(composite)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        eps = 1e-6 * np.trace(composite) / c
        warnings.warn(f"singular composite covariance; adding {eps:.3g} * I")
        composite = composite + eps * np.eye(c)
        cov0 = cov0 + 0.5 * eps * np.eye(c)
    vals, vecs = linalg.eigh(cov0, composite)
    order = np.argsort(vals)[::-1][:d_n]
    proj = vecs[:, order].T
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    return CspFilters(proj, vals[order], "train", scope)


def apply_csp(filters: CspFilters, w: DecisionWindow | np.ndarray) -> np.ndarray:
    data = w.data if isinstance(w, DecisionWindow) else w
    if filters.projection.shape[1] != data.shape[0]:
        raise ValueError(f"filters expect {filters.projection.shape[1]} channels, window has {data.shape[0]}")
    return filters.projection @ data


def _band_sos(lo: float, hi: float, fs: float) -> np.ndarray:
    return signal.butter(FILTER_ORDER, [lo, hi], btype="bandpass", fs=fs, output="sos")


@lru_cache(maxsize=16)
def band_filters(fs: float) -> tuple[np.ndarray, ...]:
    top = max(hi for _, _, hi in BANDS)
    if fs < 2 * top:
        raise ValueError(f"sample rate {fs} Hz below twice the highest band edge ({top} Hz)")
    return tuple(_band_sos(lo, hi, fs) for _, lo, hi in BANDS)


def min_band_length(fs: float) -> int:
    """Shortest series the zero-phase band filters accept."""
    sos = band_filters(fs)[0]
    n = 2 * len(sos) + 1
    n -= min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum())
    return 3 * n + 1


def band_decompose(w: DecisionWindow | np.ndarray, sample_rate: float) -> np.ndarray:
    """Zero-phase band-pass into (5, C, T), bands ordered delta..gamma."""
    data = np.asarray(w.data if isinstance(w, DecisionWindow) else w, dtype=np.float64)
    filters = band_filters(float(sample_rate))
    need = min_band_length(float(sample_rate))
    if data.shape[-1] < need:
        raise ValueError(f"window of {data.shape[-1]} samples too short for band filtering; "
                         f"need at least {need} samples at {sample_rate} Hz")
    return np.stack([signal.sosfiltfilt(sos, data, axis=-1) for sos in filters])


def differential_entropy(x: np.ndarray) -> np.ndarray:
    """Gaussian DE per row: 0.5 * ln(2 pi e var), unbiased variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("need at least 2 samples")
    var = np.var(x, axis=-1, ddof=1)
    if np.any(var <= 0):
        warnings.warn("zero variance channel; clamping variance to 1e-12")
        var = np.maximum(var, 1e-12)
    return 0.5 * np.log(2 * np.pi * np.e * var)


def grid_centres(size: int = MAP_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre coordinates; row 0 is the frontal edge (y = +1)."""
    c = -1 + (np.arange(size) + 0.5) * 2 / size
    xx, yy = np.meshgrid(c, c[::-1])
    return xx, yy


@lru_cache(maxsize=8)
def _idw_matrix(coords_key: bytes, n: int, size: int) -> np.ndarray:
    coords = np.frombuffer(coords_key, dtype=np.float64).reshape(n, 2)
    xx, yy = grid_centres(size)
    cells = np.stack([xx.ravel(), yy.ravel()], axis=1)
    d = np.linalg.norm(cells[:, None, :] - coords[None, :, :], axis=2)
    k = min(IDW_NEIGHBOURS, n)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, nearest, axis=1)
    mat = np.zeros((cells.shape[0], n))
    exact = dn[:, 0] < 1e-12
    w = 1.0 / np.where(exact[:, None], 1.0, dn) ** IDW_POWER
    w /= w.sum(axis=1, keepdims=True)
    rows = np.arange(cells.shape[0])[:, None]
    mat[rows, nearest] = w
    mat[exact] = 0.0
    mat[exact, nearest[exact, 0]] = 1.0
    inside = (cells ** 2).sum(axis=1) <= 1.0
    mat[~inside] = 0.0
    return mat


def topographic_matrix(layout: ElectrodeLayout, size: int = MAP_SIZE) -> np.ndarray:
    coords = layout.coords
    if np.any((coords ** 2).sum(axis=1) >= 1.0):
        raise ValueError("electrode coordinates must lie inside the unit disk")
    if len({(round(x, 9), round(y, 9)) for x, y in coords}) != len(coords):
        raise ValueError("duplicate electrode coordinates")
    return _idw_matrix(np.ascontiguousarray(coords).tobytes(), len(coords), size)


def topographic_project(values: np.ndarray, layout: ElectrodeLayout, size: int = MAP_SIZE) -> np.ndarray:
    """Scatter per-channel values onto a size x size scalp map (IDW over 3 nearest electrodes)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != len(layout.names):
        raise ValueError(f"{values.shape[-1]} values for {len(layout.names)} electrodes")
    mat = topographic_matrix(layout, size)
    return (values @ mat.T).reshape(values.shape[:-1] + (size, size))


def frequency_embedding(w: DecisionWindow | np.ndarray, sample_rate: float,
                        layout: ElectrodeLayout | None = None, size: int = MAP_SIZE) -> np.ndarray:
    """(5, size, size) DE topographic maps, bands delta..gamma."""
    layout = layout or ElectrodeLayout.default()
    bands = band_decompose(w, sample_rate)
    de = differential_entropy(bands)  # (5, C)
    return topographic_project(de, layout, size)


def split_windows(windows: Iterable[DecisionWindow], split: str) -> list[DecisionWindow]:
    return [w for w in windows if w.split == split]
