"""Class-conditional synthetic EEG for desk-scale checks.

Background is independent pink (1/f power) noise per electrode plus a weak
shared component, high-passed at ``HIGHPASS_HZ`` as real recordings are
upstream. Without the high-pass, the slowest noise components span whole
trials and give each trial a fingerprint that within-trial splits can learn
even when no class signal exists. Each class adds its own band-limited source at its own scalp
location, spread over neighbouring electrodes by a Gaussian footprint. The
source amplitude is ``difficulty * SOURCE_GAIN`` relative to unit-variance
background, so ``difficulty = 0`` is pure noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from ..diffcore import Rng
from ..features import EegRecording, ElectrodeLayout, Trial

SOURCE_GAIN = 1.0
FOOTPRINT_SIGMA = 0.2
HIGHPASS_HZ = 1.0
COMMON_FRACTION = 0.3


@dataclass(frozen=True)
class ClassSource:
    electrode: str
    band: tuple[float, float]


CLASS_SOURCES = (ClassSource("T7", (8.0, 12.0)), ClassSource("T8", (18.0, 26.0)))


@dataclass
class SynthConfig:
    subjects: int = 4
    trials: int = 6
    seconds: float = 60.0
    sample_rate: float = 128.0
    difficulty: float = 1.0
    seed: int = 200

    def __post_init__(self):
        if self.subjects < 1 or self.trials < 1 or self.seconds <= 0:
            raise ValueError("subjects, trials and seconds must be positive")
        if self.difficulty < 0:
            raise ValueError("difficulty must be non-negative")
        if self.sample_rate < 2 * max(s.band[1] for s in CLASS_SOURCES) + 1:
            raise ValueError("sample rate too low for the class source bands")


def pink_noise(rng: Rng, channels: int, n: int, fs: float, lowcut: float = HIGHPASS_HZ) -> np.ndarray:
    """Unit-variance noise with power falling as 1/f above ``lowcut`` Hz, one row per channel."""
    white = rng.normal((channels, n))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    scale = np.zeros_like(f)
    keep = (f >= lowcut) & (f > 0)
    scale[keep] = 1.0 / np.sqrt(f[keep])
    x = np.fft.irfft(spec * scale, n=n, axis=1)
    x -= x.mean(axis=1, keepdims=True)
    return x / x.std(axis=1, keepdims=True)


def band_source(rng: Rng, n: int, band: tuple[float, float], fs: float) -> np.ndarray:
    sos = signal.butter(4, band, btype="bandpass", fs=fs, output="sos")
    x = signal.sosfiltfilt(sos, rng.normal(n))
    return x / x.std()


def footprint(layout: ElectrodeLayout, electrode: str, sigma: float = FOOTPRINT_SIGMA) -> np.ndarray:
    centre = layout.coords[layout.names.index(electrode)]
    d2 = ((layout.coords - centre) ** 2).sum(axis=1)
    return np.exp(-d2 / (2 * sigma ** 2))


def synth_subject(cfg: SynthConfig, subject: int, layout: ElectrodeLayout | None = None) -> EegRecording:
    layout = layout or ElectrodeLayout.default()
    rng = Rng(cfg.seed).spawn(subject)
    c = len(layout.names)
    trial_len = int(round(cfg.seconds * cfg.sample_rate))
    total = trial_len * cfg.trials
    x = pink_noise(rng, c, total, cfg.sample_rate) * np.sqrt(1 - COMMON_FRACTION)
    x += pink_noise(rng, 1, total, cfg.sample_rate) * np.sqrt(COMMON_FRACTION)
    # balanced labels, order shuffled per subject
    labels = np.array([k % 2 for k in range(cfg.trials)])[rng.permutation(cfg.trials)]
    trials = []
    for k, label in enumerate(labels):
        start = k * trial_len
        src = CLASS_SOURCES[int(label)]
        s = band_source(rng, trial_len, src.band, cfg.sample_rate)
        if cfg.difficulty > 0:
            x[:, start:start + trial_len] += (cfg.difficulty * SOURCE_GAIN) * np.outer(footprint(layout, src.electrode), s)
        trials.append(Trial(start, trial_len, int(label)))
    return EegRecording(x.astype(np.float32), float(np.float32(cfg.sample_rate)), trials, subject, layout)


def synth_dataset(cfg: SynthConfig) -> list[EegRecording]:
    return [synth_subject(cfg, s) for s in range(cfg.subjects)]
