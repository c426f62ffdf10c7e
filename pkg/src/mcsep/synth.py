"""Deterministic speech-like test sources.

The separation corpus used for published results is licensed, so scenes
are built from synthetic utterances instead: syllables of voiced
(harmonic, formant-filtered, with a drifting pitch) and unvoiced
(high-passed noise) sound separated by short pauses.  Two draws share the
same long-term spectrum, so spectral cues alone do not tell them apart.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter

from .errors import ConfigurationError
from .sigcore import MultichannelAudio
from .wavio import write_wav

# rough (F1, F2, F3) of a few vowels, Hz
VOWEL_FORMANTS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (660, 1720, 2410),
    (570, 840, 2410),
    (300, 870, 2240),
    (440, 1020, 2240),
    (490, 1350, 1690),
)
FORMANT_BANDWIDTHS = (80.0, 110.0, 160.0)


def _resonator(freq, bandwidth, sample_rate):
    r = math.exp(-math.pi * bandwidth / sample_rate)
    theta = 2.0 * math.pi * freq / sample_rate
    a = [1.0, -2.0 * r * math.cos(theta), r * r]
    return [sum(a)], a  # unit gain at DC


def _voiced(rng, n, sample_rate):
    f0 = rng.uniform(90.0, 240.0)
    t = np.arange(n) / sample_rate
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi))
    drift *= np.linspace(1.0, rng.uniform(0.85, 1.15), n)
    phase = 2.0 * np.pi * np.cumsum(f0 * drift) / sample_rate
    x = np.zeros(n)
    for k in range(1, int(0.5 * sample_rate / (f0 * 1.2)) + 1):
        x += np.sin(k * phase) / k
    formants = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))]
    for f, bw in zip(formants, FORMANT_BANDWIDTHS):
        f = f * rng.uniform(0.9, 1.1)
        if f < 0.45 * sample_rate:
            b, a = _resonator(f, bw, sample_rate)
            x = lfilter(b, a, x)
    return x


def _unvoiced(rng, n, sample_rate):
    cutoff = min(rng.uniform(1500.0, 3000.0), 0.4 * sample_rate)
    b, a = butter(2, cutoff / (0.5 * sample_rate), btype="high")
    return 0.3 * lfilter(b, a, rng.standard_normal(n))


def speech_like(seed: int, duration: float = 2.0, sample_rate: int = 8000) -> np.ndarray:
    """One synthetic utterance of ``duration`` seconds with unit RMS."""
    if duration <= 0 or sample_rate <= 0:
        raise ConfigurationError("duration and sample rate must be positive")
    rng = np.random.default_rng(seed)
    total = int(round(duration * sample_rate))
    out = np.zeros(total)
    pos = int(rng.uniform(0.0, 0.1) * sample_rate)
    while pos < total:
        n = int(rng.uniform(0.08, 0.3) * sample_rate)
        seg = _unvoiced(rng, n, sample_rate) if rng.random() < 0.25 else _voiced(rng, n, sample_rate)
        seg = seg / (np.sqrt(np.mean(seg**2)) + 1e-12) * rng.uniform(0.5, 1.5)
        env = np.hanning(n + 2)[1:-1] ** 0.5
        m = min(n, total - pos)
        out[pos : pos + m] += (seg * env)[:m]
        pos += n + int(rng.uniform(0.0, 0.12) * sample_rate)
    rms = np.sqrt(np.mean(out**2))
    return out / rms if rms > 0 else out


def write_source_pool(out_dir, count: int, seed: int, duration: float = 2.0, sample_rate: int = 8000):
    """Write ``count`` utterances as mono WAVs; returns their paths (sorted)."""
    if count < 1:
        raise ConfigurationError("need at least one source")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        x = speech_like(seed * 100003 + i, duration, sample_rate)
        p = out / f"src{i:05d}.wav"
        write_wav(p, MultichannelAudio(0.1 * x, sample_rate), "float32")
        paths.append(p)
    return paths
