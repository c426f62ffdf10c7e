"""STFT and inter-channel phase difference computed with time-domain kernels.

A :class:`KernelBank` holds paired real/imaginary kernels ``k_re[k, n] =
w[n] cos(2 pi n k / K)`` and ``k_im[k, n] = w[n] sin(2 pi n k / K)``.
Correlating a signal with them (no kernel flip) gives ``re`` and ``im``
with ``re - 1j * im`` equal to the STFT frame with the linear phase term
removed, so magnitudes and phase differences match the STFT exactly.

Banks come in three modes:

``fixed``
    kernels are constants.
``unconstrained``
    ``k_re`` and ``k_im`` are independent learnable arrays.
``window_constrained``
    only ``window`` is learnable; the kernels are always rebuilt from it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ModeError, ShapeError
from .sigcore import (
    FeatureMap,
    MultichannelAudio,
    frame_count,
    frame_signal,
    make_window,
)

MODES = ("fixed", "unconstrained", "window_constrained")
DEFAULT_KERNEL_LENGTH = 64
DEFAULT_STRIDE = 20
DEFAULT_PAIRS = ((1, 4), (2, 5), (3, 6), (1, 2), (3, 4), (5, 6))


@dataclass(frozen=True)
class MicPair:
    """Microphone pair with 1-based channel indices."""

    first: int
    second: int

    def __post_init__(self):
        if self.first == self.second:
            raise ConfigurationError(f"pair ({self.first}, {self.second}) uses the same mic twice")
        if self.first < 1 or self.second < 1:
            raise ConfigurationError("mic indices are 1-based")

    def check(self, num_channels: int) -> None:
        if max(self.first, self.second) > num_channels:
            raise ShapeError(f"pair {self} out of range for {num_channels} channels")

    def __str__(self):
        return f"{self.first}-{self.second}"


def as_pairs(pairs) -> tuple[MicPair, ...]:
    """Normalise pairs given as MicPair, (a, b) tuples or a ``"1-4,2-5"`` string."""
    if isinstance(pairs, str):
        out = []
        for item in pairs.split(","):
            item = item.strip()
            if not item:
                continue
            try:
                a, b = item.split("-")
                out.append(MicPair(int(a), int(b)))
            except ValueError as exc:
                raise ConfigurationError(f"bad pair spec {item!r}") from exc
        return tuple(out)
    return tuple(p if isinstance(p, MicPair) else MicPair(int(p[0]), int(p[1])) for p in pairs)


def _exact_trig_tables(length):
    angle = 2.0 * np.pi * np.arange(length) / length
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    # pin quarter-turn values so DC and Nyquist rows have exactly zero imaginary part
    if length % 4 == 0:
        q = length // 4
        cos_t[[q, 3 * q]] = 0.0
        sin_t[[0, 2 * q]] = 0.0
        sin_t[q], sin_t[3 * q] = 1.0, -1.0
        cos_t[2 * q] = -1.0
    elif length % 2 == 0:
        sin_t[[0, length // 2]] = 0.0
        cos_t[length // 2] = -1.0
    else:
        sin_t[0] = 0.0
    return cos_t, sin_t


def stft_basis(kernel_length: int) -> tuple[np.ndarray, np.ndarray]:
    """``cos(2 pi n k / K)`` and ``sin(2 pi n k / K)`` shaped ``[K//2 + 1, K]``."""
    num_bins = kernel_length // 2 + 1
    cos_t, sin_t = _exact_trig_tables(kernel_length)
    idx = np.outer(np.arange(num_bins), np.arange(kernel_length)) % kernel_length
    return cos_t[idx], sin_t[idx]


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class KernelBank:
    k_re: np.ndarray
    k_im: np.ndarray
    stride: int
    mode: str = "fixed"
    window: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown kernel mode {self.mode!r}")
        k_re = np.atleast_2d(np.asarray(self.k_re, dtype=np.float64))
        k_im = np.atleast_2d(np.asarray(self.k_im, dtype=np.float64))
        if k_re.shape != k_im.shape or k_re.shape[1] < 1:
            raise ShapeError(f"k_re {k_re.shape} and k_im {k_im.shape} must match")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.mode == "window_constrained":
            if self.window is None:
                raise ConfigurationError("window_constrained bank needs a window")
            window = _readonly(self.window)
            cos_b, sin_b = stft_basis(window.size)
            if k_re.shape != cos_b.shape:
                raise ShapeError("kernel shape inconsistent with window length")
            if not (np.array_equal(k_re, window * cos_b) and np.array_equal(k_im, window * sin_b)):
                raise ConfigurationError("window_constrained kernels must be rebuilt from the window")
            object.__setattr__(self, "window", window)
        elif self.window is not None:
            object.__setattr__(self, "window", _readonly(self.window))
        object.__setattr__(self, "k_re", _readonly(k_re))
        object.__setattr__(self, "k_im", _readonly(k_im))

    @classmethod
    def from_window(cls, window, stride: int) -> "KernelBank":
        """Window-constrained bank with kernels rebuilt from ``window``."""
        window = np.asarray(window, dtype=np.float64)
        cos_b, sin_b = stft_basis(window.size)
        return cls(window * cos_b, window * sin_b, stride, "window_constrained", window)

    @property
    def num_bins(self) -> int:
        return self.k_re.shape[0]

    @property
    def kernel_length(self) -> int:
        return self.k_re.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays of this bank, keyed by name."""
        if self.mode == "unconstrained":
            return {"k_re": self.k_re, "k_im": self.k_im}
        if self.mode == "window_constrained":
            return {"window": self.window}
        return {}

    def with_parameters(self, **params) -> "KernelBank":
        if self.mode == "window_constrained":
            return KernelBank.from_window(params["window"], self.stride)
        if self.mode == "unconstrained":
            return KernelBank(params["k_re"], params["k_im"], self.stride, self.mode, self.window)
        raise ModeError("fixed bank has no learnable parameters")


@dataclass(frozen=True)
class KernelGradient:
    """Gradient w.r.t. the learnable arrays of a bank (see ``KernelBank.parameters``)."""

    values: dict

    def __getitem__(self, name):
        return self.values[name]

    def __post_init__(self):
        for name, g in self.values.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for {name}")


def make_stft_kernels(
    kernel_length: int = DEFAULT_KERNEL_LENGTH,
    stride: int = DEFAULT_STRIDE,
    window_type: str = "hann",
    mode: str = "fixed",
) -> KernelBank:
    """Bank initialised to STFT kernels of ``kernel_length`` (``kernel_length/2 + 1`` bins)."""
    if kernel_length < 2 or kernel_length % 2:
        raise ConfigurationError(f"kernel_length must be even, got {kernel_length}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    window = make_window(window_type, kernel_length)
    if mode == "window_constrained":
        return KernelBank.from_window(window, stride)
    cos_b, sin_b = stft_basis(kernel_length)
    return KernelBank(window * cos_b, window * sin_b, stride, mode)


def _channels(audio) -> np.ndarray:
    if isinstance(audio, MultichannelAudio):
        return audio.samples
    x = np.asarray(audio, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _analyse(x: np.ndarray, bank: KernelBank):
    """Frames ``[C, F, K]`` and correlations ``re, im`` shaped ``[C, F, bins]``."""
    frames = frame_signal(x, bank.kernel_length, bank.stride)
    return frames, frames @ bank.k_re.T, frames @ bank.k_im.T


def conv_analysis(audio, bank: KernelBank) -> tuple[FeatureMap, FeatureMap]:
    """Frame-wise correlation of a single channel with ``k_re`` and ``k_im``."""
    x = _channels(audio)
    if x.shape[0] != 1:
        raise ShapeError(f"conv_analysis takes one channel, got {x.shape[0]}")
    _, re, im = _analyse(x, bank)
    return FeatureMap(re[0], bank.stride), FeatureMap(im[0], bank.stride)


def wrap_phase(x):
    """Map angles into (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2.0 * np.pi)
    return np.where(out <= -np.pi, np.pi, out)


def _phase(re, im):
    """Angle of ``re + 1j*im``; 0 where both parts vanish."""
    degenerate = (re == 0) & (im == 0)
    return np.where(degenerate, 0.0, np.arctan2(im, re))


def kernel_phase(re, im):
    """Phase of the STFT value ``re - 1j*im`` recovered from kernel outputs."""
    return _phase(re, -np.asarray(im))


def _pair_differences(phases, pairs):
    return np.concatenate(
        [wrap_phase(phases[p.first - 1] - phases[p.second - 1]) for p in pairs], axis=-1
    )


def ipd_from_spectra(specs, pairs) -> FeatureMap:
    """IPD between spectrogram channels, pairs concatenated along the feature axis."""
    specs = list(specs)
    pairs = as_pairs(pairs)
    if not specs:
        raise ShapeError("no spectrograms given")
    first = specs[0]
    for s in specs[1:]:
        if s.spec != first.spec or s.real.shape != first.real.shape:
            raise ShapeError("spectrograms must share one AnalysisSpec and shape")
    for p in pairs:
        p.check(len(specs))
    phases = [_phase(s.real, s.imag) for s in specs]
    return FeatureMap(_pair_differences(phases, pairs), first.spec.hop)


def ipd_from_kernels(audio, bank: KernelBank, pairs) -> FeatureMap:
    """IPD from kernel correlations of every channel."""
    x = _channels(audio)
    pairs = as_pairs(pairs)
    for p in pairs:
        p.check(x.shape[0])
    _, re, im = _analyse(x, bank)
    phases = kernel_phase(re, im)
    return FeatureMap(_pair_differences(phases, pairs), bank.stride)


def cos_sin_features(ipd: FeatureMap, include_sin: bool = False) -> FeatureMap:
    """cos(IPD), followed by sin(IPD) when ``include_sin``."""
    parts = [np.cos(ipd.values)]
    if include_sin:
        parts.append(np.sin(ipd.values))
    return FeatureMap(np.concatenate(parts, axis=1), ipd.frame_hop)


def kernel_ipd_features(audio, bank: KernelBank, pairs, include_sin: bool = False) -> FeatureMap:
    return cos_sin_features(ipd_from_kernels(audio, bank, pairs), include_sin)


def kernel_backward(audio, bank: KernelBank, pairs, upstream_grad) -> KernelGradient:
    """Gradient of ``<upstream_grad, kernel_ipd_features(...)>`` w.r.t. the bank's parameters.

    ``upstream_grad`` has the shape of the cos (or cos+sin) feature map;
    its width decides whether the sine half is included.
    """
    if bank.mode == "fixed":
        raise ModeError("fixed kernel bank has no learnable parameters")
    x = _channels(audio)
    pairs = as_pairs(pairs)
    for p in pairs:
        p.check(x.shape[0])
    frames, re, im = _analyse(x, bank)
    num_frames, num_bins = re.shape[1], re.shape[2]
    width = len(pairs) * num_bins
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape == (num_frames, width):
        g_cos, g_sin = g, None
    elif g.shape == (num_frames, 2 * width):
        g_cos, g_sin = g[:, :width], g[:, width:]
    else:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match features")

    phases = kernel_phase(re, im)
    g_phase = np.zeros_like(phases)
    for u, p in enumerate(pairs):
        cols = slice(u * num_bins, (u + 1) * num_bins)
        ipd = phases[p.first - 1] - phases[p.second - 1]
        g_ipd = -np.sin(ipd) * g_cos[:, cols]
        if g_sin is not None:
            g_ipd = g_ipd + np.cos(ipd) * g_sin[:, cols]
        g_phase[p.first - 1] += g_ipd
        g_phase[p.second - 1] -= g_ipd

    # phase = atan2(-im, re): d/dre = im / r2, d/dim = -re / r2
    r2 = re * re + im * im
    safe = np.where(r2 > 0, r2, 1.0)
    scale = np.where(r2 > 0, g_phase / safe, 0.0)
    g_re = scale * im
    g_im = -scale * re
    d_k_re = np.einsum("cfb,cfn->bn", g_re, frames)
    d_k_im = np.einsum("cfb,cfn->bn", g_im, frames)
    if bank.mode == "unconstrained":
        return KernelGradient({"k_re": d_k_re, "k_im": d_k_im})
    cos_b, sin_b = stft_basis(bank.kernel_length)
    return KernelGradient({"window": (d_k_re * cos_b + d_k_im * sin_b).sum(axis=0)})


def apply_gradient(bank: KernelBank, grad: KernelGradient, learning_rate: float) -> KernelBank:
    """One plain gradient-descent step; window-constrained kernels are rebuilt."""
    params = bank.parameters()
    if not params:
        raise ModeError("fixed kernel bank has no learnable parameters")
    return bank.with_parameters(**{k: v - learning_rate * grad[k] for k, v in params.items()})


def feature_frames(num_samples: int, bank: KernelBank) -> int:
    return frame_count(num_samples, bank.kernel_length, bank.stride)


def export_kernels_csv(bank: KernelBank, path, epoch: int) -> Path:
    """Write ``k_re``/``k_im`` (and window) as CSV, one row per bin, after a ``#`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# epoch={epoch}\n# mode={bank.mode}\n# stride={bank.stride}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["part", "bin"] + [f"n{i}" for i in range(bank.kernel_length)])
        for name, arr in (("re", bank.k_re), ("im", bank.k_im)):
            for k, row in enumerate(arr):
                writer.writerow([name, k] + [repr(float(v)) for v in row])
        if bank.window is not None:
            writer.writerow(["window", ""] + [repr(float(v)) for v in bank.window])
    return path


def read_kernels_csv(path) -> tuple[dict, KernelBank]:
    """Inverse of :func:`export_kernels_csv`; returns (metadata, bank)."""
    meta, rows = {}, {"re": [], "im": []}
    window = None
    with Path(path).open() as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        else:
            body.append(line)
    for row in list(csv.reader(body))[1:]:
        values = [float(v) for v in row[2:]]
        if row[0] == "window":
            window = np.array(values)
        else:
            rows[row[0]].append(values)
    meta["epoch"] = int(meta["epoch"])
    meta["stride"] = int(meta["stride"])
    bank = KernelBank(np.array(rows["re"]), np.array(rows["im"]), meta["stride"], meta["mode"], window)
    return meta, bank

