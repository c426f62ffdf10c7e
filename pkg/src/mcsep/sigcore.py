"""Reference frequency-domain signal processing.

Everything here is plain numpy and acts as the ground truth the kernel
features and the networks are checked against.  Spectra are one-sided
(``fft_size // 2 + 1`` bins) and frames that would run past the end of
the signal are dropped rather than zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateInputError, LengthError, ShapeError

WINDOW_TYPES = ("hann", "rectangular")
DEFAULT_LPS_FLOOR_DB = -120.0


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MultichannelAudio:
    """Sample-domain signal, ``samples`` shaped ``[num_channels, num_samples]``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ShapeError(f"audio must be 1-D or 2-D, got shape {x.shape}")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeError(f"audio needs >= 1 channel and >= 1 sample, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DegenerateInputError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")
        object.__setattr__(self, "samples", _frozen(x))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> "MultichannelAudio":
        """Single-channel view of channel ``index`` (0-based)."""
        return MultichannelAudio(self.samples[index], self.sample_rate)


@dataclass(frozen=True)
class AnalysisSpec:
    window_type: str = "hann"
    window_length: int = 512
    hop: int = 256
    fft_size: int | None = None

    def __post_init__(self):
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.window_length)
        if self.window_type not in WINDOW_TYPES:
            raise ConfigurationError(f"unknown window type {self.window_type!r}")
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise ConfigurationError(
                "need 0 < hop <= window_length <= fft_size, got "
                f"hop={self.hop} window_length={self.window_length} fft_size={self.fft_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return make_window(self.window_type, self.window_length)

    def num_frames(self, num_samples: int) -> int:
        return frame_count(num_samples, self.window_length, self.hop)

    def is_cola(self) -> bool:
        return is_cola(self.window(), self.hop)

    @classmethod
    def for_duration(cls, sample_rate, window_s=0.032, hop_s=0.016, window_type="hann"):
        """Spec from window/hop durations; fft_size is the window rounded up to a power of two."""
        win = int(round(window_s * sample_rate))
        hop = int(round(hop_s * sample_rate))
        fft = 1 << (win - 1).bit_length()
        return cls(window_type, win, hop, fft)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided spectrogram, ``real``/``imag`` shaped ``[num_frames, num_bins]``."""

    real: np.ndarray
    imag: np.ndarray
    spec: AnalysisSpec

    def __post_init__(self):
        re = np.asarray(self.real, dtype=np.float64)
        im = np.asarray(self.imag, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 2:
            raise ShapeError(f"real/imag shapes differ or are not 2-D: {re.shape} vs {im.shape}")
        if re.shape[1] != self.spec.num_bins:
            raise ShapeError(f"expected {self.spec.num_bins} bins, got {re.shape[1]}")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "real", _frozen(re))
        object.__setattr__(self, "imag", _frozen(im))

    @classmethod
    def from_complex(cls, values, spec):
        values = np.asarray(values)
        return cls(values.real, values.imag, spec)

    @property
    def num_frames(self) -> int:
        return self.real.shape[0]

    @property
    def num_bins(self) -> int:
        return self.real.shape[1]

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    @property
    def phase(self) -> np.ndarray:
        return np.arctan2(self.imag, self.real)


@dataclass(frozen=True)
class FeatureMap:
    """Real-valued ``[num_frames, feature_dim]`` features at a frame hop in samples."""

    values: np.ndarray
    frame_hop: float
    names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ShapeError(f"feature map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]


def make_window(window_type: str, length: int) -> np.ndarray:
    """Periodic hann (COLA at hop = length/2) or rectangular window."""
    if length < 1:
        raise ConfigurationError("window length must be >= 1")
    if window_type == "rectangular":
        return np.ones(length)
    if window_type == "hann":
        n = np.arange(length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    raise ConfigurationError(f"unknown window type {window_type!r}")


def frame_count(num_samples: int, frame_length: int, hop: int) -> int:
    if num_samples < frame_length:
        return 0
    return (num_samples - frame_length) // hop + 1


def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """``[num_frames, frame_length]`` view of ``x``; trailing partial frames dropped."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < frame_length:
        raise LengthError(
            f"signal of {x.shape[-1]} samples is shorter than one frame ({frame_length})"
        )
    return sliding_window_view(x, frame_length, axis=-1)[..., ::hop, :]


def is_cola(window: np.ndarray, hop: int, rtol: float = 1e-10) -> bool:
    """True when shifted copies of ``window`` at ``hop`` sum to a constant."""
    window = np.asarray(window, dtype=np.float64)
    ola = np.zeros(hop)
    np.add.at(ola, np.arange(window.size) % hop, window)
    if ola.mean() <= 0:
        return False
    return float(np.ptp(ola)) <= rtol * float(ola.mean())


def _single_channel(audio) -> np.ndarray:
    if isinstance(audio, MultichannelAudio):
        if audio.num_channels != 1:
            raise ShapeError(f"expected single-channel audio, got {audio.num_channels} channels")
        return audio.samples[0]
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 1:
        raise ShapeError(f"expected single-channel audio, got shape {x.shape}")
    return x


def stft(audio, spec: AnalysisSpec) -> ComplexSpectrogram:
    """Windowed one-sided STFT.

    Frame ``f``, bin ``k`` is ``sum_m x[f*hop + m] w[m] exp(-2j pi m k / fft_size)``;
    the window is zero-padded to ``fft_size``.
    """
    x = _single_channel(audio)
    frames = frame_signal(x, spec.window_length, spec.hop) * spec.window()
    values = np.fft.rfft(frames, n=spec.fft_size, axis=-1)
    return ComplexSpectrogram(values.real, values.imag, spec)


def istft(spectrogram: ComplexSpectrogram, length: int | None = None, sample_rate: int = 16000):
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are windowed again on synthesis and the sum is divided by the
    overlap-added squared window.  Samples with no window support (the
    outermost edge of a hann analysis) come back as zero.
    """
    spec = spectrogram.spec
    if not spec.is_cola():
        raise ConfigurationError(
            f"{spec.window_type}/{spec.window_length}/hop {spec.hop} is not constant-overlap-add"
        )
    window = spec.window()
    frames = np.fft.irfft(spectrogram.complex, n=spec.fft_size, axis=-1)[:, : spec.window_length]
    num_frames = frames.shape[0]
    out_len = (num_frames - 1) * spec.hop + spec.window_length
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    w2 = window * window
    for f in range(num_frames):
        start = f * spec.hop
        out[start : start + spec.window_length] += frames[f] * window
        norm[start : start + spec.window_length] += w2
    # below this the window carries no usable information
    supported = norm > 1e-8 * w2.max()
    out[supported] /= norm[supported]
    out[~supported] = 0.0
    if length is not None:
        if length > out_len:
            out = np.concatenate([out, np.zeros(length - out_len)])
        out = out[:length]
    return MultichannelAudio(out, sample_rate)


def analysis_padding(num_samples: int, spec: AnalysisSpec) -> tuple[int, int]:
    """(left, right) zero padding so every original sample has full window support."""
    left = spec.window_length
    total = num_samples + 2 * left
    remainder = (total - spec.window_length) % spec.hop
    right = left + (spec.hop - remainder if remainder else 0)
    return left, right


def stft_padded(audio, spec: AnalysisSpec) -> ComplexSpectrogram:
    """STFT of ``audio`` zero-padded by :func:`analysis_padding`."""
    x = _single_channel(audio)
    left, right = analysis_padding(x.size, spec)
    return stft(np.pad(x, (left, right)), spec)


def istft_padded(spectrogram: ComplexSpectrogram, length: int, sample_rate: int = 16000):
    """Inverse of :func:`stft_padded`, trimmed back to ``length`` samples."""
    left, _ = analysis_padding(length, spectrogram.spec)
    y = istft(spectrogram, sample_rate=sample_rate).samples[0]
    return MultichannelAudio(y[left : left + length], sample_rate)


def lps(spectrogram: ComplexSpectrogram, floor_db: float = DEFAULT_LPS_FLOOR_DB) -> FeatureMap:
    """Log-power spectrum in dB, clamped from below at ``floor_db``."""
    if not np.isfinite(floor_db):
        raise ConfigurationError("floor_db must be finite")
    power = spectrogram.real**2 + spectrogram.imag**2
    values = 10.0 * np.log10(np.maximum(power, 10.0 ** (floor_db / 10.0)))
    return FeatureMap(values, spectrogram.spec.hop)


def upsample_frames(features: FeatureMap, target_frames: int) -> FeatureMap:
    """Linear interpolation of every column onto ``target_frames`` equally spaced frames."""
    src = features.num_frames
    if src < 1 or target_frames < src:
        raise ShapeError(f"cannot resample {src} frames to {target_frames} (downsampling unsupported)")
    if target_frames == src:
        return features
    if src == 1:
        return FeatureMap(np.repeat(features.values, target_frames, axis=0), features.frame_hop)
    positions = np.linspace(0.0, src - 1, target_frames)
    grid = np.arange(src, dtype=np.float64)
    values = np.stack(
        [np.interp(positions, grid, features.values[:, j]) for j in range(features.feature_dim)],
        axis=1,
    )
    hop = features.frame_hop * (src - 1) / (target_frames - 1)
    return FeatureMap(values, hop)
