"""WAV read/write for PCM 16-bit and 32-bit float files, any channel count."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import FormatError
from .sigcore import MultichannelAudio

_SUBTYPES = {"pcm16": np.int16, "float32": np.float32}


def read_wav(path) -> MultichannelAudio:
    """Read ``path`` into ``[channels, samples]`` reals in [-1, 1)."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    x = x[:, None] if x.ndim == 1 else x
    return MultichannelAudio(x.T, int(rate))


def write_wav(path, audio: MultichannelAudio, subtype: str = "float32") -> None:
    """Write ``audio`` as PCM16 (clipped) or 32-bit float."""
    if subtype not in _SUBTYPES:
        raise FormatError(f"unsupported WAV subtype {subtype!r}; use one of {sorted(_SUBTYPES)}")
    x = audio.samples.T
    if subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(audio.sample_rate), data)
