"""Building blocks of the separators (PyTorch, [batch, channels, frames] layout)."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..errors import LengthError, ShapeError
from ..kernelfeat import KernelBank, make_stft_kernels, stft_basis
from ..sigcore import AnalysisSpec, analysis_padding
from .config import ModelConfig

LPS_FLOOR = 1e-12  # -120 dB


def _t(arr):
    return torch.tensor(np.asarray(arr), dtype=torch.get_default_dtype())


class KernelPhase(torch.autograd.Function):
    """Phase of ``re - 1j*im`` with zero value and zero gradient where both parts vanish."""

    @staticmethod
    def forward(ctx, re, im):
        ctx.save_for_backward(re, im)
        degenerate = (re == 0) & (im == 0)
        return torch.where(degenerate, torch.zeros_like(re), torch.atan2(-im, re))

    @staticmethod
    def backward(ctx, grad):
        re, im = ctx.saved_tensors
        r2 = re * re + im * im
        safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
        live = (r2 > 0).to(grad.dtype)
        return grad * im / safe * live, -grad * re / safe * live


kernel_phase = KernelPhase.apply


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch_norm":
        return nn.BatchNorm1d(channels)
    return GlobalLayerNorm(channels)


class GlobalLayerNorm(nn.Module):
    """Normalise over channels and frames of each utterance, then scale and shift per channel."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight[:, None] + self.bias[:, None]


class Encoder(nn.Module):
    """Strided 1-D convolution with ReLU; ``in_channels`` > 1 sums per-channel kernels (parallel encoder)."""

    def __init__(self, num_basis: int, kernel: int, stride: int, in_channels: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, num_basis, kernel, stride=stride, bias=False)

    @property
    def kernel(self) -> int:
        return self.conv.kernel_size[0]

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.kernel) // self.conv.stride[0] + 1

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(f"encoder expects {self.conv.in_channels} channels, got {x.shape[1]}")
        if x.shape[-1] < self.kernel:
            raise LengthError(f"need at least {self.kernel} samples, got {x.shape[-1]}")
        return F.relu(self.conv(x))


class Decoder(nn.Module):
    """Transposed convolution back to samples, trimmed or zero-padded to ``length``."""

    def __init__(self, num_basis: int, kernel: int, stride: int):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(num_basis, 1, kernel, stride=stride, bias=False)

    def forward(self, w, length: int | None = None):
        lead = w.shape[:-2]
        y = self.deconv(w.reshape(-1, *w.shape[-2:]))[:, 0]
        y = y.reshape(*lead, y.shape[-1])
        if length is not None:
            y = y[..., :length] if y.shape[-1] >= length else F.pad(y, (0, length - y.shape[-1]))
        return y


class SpatialEncoder(nn.Module):
    """Per-frame linear projection (conv1x1, no bias) of spatial features to the embedding."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv1d(in_dim, embed_dim, 1, bias=False)

    def forward(self, feats, num_frames: int | None = None):
        if num_frames is not None and feats.shape[-1] != num_frames:
            raise ShapeError(f"features have {feats.shape[-1]} frames, encoder has {num_frames}")
        return self.proj(feats)


class TCNBlock(nn.Module):
    """conv1x1 -> PReLU -> norm -> dilated depthwise conv -> PReLU -> norm -> conv1x1, plus residual."""

    def __init__(self, in_dim: int, hidden: int, kernel: int, dilation: int, norm: str):
        super().__init__()
        self.inp = nn.Conv1d(in_dim, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = make_norm(norm, hidden)
        self.depthwise = nn.Conv1d(
            hidden, hidden, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2, groups=hidden
        )
        self.act2 = nn.PReLU()
        self.norm2 = make_norm(norm, hidden)
        self.out = nn.Conv1d(hidden, in_dim, 1)

    def forward(self, x):
        y = self.norm1(self.act1(self.inp(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.out(y)


def tcn_blocks(cfg: ModelConfig, repeats: int) -> nn.ModuleList:
    return nn.ModuleList(
        TCNBlock(cfg.bottleneck_dim, cfg.conv_channels, cfg.conv_kernel, 2**b, cfg.normalization)
        for _ in range(repeats)
        for b in range(cfg.blocks_per_repeat)
    )


def _stft_frames(x, spec: AnalysisSpec):
    """Complex STFT [..., frames, bins] matching ``sigcore.stft``."""
    window = torch.as_tensor(spec.window(), dtype=x.dtype)
    frames = x.unfold(-1, spec.window_length, spec.hop) * window
    return torch.fft.rfft(frames, n=spec.fft_size, dim=-1)


class STFTFeatures(nn.Module):
    """LPS of mic 1 and cos/sin IPD over mic pairs on the STFT grid.

    Returns [batch, dim, stft_frames]; ``padded`` uses the same padding as
    ``sigcore.stft_padded`` so frames cover the whole signal.
    """

    def __init__(self, cfg: ModelConfig, features=None, padded: bool = False):
        super().__init__()
        self.spec = AnalysisSpec.for_duration(cfg.sample_rate, cfg.stft_window, cfg.stft_hop)
        self.features = tuple(f for f in ("LPS", "cosIPD", "sinIPD") if f in (features or cfg.feature_set))
        self.first = [a - 1 for a, _ in cfg.pairs]
        self.second = [b - 1 for _, b in cfg.pairs]
        self.padded = padded

    @property
    def dim(self) -> int:
        bins = self.spec.num_bins
        n = len(self.first)
        return sum(bins if f == "LPS" else n * bins for f in self.features)

    def spectrum(self, x):
        if self.padded:
            left, right = analysis_padding(x.shape[-1], self.spec)
            x = F.pad(x, (left, right))
        elif x.shape[-1] < self.spec.window_length:
            raise LengthError(f"need at least {self.spec.window_length} samples")
        return _stft_frames(x, self.spec)  # [B, M, frames, bins]

    def forward(self, x, Y=None):
        Y = self.spectrum(x) if Y is None else Y
        parts = []
        if "LPS" in self.features:
            p = Y[:, 0].real ** 2 + Y[:, 0].imag ** 2
            parts.append(10.0 * torch.log10(torch.clamp(p, min=LPS_FLOOR)))
        if "cosIPD" in self.features or "sinIPD" in self.features:
            phase = torch.angle(Y)
            ipd = phase[:, self.first] - phase[:, self.second]  # [B, P, frames, bins]
            ipd = ipd.permute(0, 2, 1, 3).reshape(ipd.shape[0], ipd.shape[2], -1)
            if "cosIPD" in self.features:
                parts.append(torch.cos(ipd))
            if "sinIPD" in self.features:
                parts.append(torch.sin(ipd))
        return torch.cat(parts, dim=-1).transpose(1, 2)


class KernelIPDFrontend(nn.Module):
    """cos (and sin) IPD from learnable time-domain STFT kernels.

    Modes: "fixed" (STFT kernels as buffers), "unconstrained" (k_re and
    k_im learnable) and "window_constrained" (only the window learnable;
    kernels are window x fixed basis).  The input is padded by
    (kernel_length - encoder_kernel)/2 per side so frames line up with the
    encoder's.
    """

    def __init__(self, cfg: ModelConfig, mode: str | None = None):
        super().__init__()
        self.mode = mode or cfg.kernel_mode
        bank = make_stft_kernels(cfg.kernel_length, cfg.encoder_stride, "hann", "fixed")
        self.stride = cfg.encoder_stride
        self.pad = (cfg.kernel_length - cfg.encoder_kernel) // 2
        self.first = [a - 1 for a, _ in cfg.pairs]
        self.second = [b - 1 for _, b in cfg.pairs]
        self.include_sin = "sinIPD" in cfg.feature_set
        self.include_lps = "LPS" in cfg.feature_set
        re, im = _t(bank.k_re), _t(bank.k_im)
        if self.mode == "fixed":
            self.register_buffer("k_re", re)
            self.register_buffer("k_im", im)
        elif self.mode == "unconstrained":
            self.k_re = nn.Parameter(re)
            self.k_im = nn.Parameter(im)
        elif self.mode == "window_constrained":
            cos_b, sin_b = stft_basis(cfg.kernel_length)
            self.register_buffer("cos_basis", _t(cos_b))
            self.register_buffer("sin_basis", _t(sin_b))
            # the DC row of an STFT bank is the window itself
            self.window = nn.Parameter(_t(bank.k_re[0]))
        else:
            raise ShapeError(f"unknown kernel mode {self.mode!r}")

    @property
    def num_bins(self) -> int:
        return self.kernels()[0].shape[0]

    @property
    def dim(self) -> int:
        n = len(self.first) * self.num_bins
        return n * (2 if self.include_sin else 1) + (self.num_bins if self.include_lps else 0)

    def kernels(self):
        if self.mode == "window_constrained":
            return self.window * self.cos_basis, self.window * self.sin_basis
        return self.k_re, self.k_im

    def bank(self) -> KernelBank:
        """Current kernels as a numpy ``KernelBank`` (for export and cross-checks)."""
        if self.mode == "window_constrained":
            return KernelBank.from_window(self.window.detach().double().numpy(), self.stride)
        k_re, k_im = (k.detach().double().numpy() for k in self.kernels())
        return KernelBank(k_re, k_im, self.stride, self.mode)

    def correlate(self, x):
        """Kernel outputs re, im of every channel: [B, M, bins, frames]."""
        k_re, k_im = self.kernels()
        B, M, S = x.shape
        x = F.pad(x.reshape(B * M, 1, S), (self.pad, self.pad))
        weight = torch.cat([k_re, k_im], dim=0)[:, None, :].to(x.dtype)
        out = F.conv1d(x, weight, stride=self.stride)
        bins = k_re.shape[0]
        out = out.reshape(B, M, 2 * bins, -1)
        return out[:, :, :bins], out[:, :, bins:]

    def forward(self, x):
        if x.shape[1] <= max(self.first + self.second):
            raise ShapeError(f"pairs need {max(self.first + self.second) + 1} channels, got {x.shape[1]}")
        re, im = self.correlate(x)
        phase = kernel_phase(re, im)
        ipd = phase[:, self.first] - phase[:, self.second]  # [B, P, bins, frames]
        ipd = ipd.reshape(ipd.shape[0], -1, ipd.shape[-1])
        parts = [torch.cos(ipd)]
        if self.include_sin:
            parts.append(torch.sin(ipd))
        if self.include_lps:
            p = re[:, 0] ** 2 + im[:, 0] ** 2
            parts.insert(0, 10.0 * torch.log10(torch.clamp(p, min=LPS_FLOOR)))
        return torch.cat(parts, dim=1)


def upsample_to(feats, num_frames: int):
    """Linear interpolation along frames with endpoints pinned (as ``sigcore.upsample_frames``)."""
    src = feats.shape[-1]
    if src == num_frames:
        return feats
    if src > num_frames:
        raise ShapeError(f"cannot upsample {src} frames down to {num_frames}")
    if src == 1:
        return feats.expand(*feats.shape[:-1], num_frames)
    return F.interpolate(feats, size=num_frames, mode="linear", align_corners=True)
