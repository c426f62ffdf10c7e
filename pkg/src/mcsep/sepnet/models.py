"""Separation networks: time-domain separator with spatial fusion, Freq-TCN and the cascade."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError, LengthError, ShapeError, TrainingError
from ..sigcore import ComplexSpectrogram, MultichannelAudio, istft_padded
from .config import ModelConfig
from .layers import (
    Decoder,
    Encoder,
    KernelIPDFrontend,
    SpatialEncoder,
    STFTFeatures,
    make_norm,
    tcn_blocks,
    upsample_to,
)


def check_masks(masks, what="mask"):
    """Masks must be finite and inside [0, 1]."""
    if not bool(torch.all((masks >= 0) & (masks <= 1))):
        raise TrainingError(f"{what} outside [0, 1] or non-finite", culprit=what)
    return masks


class MaskEstimator(nn.Module):
    """TCN mask estimator with optional fusion of a spatial embedding E.

    The W path is ``norm -> bottleneck -> blocks[0..R*X) -> PReLU -> conv1x1
    -> sigmoid`` in every mode, so its parameter names match the unfused
    model.  Fusion adds E-facing parameters only:

    * early: ``e_bottleneck`` adds E to the bottleneck output (same as a
      conv1x1 on the concatenation [W; E]);
    * middle: E gets its own bottleneck and R/2 repeats (``e_blocks``); at the
      branch point both are concatenated and projected back to B channels
      (``merge_w`` + ``merge_e``), then the remaining W-path blocks run;
    * late: E gets a full R-repeat branch whose output enters the mask layer
      through ``e_mask``.
    """

    def __init__(self, cfg: ModelConfig, in_dim: int, embed_dim: int = 0, out_dim: int | None = None, repeats=None):
        super().__init__()
        self.cfg = cfg
        self.fusion = cfg.fusion if embed_dim else "none"
        repeats = cfg.tcn_repeats if repeats is None else repeats
        B = cfg.bottleneck_dim
        self.out_dim = out_dim or cfg.num_basis
        self.norm = make_norm(cfg.normalization, in_dim)
        self.bottleneck = nn.Conv1d(in_dim, B, 1)
        self.blocks = tcn_blocks(cfg, repeats)
        self.mask_act = nn.PReLU()
        self.mask = nn.Conv1d(B, cfg.num_speakers * self.out_dim, 1)
        self.branch_point = len(self.blocks) // 2
        if self.fusion == "early":
            self.e_bottleneck = nn.Conv1d(embed_dim, B, 1, bias=False)
        elif self.fusion == "middle":
            if repeats % 2:
                raise ConfigurationError("middle fusion needs an even number of repeats")
            self.e_bottleneck = nn.Conv1d(embed_dim, B, 1)
            self.e_blocks = tcn_blocks(cfg, repeats // 2)
            self.merge_w = nn.Conv1d(B, B, 1)
            self.merge_e = nn.Conv1d(B, B, 1, bias=False)
        elif self.fusion == "late":
            self.e_bottleneck = nn.Conv1d(embed_dim, B, 1)
            self.e_blocks = tcn_blocks(cfg, repeats)
            self.e_act = nn.PReLU()
            self.e_mask = nn.Conv1d(B, cfg.num_speakers * self.out_dim, 1, bias=False)

    def fusion_facing(self):
        """Parameters that carry E into the W path."""
        return {
            "early": ["e_bottleneck.weight"],
            "middle": ["merge_e.weight"],
            "late": ["e_mask.weight"],
        }.get(self.fusion, [])

    def zero_fusion(self):
        """Zero the E-facing weights and make the middle-fusion merge an identity on W."""
        with torch.no_grad():
            for name in self.fusion_facing():
                self.get_parameter(name).zero_()
            if self.fusion == "middle":
                self.merge_w.weight.copy_(torch.eye(self.merge_w.weight.shape[0])[:, :, None])
                self.merge_w.bias.zero_()

    def forward(self, w, e=None, trace=None):
        def rec(name, x):
            if trace is not None:
                trace.append((name, x))
            return x

        if self.fusion != "none" and e is None:
            raise ShapeError(f"{self.fusion} fusion needs a spatial embedding")
        if e is not None and e.shape[-1] != w.shape[-1]:
            raise ShapeError(f"W has {w.shape[-1]} frames, E has {e.shape[-1]}")
        x = rec("bottleneck", self.bottleneck(self.norm(w)))
        if self.fusion == "early":
            x = rec("fused", x + self.e_bottleneck(e))
        if self.fusion in ("middle", "late"):
            y = self.e_bottleneck(e)
            for blk in self.e_blocks:
                y = blk(y)
        for i, blk in enumerate(self.blocks):
            if self.fusion == "middle" and i == self.branch_point:
                x = rec("fused", self.merge_w(x) + self.merge_e(y))
            x = rec(f"block{i}", blk(x))
        logits = self.mask(self.mask_act(x))
        if self.fusion == "late":
            logits = rec("fused", logits + self.e_mask(self.e_act(y)))
        masks = torch.sigmoid(logits)
        masks = masks.reshape(masks.shape[0], self.cfg.num_speakers, self.out_dim, -1)
        return check_masks(rec("masks", masks))


class TasNet(nn.Module):
    """Time-domain separator: encoder, optional spatial features, TCN masks, decoder.

    ``forward`` takes mixtures [batch, mics, samples] and returns estimates
    [batch, C, samples].
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.num_channels if cfg.frontend == "parallel" else 1
        self.encoder = Encoder(cfg.num_basis, cfg.encoder_kernel, cfg.encoder_stride, in_ch)
        self.decoder = Decoder(cfg.num_basis, cfg.encoder_kernel, cfg.encoder_stride)
        self.features = None
        if cfg.is_kernel_frontend:
            self.features = KernelIPDFrontend(cfg)
        elif cfg.feature_set:
            self.features = STFTFeatures(cfg)
        embed = 0
        if self.features is not None:
            embed = cfg.embed_dim
            self.spatial = SpatialEncoder(self.features.dim, embed)
        self.separator = MaskEstimator(cfg, cfg.num_basis, embed)

    def encode(self, mix):
        x = mix if self.cfg.frontend == "parallel" else mix[:, :1]
        return self.encoder(x)

    def embedding(self, mix, num_frames):
        if self.features is None:
            return None
        f = self.features(mix)
        if isinstance(self.features, STFTFeatures):
            f = upsample_to(f, num_frames)
        return self.spatial(f, num_frames)

    def forward(self, mix, trace=None, return_masks=False):
        if mix.dim() != 3:
            raise ShapeError(f"expected [batch, mics, samples], got {tuple(mix.shape)}")
        if mix.shape[1] < (self.cfg.num_channels if self.features is not None or self.cfg.frontend == "parallel" else 1):
            raise ShapeError(f"model needs {self.cfg.num_channels} channels, got {mix.shape[1]}")
        w = self.encode(mix)
        e = self.embedding(mix, w.shape[-1])
        masks = self.separator(w, e, trace)
        est = self.decoder(masks * w[:, None], mix.shape[-1])
        return (est, masks) if return_masks else est


class FreqTCN(nn.Module):
    """T-F mask estimator on STFT features; an extra TCN repeat stands in for a recurrent tail.

    ``forward`` returns masks [batch, C, frames, bins] on the padded STFT
    grid of mic 1 (as ``sigcore.stft_padded``).
    """

    def __init__(self, cfg: ModelConfig, features=("LPS", "cosIPD")):
        super().__init__()
        self.cfg = cfg
        self.features = STFTFeatures(cfg, features, padded=True)
        self.bins = self.features.spec.num_bins
        self.separator = MaskEstimator(
            cfg.replace(fusion="none", feature_set=(), frontend="single"),
            self.features.dim,
            out_dim=self.bins,
            repeats=cfg.tcn_repeats + 1,
        )

    @property
    def spec(self):
        return self.features.spec

    def forward(self, mix, return_spectrum=False):
        Y = self.features.spectrum(mix)
        masks = self.separator(self.features(mix, Y)).transpose(2, 3)
        return (masks, Y[:, 0]) if return_spectrum else masks


class CascadeRefiner(nn.Module):
    """Second stage: refine pre-separated waveforms with a time-domain TCN.

    The mixture (mic 1) and each pre-separated waveform are encoded with a
    shared encoder; the representations are concatenated along the feature
    axis to estimate one mask per speaker, which multiplies that speaker's
    own pre-separated representation before decoding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C, N = cfg.num_speakers, cfg.num_basis
        self.encoder = Encoder(N, cfg.encoder_kernel, cfg.encoder_stride, 1)
        self.decoder = Decoder(N, cfg.encoder_kernel, cfg.encoder_stride)
        self.separator = MaskEstimator(cfg.replace(fusion="none", feature_set=(), frontend="single"), N * (C + 1))

    def forward(self, mix, pre):
        if pre.shape[1] != self.cfg.num_speakers or pre.shape[-1] != mix.shape[-1]:
            raise LengthError(f"pre-separated {tuple(pre.shape)} does not match mixture {tuple(mix.shape)}")
        B, C, S = pre.shape
        w_mix = self.encoder(mix[:, :1])
        w_pre = self.encoder(pre.reshape(B * C, 1, S)).reshape(B, C, -1, w_mix.shape[-1])
        masks = self.separator(torch.cat([w_mix, w_pre.reshape(B, -1, w_mix.shape[-1])], dim=1))
        return self.decoder(masks * w_pre, S)


def _as_batch(mixture, dtype):
    if isinstance(mixture, MultichannelAudio):
        x = mixture.samples
    else:
        x = np.asarray(mixture, dtype=np.float64)
        x = x[None] if x.ndim == 1 else x
    return torch.tensor(np.array(x), dtype=dtype)[None]


def first_stage(mixture, freq_model: FreqTCN, masks=None) -> np.ndarray:
    """Mask |Y1| (keeping the mixture phase) and resynthesise: [C, samples].

    ``masks`` ([C, frames, bins]) overrides the network, e.g. with oracle masks.
    """
    dtype = next(freq_model.parameters()).dtype
    x = _as_batch(mixture, dtype)
    with torch.no_grad():
        m, Y = freq_model(x, return_spectrum=True)
    m = m[0].double().numpy() if masks is None else np.asarray(masks, dtype=np.float64)
    Y = Y[0].to(torch.complex128).numpy()
    spec = freq_model.spec
    length = x.shape[-1]
    sr = freq_model.cfg.sample_rate
    return np.stack([istft_padded(ComplexSpectrogram.from_complex(mc * Y, spec), length, sr).samples[0] for mc in m])


def cascaded_separate(mixture, freq_model: FreqTCN, time_model: CascadeRefiner, stage1_masks=None) -> np.ndarray:
    """Freq-TCN pre-separation followed by time-domain refinement: [C, samples]."""
    pre = first_stage(mixture, freq_model, stage1_masks)
    dtype = next(time_model.parameters()).dtype
    x = _as_batch(mixture, dtype)
    with torch.no_grad():
        out = time_model(x, torch.as_tensor(pre, dtype=dtype)[None])
    return out[0].double().numpy()


def build_model(cfg: ModelConfig) -> TasNet:
    return TasNet(cfg)
