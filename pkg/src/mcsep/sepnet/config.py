"""Model configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigurationError
from ..kernelfeat import DEFAULT_KERNEL_LENGTH, DEFAULT_PAIRS, as_pairs

NORMALIZATIONS = ("batch_norm", "global_layer_norm")
FUSIONS = ("none", "early", "middle", "late")
FRONTENDS = ("single", "parallel", "kernel_ipd_fixed", "kernel_ipd_unconstrained", "kernel_ipd_window")
FEATURES = ("LPS", "cosIPD", "sinIPD")
KERNEL_MODES = {
    "kernel_ipd_fixed": "fixed",
    "kernel_ipd_unconstrained": "unconstrained",
    "kernel_ipd_window": "window_constrained",
}


@dataclass(frozen=True)
class ModelConfig:
    """Separator hyper-parameters (desk-scale defaults).

    ``feature_set`` selects STFT-domain features (LPS of mic 1, cos/sin IPD
    over ``pairs``) that are upsampled to the encoder frame rate and fused
    through the spatial encoder.  Kernel frontends compute cos IPD (plus
    sin IPD if "sinIPD" is in ``feature_set``) directly at the encoder
    frame rate instead.
    """

    num_basis: int = 64  # N
    encoder_kernel: int = 40  # L
    encoder_stride: int = 20
    tcn_repeats: int = 2  # R
    blocks_per_repeat: int = 4  # X
    bottleneck_dim: int = 32  # B
    conv_channels: int = 64  # H
    conv_kernel: int = 3  # P
    num_speakers: int = 2  # C
    normalization: str = "batch_norm"
    fusion: str = "none"
    frontend: str = "single"
    feature_set: tuple = ()
    num_channels: int = 6
    pairs: tuple = DEFAULT_PAIRS
    embed_dim: int = 32
    kernel_length: int = DEFAULT_KERNEL_LENGTH
    sample_rate: int = 8000
    stft_window: float = 0.032  # seconds, for STFT-domain features
    stft_hop: float = 0.016

    def __post_init__(self):
        counts = (
            "num_basis", "encoder_kernel", "encoder_stride", "tcn_repeats", "blocks_per_repeat",
            "bottleneck_dim", "conv_channels", "conv_kernel", "num_speakers", "num_channels", "embed_dim",
        )
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.encoder_stride > self.encoder_kernel:
            raise ConfigurationError("encoder_stride must not exceed encoder_kernel")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError("conv_kernel must be odd for same-length dilated convolutions")
        for name, allowed in (("normalization", NORMALIZATIONS), ("fusion", FUSIONS), ("frontend", FRONTENDS)):
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        fs = tuple(self.feature_set)
        bad = set(fs) - set(FEATURES)
        if bad:
            raise ConfigurationError(f"unknown features {sorted(bad)}; choose from {FEATURES}")
        object.__setattr__(self, "feature_set", fs)
        object.__setattr__(self, "pairs", tuple((p.first, p.second) for p in as_pairs(self.pairs)))
        for a, b in self.pairs:
            if max(a, b) > self.num_channels:
                raise ConfigurationError(f"pair ({a}, {b}) exceeds {self.num_channels} channels")
        if self.fusion != "none" and not (fs or self.is_kernel_frontend):
            raise ConfigurationError("fusion needs a feature_set or a kernel frontend")
        if self.fusion == "none" and (fs or self.is_kernel_frontend):
            raise ConfigurationError("spatial features given but fusion is 'none'")
        if self.fusion == "middle" and self.tcn_repeats % 2:
            raise ConfigurationError("middle fusion needs an even number of repeats")
        if self.is_kernel_frontend:
            extra = (self.kernel_length - self.encoder_kernel)
            if extra < 0 or extra % 2:
                raise ConfigurationError("kernel_length - encoder_kernel must be even and >= 0")

    @property
    def is_kernel_frontend(self) -> bool:
        return self.frontend in KERNEL_MODES

    @property
    def kernel_mode(self) -> str | None:
        return KERNEL_MODES.get(self.frontend)

    @property
    def receptive_field(self) -> int:
        """Frames seen by one mask frame: 1 + R (P - 1)(2^X - 1)."""
        return 1 + self.tcn_repeats * (self.conv_kernel - 1) * (2**self.blocks_per_repeat - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_set"] = list(self.feature_set)
        d["pairs"] = [list(p) for p in self.pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model settings: {sorted(unknown)}")
        conv = dict(d)
        if "feature_set" in conv:
            conv["feature_set"] = tuple(conv["feature_set"])
        if "pairs" in conv:
            conv["pairs"] = tuple(tuple(p) for p in conv["pairs"]) if not isinstance(conv["pairs"], str) else conv["pairs"]
        return cls(**conv)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def full_scale(**overrides) -> ModelConfig:
    """Full-size setting at 16 kHz (N=256, L=40, stride 20, B=256, H=512, P=3, X=8, R=4).

    The values follow the best published Conv-TasNet setup with the longer
    encoder kernel used for multi-channel work; not exercised by the tests.
    """
    base = dict(
        num_basis=256,
        encoder_kernel=40,
        encoder_stride=20,
        tcn_repeats=4,
        blocks_per_repeat=8,
        bottleneck_dim=256,
        conv_channels=512,
        conv_kernel=3,
        sample_rate=16000,
        embed_dim=256,
    )
    base.update(overrides)
    return ModelConfig(**base)
