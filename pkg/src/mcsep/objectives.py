"""Separation metrics, permutation-invariant wrapping, PSA loss and oracle masks.

NumPy versions are the reference metrics used for evaluation; the
``*_torch`` functions are the differentiable training objectives.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, DomainError, ShapeError
from .roomsim import ANGLE_BINS
from .sigcore import AnalysisSpec, ComplexSpectrogram, MultichannelAudio, istft_padded, stft_padded

SI_SNR_CLAMP_DB = 60.0
MAX_PIT_SPEAKERS = 6
MASK_KINDS = ("ibm", "irm", "ipsm")
IPSM_MAX = 1.5
REPORT_COLUMNS = ANGLE_BINS + ("Ave.",)


def _wave(x) -> np.ndarray:
    if isinstance(x, MultichannelAudio):
        if x.num_channels != 1:
            raise ShapeError("expected a single-channel waveform")
        x = x.samples[0]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D waveform, got shape {x.shape}")
    return x


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB, clamped to [-60, 60]."""
    est, ref = _wave(est), _wave(ref)
    if est.shape != ref.shape or est.size < 2:
        raise ShapeError(f"si_snr needs equal lengths >= 2, got {est.shape} and {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DomainError("reference has zero energy after removing its mean")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    t, e = float(np.dot(target, target)), float(np.dot(noise, noise))
    if t == 0.0:
        return -SI_SNR_CLAMP_DB
    if e == 0.0:
        return SI_SNR_CLAMP_DB
    return float(np.clip(10.0 * math.log10(t / e), -SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))


def si_snr_improvement(est, ref, mixture) -> float:
    return si_snr(est, ref) - si_snr(mixture, ref)


@dataclass(frozen=True)
class PermutationResult:
    """``best_permutation[c]`` is the estimate index assigned to reference ``c``."""

    best_permutation: tuple
    per_pair_scores: tuple
    aggregate: float

    def __post_init__(self):
        if sorted(self.best_permutation) != list(range(len(self.best_permutation))):
            raise ValueError(f"{self.best_permutation} is not a permutation")


def pit_wrap(score_fn, ests, refs, mode: str = "maximize") -> PermutationResult:
    """Exhaustive permutation search; ties go to the lexicographically smallest permutation."""
    if mode not in ("maximize", "minimize"):
        raise ConfigurationError(f"mode must be maximize or minimize, got {mode!r}")
    C = len(refs)
    if C < 1 or len(ests) != C:
        raise ShapeError(f"need equally many estimates and references, got {len(ests)} and {C}")
    if C > MAX_PIT_SPEAKERS:
        raise ConfigurationError(f"refusing exhaustive PIT over {C}! permutations")
    cache = {}
    best = None
    sign = 1.0 if mode == "maximize" else -1.0
    # itertools yields permutations in lexicographic order, so strict
    # improvement keeps the smallest among ties
    for perm in itertools.permutations(range(C)):
        scores = []
        for c in range(C):
            key = (perm[c], c)
            if key not in cache:
                cache[key] = float(score_fn(ests[perm[c]], refs[c]))
            scores.append(cache[key])
        agg = float(np.mean(scores))
        if best is None or sign * agg > sign * best[2]:
            best = (perm, tuple(scores), agg)
    return PermutationResult(*best)


def _check_specs(specs, mixture_spec):
    for s in specs:
        if s.real.shape != mixture_spec.real.shape or s.spec != mixture_spec.spec:
            raise ShapeError("source and mixture spectrograms must share shape and analysis")


def psa_targets(mixture_spec: ComplexSpectrogram, source_specs) -> np.ndarray:
    """Phase-sensitive targets |X_c| cos(angle Y - angle X_c) truncated to [0, |Y|]; [C, T, F]."""
    _check_specs(source_specs, mixture_spec)
    Y = mixture_spec.complex
    mag = np.abs(Y)
    out = []
    for s in source_specs:
        X = s.complex
        # |X| cos(aY - aX) = Re(X conj(Y)) / |Y|
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(mag > 0, np.real(X * np.conj(Y)) / mag, 0.0)
        out.append(np.clip(t, 0.0, mag))
    return np.stack(out)


def psa_loss(est_masks, mixture_spec: ComplexSpectrogram, source_specs) -> float:
    """Sum over sources of the squared Frobenius error between masked |Y| and its PSA target."""
    masks = np.asarray(est_masks, dtype=np.float64)
    targets = psa_targets(mixture_spec, source_specs)
    if masks.shape != targets.shape:
        raise ShapeError(f"masks {masks.shape} do not match targets {targets.shape}")
    diff = masks * mixture_spec.magnitude[None] - targets
    return float(np.sum(diff * diff))


def oracle_masks(source_specs, mixture_spec: ComplexSpectrogram, kind: str) -> np.ndarray:
    """Ideal masks [C, T, F] of ``kind`` in {ibm, irm, ipsm}."""
    kind = kind.lower()
    if kind not in MASK_KINDS:
        raise ConfigurationError(f"unknown oracle mask {kind!r}")
    if len(source_specs) < 2:
        raise ConfigurationError("oracle masks need at least two sources")
    _check_specs(source_specs, mixture_spec)
    mags = np.stack([s.magnitude for s in source_specs])
    C = mags.shape[0]
    if kind == "ibm":
        winner = np.argmax(mags, axis=0)  # first index among ties
        return (np.arange(C)[:, None, None] == winner[None]).astype(np.float64)
    if kind == "irm":
        total = mags.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, mags / total, 1.0 / C)
    Y = mixture_spec.complex
    ymag = np.abs(Y)
    out = []
    for s in source_specs:
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(ymag > 0, np.real(s.complex * np.conj(Y)) / (ymag * ymag), 0.0)
        out.append(np.clip(m, 0.0, IPSM_MAX))
    return np.stack(out)


def oracle_analysis(sample_rate: int) -> AnalysisSpec:
    """512-point / 256-hop at 16 kHz; the same 32 ms / 16 ms at other rates."""
    return AnalysisSpec.for_duration(sample_rate, 0.032, 0.016)


def _first_channel(x) -> tuple[np.ndarray, int | None]:
    if isinstance(x, MultichannelAudio):
        return x.samples[0], x.sample_rate
    x = np.asarray(x, dtype=np.float64)
    return (x[0] if x.ndim == 2 else x), None


@dataclass(frozen=True)
class OracleResult:
    estimates: tuple
    permutation: PermutationResult
    si_snri: float


def oracle_separate(mixture, references, kind: str, spec: AnalysisSpec | None = None, sample_rate=None):
    """Mask channel 1 of ``mixture`` with an oracle mask and resynthesise with the mixture phase."""
    mix, sr = _first_channel(mixture)
    refs = [_first_channel(r)[0] for r in references]
    sr = sample_rate or sr or 16000
    spec = spec or oracle_analysis(sr)
    Y = stft_padded(mix, spec)
    Xs = [stft_padded(r, spec) for r in refs]
    masks = oracle_masks(Xs, Y, kind)
    ests = []
    for m in masks:
        Z = ComplexSpectrogram(m * Y.real, m * Y.imag, spec)
        ests.append(istft_padded(Z, mix.size, sr).samples[0])
    perm = pit_wrap(lambda e, r: si_snr_improvement(e, r, mix), ests, refs)
    return OracleResult(tuple(ests), perm, perm.aggregate)


# --- differentiable objectives ---------------------------------------------


def si_snr_torch(est: torch.Tensor, ref: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """Unclamped SI-SNR in dB over the last axis; noise energy floored at ``floor`` x target energy."""
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    tiny = torch.finfo(ref.dtype).tiny
    target = (est * ref).sum(dim=-1, keepdim=True) / (ref_energy + tiny) * ref
    noise = est - target
    t = (target * target).sum(dim=-1)
    e = (noise * noise).sum(dim=-1)
    return 10.0 * torch.log10((t + tiny) / (e + floor * t + tiny))


def _trim(est, refs):
    n = min(est.shape[-1], refs.shape[-1])
    return est[..., :n], refs[..., :n]


def upit_si_snr_loss(est: torch.Tensor, refs: torch.Tensor):
    """Negative mean SI-SNR under the best utterance-level permutation.

    ``est`` and ``refs`` are [batch, C, samples]; the longer one is trimmed.
    Returns (loss, permutations [batch, C]).
    """
    est, refs = _trim(est, refs)
    B, C, _ = refs.shape
    if est.shape[:2] != (B, C):
        raise ShapeError(f"estimates {tuple(est.shape)} do not match references {tuple(refs.shape)}")
    if C > MAX_PIT_SPEAKERS:
        raise ConfigurationError(f"refusing exhaustive PIT over {C}! permutations")
    pair = si_snr_torch(est[:, :, None, :], refs[:, None, :, :])  # [B, est, ref]
    perms = list(itertools.permutations(range(C)))
    idx = torch.arange(C)
    scores = torch.stack([pair[:, list(p), idx].mean(dim=1) for p in perms], dim=1)  # [B, P]
    # first maximum is the lexicographically smallest permutation
    best = torch.argmax(scores, dim=1)
    loss = -scores.gather(1, best[:, None]).mean()
    return loss, torch.tensor([perms[i] for i in best.tolist()])


def psa_loss_torch(masks: torch.Tensor, mixture_mag: torch.Tensor, targets: torch.Tensor):
    """PSA loss under the best permutation, averaged over the batch.

    ``masks`` and ``targets`` are [batch, C, frames, bins]; ``mixture_mag`` is
    [batch, frames, bins].  Returns (loss, permutations).
    """
    if masks.shape != targets.shape:
        raise ShapeError(f"masks {tuple(masks.shape)} do not match targets {tuple(targets.shape)}")
    B, C = masks.shape[:2]
    est = masks * mixture_mag[:, None]
    pair = ((est[:, :, None] - targets[:, None]) ** 2).sum(dim=(-1, -2))  # [B, est, ref]
    perms = list(itertools.permutations(range(C)))
    idx = torch.arange(C)
    totals = torch.stack([pair[:, list(p), idx].sum(dim=1) for p in perms], dim=1)
    best = torch.argmin(totals, dim=1)
    return totals.gather(1, best[:, None]).mean(), torch.tensor([perms[i] for i in best.tolist()])


# --- reports ----------------------------------------------------------------


def aggregate_by_angle(records, key: str = "si_snri") -> dict:
    """Mean of ``key`` per angle bin plus the overall mean ("Ave."); empty bins give NaN."""
    out = {}
    for b in ANGLE_BINS:
        vals = [r[key] for r in records if r["angle_bin"] == b]
        out[b] = float(np.mean(vals)) if vals else float("nan")
    vals = [r[key] for r in records]
    out["Ave."] = float(np.mean(vals)) if vals else float("nan")
    return out


def format_table(rows: dict) -> str:
    """Plain-text table: one row per method, columns <15, 15-45, 45-90, >90, Ave."""
    width = max([len("Method")] + [len(k) for k in rows]) + 2
    lines = ["Method".ljust(width) + "".join(c.rjust(8) for c in REPORT_COLUMNS)]
    for name, agg in rows.items():
        lines.append(name.ljust(width) + "".join(f"{agg[c]:8.2f}" for c in REPORT_COLUMNS))
    return "\n".join(lines)
