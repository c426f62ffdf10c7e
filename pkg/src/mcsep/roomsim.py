"""Simulated reverberant multi-channel mixtures.

Image-source room impulse responses (uniform, frequency independent wall
reflection), a uniform circular array, random room/scene sampling and
SNR-controlled mixing.  A :class:`SceneSpec` plus its seed fully
determines a mixture.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import fftconvolve, lfilter

from .errors import ConfigurationError, DegenerateInputError, FormatError, GeometryError
from .sigcore import MultichannelAudio

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.3
FRACTIONAL_TAPS = 81
ANGLE_BINS = ("<15", "15-45", "45-90", ">90")


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Microphone coordinates in metres, relative to the array centre."""

    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise GeometryError(f"mic positions must be [M, 3], got {pos.shape}")
        if pos.shape[0] > 1:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            if np.any(d[np.triu_indices(len(pos), 1)] <= 0):
                raise GeometryError("microphone positions must be pairwise distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return np.array_equal(self.mic_positions, other.mic_positions)

    def __hash__(self):
        return hash(self.mic_positions.tobytes())

    @property
    def num_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def extent(self) -> float:
        return float(np.max(np.linalg.norm(self.mic_positions, axis=1)))


def circular_array(num_mics: int = 6, radius: float = 0.035) -> ArrayGeometry:
    """Uniform horizontal circle; mic i (1-based) at azimuth (i-1)*360/num_mics degrees."""
    if num_mics < 1:
        raise ConfigurationError("need at least one microphone")
    if radius <= 0:
        raise ConfigurationError(f"radius must be positive, got {radius}")
    az = 2.0 * np.pi * np.arange(num_mics) / num_mics
    return ArrayGeometry(np.stack([radius * np.cos(az), radius * np.sin(az), np.zeros(num_mics)], axis=1))


def _vec3(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise GeometryError(f"expected a 3-D coordinate, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    t60: float
    array_center: tuple
    source_positions: tuple
    speed_of_sound: float = SPEED_OF_SOUND
    wall_margin: float = WALL_MARGIN

    def __post_init__(self):
        dims = _vec3(self.dimensions)
        if np.any(dims <= 0):
            raise GeometryError("room dimensions must be positive")
        if self.t60 < 0:
            raise ConfigurationError("t60 must be >= 0")
        center = _vec3(self.array_center)
        sources = tuple(tuple(float(c) for c in _vec3(s)) for s in self.source_positions)
        for name, p in [("array centre", center)] + [(f"source {i}", np.array(s)) for i, s in enumerate(sources)]:
            if np.any(p < self.wall_margin) or np.any(p > dims - self.wall_margin):
                raise GeometryError(f"{name} at {p.tolist()} is closer than {self.wall_margin} m to a wall")
        object.__setattr__(self, "dimensions", tuple(float(d) for d in dims))
        object.__setattr__(self, "array_center", tuple(float(c) for c in center))
        object.__setattr__(self, "source_positions", sources)

    @property
    def volume(self) -> float:
        x, y, z = self.dimensions
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dimensions
        return 2.0 * (x * y + x * z + y * z)


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = np.atleast_2d(np.asarray(self.taps, dtype=np.float64))
        if taps.shape[1] < 1 or not np.all(np.isfinite(taps)):
            raise ValueError("impulse response must be finite and non-empty")
        object.__setattr__(self, "taps", taps)

    @property
    def num_mics(self) -> int:
        return self.taps.shape[0]


ABSORPTION_MODELS = ("calibrated", "eyring", "sabine")


def _axis_images(src, length, m_max):
    """Image coordinates and reflection counts along one axis."""
    m = np.arange(-m_max, m_max + 1)
    coords = np.concatenate([src + 2 * m * length, -src + 2 * m * length])
    counts = np.concatenate([np.abs(m) * 2, np.abs(m - 1) + np.abs(m)])
    return coords, counts


def _image_set(dims, src, center, reach, max_order):
    """Image positions [I, 3] and reflection counts [I] within ``reach`` of ``center``."""
    axes = []
    for a in range(3):
        m_max = min(int(math.ceil(reach / (2 * dims[a]))) + 1, max_order)
        coords, counts = _axis_images(src[a], dims[a], m_max)
        keep = counts <= max_order
        axes.append((coords[keep], counts[keep]))
    (cx, nx), (cy, ny), (cz, nz) = axes
    dist = np.sqrt(
        ((cx - center[0]) ** 2)[:, None, None]
        + ((cy - center[1]) ** 2)[None, :, None]
        + ((cz - center[2]) ** 2)[None, None, :]
    )
    ix, iy, iz = np.nonzero(dist <= reach)
    images = np.stack([cx[ix], cy[iy], cz[iz]], axis=1)
    return images, nx[ix] + ny[iy] + nz[iz]


def decay_time(energy, sample_rate, lo_db=-5.0, hi_db=-35.0):
    """T60 from a least-squares line through the backward-integrated decay between two levels."""
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        return 0.0
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    idx = np.nonzero((edc_db <= lo_db) & (edc_db >= hi_db))[0]
    if idx.size < 2:
        return 0.0
    slope = np.polyfit(idx / sample_rate, edc_db[idx], 1)[0]
    return float(-60.0 / slope) if slope < 0 else float("inf")


CALIBRATION_PHASES = 8
RENDER_PHASES = 256


@functools.lru_cache(maxsize=8)
def _phase_table(phases):
    """Windowed-sinc kernels for delays q/phases, q = 0..phases: [phases+1, taps+1], starting at tap -half."""
    half = FRACTIONAL_TAPS // 2
    first, kernel = _fractional_delay_taps(np.arange(phases + 1) / phases)
    table = np.zeros((phases + 1, FRACTIONAL_TAPS + 1))
    for q in range(phases + 1):
        off = first[q] + half
        table[q, off : off + FRACTIONAL_TAPS] = kernel[q]
    table.setflags(write=False)
    return table


def _render(delay, weight, row, num_rows, length, phases):
    """Sum of weighted fractional delays, one response per ``row``: [num_rows, length].

    Each delay splits its weight linearly between the two nearest of
    ``phases + 1`` tabulated fractional phases; the phase grid is then
    convolved with the exact windowed-sinc kernel of each phase.  Integer
    delays land on phase 0 exactly.  With 256 phases the deviation from
    evaluating every kernel directly is below 1e-5 of the tap amplitude.
    """
    half = FRACTIONAL_TAPS // 2
    n0 = np.floor(delay)
    pos = (delay - n0) * phases
    q = np.minimum(np.floor(pos), phases - 1)
    a = pos - q
    width = length + FRACTIONAL_TAPS + 1
    g = n0.astype(np.int64) + half
    keep = g < width
    g, q, a, weight, row = g[keep], q[keep].astype(np.int64), a[keep], weight[keep], row[keep]
    cells = num_rows * (phases + 1) * width
    base = (row * (phases + 1) + q) * width + g
    grid = np.bincount(base, weights=weight * (1.0 - a), minlength=cells)
    grid += np.bincount(base + width, weights=weight * a, minlength=cells)
    grid = grid.reshape(num_rows, phases + 1, width)
    table = _phase_table(phases)
    nfft = scipy.fft.next_fast_len(width + table.shape[1] - 1, real=True)
    spec = np.einsum("rqf,qf->rf", scipy.fft.rfft(grid, nfft, axis=-1), scipy.fft.rfft(table, nfft, axis=-1))
    out = scipy.fft.irfft(spec, nfft, axis=-1)
    # grid index g = n0 + half, table index t = tap + half: sample = g + t - 2 half
    return out[:, 2 * half : 2 * half + length]


def _render_by_order(images, refl, receiver, reach, sample_rate, c, length, phases=CALIBRATION_PHASES):
    """Response at ``receiver`` split by total reflection count.

    Returns (orders [K], partial [K, length]); the full response for a
    coefficient ``beta`` is ``beta**orders @ partial``.
    """
    d = np.linalg.norm(images - receiver, axis=1)
    ok = d <= reach
    d, refl = d[ok], refl[ok]
    orders, row = np.unique(refl, return_inverse=True)
    partial = _render(d / c * sample_rate, 1.0 / (4.0 * np.pi * d), row, orders.size, length, phases)
    return orders, partial


def _render_at(images, refl, receiver, reach, sample_rate, c, length, beta, highpass):
    """Full response at ``receiver`` for reflection coefficient ``beta``."""
    d = np.linalg.norm(images - receiver, axis=1)
    ok = d <= reach
    d, refl = d[ok], refl[ok]
    weight = np.power(beta, refl.astype(np.float64)) / (4.0 * np.pi * d)
    taps = _render(d / c * sample_rate, weight, np.zeros(d.size, np.int64), 1, length, RENDER_PHASES)[0]
    if highpass and beta > 0 and np.any(refl > 0):
        taps = allen_berkley_highpass(taps, sample_rate)
    return taps


def _combine(orders, partial, beta, sample_rate, highpass):
    taps = np.power(beta, orders.astype(np.float64)) @ partial
    if highpass and beta > 0 and np.any(orders > 0):
        taps = allen_berkley_highpass(taps, sample_rate)
    return taps


def calibrate_reflection(orders, partial, t60, sample_rate, highpass=True, steps=40):
    """Bisect for the coefficient whose rendered response has Schroeder T60 ``t60``.

    ``orders``/``partial`` come from ``_render_by_order``.  Calibrating the
    rendered response (interpolation filter and high-pass included) is what
    keeps short T60 honest: there the interpolation tails of the direct path
    carry a visible share of the early decay.
    """
    def t60_for(beta):
        return decay_time(_combine(orders, partial, beta, sample_rate, highpass) ** 2, sample_rate)

    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if t60_for(mid) < t60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def reflection_coefficient(
    room: RoomSpec, model: str = "calibrated", sample_rate: int = 16000, source=None, receiver=None
) -> float:
    """Uniform wall pressure-reflection coefficient realising ``room.t60``.

    ``"sabine"`` inverts Sabine's formula with the absorption clamped
    below 1 and ``"eyring"`` inverts Eyring's.  ``"calibrated"`` searches
    for the coefficient whose rendered response between ``source`` and
    ``receiver`` (default: a fixed off-centre pair) has the requested
    Schroeder T60.  With the diffuse-field formulas the image method decays
    more slowly than requested, and Sabine cannot reach short T60 in large
    rooms.
    """
    if room.t60 <= 0:
        return 0.0
    ratio = 0.161 * room.volume / (room.surface * room.t60)
    if model == "sabine":
        alpha = min(ratio, 1.0 - 1e-12)
    elif model == "eyring":
        alpha = 1.0 - math.exp(-ratio)
    elif model == "calibrated":
        dims = np.array(room.dimensions)
        receiver = dims * 0.5 if receiver is None else _vec3(receiver)
        source = dims * np.array([0.31, 0.62, 0.43]) if source is None else _vec3(source)
        length = int(math.ceil(default_rir_seconds(room, float(np.linalg.norm(source - receiver))) * sample_rate))
        length += FRACTIONAL_TAPS // 2 + 2
        reach = (length - FRACTIONAL_TAPS // 2 - 1) / sample_rate * room.speed_of_sound
        images, counts = _image_set(dims, source, receiver, reach, 10**9)
        orders, partial = _render_by_order(images, counts, receiver, reach, sample_rate, room.speed_of_sound, length)
        return calibrate_reflection(orders, partial, room.t60, sample_rate)
    else:
        raise ConfigurationError(f"unknown absorption model {model!r}")
    return math.sqrt(1.0 - alpha)


def allen_berkley_highpass(taps, sample_rate, cutoff=100.0):
    """Second-order high-pass used by Allen and Berkley to remove the image method's DC build-up."""
    w = 2.0 * np.pi * cutoff / sample_rate
    r1 = math.exp(-w)
    b1, b2 = 2.0 * r1 * math.cos(w), -r1 * r1
    return lfilter([1.0, -(1.0 + r1), r1], [1.0, -b1, -b2], taps, axis=-1)


def default_rir_seconds(room: RoomSpec, max_distance: float) -> float:
    return room.t60 + max_distance / room.speed_of_sound


def _fractional_delay_taps(delay):
    """81-tap Hann-windowed sinc for each delay; returns (first index, taps [I, 81])."""
    half = FRACTIONAL_TAPS // 2
    n0 = np.floor(delay)
    frac = delay - n0
    snap_up = frac > 1.0 - 1e-9
    n0 = np.where(snap_up, n0 + 1, n0)
    frac = np.where(snap_up | (frac < 1e-9), 0.0, frac)
    m = np.arange(-half, half + 1, dtype=np.float64)
    t = m[None, :] - frac[:, None]
    # sin(pi (m - frac)) = -(-1)^m sin(pi frac): one transcendental per image
    sign = np.where(m % 2 == 0, 1.0, -1.0)
    sin_t = -sign[None, :] * np.sin(np.pi * frac)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(t == 0, 1.0, sin_t / (np.pi * t))
    # cos(pi t / w) expanded the same way
    width = half + 1.0
    cm, sm = np.cos(np.pi * m / width), np.sin(np.pi * m / width)
    cf, sf = np.cos(np.pi * frac / width), np.sin(np.pi * frac / width)
    window = 0.5 * (1.0 + cm[None, :] * cf[:, None] + sm[None, :] * sf[:, None])
    return n0.astype(np.int64) - half, sinc * window


def image_source_rirs(
    room: RoomSpec,
    source_position,
    mic_positions,
    sample_rate: int,
    max_order: int | None = None,
    rir_length: int | None = None,
    absorption_model: str = "calibrated",
    highpass: bool = True,
) -> ImpulseResponse:
    """Image-source RIRs from one source to every mic in ``mic_positions`` (absolute, [M, 3]).

    Each image contributes ``beta**reflections / (4 pi d)`` at delay ``d / c``
    through an 81-tap windowed-sinc fractional delay.  ``max_order`` caps the
    reflections per axis; by default it is large enough that the image set
    reaches the end of the response (``t60`` plus the direct-path delay).
    With ``highpass`` the Allen-Berkley 100 Hz high-pass is applied whenever
    reflected images are present; a direct-path-only response is left as is.
    """
    src = _vec3(source_position)
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    dims = np.array(room.dimensions)
    c = room.speed_of_sound
    direct = np.linalg.norm(mics - src, axis=1)
    if np.any(direct < 1e-6):
        raise GeometryError("source coincides with a microphone")
    half = FRACTIONAL_TAPS // 2
    if rir_length is None:
        seconds = default_rir_seconds(room, float(direct.max()))
        rir_length = int(math.ceil(seconds * sample_rate)) + half + 2
    reach = (rir_length - half - 1) / sample_rate * c  # farthest image that fits
    if max_order is None:
        max_order = int(math.ceil(reach / dims.min())) + 1
    if max_order < 0:
        raise ConfigurationError("max_order must be >= 0")

    center = mics.mean(axis=0)
    spread = float(np.max(np.linalg.norm(mics - center, axis=1)))
    images, refl = _image_set(dims, src, center, reach + spread, max_order)

    def render(beta):
        return np.stack([_render_at(images, refl, m, reach, sample_rate, c, rir_length, beta, highpass) for m in mics])

    if absorption_model != "calibrated" or room.t60 <= 0:
        return ImpulseResponse(render(reflection_coefficient(room, absorption_model, sample_rate)), sample_rate)
    orders, partial = _render_by_order(images, refl, center, reach, sample_rate, c, rir_length)
    beta = calibrate_reflection(orders, partial, room.t60, sample_rate, highpass)
    taps = render(beta)
    if _worst_t60_error(taps, room.t60, sample_rate) > ARRAY_T60_SLACK:
        beta = _minimax_reflection(images, refl, mics, reach, sample_rate, c, rir_length, room.t60, highpass, beta)
        taps = render(beta)
    return ImpulseResponse(taps, sample_rate)


ARRAY_T60_SLACK = 0.05


def _worst_t60_error(taps, t60, sample_rate):
    return max(abs(decay_time(t**2, sample_rate) / t60 - 1.0) for t in np.atleast_2d(taps))


def _minimax_reflection(images, refl, mics, reach, sample_rate, c, length, t60, highpass, beta0, grid=33):
    """Coefficient minimising the worst T60 error over ``mics``.

    Used when the centre-calibrated coefficient leaves some microphone far
    off: with a dominant direct path, the -5 dB start of the decay fit can
    fall just before or just after the end of the direct sound, and mics a
    few centimetres apart then land on different sides of that edge.
    """
    per_mic = [_render_by_order(images, refl, m, reach, sample_rate, c, length) for m in mics]
    betas = [beta0] + [calibrate_reflection(o, p, t60, sample_rate, highpass) for o, p in per_mic]
    candidates = np.unique(np.concatenate([betas, np.linspace(min(betas), max(betas), grid)]))

    def worst(beta):
        return _worst_t60_error([_combine(o, p, beta, sample_rate, highpass) for o, p in per_mic], t60, sample_rate)

    return float(min(candidates, key=worst))


def image_method_rir(
    room: RoomSpec,
    source_index: int,
    mic_position,
    max_order: int | None = None,
    sample_rate: int = 16000,
    rir_length: int | None = None,
    absorption_model: str = "calibrated",
) -> ImpulseResponse:
    """Single-microphone RIR for source ``source_index`` of ``room``."""
    return image_source_rirs(
        room,
        room.source_positions[source_index],
        [_vec3(mic_position)],
        sample_rate,
        max_order=max_order,
        rir_length=rir_length,
        absorption_model=absorption_model,
    )


# --- scenes ---------------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    """Sampling ranges for random scenes; defaults follow the far-field 2-speaker setup."""

    room_min: tuple = (3.0, 3.0, 2.5)
    room_max: tuple = (8.0, 10.0, 6.0)
    t60_range: tuple = (0.05, 0.5)
    snr_range: tuple = (-2.5, 2.5)
    num_mics: int = 6
    array_radius: float = 0.035
    wall_margin: float = WALL_MARGIN
    height_range: tuple = (1.2, 2.0)
    min_source_distance: float = 0.5
    num_sources: int = 2
    sample_rate: int = 8000
    speed_of_sound: float = SPEED_OF_SOUND
    max_order: int | None = None
    absorption_model: str = "calibrated"
    max_attempts: int = 1000

    def validate(self) -> None:
        lo, hi = np.array(self.room_min, float), np.array(self.room_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi) or np.any(lo <= 0):
            raise ConfigurationError(f"bad room ranges {self.room_min} .. {self.room_max}")
        for name in ("t60_range", "snr_range", "height_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ConfigurationError(f"{name} is empty: {a} > {b}")
        if self.t60_range[0] < 0:
            raise ConfigurationError("t60 must be >= 0")
        margin = self.wall_margin + self.array_radius
        if np.any(lo[:2] <= 2 * margin):
            raise ConfigurationError("smallest room is too small for the wall margins")
        h_lo, h_hi = self.height_range
        if h_lo < self.wall_margin or h_hi > lo[2] - self.wall_margin:
            raise ConfigurationError(
                f"height range {self.height_range} does not fit {self.wall_margin} m margins "
                f"in a {lo[2]} m tall room"
            )
        if self.num_sources < 1 or self.num_mics < 1:
            raise ConfigurationError("need at least one source and one microphone")

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown simulation settings: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)


@dataclass(frozen=True)
class SceneSpec:
    room: RoomSpec
    geometry: ArrayGeometry
    mixing_snr_db: float
    seed: int
    source_audio_refs: tuple = ()
    sample_rate: int = 8000
    absorption_model: str = "calibrated"
    max_order: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def mic_positions(self) -> np.ndarray:
        """Absolute microphone coordinates [M, 3]."""
        return self.geometry.mic_positions + np.array(self.room.array_center)

    def to_dict(self) -> dict:
        room = asdict(self.room)
        room["source_positions"] = [list(p) for p in self.room.source_positions]
        room["dimensions"] = list(self.room.dimensions)
        room["array_center"] = list(self.room.array_center)
        return {
            "seed": int(self.seed),
            "room": room,
            "mic_offsets": self.geometry.mic_positions.tolist(),
            "mixing_snr_db": float(self.mixing_snr_db),
            "source_audio_refs": list(self.source_audio_refs),
            "sample_rate": int(self.sample_rate),
            "absorption_model": self.absorption_model,
            "max_order": self.max_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        r = d["room"]
        room = RoomSpec(
            tuple(r["dimensions"]),
            float(r["t60"]),
            tuple(r["array_center"]),
            tuple(tuple(p) for p in r["source_positions"]),
            float(r.get("speed_of_sound", SPEED_OF_SOUND)),
            float(r.get("wall_margin", WALL_MARGIN)),
        )
        return cls(
            room,
            ArrayGeometry(np.array(d["mic_offsets"])),
            float(d["mixing_snr_db"]),
            int(d["seed"]),
            tuple(d.get("source_audio_refs", ())),
            int(d.get("sample_rate", 8000)),
            d.get("absorption_model", "calibrated"),
            d.get("max_order"),
        )

    def digest(self) -> str:
        """Stable hash of the scene description."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def sample_scene(rng_seed: int, config: SimulationConfig = SimulationConfig(), source_pool=()) -> SceneSpec:
    """Draw one scene; identical seeds give identical scenes."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    lo, hi = np.array(config.room_min, float), np.array(config.room_max, float)
    dims = rng.uniform(lo, hi)
    t60 = float(rng.uniform(*config.t60_range))
    snr = float(rng.uniform(*config.snr_range))
    margin = config.wall_margin
    arr_margin = margin + config.array_radius
    center = np.array(
        [
            rng.uniform(arr_margin, dims[0] - arr_margin),
            rng.uniform(arr_margin, dims[1] - arr_margin),
            rng.uniform(*config.height_range),
        ]
    )
    sources = []
    for _ in range(config.num_sources):
        for _attempt in range(config.max_attempts):
            p = np.array(
                [
                    rng.uniform(margin, dims[0] - margin),
                    rng.uniform(margin, dims[1] - margin),
                    rng.uniform(*config.height_range),
                ]
            )
            if (
                np.linalg.norm(p - center) >= config.min_source_distance
                and np.hypot(*(p - center)[:2]) > 1e-3
            ):
                sources.append(tuple(p))
                break
        else:
            raise ConfigurationError("could not place a source satisfying the distance constraints")
    refs = ()
    pool = list(source_pool)
    if pool:
        if len(pool) < config.num_sources:
            raise ConfigurationError("source pool smaller than the number of sources per scene")
        picks = rng.choice(len(pool), size=config.num_sources, replace=False)
        refs = tuple(pool[i] for i in picks)
    room = RoomSpec(
        tuple(dims), t60, tuple(center), tuple(sources), config.speed_of_sound, config.wall_margin
    )
    geometry = circular_array(config.num_mics, config.array_radius)
    return SceneSpec(
        room, geometry, snr, int(rng_seed), refs, config.sample_rate, config.absorption_model, config.max_order
    )


def scene_rirs(scene: SceneSpec) -> list[ImpulseResponse]:
    """Multi-mic RIR for every source of ``scene``."""
    return [
        image_source_rirs(
            scene.room,
            src,
            scene.mic_positions,
            scene.sample_rate,
            max_order=scene.max_order,
            absorption_model=scene.absorption_model,
        )
        for src in scene.room.source_positions
    ]


def _as_mono(src, sample_rate):
    if isinstance(src, MultichannelAudio):
        if src.sample_rate != sample_rate:
            raise FormatError(f"source at {src.sample_rate} Hz, scene at {sample_rate} Hz")
        if src.num_channels != 1:
            raise FormatError("sources must be mono")
        return src.samples[0]
    x = np.asarray(src, dtype=np.float64)
    if x.ndim != 1:
        raise FormatError("sources must be mono")
    return x


def spatialize_mix(scene: SceneSpec, sources, rirs=None):
    """Reverberant mixture and per-source reverberant images (the separation targets).

    Sources after the first are rescaled so that the energy ratio of the
    first image to each other image at mic 1 equals ``scene.mixing_snr_db``.
    Returns ``(mixture, references)`` with ``mixture == sum(references)``.
    """
    sources = [_as_mono(s, scene.sample_rate) for s in sources]
    if len(sources) != len(scene.room.source_positions):
        raise ConfigurationError(
            f"scene has {len(scene.room.source_positions)} sources, got {len(sources)} signals"
        )
    length = min(s.size for s in sources)
    if rirs is None:
        rirs = scene_rirs(scene)
    images = []
    for s, rir in zip(sources, rirs):
        img = fftconvolve(s[None, :length], rir.taps, axes=1)[:, :length]
        images.append(img)
    energies = [float(np.dot(img[0], img[0])) for img in images]
    if any(e <= 0 or not np.isfinite(e) for e in energies):
        raise DegenerateInputError("a source has zero energy at the reference microphone")
    target_ratio = 10.0 ** (scene.mixing_snr_db / 10.0)
    scaled = [images[0]]
    for img, e in zip(images[1:], energies[1:]):
        scaled.append(img * math.sqrt(energies[0] / (e * target_ratio)))
    mixture = scaled[0].copy()
    for img in scaled[1:]:
        mixture = mixture + img
    refs = [MultichannelAudio(img, scene.sample_rate) for img in scaled]
    return MultichannelAudio(mixture, scene.sample_rate), refs


def source_azimuths(scene: SceneSpec) -> list[float]:
    """Azimuth (degrees, [0, 360)) of each source seen from the array centre."""
    center = np.array(scene.room.array_center)
    out = []
    for p in scene.room.source_positions:
        dx, dy = np.array(p)[:2] - center[:2]
        if math.hypot(dx, dy) < 1e-9:
            raise GeometryError("source directly above/below the array centre has no azimuth")
        out.append(math.degrees(math.atan2(dy, dx)) % 360.0)
    return out


def fold_angle(a: float, b: float) -> float:
    """Absolute azimuth difference folded into [0, 180]."""
    d = abs(a - b) % 360.0
    return 360.0 - d if d > 180.0 else d


def angle_difference(scene: SceneSpec) -> float:
    if len(scene.room.source_positions) != 2:
        raise ConfigurationError("angle difference is defined for exactly two sources")
    a, b = source_azimuths(scene)
    return fold_angle(a, b)


def angle_bin(degrees: float) -> str:
    """Bins [0,15), [15,45), [45,90], (90,180]."""
    if degrees < 15.0:
        return "<15"
    if degrees < 45.0:
        return "15-45"
    if degrees <= 90.0:
        return "45-90"
    return ">90"
