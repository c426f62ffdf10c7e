import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcsep.errors import ConfigurationError, LengthError, ShapeError
from mcsep.sigcore import (
    AnalysisSpec,
    ComplexSpectrogram,
    FeatureMap,
    MultichannelAudio,
    istft,
    istft_padded,
    lps,
    make_window,
    stft,
    stft_padded,
    upsample_frames,
)
from oracles import hann_periodic, naive_stft

# every (window, length, hop) configuration used elsewhere in the package
SPEC_MATRIX = [
    AnalysisSpec("hann", 512, 256, 512),
    AnalysisSpec("hann", 256, 128, 256),
    AnalysisSpec("hann", 64, 20, 64),
    AnalysisSpec("hann", 64, 32, 64),
    AnalysisSpec("hann", 16, 8, 16),
    AnalysisSpec("rectangular", 64, 64, 64),
    AnalysisSpec("rectangular", 64, 20, 64),
    AnalysisSpec("hann", 400, 200, 512),
]
COLA_MATRIX = [s for s in SPEC_MATRIX if s.is_cola()] + [
    AnalysisSpec("hann", 512, 128, 512),
    AnalysisSpec("rectangular", 64, 32, 64),
]


def test_window_is_periodic_hann():
    np.testing.assert_allclose(make_window("hann", 16), hann_periodic(16), atol=1e-15)


def test_zero_signal_gives_zero_spectrogram():
    Y = stft(np.zeros(16000), AnalysisSpec("hann", 512, 256))
    assert not Y.real.any() and not Y.imag.any()


def test_impulse_has_flat_spectrum():
    x = np.zeros(256)
    x[0] = 1.0
    Y = stft(x, AnalysisSpec("rectangular", 64, 32))
    np.testing.assert_allclose(Y.magnitude[0], 1.0, atol=1e-14)


@pytest.mark.parametrize("spec", SPEC_MATRIX, ids=lambda s: f"{s.window_type}-{s.window_length}-{s.hop}")
def test_stft_matches_naive_dft(spec, rng):
    n = 16000 if spec.window_length >= 256 else 2000
    x = rng.standard_normal(n)
    Y = stft(x, spec).complex
    ref = naive_stft(x, spec.window(), spec.hop, spec.fft_size)
    assert Y.shape == ref.shape
    assert np.max(np.abs(Y - ref)) / np.max(np.abs(ref)) < 1e-10


def test_frame_count_drops_overrun():
    spec = AnalysisSpec("hann", 512, 256)
    assert stft(np.zeros(16000), spec).num_frames == (16000 - 512) // 256 + 1
    assert stft(np.zeros(512), spec).num_frames == 1


def test_stft_rejects_short_and_multichannel():
    spec = AnalysisSpec("hann", 512, 256)
    with pytest.raises(LengthError):
        stft(np.zeros(100), spec)
    with pytest.raises(ShapeError):
        stft(MultichannelAudio(np.zeros((2, 1000)), 16000), spec)


def test_analysis_spec_validation():
    with pytest.raises(ConfigurationError):
        AnalysisSpec("hann", 256, 300)
    with pytest.raises(ConfigurationError):
        AnalysisSpec("hann", 512, 256, 256)
    with pytest.raises(ConfigurationError):
        AnalysisSpec("triangle", 64, 32)
    assert AnalysisSpec("hann", 512, 256).num_bins == 257


def test_linearity(rng):
    spec = AnalysisSpec("hann", 512, 256)
    x, y = rng.standard_normal((2, 8000))
    a, b = 0.7, -3.1
    lhs = stft(a * x + b * y, spec).complex
    rhs = a * stft(x, spec).complex + b * stft(y, spec).complex
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-10


def test_parseval_rectangular(rng):
    T = 64
    spec = AnalysisSpec("rectangular", T, T)
    x = rng.standard_normal(T * 20)
    P = stft(x, spec).magnitude ** 2
    weights = np.full(spec.num_bins, 2.0)
    weights[0] = weights[-1] = 1.0
    freq_energy = (P * weights).sum(axis=1) / T
    time_energy = (x.reshape(-1, T) ** 2).sum(axis=1)
    np.testing.assert_allclose(freq_energy, time_energy, rtol=1e-8)


def _interior(n, spec):
    return slice(spec.window_length // 2, n - spec.window_length)


@pytest.mark.parametrize("spec", COLA_MATRIX, ids=lambda s: f"{s.window_type}-{s.window_length}-{s.hop}")
def test_round_trip_white_noise(spec, rng):
    x = rng.standard_normal(16000)
    y = istft(stft(x, spec), length=x.size).samples[0]
    sl = _interior(x.size, spec)
    assert np.max(np.abs(y[sl] - x[sl])) < 1e-6


def test_round_trip_tone():
    spec = AnalysisSpec("hann", 512, 256)
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 1000 * t)
    y = istft(stft(x, spec), length=x.size).samples[0]
    sl = _interior(x.size, spec)
    assert np.max(np.abs(y[sl] - x[sl])) < 1e-6


def test_istft_of_zero_is_zero():
    spec = AnalysisSpec("hann", 512, 256)
    Y = ComplexSpectrogram(np.zeros((10, 257)), np.zeros((10, 257)), spec)
    assert not istft(Y).samples.any()


def test_istft_rejects_non_cola():
    spec = AnalysisSpec("hann", 64, 20)
    with pytest.raises(ConfigurationError):
        istft(stft(np.zeros(1000), spec))


def test_padded_round_trip_covers_whole_signal(rng):
    spec = AnalysisSpec("hann", 256, 128)
    x = rng.standard_normal(3001)
    y = istft_padded(stft_padded(x, spec), x.size).samples[0]
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) < 1e-10


def test_lps_floor_and_unity():
    spec = AnalysisSpec("hann", 8, 4)
    Y = ComplexSpectrogram(np.zeros((3, 5)), np.zeros((3, 5)), spec)
    assert np.all(lps(Y, -120.0).values == -120.0)
    re = np.zeros((1, 5))
    re[0, 2] = 1.0
    assert lps(ComplexSpectrogram(re, np.zeros((1, 5)), spec)).values[0, 2] == 0.0


def test_lps_direct_formula(rng):
    spec = AnalysisSpec("hann", 8, 4)
    re, im = rng.standard_normal((2, 7, 5))
    got = lps(ComplexSpectrogram(re, im, spec), -50.0).values
    expected = np.array(
        [[10 * np.log10(max(a * a + b * b, 1e-5)) for a, b in zip(ra, ia)] for ra, ia in zip(re, im)]
    )
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_upsample_identity_and_constant():
    fm = FeatureMap(np.arange(20.0).reshape(10, 2), 256)
    assert upsample_frames(fm, 10) is fm
    const = FeatureMap(np.full((4, 3), 2.5), 256)
    assert np.all(upsample_frames(const, 37).values == 2.5)


def test_upsample_linear_endpoints():
    fm = FeatureMap(np.array([[0.0], [1.0]]), 128)
    np.testing.assert_allclose(upsample_frames(fm, 5).values[:, 0], [0, 0.25, 0.5, 0.75, 1.0])


def test_upsample_rejects_downsampling():
    with pytest.raises(ShapeError):
        upsample_frames(FeatureMap(np.zeros((10, 2)), 1), 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_upsample_preserves_endpoints(src, extra, seed):
    v = np.random.default_rng(seed).standard_normal((src, 3))
    out = upsample_frames(FeatureMap(v, 1), src + extra).values
    assert np.array_equal(out[0], v[0]) and np.array_equal(out[-1], v[-1])
    assert out.min() >= v.min() - 1e-12 and out.max() <= v.max() + 1e-12


def test_audio_validation():
    with pytest.raises(ValueError):
        MultichannelAudio(np.array([0.0, np.nan]), 8000)
    a = MultichannelAudio(np.zeros(5), 8000)
    assert a.num_channels == 1 and a.num_samples == 5
