"""Independent brute-force references used across the test-suite.

These deliberately avoid the package's own code paths (no rfft, no
sliding windows) so they can serve as oracles.
"""

import itertools
import math

import numpy as np


def naive_stft(x, window, hop, fft_size):
    """Direct per-frame, per-bin evaluation of the windowed DFT sum."""
    x = np.asarray(x, dtype=np.float64)
    T = len(window)
    num_frames = (len(x) - T) // hop + 1
    num_bins = fft_size // 2 + 1
    m = np.arange(T)
    out = np.zeros((num_frames, num_bins), dtype=np.complex128)
    for f in range(num_frames):
        seg = x[f * hop : f * hop + T] * window
        for k in range(num_bins):
            out[f, k] = np.dot(seg, np.exp(-2j * np.pi * m * k / fft_size))
    return out


def hann_periodic(T):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * n / T) for n in range(T)])


def central_difference(fn, x, eps):
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = fn(x)
        x[idx] = orig - eps
        fm = fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def plain_si_snr(est, ref):
    """SI-SNR written straight from its definition, without clamping."""
    est = np.asarray(est, float) - np.mean(est)
    ref = np.asarray(ref, float) - np.mean(ref)
    target = np.dot(est, ref) * ref / np.dot(ref, ref)
    noise = est - target
    return 10 * math.log10(np.dot(target, target) / np.dot(noise, noise))


def brute_force_pit(score, ests, refs):
    """Best mean score and permutation over all C! assignments (maximize)."""
    C = len(refs)
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(C)):
        val = np.mean([score(ests[perm[c]], refs[c]) for c in range(C)])
        if val > best:
            best, best_perm = val, perm
    return best, best_perm


def schroeder_t60(rir, fs, lo_db=-5.0, hi_db=-35.0):
    """T60 extrapolated from a least-squares fit of the backward-integrated decay."""
    e = np.asarray(rir, float) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    idx = np.where((edc_db <= lo_db) & (edc_db >= hi_db))[0]
    t = idx / fs
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    return -60.0 / slope


def naive_conv1d(x, w, bias=None, stride=1, dilation=1, padding=0, groups=1):
    """Direct loop evaluation of a grouped, dilated 1-D correlation; x [Cin, T], w [Cout, Cin/groups, K]."""
    x = np.pad(np.asarray(x, float), ((0, 0), (padding, padding)))
    c_out, c_in_g, K = w.shape
    T = (x.shape[1] - dilation * (K - 1) - 1) // stride + 1
    out = np.zeros((c_out, T))
    per_group = c_out // groups
    for o in range(c_out):
        g = o // per_group
        for t in range(T):
            acc = 0.0 if bias is None else bias[o]
            for i in range(c_in_g):
                for k in range(K):
                    acc += w[o, i, k] * x[g * c_in_g + i, t * stride + k * dilation]
            out[o, t] = acc
    return out


def naive_conv_transpose1d(x, w, stride):
    """Overlap-add of kernel w [Cin, Cout, K] weighted by x [Cin, T]."""
    c_in, c_out, K = w.shape
    T = x.shape[1]
    out = np.zeros((c_out, (T - 1) * stride + K))
    for t in range(T):
        for i in range(c_in):
            for o in range(c_out):
                for k in range(K):
                    out[o, t * stride + k] += x[i, t] * w[i, o, k]
    return out


def _prelu(x, a):
    return np.where(x >= 0, x, a * x)


def _bn_eval(x, sd, prefix, eps=1e-5):
    mean, var = sd[prefix + "running_mean"], sd[prefix + "running_var"]
    return (x - mean[:, None]) / np.sqrt(var[:, None] + eps) * sd[prefix + "weight"][:, None] + sd[
        prefix + "bias"
    ][:, None]


def naive_mask_estimator(sd, w, num_blocks, blocks_per_repeat, kernel, num_speakers):
    """Unfused TCN mask estimator with eval-mode batch norm, written with loops; w [N, T]."""
    x = naive_conv1d(_bn_eval(w, sd, "norm."), sd["bottleneck.weight"], sd["bottleneck.bias"])
    for i in range(num_blocks):
        p = f"blocks.{i}."
        d = 2 ** (i % blocks_per_repeat)
        y = naive_conv1d(x, sd[p + "inp.weight"], sd[p + "inp.bias"])
        y = _bn_eval(_prelu(y, sd[p + "act1.weight"][0]), sd, p + "norm1.")
        y = naive_conv1d(
            y, sd[p + "depthwise.weight"], sd[p + "depthwise.bias"], dilation=d, padding=d * (kernel - 1) // 2,
            groups=y.shape[0],
        )
        y = _bn_eval(_prelu(y, sd[p + "act2.weight"][0]), sd, p + "norm2.")
        x = x + naive_conv1d(y, sd[p + "out.weight"], sd[p + "out.bias"])
    logits = naive_conv1d(_prelu(x, sd["mask_act.weight"][0]), sd["mask.weight"], sd["mask.bias"])
    masks = 1.0 / (1.0 + np.exp(-logits))
    return masks.reshape(num_speakers, -1, masks.shape[-1])
