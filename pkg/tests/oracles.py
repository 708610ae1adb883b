"""Slow, direct reference implementations used as test oracles.

Each one evaluates the defining sum or product literally, with loops or
explicit matrices, so it shares no code path with the package.
"""

import numpy as np


def hann(win_length, n_fft):
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / win_length)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left:left + win_length] = w
    return out


def naive_stft(a, n_fft, hop, w):
    """X[k, m] = sum_n a[m hop + n] w[n] exp(-2j pi k n / n_fft), one-sided."""
    a = np.asarray(a, dtype=float)
    if a.size < n_fft:
        a = np.concatenate([a, np.zeros(n_fft - a.size)])
    n_frames = (a.size - n_fft) // hop + 1
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    out = np.empty((n_fft // 2 + 1, n_frames), dtype=complex)
    for m in range(n_frames):
        seg = a[m * hop:m * hop + n_fft] * w
        out[:, m] = basis @ seg
    return out


def mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def inv_mel(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_bank(n_mels, n_fft, sr):
    top = mel(sr / 2.0)
    edges = [inv_mel(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for r in range(n_mels):
        lo, c, hi = edges[r], edges[r + 1], edges[r + 2]
        for b in range(n_fft // 2 + 1):
            f = b * sr / n_fft
            if lo < f <= c:
                fb[r, b] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[r, b] = (hi - f) / (hi - c)
        fb[r] *= 2.0 / (hi - lo)
    return fb


def dct2(n, ortho=True):
    d = np.zeros((n, n))
    for k in range(n):
        for i in range(n):
            d[k, i] = 2.0 * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
        if ortho:
            d[k] *= np.sqrt(1.0 / (4 * n)) if k == 0 else np.sqrt(1.0 / (2 * n))
    return d


def straight_mfcc(a, sr, n_fft, hop, n_mels, n_mfcc, cf=0.0):
    power = np.abs(naive_stft(a, n_fft, hop, hann(n_fft, n_fft))) ** 2
    logmel = np.log(mel_bank(n_mels, n_fft, sr) @ power + 1e-10)
    ceps = dct2(n_mels)[:n_mfcc] @ logmel
    if cf > 0:
        for r in range(ceps.shape[0]):
            ceps[r] *= (1 + np.sin(np.pi * (r + 1) / cf)) * cf / 2
    return ceps


def morlet(t):
    return np.exp(-6j * t) * np.exp(-t * t / 2) / np.sqrt(2 * np.pi)


def mexican_hat(t):
    return 2 / (np.sqrt(3) * np.pi ** 0.25) * (1 - t * t) * np.exp(-t * t / 2)


def direct_cwt(a, sr, scales, centers, psi):
    """|sum_n a[n] psi((n - c) / (s sr)) / sqrt(s)| over the whole clip."""
    a = np.asarray(a, dtype=float)
    n = np.arange(a.size)
    out = np.empty((len(scales), len(centers)))
    for r, s in enumerate(scales):
        for j, c in enumerate(centers):
            out[r, j] = abs(np.sum(a * psi((n - c) / (s * sr))) / np.sqrt(s))
    return out


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(np.asarray(b)), 1e-300)


def small_resnet(seed, classes=3, shape=(8, 8), randomize_bn=True):
    """A tiny ResNetMini with non-trivial batch-norm statistics."""
    from specattack.nn import ResNetMini, ResNetMiniConfig

    cfg = ResNetMiniConfig(classes=classes, input_shape=shape, stem_channels=4, stages=((1, 4, 1), (1, 6, 2)), seed=seed)
    model = ResNetMini(cfg)
    if randomize_bn:
        rng = np.random.default_rng(seed + 1000)
        for bn in model.batch_norms():
            bn.gamma.data[...] = rng.uniform(0.5, 1.5, bn.gamma.data.shape)
            bn.beta.data[...] = rng.uniform(-0.2, 0.2, bn.beta.data.shape)
            bn.running_mean[...] = rng.uniform(-0.1, 0.1, bn.running_mean.shape)
            bn.running_var[...] = rng.uniform(0.5, 2.0, bn.running_var.shape)
    return model


def fd_gradient_check(model, x, scalar_fn, grad_pixels, n_coords, rng, h=1e-3):
    """Max relative error between autodiff and central differences.

    ``scalar_fn(logits)`` reduces a logits array to a float; ``grad_pixels``
    is the autodiff gradient in the pixel domain.  Steps are taken on the
    [0, 1]-normalized input.  Coordinates whose stencil flips any ReLU
    are skipped; returns (max error, number of coordinates checked).
    """
    from specattack.nn.autodiff import trace_relu_masks

    def run(xx):
        with trace_relu_masks() as masks:
            z = model.forward(xx)
        return scalar_fn(z), masks

    _, base = run(x)
    worst, used = 0.0, 0
    flat = x.reshape(-1)
    for idx in rng.choice(flat.size, size=min(n_coords * 3, flat.size), replace=False):
        if used == n_coords:
            break
        xp, xm = flat.copy(), flat.copy()
        xp[idx] += h * 255.0
        xm[idx] -= h * 255.0
        fp, mp = run(xp.reshape(x.shape))
        fm, mm = run(xm.reshape(x.shape))
        if any(not np.array_equal(a, b) for a, b in zip(base + base, mp + mm)):
            continue
        fd = (fp - fm) / (2 * h)
        ad = grad_pixels.reshape(-1)[idx] * 255.0
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-7))
        used += 1
    return worst, used


def binary_linear(rng, shape, distance):
    """Two-class linear model with f(x) = z1 - z0 = w . x + b in pixel units.

    Returns (model, x, w, f(x)) where x sits ``distance`` (l2, pixels) on the
    class-0 side of the hyperplane.
    """
    from specattack.nn import LinearClassifier

    n = int(np.prod(shape))
    w = rng.standard_normal(n)
    x = 128.0 + rng.uniform(-20, 20, n)
    b = -(w @ x) - distance * np.linalg.norm(w)
    W = np.stack([np.zeros(n), 255.0 * w], axis=1)
    model = LinearClassifier(W, np.array([0.0, b]), input_shape=shape)
    return model, x.reshape(shape), w.reshape(shape), float(w @ x + b)


def brute_saliency(jac, target):
    """Single-pixel saliency with the zeroing rule, evaluated pixel by pixel."""
    C = jac.shape[0]
    flat = jac.reshape(C, -1)
    out = np.zeros(flat.shape[1])
    for i in range(flat.shape[1]):
        a = flat[target, i]
        b = sum(flat[j, i] for j in range(C) if j != target)
        out[i] = 0.0 if (a < 0 or b > 0) else a * abs(b)
    return out


def softmax_jacobian_linear(W, b, x):
    """Analytic d softmax_k / d pixel_i for logits z = W^T x / 255 + b."""
    z = W.T @ x.ravel() / 255.0 + b
    p = np.exp(z - z.max())
    p /= p.sum()
    mean_w = W @ p
    return np.stack([p[k] * (W[:, k] - mean_w) / 255.0 for k in range(W.shape[1])])
