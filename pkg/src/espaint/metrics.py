"""PSNR, SSIM and Frechet-distance evaluation.

All three operate on numpy arrays in double precision. PSNR/SSIM assume
[0, 1] images shaped (3, H, W); the Frechet distance takes two sets of
feature vectors shaped (N, D).
"""

import numpy as np

from .errors import DimensionError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FRECHET_EPS = 1e-6


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target):
    """10 * log10(1 / MSE) in decibels, capped at 100 dB (MAX = 1)."""
    pred, target = _check_pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def masked_psnr(pred, target, mask):
    """PSNR restricted to the damaged region (mask = 1)."""
    pred, target = _check_pair(pred, target)
    sel = np.asarray(mask, dtype=np.float64)[0] > 0.5
    if not sel.any():
        raise DimensionError("mask selects no pixels")
    diff = (pred - target)[:, sel]
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _filter_valid(plane, kernel):
    """Gaussian-weighted local means over all fully interior windows."""
    k = kernel.shape[0]
    h, w = plane.shape
    windows = np.lib.stride_tricks.sliding_window_view(plane, (k, k))
    out = np.empty((h - k + 1, w - k + 1), dtype=np.float64)
    # row-chunked tensordot keeps peak memory flat for large images
    for i in range(out.shape[0]):
        out[i] = np.tensordot(windows[i], kernel, axes=([1, 2], [0, 1]))
    return out


def ssim(pred, target):
    """Mean structural similarity over 11x11 Gaussian windows, averaged over channels.

    Standard constants: sigma = 1.5, k1 = 0.01, k2 = 0.03, dynamic range 1.
    """
    pred, target = _check_pair(pred, target)
    if pred.ndim != 3:
        raise DimensionError(f"expected (C, H, W) images, got {pred.shape}")
    if min(pred.shape[1:]) < SSIM_WINDOW:
        raise DimensionError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    scores = []
    for ch in range(pred.shape[0]):
        x, y = pred[ch], target[ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def frechet_distance(feats_a, feats_b):
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions and tiny negative
    eigenvalues clamped to zero. Covariances are regularized by eps * I.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"expected (N, D) feature sets of equal D, got {a.shape}, {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DimensionError("need at least 2 feature vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + FRECHET_EPS * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + FRECHET_EPS * np.eye(d)

    # tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}) with symmetric inner matrix
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    eig = np.linalg.eigvalsh(inner)
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())

    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def _sym_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T
