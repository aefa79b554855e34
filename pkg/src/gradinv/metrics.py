"""Reconstruction quality: MSE, PSNR and SSIM after optimal batch matching.

Inversion returns the batch in arbitrary order, so reconstructions are first
assigned to originals by minimising total MSE. Direction conventions for the
``best`` aggregate mirror "lower LPIPS means more leakage": best is the most
leaked image, i.e. lowest MSE, highest PSNR, highest SSIM.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment

SSIM_WINDOW = 8
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected (batch, channels, H, W), got {x.shape}")
    return x


def pairwise_mse(xhat, xstar) -> np.ndarray:
    a = _as_batch(xhat).reshape(len(xhat), -1)
    b = _as_batch(xstar).reshape(len(xstar), -1)
    return ((b[:, None, :] - a[None, :, :]) ** 2).mean(axis=2)


def match_batch(xhat, xstar) -> np.ndarray:
    """Permutation ``perm`` with ``xhat[perm[i]]`` matched to ``xstar[i]``, minimising total MSE."""
    if len(xhat) != len(xstar):
        raise ValueError(f"batch sizes differ: {len(xhat)} reconstructions vs {len(xstar)} originals")
    cost = pairwise_mse(xhat, xstar)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(xstar), dtype=int)
    perm[rows] = cols
    return perm


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    m = mse(a, b)
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val ** 2 / m))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window``x``window`` uniform windows, averaged over channels.

    Images are (channels, H, W) or (H, W) on a [0, 1] scale. The window
    shrinks to the image size for images smaller than ``window``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = (min(window, a.shape[1]), min(window, a.shape[2]))
    wa = sliding_window_view(a, win, axis=(1, 2))
    wb = sliding_window_view(b, win, axis=(1, 2))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    # same expression for variances and covariance so ssim(x, x) == 1 exactly
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    mse: list[float]
    psnr: list[float]
    ssim: list[float]
    permutation: list[int]
    mean: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)

    def rows(self):
        for i, (m, p, s) in enumerate(zip(self.mse, self.psnr, self.ssim)):
            yield {"image": i, "matched": self.permutation[i], "mse": m, "psnr": p, "ssim": s}

    def to_dict(self) -> dict:
        return {"mse": self.mse, "psnr": [_finite(p) for p in self.psnr], "ssim": self.ssim,
                "permutation": self.permutation,
                "mean": {k: _finite(v) for k, v in self.mean.items()},
                "best": {k: _finite(v) for k, v in self.best.items()}}


def _finite(v):
    # JSON has no infinity; keep the sentinel readable
    return "inf" if v == float("inf") else v


def score(xhat, xstar, permutation=None) -> MetricReport:
    """Per-image and aggregate metrics of ``xhat[permutation]`` against ``xstar``."""
    xhat, xstar = _as_batch(xhat), _as_batch(xstar)
    if permutation is None:
        permutation = np.arange(len(xstar))
    permutation = np.asarray(permutation, dtype=int)
    aligned = xhat[permutation]
    if aligned.shape != xstar.shape:
        raise ValueError(f"score: shapes {aligned.shape} and {xstar.shape} differ")
    m = [mse(a, b) for a, b in zip(aligned, xstar)]
    p = [psnr(a, b) for a, b in zip(aligned, xstar)]
    s = [ssim(a, b) for a, b in zip(aligned, xstar)]
    finite_p = [v for v in p if np.isfinite(v)]
    mean_psnr = float("inf") if len(finite_p) < len(p) else float(np.mean(p))
    return MetricReport(
        mse=m, psnr=p, ssim=s, permutation=permutation.tolist(),
        mean={"mse": float(np.mean(m)), "psnr": mean_psnr, "ssim": float(np.mean(s))},
        best={"mse": float(np.min(m)), "psnr": float(np.max(p)), "ssim": float(np.max(s))},
    )
