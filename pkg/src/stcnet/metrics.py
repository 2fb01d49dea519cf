"""Training objective and evaluation metric suite (MSE, MAE, SSIM, PSNR).

Two reduction conventions coexist deliberately:

* the training objective is the plain element mean of squared error;
* the *reported* MSE/MAE average the per-frame pixel **sum** over samples and
  frames, which is the convention that makes scores on 64x64 [0,1] frames land
  in the tens-to-hundreds range rather than ~1e-2.

The two differ by exactly the factor C*H*W.

Evaluation metrics clamp both operands to [0, 1] first. SSIM uses the
standard 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1,
evaluated on valid window positions and averaged over samples, frames, and
channels. PSNR is 10*log10(1/pixel-mean MSE), capped at 100 dB.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "mse_objective",
    "reported_mse",
    "reported_mae",
    "ssim",
    "psnr",
    "frame_metrics",
    "per_frame_metrics",
    "PSNR_CAP",
]

PSNR_CAP = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")


def mse_objective(pred: np.ndarray, target: np.ndarray) -> float:
    """Training loss: mean over all elements of squared error."""
    _check_shapes(pred, target)
    return float(np.mean(np.square(pred - target)))


def reported_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Reported MSE: per-frame pixel sum of squared error, averaged over (N, T)."""
    _check_shapes(pred, target)
    n, t = pred.shape[:2]
    return float(np.square(pred - target).sum() / (n * t))


def reported_mae(pred: np.ndarray, target: np.ndarray) -> float:
    """Reported MAE: per-frame pixel sum of |error|, averaged over (N, T)."""
    _check_shapes(pred, target)
    n, t = pred.shape[:2]
    return float(np.abs(pred - target).sum() / (n * t))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over clamped [0, 1] images."""
    _check_shapes(pred, target)
    p = np.clip(pred, 0.0, 1.0)
    t = np.clip(target, 0.0, 1.0)
    mse = float(np.mean(np.square(p - t)))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * np.square(x / sigma))
    return k / k.sum()


def _sep_filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of (..., H, W) with a 1-D window."""
    win = np.lib.stride_tricks.sliding_window_view(x, len(k), axis=-2)
    x = np.einsum("...hwk,k->...hw", win, k)
    win = np.lib.stride_tricks.sliding_window_view(x, len(k), axis=-1)
    return np.einsum("...hwk,k->...hw", win, k)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean structural similarity over all (..., H, W) image planes."""
    _check_shapes(pred, target)
    h, w = pred.shape[-2], pred.shape[-1]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW} for SSIM")
    x = np.clip(pred, 0.0, 1.0).astype(np.float64)
    y = np.clip(target, 0.0, 1.0).astype(np.float64)
    k = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2

    mu_x = _sep_filter_valid(x, k)
    mu_y = _sep_filter_valid(y, k)
    sxx = _sep_filter_valid(x * x, k) - mu_x * mu_x
    syy = _sep_filter_valid(y * y, k) - mu_y * mu_y
    sxy = _sep_filter_valid(x * y, k) - mu_x * mu_y
    ssim_map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2))
    return float(ssim_map.mean())


def frame_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """All four metrics over (N, T, C, H, W) prediction/target stacks."""
    _check_shapes(pred, target)
    p = np.clip(pred, 0.0, 1.0)
    t = np.clip(target, 0.0, 1.0)
    return {
        "mse": reported_mse(p, t),
        "mae": reported_mae(p, t),
        "ssim": ssim(p, t),
        "psnr": psnr(p, t),
    }


def per_frame_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, np.ndarray]:
    """Each metric evaluated separately for every predicted frame index."""
    _check_shapes(pred, target)
    t_out = pred.shape[1]
    out = {m: np.empty(t_out) for m in ("mse", "mae", "ssim", "psnr")}
    for t in range(t_out):
        vals = frame_metrics(pred[:, t: t + 1], target[:, t: t + 1])
        for m, v in vals.items():
            out[m][t] = v
    return out
