"""Training objective: variance-scaled pixel loss plus windowed SSIM.

The pixel term is the sum of squared residuals over both stacked planes
normalized by the reference tensor's total squared deviation from its mean.
The SSIM term compares magnitudes over 3x3 uniform windows (valid centers
only, 1/9 normalization) and enters the total as 0.5 * (1 - mean SSIM) so
that minimizing the total rewards similarity. All gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConstantTarget, ShapeMismatch, TooSmall
from .stft import StackedSpectrogram

PIXEL_EPS = 1e-12
MAG_EPS = 1e-8
SSIM_WEIGHT = 0.5
WINDOW = 3


@dataclass
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.02
    # None: use 0.4 * (max - min) of the reference magnitudes at call time,
    # honoring "less than half the actual pixel range".
    dynamic_range: float | None = None

    def __post_init__(self):
        if not 0.005 <= self.k1 <= 0.01:
            raise ValueError(f"k1={self.k1} outside the stable range [0.005, 0.01]")
        if not 0.01 <= self.k2 <= 0.03:
            raise ValueError(f"k2={self.k2} outside the stable range [0.01, 0.03]")
        if self.dynamic_range is not None and self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray


class SsimResult(NamedTuple):
    ssim_mean: float
    loss: float
    grad: np.ndarray  # gradient of `loss` w.r.t. the estimate magnitudes


def pixel_loss(y_hat: np.ndarray, y: np.ndarray) -> LossResult:
    """loss = sum((y - y_hat)^2) / sum((y - mean(y))^2)."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {y_hat.shape} vs {y.shape}")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom <= PIXEL_EPS:
        raise ConstantTarget("reference tensor is constant; pixel loss undefined")
    resid = y - y_hat
    loss = float(np.sum(resid * resid)) / denom
    grad = -2.0 * resid / denom
    return LossResult(loss, grad)


def _box_mean(x: np.ndarray) -> np.ndarray:
    """Mean over all valid 3x3 windows: [H, W] -> [H-2, W-2]."""
    h, w = x.shape[0] - WINDOW + 1, x.shape[1] - WINDOW + 1
    acc = np.zeros((h, w), dtype=x.dtype)
    for i in range(WINDOW):
        for j in range(WINDOW):
            acc += x[i : i + h, j : j + w]
    return acc / (WINDOW * WINDOW)


def _box_scatter(c: np.ndarray) -> np.ndarray:
    """Adjoint of windowing: spread each window's value to its 9 pixels."""
    out = np.zeros((c.shape[0] + WINDOW - 1, c.shape[1] + WINDOW - 1), dtype=c.dtype)
    for i in range(WINDOW):
        for j in range(WINDOW):
            out[i : i + c.shape[0], j : j + c.shape[1]] += c
    return out


def _stability_constants(y_mag: np.ndarray, cfg: SsimConfig) -> tuple[float, float]:
    if cfg.dynamic_range is not None:
        dyn = cfg.dynamic_range
    else:
        dyn = 0.4 * float(y_mag.max() - y_mag.min())
        dyn = max(dyn, 1e-6)  # keep C1, C2 positive for degenerate references
    return (cfg.k1 * dyn) ** 2, (cfg.k2 * dyn) ** 2


def _ssim_terms(y_hat_mag: np.ndarray, y_mag: np.ndarray, cfg: SsimConfig):
    if y_hat_mag.shape != y_mag.shape:
        raise ShapeMismatch(f"shapes differ: {y_hat_mag.shape} vs {y_mag.shape}")
    if min(y_hat_mag.shape) < WINDOW:
        raise TooSmall(f"need at least {WINDOW}x{WINDOW}, got {y_hat_mag.shape}")
    c1, c2 = _stability_constants(y_mag, cfg)

    mu_x = _box_mean(y_hat_mag)
    mu_y = _box_mean(y_mag)
    var_x = _box_mean(y_hat_mag * y_hat_mag) - mu_x * mu_x
    var_y = _box_mean(y_mag * y_mag) - mu_y * mu_y
    cov = _box_mean(y_hat_mag * y_mag) - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(
    y_hat_mag: np.ndarray, y_mag: np.ndarray, cfg: SsimConfig | None = None
) -> np.ndarray:
    """Local SSIM over valid 3x3 windows; values lie in [-1, 1]."""
    _, _, a1, a2, b1, b2 = _ssim_terms(
        np.asarray(y_hat_mag, dtype=np.float64),
        np.asarray(y_mag, dtype=np.float64),
        cfg or SsimConfig(),
    )
    return (a1 * a2) / (b1 * b2)


def ssim_loss(
    y_hat_mag: np.ndarray, y_mag: np.ndarray, cfg: SsimConfig | None = None
) -> SsimResult:
    """Mean windowed SSIM, the loss 1 - mean, and the loss gradient."""
    cfg = cfg or SsimConfig()
    y_hat_mag = np.asarray(y_hat_mag, dtype=np.float64)
    y_mag = np.asarray(y_mag, dtype=np.float64)
    n_win = WINDOW * WINDOW

    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(y_hat_mag, y_mag, cfg)
    d = b1 * b2
    s = (a1 * a2) / d
    ssim_mean = float(s.mean())

    # d(ssim_p)/d(x_q) = c_0 + c_x * x_q + c_y * y_q for every pixel q in
    # window p; summing over the windows containing q is the box adjoint.
    n_centers = s.size
    c_x = -(2.0 / n_win) * s / b2
    c_y = (2.0 / n_win) * a1 / d
    c_0 = (2.0 / n_win) * (mu_y * a2 / d - a1 * mu_y / d - s * mu_x / b1 + s * mu_x / b2)

    grad_mean = (
        _box_scatter(c_0)
        + y_hat_mag * _box_scatter(c_x)
        + y_mag * _box_scatter(c_y)
    ) / n_centers
    return SsimResult(ssim_mean, 1.0 - ssim_mean, -grad_mean)


def total_loss(
    y_hat: StackedSpectrogram, y: StackedSpectrogram, cfg: SsimConfig | None = None
) -> LossResult:
    """Pixel loss on the stacked planes plus 0.5 x SSIM loss on magnitudes.

    The SSIM gradient is chained through magnitude = sqrt(re^2 + im^2) with
    the magnitude floored at 1e-8.
    """
    cfg = cfg or SsimConfig()
    a = np.asarray(y_hat.data, dtype=np.float64)
    b = np.asarray(y.data, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")

    pix = pixel_loss(a, b)

    re, im = a[0], a[1]
    mag_hat = np.sqrt(re * re + im * im)
    mag_ref = np.sqrt(b[0] * b[0] + b[1] * b[1])
    ss = ssim_loss(mag_hat, mag_ref, cfg)

    safe_mag = np.maximum(mag_hat, MAG_EPS)
    grad = pix.grad.copy()
    grad[0] += SSIM_WEIGHT * ss.grad * re / safe_mag
    grad[1] += SSIM_WEIGHT * ss.grad * im / safe_mag
    return LossResult(pix.loss + SSIM_WEIGHT * ss.loss, grad)
