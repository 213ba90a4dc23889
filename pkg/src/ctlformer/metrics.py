"""Image-quality metrics on a [0, 255] display scale, plus report tables.

RMSE/PSNR/SSIM are computed on display-windowed images. The synthetic
pipeline generates data directly on the display scale, so the default
window (0, 255) is the identity map with clamping; CT-style inputs in
other units pass their window explicitly and the window used is recorded
in every report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

DISPLAY_PEAK = 255.0
DEFAULT_WINDOW = (0.0, 255.0)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _plane(x) -> np.ndarray:
    """Coerce a Tensor / array image to a 2-D float64 plane."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 2:
        raise ShapeError(f"expected a 2-D image or (1, H, W), got shape {data.shape}")
    return data.astype(np.float64)


def window_to_display(image, lo: float, hi: float) -> Tensor:
    """Linear display mapping with clamping: 255 * clip((x-lo)/(hi-lo), 0, 1)."""
    if not hi > lo:
        raise ContractError(f"display window needs hi > lo, got [{lo}, {hi}]")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    scaled = DISPLAY_PEAK * np.clip((data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return Tensor(scaled.astype(np.float32))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x, y = _plane(a), _plane(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def rmse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(a, b, peak: float = DISPLAY_PEAK) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_profile(size: int, sigma: float) -> np.ndarray:
    i = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return g / g.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, peak: float = DISPLAY_PEAK) -> float:
    """Mean structural similarity, 11x11 Gaussian window, sigma 1.5."""
    x, y = _pair(a, b)
    if min(x.shape) < SSIM_WINDOW:
        raise ContractError(
            f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    g = _gaussian_profile(SSIM_WINDOW, SSIM_SIGMA)
    kernel = g[:, None] * g[None, :]
    mu_x = _local_mean(x, kernel)
    mu_y = _local_mean(y, kernel)
    xx = _local_mean(x * x, kernel) - mu_x * mu_x
    yy = _local_mean(y * y, kernel) - mu_y * mu_y
    xy = _local_mean(x * y, kernel) - mu_x * mu_y
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricReport:
    rmse_per_image: tuple[float, ...]
    psnr_per_image: tuple[float, ...]
    ssim_per_image: tuple[float, ...]
    rmse: float
    psnr: float
    ssim: float
    window_lo: float
    window_hi: float
    images: int

    def __post_init__(self):
        counts = {len(self.rmse_per_image), len(self.psnr_per_image),
                  len(self.ssim_per_image), self.images}
        if counts != {self.images} or self.images < 1:
            raise ContractError("per-image metric lists must all match the image count")
        if self.rmse < 0.0 or any(v < 0.0 for v in self.rmse_per_image):
            raise ContractError("RMSE cannot be negative")
        if not -1.0 <= self.ssim <= 1.0:
            raise ContractError(f"aggregate SSIM {self.ssim} outside [-1, 1]")


def build_report(predictions: Sequence, references: Sequence,
                 window=DEFAULT_WINDOW) -> MetricReport:
    """Window both image lists to display scale and aggregate pair metrics."""
    if len(predictions) != len(references) or not predictions:
        raise ContractError(
            f"need equal non-empty image lists, got {len(predictions)} and {len(references)}"
        )
    lo, hi = float(window[0]), float(window[1])
    r, p, s = [], [], []
    for pred, ref in zip(predictions, references):
        dp = window_to_display(pred, lo, hi)
        dr = window_to_display(ref, lo, hi)
        r.append(rmse(dp, dr))
        p.append(psnr(dp, dr))
        s.append(ssim(dp, dr))
    return MetricReport(
        rmse_per_image=tuple(r), psnr_per_image=tuple(p), ssim_per_image=tuple(s),
        rmse=float(np.mean(r)), psnr=float(np.mean(p)), ssim=float(np.mean(s)),
        window_lo=lo, window_hi=hi, images=len(r),
    )


def _fmt4(value) -> str:
    """4-decimal fixed point, halves rounded away from zero."""
    if isinstance(value, str):
        return value
    return str(Decimal(repr(float(value))).quantize(Decimal("0.0001"),
                                                    rounding=ROUND_HALF_UP))


def report_table(rows: Sequence[tuple], csv: bool = False) -> str:
    """Method | SSIM | RMSE | params table over (name, ssim, rmse, params) rows."""
    header = ("Method", "SSIM", "RMSE", "params")
    rendered = [(str(name), _fmt4(s), _fmt4(r), str(params))
                for name, s, r, params in rows]
    if csv:
        lines = [",".join(header)] + [",".join(row) for row in rendered]
        return "\n".join(lines)
    widths = [max(len(col), *(len(row[i]) for row in rendered)) if rendered
              else len(col) for i, col in enumerate(header)]
    def line(cells):
        return " | ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(row) for row in rendered])
