"""Signal primitives shared by the controllers and the data pipeline.

Structural similarity between grayscale frames, the moving-average +
Butterworth smoothing chain applied to force readings, and the lagged
backward difference used as the shear-rate feedback signal.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, lfilter


@dataclass(frozen=True)
class GrayImage:
    """Grayscale frame with row-major luminance values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError("pixel array must be 2-D (height, width)")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("luminance values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SsimConfig:
    """Window size and regularizers for the structural-similarity measure.

    Defaults are the standard literature constants for a unit luminance
    range: c1 = (0.01)^2, c2 = (0.03)^2, 7x7 kernel.
    """

    kernel: int = 7
    c1: float = 1e-4
    c2: float = 9e-4

    def __post_init__(self):
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 3")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("regularizers must be positive")


def ssim(a: GrayImage, b: GrayImage, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean structural similarity between two frames, clamped to [0, 1].

    Per-window statistics are computed for every valid (fully interior)
    position of the sliding kernel with unit stride; the per-window
    similarity values are averaged and the result clamped to [0, 1].
    Identical frames score exactly 1.0 and the measure is symmetric.

    Raises:
        ValueError: if the frames differ in shape or are smaller than
            the kernel.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"frame dimensions differ: {a.pixels.shape} vs {b.pixels.shape}"
        )
    k = cfg.kernel
    if a.height < k or a.width < k:
        raise ValueError(f"frames smaller than the {k}x{k} kernel")

    x = a.pixels
    y = b.pixels
    mu_x = _box_mean(x, k)
    mu_y = _box_mean(y, k)
    var_x = _box_mean(x * x, k) - mu_x * mu_x
    var_y = _box_mean(y * y, k) - mu_y * mu_y
    cov = _box_mean(x * y, k) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
    return float(np.clip(np.mean(num / den), 0.0, 1.0))


def _box_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Exact k-by-k window means at every valid (fully interior) position.

    Integral-image formulation: one output row/column per valid kernel
    placement with unit stride.
    """
    c = x.cumsum(axis=0).cumsum(axis=1)
    win = c[k - 1 :, k - 1 :].copy()
    win[1:, :] -= c[: -k, k - 1 :]
    win[:, 1:] -= c[k - 1 :, : -k]
    win[1:, 1:] += c[: -k, : -k]
    return win / (k * k)


@dataclass(frozen=True)
class FilterConfig:
    """Hybrid-filter parameters: moving-average window, then a low-pass.

    The Butterworth stage defaults to a 2nd-order section with cutoff at
    0.1 of Nyquist; the moving average spans 50 samples.
    """

    ma_window: int = 50
    butter_order: int = 2
    butter_cutoff: float = 0.1

    def __post_init__(self):
        if self.ma_window < 1:
            raise ValueError("ma_window must be >= 1")
        if self.butter_order < 1:
            raise ValueError("butter_order must be >= 1")
        if not 0.0 < self.butter_cutoff < 1.0:
            raise ValueError("butter_cutoff must lie in (0, 1)")


def moving_average(x, window: int) -> np.ndarray:
    """Causal moving average; the warm-up uses the mean of the prefix.

    output[i] is the mean of the last min(i + 1, window) inputs, so the
    output has the same length as the input and starts at x[0] rather
    than ramping from zero.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D sample sequence")
    n = x.size
    if n == 0 or window == 1:
        return x.copy()
    c = np.cumsum(x)
    out = np.empty(n)
    head = min(window, n)
    out[:head] = c[:head] / np.arange(1, head + 1)
    if n > window:
        out[window:] = (c[window:] - c[:-window]) / window
    return out


def butterworth_lowpass(x, cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Causal Butterworth low-pass with zero initial conditions.

    Cutoff is a fraction of Nyquist. The filter has unit DC gain, so a
    constant input converges to the same constant once the startup
    transient (from the zero initial state) has decayed.
    """
    if not 0.0 < cfg.butter_cutoff < 1.0:
        raise ValueError("butter_cutoff must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    b, a = butter(cfg.butter_order, cfg.butter_cutoff, btype="low")
    return lfilter(b, a, x)


def hybrid_filter(x, cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Moving average first, Butterworth low-pass second."""
    return butterworth_lowpass(moving_average(x, cfg.ma_window), cfg)


class RateEstimator:
    """Lagged backward difference f[i] - f[i - delta] over a sample stream.

    Samples are pushed in time order; until delta + 1 samples have been
    seen the estimator is not ready and `update` returns None.
    """

    def __init__(self, delta: int = 50):
        if delta < 1:
            raise ValueError("delta must be >= 1")
        self.delta = int(delta)
        self._hist: deque[tuple[float, float]] = deque(maxlen=self.delta + 1)

    def update(self, t: float, value: float):
        """Push a sample; returns the lagged difference or None if not ready."""
        t = float(t)
        if self._hist and t <= self._hist[-1][0]:
            raise ValueError(
                f"timestamps must be strictly increasing ({t} after {self._hist[-1][0]})"
            )
        self._hist.append((t, float(value)))
        if len(self._hist) <= self.delta:
            return None
        return self._hist[-1][1] - self._hist[0][1]

    @property
    def ready(self) -> bool:
        return len(self._hist) > self.delta

    @property
    def span(self):
        """Time covered by the current lag window, or None if not ready."""
        if not self.ready:
            return None
        return self._hist[-1][0] - self._hist[0][0]

    def reset(self):
        self._hist.clear()
