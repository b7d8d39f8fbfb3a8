"""Windowed SSIM and multi-scale SSIM with analytic image-space gradients.

Conventions (shared by the training loss and the evaluation metrics):

- 11x11 Gaussian window, sigma 1.5, applied to valid positions only (no
  padding), stabilizers K1 = 0.01, K2 = 0.03 on a dynamic range of 1.0,
- multi-channel images average the per-channel statistics maps,
- the multi-scale variant downsamples by 2x2 average pooling and combines
  per-scale contrast-structure means (luminance at the coarsest scale) as a
  weighted product per the Wang et al. convention, with negative terms
  clamped to zero,
- everything is computed in float64 with fixed-order einsum contractions, so
  results do not depend on BLAS threading.
"""

import numpy as np

WINDOW_SIZE = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


_WINDOW = gaussian_window()


def corr_valid(img: np.ndarray, window: np.ndarray = _WINDOW) -> np.ndarray:
    """Separable valid cross-correlation of a 2D image with a 1D window."""
    rows = np.lib.stride_tricks.sliding_window_view(img, window.size, axis=0)
    tmp = np.einsum("ijk,k->ij", rows, window)
    cols = np.lib.stride_tricks.sliding_window_view(tmp, window.size, axis=1)
    return np.einsum("ijk,k->ij", cols, window)


def corr_adjoint(grad: np.ndarray, shape, window: np.ndarray = _WINDOW) -> np.ndarray:
    """Adjoint of :func:`corr_valid`: scatter window-space gradients back.

    Equals a full correlation of the zero-padded gradient with the (symmetric)
    window, restoring ``shape``.
    """
    pad = window.size - 1
    padded = np.zeros((grad.shape[0] + 2 * pad, grad.shape[1] + 2 * pad))
    padded[pad:pad + grad.shape[0], pad:pad + grad.shape[1]] = grad
    out = corr_valid(padded, window)
    assert out.shape == tuple(shape)
    return out


def avg_pool2(img: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2; trailing odd rows/columns dropped."""
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    v = img[:2 * h2, :2 * w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def avg_pool2_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    g = 0.25 * grad
    h2, w2 = grad.shape
    out[0:2 * h2:2, 0:2 * w2:2] = g
    out[1:2 * h2:2, 0:2 * w2:2] = g
    out[0:2 * h2:2, 1:2 * w2:2] = g
    out[1:2 * h2:2, 1:2 * w2:2] = g
    return out


class SsimParts:
    """Window statistics of one channel pair, kept for the backward pass."""

    __slots__ = ("x", "y", "ux", "uy", "b1", "b2", "l", "cs")

    def __init__(self, x, y):
        self.x = x
        self.y = y
        self.ux = corr_valid(x)
        self.uy = corr_valid(y)
        exx = corr_valid(x * x)
        eyy = corr_valid(y * y)
        exy = corr_valid(x * y)
        sxx = exx - self.ux * self.ux
        syy = eyy - self.uy * self.uy
        sxy = exy - self.ux * self.uy
        self.b1 = self.ux * self.ux + self.uy * self.uy + C1
        self.b2 = sxx + syy + C2
        self.l = (2.0 * self.ux * self.uy + C1) / self.b1
        self.cs = (2.0 * sxy + C2) / self.b2

    def backward(self, g_lcs, g_cs):
        """dL/dx from per-window grads of the l*cs map and the cs map."""
        g_l = g_lcs * self.cs
        g_cs_total = g_lcs * self.l + g_cs
        g_ux = (g_l * 2.0 * (self.uy - self.l * self.ux) / self.b1
                + g_cs_total * 2.0 * (self.cs * self.ux - self.uy) / self.b2)
        g_exy = g_cs_total * 2.0 / self.b2
        g_exx = -g_cs_total * self.cs / self.b2
        shape = self.x.shape
        return (corr_adjoint(g_ux, shape)
                + 2.0 * self.x * corr_adjoint(g_exx, shape)
                + self.y * corr_adjoint(g_exy, shape))


def _channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    return img


def ssim(a, b) -> float:
    """Mean single-scale SSIM over valid windows, averaged across channels."""
    a = _channels(a)
    b = _channels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < WINDOW_SIZE:
        raise ValueError(
            f"images must be at least {WINDOW_SIZE} px per side, got {a.shape}")
    vals = []
    for c in range(a.shape[2]):
        parts = SsimParts(a[:, :, c], b[:, :, c])
        vals.append(float(np.mean(parts.l * parts.cs)))
    return float(np.mean(vals))


DEFAULT_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def effective_scales(shape, scales: int) -> int:
    """Requested scale count, or 1 when the image is too small for it."""
    if min(shape[0], shape[1]) < (2 ** (scales - 1)) * WINDOW_SIZE:
        return 1
    return scales


def ms_ssim_with_grad(a, b, scales: int, weights) -> tuple[float, np.ndarray]:
    """Multi-scale SSIM of ``a`` vs ``b`` and its gradient with respect to ``a``.

    Per channel and scale the 2x2-average-pooled pair contributes the mean of
    its contrast-structure map (the full l*cs product at the coarsest scale);
    the result is the product of those means (clamped at zero) raised to the
    normalized weights, averaged over channels. Falls back to single-scale
    SSIM when the image is too small for the pyramid.
    """
    a = _channels(a)
    b = _channels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < WINDOW_SIZE:
        raise ValueError(
            f"images must be at least {WINDOW_SIZE} px per side, got {a.shape}")
    n_scales = effective_scales(a.shape, scales)
    weights = np.asarray(weights[:n_scales], dtype=np.float64)
    weights = weights / weights.sum()

    total = 0.0
    grad = np.zeros(a.shape)
    n_ch = a.shape[2]
    for ch in range(n_ch):
        levels = []  # (parts, shape) per scale, finest first
        x, y = a[:, :, ch], b[:, :, ch]
        for j in range(n_scales):
            parts = SsimParts(x, y)
            levels.append(parts)
            if j + 1 < n_scales:
                x, y = avg_pool2(x), avg_pool2(y)

        if n_scales == 1:
            value = float(np.mean(levels[0].l * levels[0].cs))
            count = levels[0].cs.size
            g = levels[0].backward(np.full(levels[0].cs.shape, 1.0 / count), 0.0)
        else:
            terms = []
            for j, parts in enumerate(levels):
                mean_j = (float(np.mean(parts.l * parts.cs))
                          if j == n_scales - 1 else float(np.mean(parts.cs)))
                terms.append(max(mean_j, 0.0))
            value = float(np.prod(np.power(terms, weights)))
            g = np.zeros(levels[-1].x.shape)
            for j in range(n_scales - 1, -1, -1):
                parts = levels[j]
                if j < n_scales - 1:
                    g = avg_pool2_adjoint(g, parts.x.shape)
                if value > 0.0 and terms[j] > 0.0:
                    g_mean = value * weights[j] / terms[j]
                    per_win = np.full(parts.cs.shape,
                                      g_mean / parts.cs.size)
                    if j == n_scales - 1:
                        g += parts.backward(per_win, 0.0)
                    else:
                        g += parts.backward(np.zeros(parts.cs.shape), per_win)
        total += value
        grad[:, :, ch] = g
    # Averaging over channels; the gradient scales accordingly.
    return total / n_ch, grad / n_ch


def ms_ssim(a, b, scales: int = 5, weights=DEFAULT_WEIGHTS) -> float:
    value, _ = ms_ssim_with_grad(a, b, scales, weights)
    return value
