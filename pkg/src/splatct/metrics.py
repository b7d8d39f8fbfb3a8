"""Image-quality metrics: PSNR and single-scale SSIM with per-view reports.

Both metrics compare RGB channels. Rendered frames carry premultiplied alpha
over a transparent background, so :func:`evaluate` first composites them over
an opaque background color, matching how ground-truth images would be stored.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _ssim
from .core import InvalidParameterError
from .raster import DEFAULT_CONFIG, RenderConfig, render

REPORT_FIELDS = ("view", "psnr", "ssim")


def composite_over(image, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Premultiplied (H, W, 4) RGBA over an opaque background; returns RGB."""
    image = np.asarray(image, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    return image[:, :, :3] + bg * (1.0 - image[:, :, 3:4])


def _rgb(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 4:
        return img[:, :, :3]
    return img


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio 10 log10(peak^2 / MSE) in dB over RGB.

    Identical images have zero MSE and return ``math.inf``.
    """
    a = _rgb(a)
    b = _rgb(b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b) -> float:
    """Mean single-scale SSIM over valid 11x11 Gaussian windows (sigma 1.5)."""
    a = _rgb(a)
    b = _rgb(b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    try:
        return _ssim.ssim(a, b)
    except ValueError as exc:
        raise InvalidParameterError(str(exc)) from exc


@dataclass
class MetricReport:
    """Per-view PSNR/SSIM values and their means."""

    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))

    def rows(self):
        """Per-view dict rows plus a final mean row."""
        out = [{"view": i, "psnr": p, "ssim": s}
               for i, (p, s) in enumerate(zip(self.psnr_values, self.ssim_values))]
        out.append({"view": "mean", "psnr": self.psnr_mean, "ssim": self.ssim_mean})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())

    def table(self) -> str:
        """Fixed-width table, one line per view plus the mean."""
        lines = [f"{'view':>6s}  {'psnr_db':>10s}  {'ssim':>8s}"]
        for row in self.rows():
            p = f"{row['psnr']:10.4f}" if math.isfinite(row["psnr"]) else f"{'inf':>10s}"
            lines.append(f"{str(row['view']):>6s}  {p}  {row['ssim']:8.5f}")
        return "\n".join(lines)


def evaluate(scene, views, config: RenderConfig = DEFAULT_CONFIG,
             background=(0.0, 0.0, 0.0), quantize=False) -> MetricReport:
    """Render every (camera, ground truth) view and aggregate both metrics.

    Ground-truth images may be RGB or RGBA; RGBA targets are composited over
    the same background as the rendered frames. ``quantize`` rounds rendered
    frames to the 8-bit grid before scoring, putting them on equal footing
    with ground truth loaded from 8-bit image files.
    """
    if len(views) == 0:
        raise InvalidParameterError("evaluate needs at least one view")
    report = MetricReport()
    for cam, gt in views:
        pred = composite_over(render(scene, cam, None, config), background)
        if quantize:
            pred = np.round(np.clip(pred, 0.0, 1.0) * 255.0) / 255.0
        gt = np.asarray(gt, dtype=np.float64)
        if gt.ndim == 3 and gt.shape[2] == 4:
            gt = composite_over(gt, background)
        report.psnr_values.append(psnr(pred, gt))
        report.ssim_values.append(ssim(pred, gt))
    return report
