"""Image-quality and overlap metrics: PSNR, SSIM and Dice."""
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .imageproc import GrayImage

__all__ = ["psnr", "ssim", "dice", "MetricReport", "format_value", "gaussian_window"]

log = logging.getLogger(__name__)


def _arr(x):
    if isinstance(x, GrayImage):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in extent: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0, region=None):
    """Peak signal-to-noise ratio in dB; ``inf`` when the images agree exactly.

    With ``region`` only pixels where it is nonzero contribute.
    """
    a, b = _pair(a, b)
    if peak <= 0:
        raise ContractError(f"peak must be positive, got {peak}")
    if region is not None:
        sel = np.asarray(region) > 0
        if sel.shape != a.shape:
            raise DimensionError(f"region {sel.shape} does not match images {a.shape}")
        a, b = a[sel], b[sel]
    if a.size == 0:
        raise ContractError("PSNR over an empty region")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(x, window):
    k = window.shape[0]
    return np.tensordot(sliding_window_view(x, (k, k)), window, axes=([2, 3], [0, 1]))


def ssim(a, b, peak=1.0, *, win_size=11, sigma=1.5, k1=0.01, k2=0.03, region=None,
         full=False):
    """Mean structural similarity over all Gaussian windows that fit the image.

    With ``region``, only windows lying entirely inside the region are averaged.
    ``full=True`` also returns the per-window SSIM map.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise DimensionError(f"SSIM works on 2-D images, got shape {a.shape}")
    if min(a.shape) < win_size:
        raise DimensionError(f"image {a.shape} is smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a, mu_b = _local_mean(a, w), _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a * mu_a
    var_b = _local_mean(b * b, w) - mu_b * mu_b
    cov = _local_mean(a * b, w) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
           ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    if region is None:
        value = float(smap.mean())
    else:
        reg = np.asarray(region) > 0
        if reg.shape != a.shape:
            raise DimensionError(f"region {reg.shape} does not match images {a.shape}")
        inside = sliding_window_view(reg, (win_size, win_size)).all(axis=(2, 3))
        if not inside.any():
            raise ContractError("no SSIM window fits entirely inside the region")
        value = float(smap[inside].mean())
    return (value, smap) if full else value


def dice(a, b, label=1, exclusion=None):
    """Dice overlap of ``label`` between two label maps.

    Pixels where ``exclusion`` is nonzero are ignored. When neither map holds
    the label the result is 1.0.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"label maps differ in extent: {a.shape} vs {b.shape}")
    ra, rb = a == label, b == label
    if exclusion is not None:
        keep = np.asarray(exclusion) == 0
        ra, rb = ra & keep, rb & keep
    total = int(ra.sum()) + int(rb.sum())
    if total == 0:
        log.info("dice: label %s absent from both maps; reporting 1.0", label)
        return 1.0
    return 2.0 * int((ra & rb).sum()) / total


def format_value(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6g}"


@dataclass
class MetricReport:
    sample: str
    metric: str
    region: str
    value: float

    def line(self):
        return f"{self.sample}\t{self.metric}\t{self.region}\t{format_value(self.value)}"

    @classmethod
    def parse(cls, line):
        sample, metric, region, value = line.rstrip("\n").split("\t")
        return cls(sample, metric, region, float(value))
