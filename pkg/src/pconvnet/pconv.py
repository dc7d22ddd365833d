"""Partial convolution: renormalized masked convolution with mask update.

A partial convolution only looks at valid pixels. For every output position
with at least one valid pixel in its window,

    out = W . (X * M) * (Kh * Kw) / sum(M) + b

and the updated mask is 1 there. Windows with no valid pixel output exactly 0
(the bias is not added) and get mask 0. The mask has a single channel shared
by all feature channels, and zero padding counts as invalid. The full window
size Kh * Kw is used as the numerator even at the image border.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, check_conv_args, conv_array, conv_array_grads, make_op

__all__ = [
    "MaskedFeature", "LayerSpec", "check_binary_mask", "mask_window_sum", "update_mask",
    "pconv_forward", "pconv_backward", "propagate_mask_chain",
]


def check_binary_mask(mask, name="mask"):
    mask = np.asarray(mask)
    if not np.isin(mask, (0.0, 1.0)).all():
        bad = mask[~np.isin(mask, (0.0, 1.0))].ravel()[:3]
        raise ContractError(f"{name} must contain only 0 and 1, found e.g. {bad.tolist()}")
    return mask


@dataclass
class MaskedFeature:
    """Features (N, C, H, W) with a one-channel validity mask (N, 1, H, W)."""

    features: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        check_binary_mask(self.mask)
        f, m = self.features.shape, self.mask.shape
        if len(f) != 4 or len(m) != 4:
            raise DimensionError(f"features and mask must be 4-D, got {f} and {m}")
        if m[1] != 1:
            raise DimensionError(f"channel axis (1): mask must have one channel, got {m[1]}")
        if f[0] != m[0] or f[2:] != m[2:]:
            raise DimensionError(f"mask extents {m} do not match features {f}")


class LayerSpec(NamedTuple):
    kernel: int = 3
    stride: int = 1
    pad: int = 1


def mask_window_sum(mask, kh, kw, stride, pad):
    """Count of valid pixels in every convolution window (padding counts as 0)."""
    ones = np.ones((1, 1, kh, kw))
    return conv_array(mask, ones, stride, pad)


def update_mask(mask, kernel=3, stride=1, pad=1):
    """One mask-update step: 1 wherever the window saw any valid pixel."""
    mask = check_binary_mask(mask)
    counts = mask_window_sum(mask, kernel, kernel, stride, pad)
    return (counts > 0).astype(np.float32)


def _pconv_parts(x, mask, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    keep = mask > 0
    xm = np.where(keep, x, 0.0)
    counts = mask_window_sum(mask, kh, kw, stride, pad)
    valid = counts > 0
    full = counts == kh * kw
    # (raw * K) / count is exact when features are integers; full windows skip scaling
    scale_num = float(kh * kw)
    safe = np.where(valid, counts, 1.0)
    return keep, xm, valid, full, scale_num, safe


def pconv_forward(inp, w, b=None, stride=1, pad=0):
    """Partial convolution of a :class:`MaskedFeature`; returns a new one."""
    x = inp.features
    check_conv_args(x, w, b, stride, pad)
    keep, xm, valid, full, k, safe = _pconv_parts(x.data, inp.mask, w.data, stride, pad)
    raw = conv_array(xm, w.data, stride, pad)
    out = np.where(full, raw, np.where(valid, raw * k / safe, 0.0))
    if b is not None:
        out = out + b.data.astype(np.float64)[None, :, None, None] * valid
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        return pconv_backward(g, x.data, inp.mask, w.data, stride, pad,
                              need_x=x.requires_grad, need_w=w.requires_grad,
                              with_bias=b is not None, parts=(keep, xm, valid, full, k, safe))

    features = make_op(out, inputs, vjp)
    return MaskedFeature(features, valid.astype(np.float32))


def pconv_backward(g, x, mask, w, stride=1, pad=0, *, need_x=True, need_w=True,
                   with_bias=True, parts=None):
    """Gradients of a partial convolution for upstream gradient ``g``.

    The mask is treated as a constant. Returns ``(dx, dw)`` or
    ``(dx, dw, db)``; ``dx`` is exactly zero at hole positions.
    """
    if parts is None:
        parts = _pconv_parts(np.asarray(x), np.asarray(mask), np.asarray(w), stride, pad)
    keep, xm, valid, full, k, safe = parts
    g = np.asarray(g, dtype=np.float64)
    graw = np.where(full, g, np.where(valid, g * k / safe, 0.0))
    dxm, dw = conv_array_grads(graw, xm, w, stride, pad, need_x=need_x, need_w=need_w)
    dx = None if dxm is None else np.where(keep, dxm, 0.0)
    if not with_bias:
        return dx, dw
    db = (g * valid).sum(axis=(0, 2, 3))
    return dx, dw, db


def propagate_mask_chain(mask, specs):
    """Masks after each layer of a stack of partial convolutions.

    ``specs`` is a sequence of :class:`LayerSpec` (or ``(kernel, stride, pad)``
    tuples). The returned list has one mask per layer, input mask excluded,
    with the same number of dimensions as ``mask``.
    """
    current = np.asarray(mask, dtype=np.float32)
    flat = current.ndim == 2
    if flat:
        current = current[None, None]
    check_binary_mask(current)
    masks = []
    for spec in specs:
        spec = LayerSpec(*spec)
        current = update_mask(current, spec.kernel, spec.stride, spec.pad)
        masks.append(current[0, 0] if flat else current)
    return masks
