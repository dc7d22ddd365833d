"""Inpainting losses: hole/valid L1, perceptual, Gram style, TV, and BCE.

All losses take the network output as a :class:`~pconvnet.tensor.Tensor` so
they can be differentiated on a tape. Ground truth and masks are constants.
Masks follow the 1 = valid, 0 = hole convention and have one channel.

The perceptual and style terms need a feature network. A fixed three-level
convolution pyramid (8, 16, 32 channels, 3x3 kernels, stride 2, ReLU) is
shipped as ``data/extractor.pcfx``; it is never trained.
"""
import functools
from dataclasses import dataclass, fields
from importlib import resources

import numpy as np

from . import binio
from .errors import BadMagicError, ContractError, DimensionError, VersionMismatchError
from .imageproc import dilate_binary
from .pconv import check_binary_mask
from .tensor import Tensor, absolute, conv2d, make_op, relu, tsum, weighted_sum

__all__ = [
    "LossWeights", "FeaturePyramid", "FeatureExtractor", "default_extractor",
    "extract_features", "compose_comp", "l_masked", "l_valid", "gram", "l_perc",
    "l_style", "l_tv", "l_total", "combine_terms", "bce_loss", "TERM_NAMES",
]

PCFX_MAGIC = b"PCFX"
PCFX_VERSION = 1
EXTRACTOR_SEED = 20190101
EXTRACTOR_CHANNELS = (8, 16, 32)

TERM_NAMES = ("masked", "valid", "perc", "style_out", "style_comp", "tv")


@dataclass(frozen=True)
class LossWeights:
    masked: float = 6.0
    valid: float = 1.0
    perc: float = 0.05
    style: float = 120.0
    tv: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"loss weight {f.name} must be non-negative")

    def per_term(self):
        """Weights aligned with TERM_NAMES (the style weight covers both style terms)."""
        return (self.masked, self.valid, self.perc, self.style, self.style, self.tv)


def _as_mask(mask, like):
    mask = np.asarray(mask, dtype=np.float64)
    check_binary_mask(mask)
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise DimensionError(f"mask must be (N, 1, H, W), got {mask.shape}")
    if mask.shape[0] != like.shape[0] or mask.shape[2:] != like.shape[2:]:
        raise DimensionError(f"mask {mask.shape} does not match image {like.shape}")
    return mask


def _const(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def compose_comp(i_out, i_gt, mask):
    """Ground truth on valid pixels, network output inside the hole."""
    gt = _const(i_gt)
    if gt.shape != i_out.shape:
        raise DimensionError(f"output {i_out.shape} and ground truth {gt.shape} differ")
    m = _as_mask(mask, i_out) > 0
    return make_op(np.where(m, gt, i_out.data), (i_out,), lambda g: (np.where(m, 0.0, g),))


def _masked_l1(i_out, i_gt, weight):
    gt = _const(i_gt)
    if gt.shape != i_out.shape:
        raise DimensionError(f"output {i_out.shape} and ground truth {gt.shape} differ")
    return tsum(absolute(i_out - gt) * weight) / gt.size


def l_masked(i_out, i_gt, mask):
    """Mean over all elements of |out - gt| restricted to the hole."""
    return _masked_l1(i_out, i_gt, 1.0 - _as_mask(mask, i_out))


def l_valid(i_out, i_gt, mask):
    """Mean over all elements of |out - gt| restricted to valid pixels."""
    return _masked_l1(i_out, i_gt, _as_mask(mask, i_out))


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple

    def __post_init__(self):
        if not self.levels:
            raise ContractError("a feature pyramid needs at least one level")
        sizes = [lv.shape[2] * lv.shape[3] for lv in self.levels]
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ContractError("pyramid resolutions must be non-increasing")

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, p):
        return self.levels[p]


def generate_extractor_weights(seed=EXTRACTOR_SEED, in_channels=1, channels=EXTRACTOR_CHANNELS):
    """Fixed-seed filters with orthonormal rows; biases small and nonzero."""
    rng = np.random.default_rng(seed)
    arrays = []
    cin = in_channels
    for cout in channels:
        flat = rng.standard_normal((cin * 9, cout))
        q, r = np.linalg.qr(flat)
        q = q * np.sign(np.diag(r))
        w = (np.sqrt(2.0) * q.T).reshape(cout, cin, 3, 3)
        arrays.append(w.astype(np.float32))
        arrays.append((0.05 * rng.standard_normal(cout)).astype(np.float32))
        cin = cout
    return arrays


def encode_pcfx(arrays):
    body = b"".join(binio.pack_array(a) for a in arrays)
    return PCFX_MAGIC + binio.u32(PCFX_VERSION) + binio.u32(len(arrays)) + body


def decode_pcfx(buf):
    if buf[:4] != PCFX_MAGIC:
        raise BadMagicError(f"extractor weights: bad magic {bytes(buf[:4])!r}")
    rd = binio.Reader(buf, "extractor weights")
    rd.take(4)
    version = rd.u32()
    if version != PCFX_VERSION:
        raise VersionMismatchError(f"extractor weights version {version}, expected {PCFX_VERSION}")
    return [rd.array() for _ in range(rd.u32())]


class FeatureExtractor:
    """Frozen stride-2 convolution pyramid used by the perceptual and style losses."""

    def __init__(self, arrays):
        if len(arrays) % 2:
            raise ContractError("extractor weights come in (filter, bias) pairs")
        self.layers = []
        for w, b in zip(arrays[0::2], arrays[1::2]):
            w = np.array(w, dtype=np.float32)
            b = np.array(b, dtype=np.float32)
            w.flags.writeable = False
            b.flags.writeable = False
            self.layers.append((w, b))

    @classmethod
    def from_file(cls, path):
        with open(path, "rb") as fh:
            return cls(decode_pcfx(fh.read()))

    @property
    def depth(self):
        return len(self.layers)

    @property
    def in_channels(self):
        return self.layers[0][0].shape[1]

    def __call__(self, image):
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.ndim != 4 or image.shape[1] != self.in_channels:
            raise DimensionError(
                f"extractor expects (N, {self.in_channels}, H, W), got {image.shape}")
        step = 2 ** self.depth
        if image.shape[2] % step or image.shape[3] % step:
            raise DimensionError(
                f"height/width {image.shape[2:]} must be divisible by {step} for the extractor")
        levels = []
        x = image
        for w, b in self.layers:
            x = relu(conv2d(x, Tensor(w, dtype=image.dtype), Tensor(b, dtype=image.dtype),
                            stride=2, pad=1))
            levels.append(x)
        return FeaturePyramid(tuple(levels))


@functools.lru_cache(maxsize=1)
def default_extractor():
    ref = resources.files("pconvnet") / "data" / "extractor.pcfx"
    return FeatureExtractor(decode_pcfx(ref.read_bytes()))


def extract_features(image, extractor=None):
    return (extractor or default_extractor())(image)


# ---------------------------------------------------------------- perceptual / style

def gram(psi):
    """Per-item Gram matrix K * F F^T with F the (C, H*W) flattening and K = 1/(C H W)."""
    n, c, h, w = psi.shape
    feats = psi.data.reshape(n, c, h * w).astype(np.float64)
    k = 1.0 / (c * h * w)
    g = k * np.matmul(feats, feats.transpose(0, 2, 1))

    def vjp(up):
        up = up.astype(np.float64)
        return ((k * np.matmul(up + up.transpose(0, 2, 1), feats)).reshape(n, c, h, w),)

    return make_op(g, (psi,), vjp)


def _check_pyramids(*pyrs):
    depth = len(pyrs[0])
    for p in pyrs[1:]:
        if len(p) != depth:
            raise DimensionError(f"pyramid depths differ: {depth} vs {len(p)}")


def l_perc(pyr_out, pyr_comp, pyr_gt):
    _check_pyramids(pyr_out, pyr_comp, pyr_gt)
    terms = []
    for a, c, g in zip(pyr_out, pyr_comp, pyr_gt):
        gt = _const(g)
        terms.append(tsum(absolute(a - gt)) / gt.size)
        terms.append(tsum(absolute(c - gt)) / gt.size)
    return weighted_sum(terms, [1.0] * len(terms))


def l_style(pyr_a, pyr_gt):
    """Sum over levels of |G_a - G_gt|_1 / C^2, averaged over the batch."""
    _check_pyramids(pyr_a, pyr_gt)
    terms, weights = [], []
    for a, g in zip(pyr_a, pyr_gt):
        n, c = a.shape[0], a.shape[1]
        g_gt = gram(g if isinstance(g, Tensor) else Tensor(g, dtype=a.dtype)).data
        terms.append(tsum(absolute(gram(a) - g_gt)))
        weights.append(1.0 / (c * c * n))
    return weighted_sum(terms, weights)


def tv_pairs(mask):
    """Horizontal and vertical neighbour pairs with both pixels in the dilated hole."""
    region = dilate_binary(np.asarray(mask) == 0, 1)
    horiz = region[..., :, 1:] & region[..., :, :-1]
    vert = region[..., 1:, :] & region[..., :-1, :]
    return horiz.astype(np.float64), vert.astype(np.float64)


def l_tv(i_comp, mask):
    """Absolute neighbour differences over the 1-px dilation of the hole, per element."""
    mask = _as_mask(mask, i_comp)
    horiz, vert = tv_pairs(mask)
    dh = absolute(i_comp[..., :, 1:] - i_comp[..., :, :-1]) * horiz
    dv = absolute(i_comp[..., 1:, :] - i_comp[..., :-1, :]) * vert
    n = i_comp.size
    return weighted_sum([tsum(dh), tsum(dv)], [1.0 / n, 1.0 / n])


# ---------------------------------------------------------------- total

def combine_terms(terms, weights=LossWeights()):
    """Weighted total of a term dict keyed by TERM_NAMES, summed in float64."""
    return float(sum(w * float(terms[k]) for k, w in zip(TERM_NAMES, weights.per_term())))


def l_total(i_out, i_gt, mask, weights=LossWeights(), extractor=None):
    """Weighted inpainting loss. Returns ``(total, breakdown)``.

    ``breakdown`` maps each name in TERM_NAMES to its unweighted value.
    """
    extractor = extractor or default_extractor()
    gt = Tensor(_const(i_gt), dtype=i_out.dtype)
    comp = compose_comp(i_out, gt, mask)
    pyr_out = extractor(i_out)
    pyr_comp = extractor(comp)
    pyr_gt = extractor(gt)
    terms = (
        l_masked(i_out, gt, mask),
        l_valid(i_out, gt, mask),
        l_perc(pyr_out, pyr_comp, pyr_gt),
        l_style(pyr_out, pyr_gt),
        l_style(pyr_comp, pyr_gt),
        l_tv(comp, mask),
    )
    total = weighted_sum(terms, weights.per_term())
    return total, {k: float(t.data) for k, t in zip(TERM_NAMES, terms)}


# ---------------------------------------------------------------- segmentation

def bce_loss(pred, target, eps=1e-7):
    """Mean binary cross entropy with predictions clamped to [eps, 1 - eps]."""
    t = np.asarray(_const(target), dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {t.shape} differ")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ContractError("BCE targets must be exactly 0 or 1")
    p_raw = pred.data.astype(np.float64)
    p = np.clip(p_raw, eps, 1.0 - eps)
    n = t.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / n
    inside = (p_raw > eps) & (p_raw < 1.0 - eps)

    def vjp(g):
        return (np.where(inside, g * (p - t) / (p * (1.0 - p)) / n, 0.0),)

    return make_op(loss, (pred,), vjp)
