"""Image I/O, intensity preprocessing, mask morphology and synthetic data.

Conventions: grayscale images are float arrays in [0, 1] with shape (H, W).
Binary masks use 1 for valid tissue and 0 for the hole. Label maps are small
unsigned integers with 0 as background.
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (BadMagicError, ContractError, DegenerateInputError, DimensionError,
                     InvalidHeaderError, MaskGenerationError, TruncatedFileError,
                     UnsupportedFormatError)

__all__ = [
    "GrayImage", "ZScore", "parse_pgm", "encode_pgm", "read_pgm", "write_pgm",
    "read_mask", "write_mask", "read_labels", "write_labels", "histogram_match",
    "zscore_normalize", "dilate", "dilate_binary", "synthesize_masks",
    "synthesize_textures", "synthesize_blobs", "read_manifest", "write_manifest",
]


# ---------------------------------------------------------------- PGM

@dataclass
class GrayImage:
    pixels: np.ndarray
    maxval: int = 255

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise DimensionError(f"GrayImage needs a 2-D array, got shape {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens after the magic."""
    tokens = []
    pos = 2
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedFileError("PGM header ends early")
        tok = data[start:pos]
        if not tok.isdigit():
            raise InvalidHeaderError(f"PGM header field {tok!r} is not a decimal integer")
        tokens.append(int(tok))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedFileError("PGM header not terminated by whitespace")
    return tokens, pos + 1


def parse_pgm(data):
    """Decode a binary P5 graymap, returning intensities scaled by maxval."""
    if len(data) < 2:
        raise TruncatedFileError("file too short for a PGM magic number")
    magic = data[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P6", b"P7"):
        raise UnsupportedFormatError(f"only binary P5 graymaps are supported, got {magic.decode()}")
    if magic != b"P5":
        raise BadMagicError(f"not a PGM file (magic {magic!r})")
    (width, height, maxval), start = _header_tokens(data, 3)
    if maxval == 0 or maxval > 65535:
        raise InvalidHeaderError(f"maxval must be in 1..65535, got {maxval}")
    if width == 0 or height == 0:
        raise InvalidHeaderError(f"empty image {width}x{height}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = data[start:start + need]
    if len(payload) < need:
        raise TruncatedFileError(f"PGM raster has {len(payload)} of {need} bytes")
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if raw.max() > maxval:
        raise InvalidHeaderError(f"sample value {int(raw.max())} exceeds maxval {maxval}")
    return raw.astype(np.int64), maxval


def encode_pgm(raw, maxval=255):
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise DimensionError(f"PGM raster must be 2-D, got shape {raw.shape}")
    if not 0 < maxval <= 65535:
        raise InvalidHeaderError(f"maxval must be in 1..65535, got {maxval}")
    if raw.min() < 0 or raw.max() > maxval:
        raise ContractError(f"sample values must lie in 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = raw.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + raw.astype(dtype).tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        raw, maxval = parse_pgm(fh.read())
    return GrayImage(raw / maxval, maxval)


def write_pgm(path, image, maxval=None):
    """Write a GrayImage (or a [0, 1] array) as P5, rounding to the nearest level."""
    if isinstance(image, GrayImage):
        pixels, maxval = image.pixels, maxval or image.maxval
    else:
        pixels, maxval = np.asarray(image, dtype=np.float64), maxval or 255
    raw = np.rint(np.clip(pixels, 0.0, 1.0) * maxval).astype(np.int64)
    with open(path, "wb") as fh:
        fh.write(encode_pgm(raw, maxval))


def read_mask(path):
    """Binary mask from a {0, maxval} graymap as float32 {0, 1}."""
    with open(path, "rb") as fh:
        raw, maxval = parse_pgm(fh.read())
    if not np.isin(raw, (0, maxval)).all():
        raise ContractError(f"{path}: mask must contain only 0 and {maxval}")
    return (raw == maxval).astype(np.float32)


def write_mask(path, mask):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask must contain only 0 and 1")
    with open(path, "wb") as fh:
        fh.write(encode_pgm((mask > 0).astype(np.int64) * 255, 255))


def read_labels(path):
    with open(path, "rb") as fh:
        raw, _ = parse_pgm(fh.read())
    return raw.astype(np.uint16)


def write_labels(path, labels, maxval=255):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(np.asarray(labels, dtype=np.int64), maxval))


# ---------------------------------------------------------------- intensity

def _pixels(img):
    return img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def _cdf(values, bins):
    lo, hi = float(values.min()), float(values.max())
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts) / values.size])
    return edges, cdf


def histogram_match(src, reference, bins=256):
    """Map ``src`` intensities through F_ref^-1(F_src(v)).

    Both CDFs are piecewise linear over ``bins`` equal-width bins spanning
    each image's own range. The mapping is monotone non-decreasing.
    """
    s, r = _pixels(src), _pixels(reference)
    if s.size == 0 or r.size == 0:
        raise ContractError("histogram matching needs non-empty images")
    if r.max() == r.min():
        raise DegenerateInputError("reference image is constant; its CDF cannot be inverted")
    if s.max() == s.min():
        out = np.full_like(s, float(np.median(r)))
    else:
        s_edges, s_cdf = _cdf(s.ravel(), bins)
        r_edges, r_cdf = _cdf(r.ravel(), bins)
        q = np.interp(s, s_edges, s_cdf)
        # inverse CDF: first edge where cdf reaches q, linear inside that bin
        i = np.clip(np.searchsorted(r_cdf, q, side="left"), 1, bins)
        c0, c1 = r_cdf[i - 1], r_cdf[i]
        t = np.where(c1 > c0, (q - c0) / np.where(c1 > c0, c1 - c0, 1.0), 1.0)
        out = r_edges[i - 1] + t * (r_edges[i] - r_edges[i - 1])
        out = np.where(q <= 0.0, r_edges[0], out)
    if isinstance(src, GrayImage):
        return GrayImage(np.clip(out, 0.0, 1.0), src.maxval)
    return out


@dataclass(frozen=True)
class ZScore:
    """Affine parameters of a z-score normalization (population std)."""

    mean: float
    std: float

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def zscore_normalize(img, mask=None):
    """Subtract the mean and divide by the standard deviation.

    With ``mask``, statistics come from pixels where the mask is 1 only; the
    transform is still applied to every pixel.
    """
    values = _pixels(img.numpy() if hasattr(img, "numpy") else img)
    considered = values if mask is None else values[np.asarray(mask) > 0]
    if considered.size < 2:
        raise DegenerateInputError("z-scoring needs at least two pixels")
    mean = float(considered.mean())
    std = float(considered.std())
    if std == 0.0:
        raise DegenerateInputError("zero variance: cannot divide by the standard deviation")
    stats = ZScore(mean, std)
    return stats.apply(values), stats


# ---------------------------------------------------------------- morphology

def dilate_binary(region, radius):
    """Grow the nonzero set over the last two axes by a (2r+1)^2 square."""
    region = np.asarray(region) > 0
    if radius == 0:
        return region
    size = [1] * (region.ndim - 2) + [2 * radius + 1, 2 * radius + 1]
    return ndimage.maximum_filter(region, size=size, mode="constant", cval=False)


def dilate(mask, radius_px=3, region="hole"):
    """Grow the hole (or the valid region) of a binary mask.

    The default radius of 3 px treats one pixel as 1 mm. The other region
    shrinks by the same amount; the result is binary float32.
    """
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("dilate needs a binary mask")
    if radius_px < 0:
        raise ContractError(f"radius must be non-negative, got {radius_px}")
    if region == "hole":
        return (~dilate_binary(mask == 0, radius_px)).astype(np.float32)
    if region == "valid":
        return dilate_binary(mask == 1, radius_px).astype(np.float32)
    raise ContractError(f"region must be 'hole' or 'valid', got {region!r}")


# ---------------------------------------------------------------- synthesis

def _ellipse(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _random_blob(rng, height, width, lo, hi, attempts=200):
    """Connected union of chained ellipses with area fraction in [lo, hi].

    Returns None when the attempt budget runs out.
    """
    total = height * width
    target = rng.uniform(lo, hi)
    interior = np.zeros((height, width), bool)
    interior[1:-1, 1:-1] = True
    scale = min(height, width)
    blob = np.zeros((height, width), bool)
    cy, cx = rng.uniform(1, height - 2), rng.uniform(1, width - 2)
    axis_hi = max(3.0, 0.18 * scale)
    last_minor = None
    for _ in range(attempts):
        if last_minor is not None:
            step = rng.uniform(0.1, 0.5) * last_minor
            ang = rng.uniform(0, 2 * np.pi)
            ny, nx = cy + step * np.sin(ang), cx + step * np.cos(ang)
            if not (1 <= ny <= height - 2 and 1 <= nx <= width - 2):
                continue
        else:
            ny, nx = cy, cx
        a = rng.uniform(3.0, axis_hi)
        b = rng.uniform(3.0, axis_hi)
        shape = _ellipse((height, width), ny, nx, a, b, rng.uniform(0, np.pi)) & interior
        grown = blob | shape
        frac = grown.sum() / total
        if frac > hi:
            axis_hi = max(3.0, axis_hi * 0.8)
            continue
        blob, cy, cx, last_minor = grown, ny, nx, min(a, b)
        if frac >= target:
            return blob
    return None


def synthesize_masks(seed, width, height, count, coverage=(0.05, 0.25), restarts=20):
    """Random hole masks (1 = valid, 0 = hole), one connected blob each.

    Holes stay at least one pixel away from the border. Raises
    MaskGenerationError when a mask cannot reach the coverage range.
    """
    lo, hi = coverage
    if not 0.0 < lo <= hi < 0.5:
        raise ContractError(f"coverage range must lie inside (0, 0.5), got {coverage}")
    seeds = np.random.SeedSequence(seed).spawn(count)
    masks = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        for _ in range(restarts):
            blob = _random_blob(rng, height, width, lo, hi)
            if blob is not None and ndimage.label(blob, structure=np.ones((3, 3)))[1] == 1:
                break
        else:
            raise MaskGenerationError(
                f"could not place a hole covering {lo:.3f}..{hi:.3f} of a {width}x{height} image")
        masks.append((~blob).astype(np.float32))
    return masks


def _texture(rng, size):
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8, mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 32, mode="wrap")
    field = coarse / coarse.std() + 0.3 * fine / fine.std()
    return (field - field.min()) / (field.max() - field.min())


def synthesize_textures(seed, size, count):
    """Band-limited random fields scaled to [0, 1], shape (count, size, size)."""
    seeds = np.random.SeedSequence(seed).spawn(count)
    out = np.empty((count, size, size))
    for k, ss in enumerate(seeds):
        out[k] = _texture(np.random.default_rng(ss), size)
    return out


def synthesize_blobs(seed, size, count, coverage=(0.04, 0.2), restarts=20):
    """Images with one bright smooth blob each, plus the blob's binary label."""
    seeds = np.random.SeedSequence(seed).spawn(count)
    images = np.empty((count, size, size))
    labels = np.empty((count, size, size), np.uint8)
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        blob = None
        for _ in range(restarts):
            blob = _random_blob(rng, size, size, *coverage)
            if blob is not None:
                break
        if blob is None:
            raise MaskGenerationError(f"could not place a blob with coverage in {coverage} "
                                      f"on a {size}x{size} image")
        tex = _texture(rng, size)
        soft = ndimage.gaussian_filter(blob.astype(float), 1.0)
        img = 0.25 + 0.2 * tex + 0.45 * soft + 0.02 * rng.standard_normal((size, size))
        images[k] = np.clip(img, 0.0, 1.0)
        labels[k] = blob
    return images, labels


# ---------------------------------------------------------------- manifests

def write_manifest(path, rows):
    """Tab-separated manifest, one sample per line, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def read_manifest(path):
    """Rows of a manifest with relative paths resolved against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            rows.append(tuple(c if os.path.isabs(c) else os.path.join(base, c)
                              for c in line.split("\t")))
    return rows
