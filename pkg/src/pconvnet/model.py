"""Encoder-decoder networks built from a declarative :class:`ModelConfig`.

Two variants:

``pconv_unet``
    Inpainting network. Encoder stages are partial convolutions (stride 2, or
    stride 1 with ``same_resolution``) followed by ReLU. Decoder stages
    upsample, concatenate the matching encoder features and masks, then apply a
    partial convolution and LeakyReLU. The last decoder stage emits one channel
    with no normalization or activation.

``seg_unet``
    Segmentation U-Net. Each encoder stage is conv, ReLU and 2x2 max-pool; a
    bottleneck conv follows, then upsample/concat/conv decoder stages and a
    1x1 sigmoid head.

Batch normalization is on for every layer except the first encoder layer and
the last decoder layer unless ``bn_enabled`` says otherwise.
"""
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ConfigMismatchError, DimensionError
from .pconv import MaskedFeature, pconv_forward
from .tensor import (BatchNormStats, Tensor, apply_mask, batch_norm, concat_channels, conv2d,
                     leaky_relu, max_pool2d, relu, sigmoid, upsample_nearest)

__all__ = [
    "ModelConfig", "Model", "build_model", "build_pconv_unet", "build_seg_unet",
    "inpaint_forward", "seg_forward", "parse_bool",
]

VARIANTS = ("pconv_unet", "seg_unet")


def parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text):
    text = str(text).strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _parse_bools(text):
    text = str(text).strip()
    return tuple(parse_bool(t) for t in text.split(",") if t.strip()) if text else ()


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "pconv_unet"
    depth: int = 3
    base_channels: int = 16
    kernel_sizes: tuple = ()
    in_channels: int = 1
    same_resolution: bool = False
    leaky_slope: float = 0.2
    bn_enabled: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "bn_enabled", tuple(bool(b) for b in self.bn_enabled))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self):
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            out.append(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            out.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            out.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.kernel_sizes and len(self.kernel_sizes) != self.depth:
            out.append(f"kernel_sizes needs {self.depth} entries, got {len(self.kernel_sizes)}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            out.append(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if not 0.0 < self.leaky_slope < 1.0:
            out.append(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.same_resolution and self.variant != "pconv_unet":
            out.append("same_resolution applies to the pconv_unet variant only")
        if self.depth >= 1 and self.variant in VARIANTS and self.bn_enabled:
            n = len(self.layer_names())
            if len(self.bn_enabled) != n:
                out.append(f"bn_enabled needs {n} entries, got {len(self.bn_enabled)}")
            else:
                if self.bn_enabled[0]:
                    out.append("batch norm must be disabled on the first encoder layer")
                if self.bn_enabled[-1]:
                    out.append("batch norm must be disabled on the last decoder layer")
        return out

    def encoder_channels(self):
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    def encoder_kernels(self):
        return list(self.kernel_sizes) if self.kernel_sizes else [3] * self.depth

    def layer_names(self):
        enc = [f"enc{i + 1}" for i in range(self.depth)]
        dec = [f"dec{i}" for i in range(self.depth, 0, -1)]
        if self.variant == "seg_unet":
            return enc + ["mid"] + dec + ["head"]
        return enc + dec

    def bn_flags(self):
        names = self.layer_names()
        if self.bn_enabled:
            return dict(zip(names, self.bn_enabled))
        return {n: 0 < i < len(names) - 1 for i, n in enumerate(names)}

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(int(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values; unknown keys and bad values are violations."""
        kinds = {"depth": int, "base_channels": int, "in_channels": int, "seed": int,
                 "leaky_slope": float, "same_resolution": parse_bool,
                 "kernel_sizes": _parse_ints, "bn_enabled": _parse_bools, "variant": str}
        kwargs, problems = {}, []
        for key, raw in mapping.items():
            if key not in kinds:
                problems.append(f"unknown model key {key!r}")
                continue
            try:
                kwargs[key] = kinds[key](raw) if isinstance(raw, str) else raw
            except ValueError:
                problems.append(f"bad value for {key}: {raw!r}")
        if problems:
            raise ConfigError(problems)
        return cls(**kwargs)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    bn_stats: dict = field(default_factory=dict)

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self):
        """Parameters then running statistics, as name -> float32 array."""
        out = {name: p.data for name, p in self.params.items()}
        for layer, st in self.bn_stats.items():
            out[f"{layer}.bn.running_mean"] = st.running_mean
            out[f"{layer}.bn.running_var"] = st.running_var
        return out

    def load_state(self, arrays):
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigMismatchError(f"state does not fit model: missing {missing}, extra {extra}")
        for name, arr in arrays.items():
            if np.shape(arr) != expected[name].shape:
                raise ConfigMismatchError(
                    f"{name}: stored shape {np.shape(arr)} but model expects {expected[name].shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float32)
        for layer, st in self.bn_stats.items():
            st.running_mean = np.array(arrays[f"{layer}.bn.running_mean"], dtype=np.float32)
            st.running_var = np.array(arrays[f"{layer}.bn.running_var"], dtype=np.float32)

    def shadow_params(self, dtype=np.float64):
        """Gradient-tracking copies of the parameters in another precision."""
        return {k: Tensor(p.data, requires_grad=True, dtype=dtype, name=k)
                for k, p in self.params.items()}


def _add_layer(model, rng, name, cin, cout, k, bn):
    fan_in = cin * k * k
    w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    model.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
    model.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
    if bn:
        model.params[f"{name}.bn.gamma"] = Tensor(np.ones(cout), requires_grad=True,
                                                  name=f"{name}.bn.gamma")
        model.params[f"{name}.bn.beta"] = Tensor(np.zeros(cout), requires_grad=True,
                                                 name=f"{name}.bn.beta")
        model.bn_stats[name] = BatchNormStats.fresh(cout)


def build_pconv_unet(config):
    if config.variant != "pconv_unet":
        raise ConfigError(f"build_pconv_unet needs variant pconv_unet, got {config.variant}")
    rng = np.random.default_rng(config.seed)
    model = Model(config)
    bn = config.bn_flags()
    chans = config.encoder_channels()
    kernels = config.encoder_kernels()
    cin = config.in_channels
    for i, (c, k) in enumerate(zip(chans, kernels)):
        _add_layer(model, rng, f"enc{i + 1}", cin, c, k, bn[f"enc{i + 1}"])
        cin = c
    skips = [config.in_channels] + chans[:-1]
    for i in range(config.depth, 0, -1):
        cout = skips[i - 1] if i > 1 else 1
        _add_layer(model, rng, f"dec{i}", cin + skips[i - 1], cout, 3, bn[f"dec{i}"])
        cin = cout
    return model


def build_seg_unet(config):
    if config.variant != "seg_unet":
        raise ConfigError(f"build_seg_unet needs variant seg_unet, got {config.variant}")
    rng = np.random.default_rng(config.seed)
    model = Model(config)
    bn = config.bn_flags()
    chans = config.encoder_channels()
    kernels = config.encoder_kernels()
    cin = config.in_channels
    for i, (c, k) in enumerate(zip(chans, kernels)):
        _add_layer(model, rng, f"enc{i + 1}", cin, c, k, bn[f"enc{i + 1}"])
        cin = c
    mid = 2 * chans[-1]
    _add_layer(model, rng, "mid", cin, mid, 3, bn["mid"])
    cin = mid
    for i in range(config.depth, 0, -1):
        c = chans[i - 1]
        _add_layer(model, rng, f"dec{i}", cin + c, c, 3, bn[f"dec{i}"])
        cin = c
    _add_layer(model, rng, "head", cin, 1, 1, bn["head"])
    return model


def build_model(config):
    if config.variant == "seg_unet":
        return build_seg_unet(config)
    return build_pconv_unet(config)


def _norm(model, name, x, params, train, update_stats, frozen_bn):
    if f"{name}.bn.gamma" not in params:
        return x
    layer_train = train and name not in frozen_bn
    stats = model.bn_stats[name]
    return batch_norm(x, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                      stats if (update_stats or not layer_train) else None, train=layer_train)


def _input_tensor(image, dtype):
    if isinstance(image, Tensor):
        return image if image.dtype == dtype else Tensor(image.data, dtype=dtype)
    return Tensor(image, dtype=dtype)


def _check_extents(config, h, w):
    if config.variant == "pconv_unet" and config.same_resolution:
        return
    step = 2 ** config.depth
    if h % step or w % step:
        raise DimensionError(
            f"image {h}x{w} is not divisible by {step} (2**depth); pad each side up to a "
            f"multiple of {step} before running the network")


def inpaint_forward(model, image, mask, *, train=False, params=None, update_stats=None,
                    frozen_bn=(), trace=None):
    """Run the inpainting network. Returns ``(i_out, final_mask)``.

    ``image`` is (N, C, H, W) and ``mask`` (N, 1, H, W) with 1 = valid. When
    ``trace`` is a list, every layer's MaskedFeature is appended to it.
    """
    cfg = model.config
    params = model.params if params is None else params
    if update_stats is None:
        update_stats = train
    dtype = next(iter(params.values())).dtype
    x = _input_tensor(image, dtype)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"image must be (N, {cfg.in_channels}, H, W), got {x.shape}")
    _check_extents(cfg, x.shape[2], x.shape[3])
    mask = np.asarray(mask, dtype=np.float32)
    feat = MaskedFeature(apply_mask(x, mask), mask)
    stride = 1 if cfg.same_resolution else 2
    skips = [feat]
    for i, k in enumerate(cfg.encoder_kernels()):
        name = f"enc{i + 1}"
        out = pconv_forward(feat, params[f"{name}.weight"], params[f"{name}.bias"], stride, k // 2)
        h = _norm(model, name, out.features, params, train, update_stats, frozen_bn)
        feat = MaskedFeature(relu(h), out.mask)
        if trace is not None:
            trace.append(feat)
        skips.append(feat)
    factor = 1 if cfg.same_resolution else 2
    for i in range(cfg.depth, 0, -1):
        name = f"dec{i}"
        skip = skips[i - 1]
        up = upsample_nearest(feat.features, factor)
        up_mask = np.repeat(np.repeat(feat.mask, factor, axis=2), factor, axis=3)
        joined = concat_channels(apply_mask(up, up_mask), apply_mask(skip.features, skip.mask))
        merged = MaskedFeature(joined, np.maximum(up_mask, skip.mask))
        out = pconv_forward(merged, params[f"{name}.weight"], params[f"{name}.bias"], 1, 1)
        h = out.features
        if i > 1:
            h = leaky_relu(_norm(model, name, h, params, train, update_stats, frozen_bn),
                           cfg.leaky_slope)
        feat = MaskedFeature(h, out.mask)
        if trace is not None:
            trace.append(feat)
    return feat.features, feat.mask


def seg_forward(model, image, *, train=False, params=None, update_stats=None, frozen_bn=()):
    """Segmentation probabilities in (0, 1), shape (N, 1, H, W)."""
    cfg = model.config
    params = model.params if params is None else params
    if update_stats is None:
        update_stats = train
    dtype = next(iter(params.values())).dtype
    x = _input_tensor(image, dtype)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"image must be (N, {cfg.in_channels}, H, W), got {x.shape}")
    _check_extents(cfg, x.shape[2], x.shape[3])

    def block(name, h, k):
        h = conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], 1, k // 2)
        return relu(_norm(model, name, h, params, train, update_stats, frozen_bn))

    skips = []
    for i, k in enumerate(cfg.encoder_kernels()):
        x = block(f"enc{i + 1}", x, k)
        skips.append(x)
        x = max_pool2d(x, 2)
    x = block("mid", x, 3)
    for i in range(cfg.depth, 0, -1):
        x = block(f"dec{i}", concat_channels(upsample_nearest(x, 2), skips[i - 1]), 3)
    logits = conv2d(x, params["head.weight"], params["head.bias"], 1, 0)
    return sigmoid(_norm(model, "head", logits, params, train, update_stats, frozen_bn))
