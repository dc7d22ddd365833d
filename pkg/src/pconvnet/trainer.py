"""Adam, training loops for both model variants, and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic  b"PCV1"
    u32    format version
    u32    config length, then that many bytes of UTF-8 ``key = value`` lines
    u32    tensor count, then per tensor:
               u32 name length, name bytes, u32 rank, u32 extents[rank], f32 values
    u32    Adam tensor count, then ``m.<param>`` / ``v.<param>`` tensors as above
    u64    step counter (iterations completed)
    u64[4] training RNG state (PCG64 state high/low, increment high/low)
"""
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import binio
from .errors import (BadMagicError, ConfigError, ConfigMismatchError, ContractError,
                     DimensionError, FormatError, NumericalError, VersionMismatchError)
from .losses import TERM_NAMES, LossWeights, bce_loss, l_total
from .model import ModelConfig, build_model, inpaint_forward, parse_bool, seg_forward
from .tensor import Tape

__all__ = [
    "AdamState", "TrainConfig", "Checkpoint", "PairedDataset", "TrainResult", "adam_step",
    "train_inpaint", "train_segment", "save_checkpoint", "load_checkpoint",
    "encode_checkpoint", "decode_checkpoint", "model_from_checkpoint", "apply_checkpoint",
]

MAGIC = b"PCV1"
FORMAT_VERSION = 1
_U64 = (1 << 64) - 1


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` maps names to tensors and ``grads`` maps the same names to arrays.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r} "
                                 f"at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 2e-4
    lr_finetune: float = 5e-5
    finetune_start_iter: Optional[int] = None
    batch_size: int = 6
    max_iters: int = 1000
    seed: int = 0
    checkpoint_interval: int = 0
    freeze_encoder_bn_on_finetune: bool = False
    w_masked: float = 6.0
    w_valid: float = 1.0
    w_perc: float = 0.05
    w_style: float = 120.0
    w_tv: float = 0.1

    def __post_init__(self):
        problems = []
        if self.lr_initial <= 0 or self.lr_finetune <= 0:
            problems.append("learning rates must be positive")
        if self.max_iters < 0:
            problems.append(f"max_iters must be >= 0, got {self.max_iters}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.finetune_start_iter is not None and not 0 <= self.finetune_start_iter <= self.max_iters:
            problems.append("finetune_start_iter must lie in 0..max_iters")
        if self.checkpoint_interval < 0:
            problems.append("checkpoint_interval must be >= 0")
        if min(self.w_masked, self.w_valid, self.w_perc, self.w_style, self.w_tv) < 0:
            problems.append("loss weights must be non-negative")
        if problems:
            raise ConfigError(problems)

    @property
    def finetune_start(self):
        return self.max_iters // 2 if self.finetune_start_iter is None else self.finetune_start_iter

    def lr_at(self, iteration):
        return self.lr_initial if iteration < self.finetune_start else self.lr_finetune

    def loss_weights(self):
        return LossWeights(self.w_masked, self.w_valid, self.w_perc, self.w_style, self.w_tv)

    def to_text(self, prefix="train."):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{prefix}{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs, problems = {}, []
        for key, raw in mapping.items():
            if key not in kinds:
                problems.append(f"unknown training key {key!r}")
                continue
            if not isinstance(raw, str):
                kwargs[key] = raw
                continue
            try:
                if key == "finetune_start_iter":
                    kwargs[key] = None if raw.strip().lower() == "none" else int(raw)
                elif key == "freeze_encoder_bn_on_finetune":
                    kwargs[key] = parse_bool(raw)
                elif kinds[key] in (int, "int"):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                problems.append(f"bad value for {key}: {raw!r}")
        if problems:
            raise ConfigError(problems)
        return cls(**kwargs)


# ---------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict
    adam: AdamState
    rng_state: tuple

    @property
    def iteration(self):
        return self.adam.t


def _rng_words(rng):
    st = rng.bit_generator.state
    if st["has_uint32"]:
        raise ContractError("training RNG holds a buffered 32-bit value; state is not portable")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s >> 64, s & _U64, inc >> 64, inc & _U64)


def _rng_from_words(words):
    rng = np.random.Generator(np.random.PCG64())
    hi, lo, ihi, ilo = words
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (hi << 64) | lo, "inc": (ihi << 64) | ilo},
        "has_uint32": 0, "uinteger": 0,
    }
    return rng


def _config_blob(model_config, train_config):
    return (model_config.to_text() + train_config.to_text()).encode("utf-8")


def parse_config_text(text):
    """``key = value`` lines with ``#`` comments into an ordered dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def encode_checkpoint(ckpt):
    parts = [MAGIC, binio.u32(FORMAT_VERSION)]
    blob = _config_blob(ckpt.model_config, ckpt.train_config)
    parts += [binio.u32(len(blob)), blob, binio.u32(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        parts += [binio.pack_name(name), binio.pack_array(arr)]
    names = list(ckpt.adam.m)
    parts.append(binio.u32(2 * len(names)))
    for name in names:
        parts += [binio.pack_name(f"m.{name}"), binio.pack_array(ckpt.adam.m[name])]
    for name in names:
        parts += [binio.pack_name(f"v.{name}"), binio.pack_array(ckpt.adam.v[name])]
    parts.append(binio.u64(ckpt.adam.t))
    parts += [binio.u64(w) for w in ckpt.rng_state]
    return b"".join(parts)


def decode_checkpoint(buf):
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {bytes(buf[:4])!r}, expected {MAGIC!r})")
    rd = binio.Reader(buf, "checkpoint")
    rd.take(4)
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, "
                                   f"this build reads version {FORMAT_VERSION}")
    cfg = parse_config_text(rd.take(rd.u32()).decode("utf-8"))
    model_keys = {k: v for k, v in cfg.items() if not k.startswith("train.")}
    train_keys = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    model_config = ModelConfig.from_mapping(model_keys)
    train_config = TrainConfig.from_mapping(train_keys)
    tensors = {}
    for _ in range(rd.u32()):
        name = rd.name()
        tensors[name] = rd.array()
    adam = AdamState()
    for _ in range(rd.u32()):
        name = rd.name()
        kind, _, pname = name.partition(".")
        if kind not in ("m", "v"):
            raise FormatError(f"unexpected optimizer tensor {name!r}")
        getattr(adam, kind)[pname] = rd.array()
    adam.t = rd.u64()
    rng_state = tuple(rd.u64() for _ in range(4))
    if not rd.at_end():
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after checkpoint payload")
    return Checkpoint(model_config, train_config, tensors, adam, rng_state)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _arch(config):
    return replace(config, seed=0)


def apply_checkpoint(model, ckpt):
    """Load checkpoint weights into ``model``; configs must agree (seed aside)."""
    if _arch(model.config) != _arch(ckpt.model_config):
        diffs = [f.name for f in fields(ModelConfig)
                 if f.name != "seed"
                 and getattr(model.config, f.name) != getattr(ckpt.model_config, f.name)]
        raise ConfigMismatchError(f"checkpoint config differs from model in: {', '.join(diffs)}")
    model.load_state(ckpt.tensors)
    return model


def model_from_checkpoint(ckpt):
    return apply_checkpoint(build_model(ckpt.model_config), ckpt)


# ---------------------------------------------------------------- data

@dataclass
class PairedDataset:
    """Images with a same-size companion: hole masks or segmentation labels."""

    images: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.images = _nchw(self.images, "images")
        self.targets = _nchw(self.targets, "targets")
        if len(self.images) == 0:
            raise ContractError("dataset is empty")
        if self.images.shape[0] != self.targets.shape[0] or \
                self.images.shape[2:] != self.targets.shape[2:]:
            raise DimensionError(
                f"image stack {self.images.shape} and mask/label stack {self.targets.shape} differ")

    def __len__(self):
        return len(self.images)


def _nchw(arr, what):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise DimensionError(f"{what} must be (N, H, W) or (N, C, H, W), got {arr.shape}")
    return arr


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    model: object


# ---------------------------------------------------------------- loops

def _snapshot(model, train_config, adam, rng):
    return Checkpoint(
        model.config, train_config,
        {k: np.array(v, dtype=np.float32) for k, v in model.state_arrays().items()},
        AdamState({k: v.copy() for k, v in adam.m.items()},
                  {k: v.copy() for k, v in adam.v.items()}, adam.t,
                  adam.beta1, adam.beta2, adam.eps),
        _rng_words(rng))


def _setup(model_config, train_config, resume):
    if resume is not None:
        model = model_from_checkpoint(resume)
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        rng = _rng_from_words(resume.rng_state)
    else:
        model = build_model(model_config)
        adam = AdamState.zeros_like(model.params)
        rng = np.random.Generator(np.random.PCG64(train_config.seed))
    return model, adam, rng


def _run(step_fn, dataset, model_config, train_config, resume, stop_after, on_checkpoint,
         on_step):
    model, adam, rng = _setup(model_config, train_config, resume)
    end = train_config.max_iters if stop_after is None else min(stop_after, train_config.max_iters)
    encoder = tuple(f"enc{i + 1}" for i in range(model.config.depth))
    history = []
    n = len(dataset)
    for it in range(adam.t, end):
        lr = train_config.lr_at(it)
        frozen = encoder if (train_config.freeze_encoder_bn_on_finetune
                             and it >= train_config.finetune_start) else ()
        # Generator.random draws whole 64-bit words, keeping the state u64-exact
        idx = np.minimum((rng.random(train_config.batch_size) * n).astype(np.int64), n - 1)
        images, targets = dataset.images[idx], dataset.targets[idx]
        with Tape() as tape:
            loss, terms = step_fn(model, images, targets, frozen, train_config)
        grads = tape.backward(loss)
        adam_step(model.params, {k: grads[p] for k, p in model.params.items()}, adam, lr)
        record = {"iter": it, "lr": lr, "total": float(loss.data)}
        record.update(terms)
        history.append(record)
        if on_step is not None:
            on_step(record)
        interval = train_config.checkpoint_interval
        if on_checkpoint is not None and interval and (it + 1) % interval == 0:
            on_checkpoint(_snapshot(model, train_config, adam, rng))
    return TrainResult(_snapshot(model, train_config, adam, rng), history, model)


def _inpaint_step(model, images, masks, frozen, cfg):
    out, _ = inpaint_forward(model, images * masks, masks, train=True, frozen_bn=frozen)
    if not np.isfinite(out.data).all():
        raise NumericalError("network output is not finite")
    return l_total(out, images, masks, cfg.loss_weights())


def _segment_step(model, images, labels, frozen, cfg):
    prob = seg_forward(model, images, train=True, frozen_bn=frozen)
    loss = bce_loss(prob, labels)
    return loss, {"bce": float(loss.data)}


def train_inpaint(dataset, model_config=ModelConfig(), train_config=TrainConfig(), *,
                  resume=None, stop_after=None, on_checkpoint=None, on_step=None):
    """Train the partial-convolution network on (image, hole mask) pairs.

    Each history record holds the iteration, learning rate, total loss and the
    six unweighted loss terms. ``stop_after`` ends the run early without
    changing the learning-rate schedule, so a later ``resume`` continues it.
    """
    if model_config.variant != "pconv_unet":
        raise ConfigError("train_inpaint needs a pconv_unet model config")
    if not np.isin(dataset.targets, (0.0, 1.0)).all():
        raise ContractError("inpainting masks must be binary")
    return _run(_inpaint_step, dataset, model_config, train_config, resume, stop_after,
                on_checkpoint, on_step)


def train_segment(dataset, model_config=ModelConfig(variant="seg_unet"),
                  train_config=TrainConfig(), *, resume=None, stop_after=None,
                  on_checkpoint=None, on_step=None):
    """Train the segmentation U-Net on (image, binary label) pairs with BCE."""
    if model_config.variant != "seg_unet":
        raise ConfigError("train_segment needs a seg_unet model config")
    return _run(_segment_step, dataset, model_config, train_config, resume, stop_after,
                on_checkpoint, on_step)


def history_columns(kind):
    if kind == "segment":
        return ("iter", "lr", "total", "bce")
    return ("iter", "lr", "total") + TERM_NAMES


