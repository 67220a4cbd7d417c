"""Compact fully convolutional network with hand-written backpropagation.

The network is a stack of convolution blocks (3x3 same-padded convolutions,
each followed by ReLU, then 2x2 max pooling).  The pooled output of every
block is upsampled back to input resolution by its own transposed
convolution ("head") straight to K+1 category channels; the head outputs
are summed into the logit map F.  The head of block b upsamples by 2**b
with a kernel of twice that size.

Tensors are single images in (height, width, channels) layout; the batch
size is always one scene.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .scenegen import NUM_CLASSES

NUM_CATEGORIES = NUM_CLASSES + 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite.

    ``checkpoints`` holds every checkpoint completed before the failure.
    """

    def __init__(self, message, checkpoints=()):
        super().__init__(message)
        self.checkpoints = list(checkpoints)


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class ConvBlock:
    num_layers: int
    channels: int


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple[ConvBlock, ...]
    in_channels: int = 1
    num_categories: int = NUM_CATEGORIES

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.blocks))
        if len(self.blocks) < 2:
            raise ValueError("a network needs at least 2 convolution blocks")
        for i, b in enumerate(self.blocks, 1):
            if b.num_layers < 1:
                raise ValueError(f"block {i}: num_layers must be >= 1")
            if b.channels < 1:
                raise ValueError(f"block {i}: channels must be positive")
        if self.in_channels < 1 or self.num_categories < 2:
            raise ValueError("in_channels must be >= 1 and num_categories >= 2")

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def head_ratio(self, block: int) -> int:
        """Upscaling ratio of the head attached to ``block`` (1-based)."""
        return 2 ** block

    def head_kernel(self, block: int) -> int:
        return 2 * self.head_ratio(block)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration order."""
        shapes = []
        cin = self.in_channels
        for b, block in enumerate(self.blocks, 1):
            for l in range(1, block.num_layers + 1):
                shapes.append((f"conv{b}_{l}.w", (3, 3, cin, block.channels)))
                shapes.append((f"conv{b}_{l}.b", (block.channels,)))
                cin = block.channels
        for b, block in enumerate(self.blocks, 1):
            k = self.head_kernel(b)
            shapes.append((f"head{b}.w", (block.channels, k, k, self.num_categories)))
            shapes.append((f"head{b}.b", (self.num_categories,)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "blocks": [[b.num_layers, b.channels] for b in self.blocks],
            "in_channels": self.in_channels,
            "num_categories": self.num_categories,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if "preset" in d:
            extra = set(d) - {"preset"}
            if extra:
                raise ValueError(f"unknown network keys with preset: {sorted(extra)}")
            return preset(d["preset"])
        unknown = set(d) - {"blocks", "in_channels", "num_categories"}
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        return cls(blocks=tuple(ConvBlock(int(n), int(c)) for n, c in d["blocks"]),
                   in_channels=int(d.get("in_channels", 1)),
                   num_categories=int(d.get("num_categories", NUM_CATEGORIES)))

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


PRESETS = {
    "shallow": ((2, 16), (2, 32)),
    "base": ((2, 16), (2, 32), (2, 64)),
    "deep": ((2, 16), (2, 32), (2, 64), (2, 64)),
    "mini-base": ((2, 8), (2, 16), (2, 32)),
    # VGG19 convolution widths, heads on every block; reachable, never the default
    "vgg19": ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512)),
}


def preset(name: str, in_channels: int = 1) -> NetworkSpec:
    try:
        blocks = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None
    return NetworkSpec(blocks=tuple(ConvBlock(*b) for b in blocks), in_channels=in_channels)


def param_count(spec: NetworkSpec) -> int:
    """Exact number of weights and biases over all conv and deconv layers."""
    return sum(math.prod(shape) for _, shape in spec.param_shapes())


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("conv"):
            fan_in = 9 * shape[2]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            # each output pixel of a head sees 2x2 input positions
            fan_in = 4 * shape[0]
            params[name] = (rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)).astype(dtype)
    return params


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# layers


def conv3x3_forward(x, w, b):
    h, wd, _ = x.shape
    cout = w.shape[3]
    cols = kernels.im2col3x3(x)
    y = cols @ w.reshape(-1, cout)
    y += b
    return y.reshape(h, wd, cout), cols


def conv3x3_backward(dy, cols, w, x_shape, need_dx=True):
    h, wd, cin = x_shape
    cout = w.shape[3]
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dx = None
    if need_dx:
        dx = kernels.col2im3x3(dy2 @ w.reshape(-1, cout).T, h, wd, cin)
    return dx, dw, db


def relu_forward(x):
    """In-place ReLU; returns the activation and its positive mask."""
    mask = x > 0
    np.maximum(x, 0, out=x)
    return x, mask


def relu_backward(dy, mask):
    np.multiply(dy, mask, out=dy)
    return dy


def deconv_forward(x, w, b, stride):
    """Transposed convolution with kernel 2*stride, output exactly stride x larger."""
    h, wd, cin = x.shape
    k = w.shape[1]
    cout = w.shape[3]
    cols = (x.reshape(-1, cin) @ w.reshape(cin, -1)).reshape(h, wd, k, k, cout)
    y = kernels.deconv_scatter(cols, stride)
    y += b
    return y


def deconv_backward(dy, x, w, stride, db=None):
    h, wd, cin = x.shape
    dcols = kernels.deconv_gather(np.ascontiguousarray(dy), stride, h, wd).reshape(h * wd, -1)
    dw = (x.reshape(-1, cin).T @ dcols).reshape(w.shape)
    dx = (dcols @ w.reshape(cin, -1).T).reshape(h, wd, cin)
    if db is None:
        db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def softmax_xent(logits, labels):
    """Mean per-pixel cross-entropy of softmax(logits) against integer labels."""
    c = logits.shape[-1]
    loss, d = kernels.softmax_xent(logits.reshape(-1, c), np.asarray(labels, dtype=np.intp).reshape(-1))
    return float(loss), d.reshape(logits.shape)


# ---------------------------------------------------------------------------
# network


def _as_input(image, spec, dtype):
    x = np.asarray(image, dtype=dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise ValueError(f"input: expected (H, W, {spec.in_channels}) image, got shape {np.shape(image)}")
    f = 2 ** spec.depth
    if x.shape[0] % f or x.shape[1] % f:
        raise ValueError(
            f"block {spec.depth} pool: input size {x.shape[0]}x{x.shape[1]} "
            f"is not divisible by 2**{spec.depth}")
    return np.ascontiguousarray(x)


def _check_params(params, spec):
    for name, shape in spec.param_shapes():
        if name not in params:
            raise ValueError(f"{name}: missing parameter")
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _forward(params, spec, x):
    cache = []
    logits = None
    for b, block in enumerate(spec.blocks, 1):
        for l in range(1, block.num_layers + 1):
            name = f"conv{b}_{l}"
            y, cols = conv3x3_forward(x, params[name + ".w"], params[name + ".b"])
            cache.append((name, cols, x.shape))
            x, mask = relu_forward(y)
            cache.append(("relu", mask))
        pre_pool = x.shape
        x, idx = kernels.maxpool2_forward(x)
        cache.append(("pool", idx, pre_pool))
        head = deconv_forward(x, params[f"head{b}.w"], params[f"head{b}.b"], spec.head_ratio(b))
        cache.append((f"head{b}", x))
        logits = head if logits is None else logits + head
    return logits, cache


def forward(params, spec: NetworkSpec, image) -> np.ndarray:
    """Logit map F of shape (H, W, K+1)."""
    _check_params(params, spec)
    dtype = params["conv1_1.w"].dtype
    logits, _ = _forward(params, spec, _as_input(image, spec, dtype))
    return logits


def features(params, spec: NetworkSpec, image) -> np.ndarray:
    """Pooled output of the last block (the pre-head feature map)."""
    x = _as_input(image, spec, params["conv1_1.w"].dtype)
    for b, block in enumerate(spec.blocks, 1):
        for l in range(1, block.num_layers + 1):
            y, _ = conv3x3_forward(x, params[f"conv{b}_{l}.w"], params[f"conv{b}_{l}.b"])
            x, _ = relu_forward(y)
        x, _ = kernels.maxpool2_forward(x)
    return x


def _backward(params, spec, cache, dlogits):
    grads = {}
    # every head sees the same upstream gradient, so their bias gradients agree
    dbias = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
    d_next = None  # gradient w.r.t. the pooled output of the block being processed
    pos = len(cache)
    for b in range(spec.depth, 0, -1):
        block = spec.blocks[b - 1]
        pos -= 1
        _, pooled = cache[pos]
        dx, grads[f"head{b}.w"], grads[f"head{b}.b"] = deconv_backward(
            dlogits, pooled, params[f"head{b}.w"], spec.head_ratio(b), db=dbias.copy())
        if d_next is not None:
            dx += d_next
        pos -= 1
        _, idx, _ = cache[pos]
        d = kernels.maxpool2_backward(np.ascontiguousarray(dx), idx)
        for l in range(block.num_layers, 0, -1):
            pos -= 1
            d = relu_backward(d, cache[pos][1])
            pos -= 1
            name, cols, x_shape = cache[pos]
            first = b == 1 and l == 1
            d, grads[name + ".w"], grads[name + ".b"] = conv3x3_backward(
                d, cols, params[name + ".w"], x_shape, need_dx=not first)
        d_next = d
    return grads


def loss_and_grad(params, spec: NetworkSpec, image, labels):
    """Mean softmax cross-entropy over all pixels and its exact gradient."""
    _check_params(params, spec)
    dtype = params["conv1_1.w"].dtype
    x = _as_input(image, spec, dtype)
    labels = np.asarray(labels)
    if labels.shape != x.shape[:2]:
        raise ValueError(f"labels: shape {labels.shape} does not match image {x.shape[:2]}")
    logits, cache = _forward(params, spec, x)
    loss, dlogits = softmax_xent(logits, labels)
    if not math.isfinite(loss):
        return loss, None
    return loss, _backward(params, spec, cache, dlogits)


def argmax_map(logits) -> np.ndarray:
    """Prediction map O: per-pixel index of the largest logit (ties to the lowest index)."""
    logits = np.asarray(logits)
    return np.argmax(logits, axis=-1).astype(np.uint8)


def predict(params, spec, image) -> np.ndarray:
    return argmax_map(forward(params, spec, image))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    lr: float = 1e-4

    @classmethod
    def fresh(cls, params, lr):
        return cls(params=params, m=zeros_like_params(params), v=zeros_like_params(params), lr=lr)

    def copy(self) -> "TrainState":
        return TrainState(
            params={k: a.copy() for k, a in self.params.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step, epoch=self.epoch, lr=self.lr)


def adam_step(state: TrainState, grads) -> TrainState:
    """One Adam update; returns a new state and leaves ``state`` untouched."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    new = state.copy()
    _adam_inplace(new, grads)
    return new


def _adam_inplace(state, grads):
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k, g in grads.items():
        kernels.adam_update(state.params[k].reshape(-1), np.ascontiguousarray(g).reshape(-1),
                            state.m[k].reshape(-1), state.v[k].reshape(-1),
                            state.lr, ADAM_BETA1, ADAM_BETA2, c1, c2, ADAM_EPS)


@dataclass(frozen=True)
class Schedule:
    epochs: int
    lr0: float = 1e-4
    decay: float = 0.95
    seed: int = 0
    dtype: str = "float32"

    def lr(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.lr0 * self.decay ** epoch


@dataclass
class Checkpoint:
    epoch: int
    lr: float
    loss: float
    state: TrainState
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.state.params


def train(images: Sequence, labels: Sequence, spec: NetworkSpec, schedule: Schedule,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[Checkpoint], None] | None = None,
          keep: Callable[[int], bool] | None = None) -> list[Checkpoint]:
    """Train on one scene per step; returns a checkpoint per completed epoch.

    The first checkpoint is the initialization (epoch 0) unless ``resume`` is
    given, in which case training continues from it.  The scene order of
    every epoch is drawn from (seed, epoch) alone, so a resumed run matches
    an uninterrupted one bit for bit.  ``keep(epoch)`` may be used to drop
    checkpoints that are not needed (their ``state`` is set to None).
    """
    if len(images) == 0:
        raise ValueError("training corpus is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    shape = np.shape(images[0])[:2]
    for i, im in enumerate(images):
        if np.shape(im)[:2] != shape:
            raise ValueError(f"scene {i}: size {np.shape(im)[:2]} differs from {shape}")
    dtype = np.dtype(schedule.dtype)
    xs = [_as_input(im, spec, dtype) for im in images]
    ys = [np.asarray(lab, dtype=np.intp) for lab in labels]

    if resume is None:
        state = TrainState.fresh(init_params(spec, schedule.seed, dtype), schedule.lr0)
        first = Checkpoint(epoch=0, lr=schedule.lr(0), loss=float("nan"), state=state.copy())
        history = [first]
        if on_epoch:
            on_epoch(first)
    else:
        state = resume.state.copy()
        history = []

    for epoch in range(state.epoch, schedule.epochs):
        t0 = time.perf_counter()
        state.lr = schedule.lr(epoch)
        order = np.random.default_rng(np.random.SeedSequence([schedule.seed, 2, epoch])).permutation(len(xs))
        total = 0.0
        for i in order:
            loss, grads = loss_and_grad(state.params, spec, xs[i], ys[i])
            if grads is None:
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, scene {int(i)}", history)
            _adam_inplace(state, grads)
            total += loss
        state.epoch = epoch + 1
        ck = Checkpoint(epoch=epoch + 1, lr=state.lr, loss=total / len(xs), state=state.copy(),
                        seconds=time.perf_counter() - t0)
        if on_epoch:
            on_epoch(ck)
        if keep is not None and not keep(ck.epoch):
            ck.state = None
        history.append(ck)
    return history


def write_log(path, checkpoints: Sequence[Checkpoint], timings=True):
    """Training log CSV ``epoch,loss,lr,seconds``."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "loss", "lr", "seconds"])
        for ck in checkpoints:
            if ck.epoch == 0:
                continue
            wr.writerow([ck.epoch, repr(ck.loss), repr(ck.lr),
                         f"{ck.seconds:.3f}" if timings else "0"])


# ---------------------------------------------------------------------------
# checkpoint files

_MAGIC = b"SDNC"
_VERSION = 1
_HEADER = struct.Struct("<4sHHB3x32sIQddQI")
_FLAG_MOMENTS = 1


def save_checkpoint(path, ck: Checkpoint, spec: NetworkSpec):
    """Write header (magic, version, spec hash, epoch, lr) then raw little-endian arrays.

    Arrays follow declaration order: parameters, then the Adam moments m and v.
    """
    state = ck.state
    dtype = next(iter(state.params.values())).dtype
    le = dtype.newbyteorder("<")
    chunks = []
    for group in (state.params, state.m, state.v):
        for name, shape in spec.param_shapes():
            chunks.append(np.ascontiguousarray(group[name], dtype=le).tobytes())
    payload = b"".join(chunks)
    header = _HEADER.pack(_MAGIC, _VERSION, _FLAG_MOMENTS, dtype.itemsize, spec.digest(),
                          ck.epoch, state.step, ck.lr, ck.loss, len(payload), zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, spec: NetworkSpec) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, flags, itemsize, digest, epoch, step, lr, loss, n, crc = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if digest != spec.digest():
        raise CheckpointError(f"{path}: network spec does not match the checkpoint")
    payload = raw[_HEADER.size:]
    if len(payload) != n or zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload integrity check failed")
    dtype = np.dtype({4: "<f4", 8: "<f8"}[itemsize])
    groups = []
    off = 0
    for _ in range(3 if flags & _FLAG_MOMENTS else 1):
        g = {}
        for name, shape in spec.param_shapes():
            cnt = math.prod(shape)
            g[name] = np.frombuffer(payload, dtype=dtype, count=cnt, offset=off).reshape(shape).astype(dtype.newbyteorder("="))
            off += cnt * itemsize
        groups.append(g)
    params = groups[0]
    m, v = (groups[1], groups[2]) if len(groups) == 3 else (zeros_like_params(params), zeros_like_params(params))
    state = TrainState(params=params, m=m, v=v, step=step, epoch=epoch, lr=lr)
    return Checkpoint(epoch=epoch, lr=lr, loss=loss, state=state)
