"""From-scratch 1D convolutional classifier with manual backpropagation.

Architecture: M blocks of (Conv1D, LeakyReLU, width-2 MaxPool), a flatten,
and a dense layer producing per-class scores. Loss is softmax
cross-entropy; optimization is Adam. All gradients are hand-derived and
checked against finite differences in the test suite.

Layer functions are dtype-preserving: the model trains in float32, while
gradient checks run the same code in float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"FPWT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Tensor shapes inconsistent with the layer contract."""


@dataclass(frozen=True)
class ArchConfig:
    """Static architecture description; fully determines all tensor shapes."""

    num_conv_blocks: int = 2
    filters: int = 25
    kernel_size: int = 3
    input_len: int = 1024
    input_channels: int = 2
    num_classes: int = 2
    leaky_slope: float = 0.1
    stride: int = 1
    pool_width: int = 2

    def __post_init__(self):
        if self.num_conv_blocks not in (1, 2, 3):
            raise ShapeError("num_conv_blocks must be in {1, 2, 3}")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if self.input_len % (self.pool_width**self.num_conv_blocks) != 0:
            raise ShapeError(
                f"input_len {self.input_len} not divisible by "
                f"{self.pool_width ** self.num_conv_blocks}"
            )

    @property
    def flatten_dim(self) -> int:
        return self.filters * (self.input_len // self.pool_width**self.num_conv_blocks)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = self.input_channels
        for m in range(self.num_conv_blocks):
            shapes.append((f"conv{m}.w", (self.filters, cin, self.kernel_size)))
            shapes.append((f"conv{m}.b", (self.filters,)))
            cin = self.filters
        shapes.append(("dense.w", (self.num_classes, self.flatten_dim)))
        shapes.append(("dense.b", (self.num_classes,)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())

    def checkpoint_nbytes(self) -> int:
        shapes = self.layer_shapes()
        table = sum(1 + 4 * len(s) for _, s in shapes)
        tensors = 4 * sum(int(np.prod(s)) for _, s in shapes)
        return _CKPT_HEADER.size + 2 + table + tensors


# ---------------------------------------------------------------------------
# Layer primitives


def conv1d_forward(x, w, b, stride: int = 1, padding: int = 1):
    """Cross-correlate a (B, Cin, n) input with (F, Cin, k) filters.

    Returns (out, cache) with out of shape (B, F, n') where
    n' = 1 + (n + 2*padding - k) // stride.
    """
    B, cin, n = x.shape
    F, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"input channels {cin} != filter channels {cin_w}")
    if n + 2 * padding < k:
        raise ShapeError("padded input shorter than kernel")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # B,Cin,n',k
    n_out = windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B * n_out, cin * k)
    out = cols @ w.reshape(F, cin * k).T + b
    out = out.reshape(B, n_out, F).transpose(0, 2, 1)
    cache = (cols, x.shape, w.shape, stride, padding)
    return out, cache


def conv1d_backward(grad_out, w, cache):
    """Gradients of conv1d_forward wrt input, filters, and bias."""
    if cache is None:
        raise ShapeError("missing forward cache")
    cols, x_shape, w_shape, stride, padding = cache
    B, cin, n = x_shape
    F, _, k = w_shape
    n_out = grad_out.shape[2]

    g = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(B * n_out, F)
    grad_w = (g.T @ cols).reshape(F, cin, k)
    grad_b = g.sum(axis=0)

    grad_cols = (g @ w.reshape(F, cin * k)).reshape(B, n_out, cin, k)
    grad_xp = np.zeros((B, cin, n + 2 * padding), dtype=grad_out.dtype)
    # Window positions for a fixed kernel offset never collide, so strided
    # slice accumulation is safe.
    for j in range(k):
        grad_xp[:, :, j : j + stride * n_out : stride] += grad_cols[:, :, :, j].transpose(0, 2, 1)
    grad_x = grad_xp[:, :, padding : padding + n] if padding else grad_xp
    return grad_x, grad_w, grad_b


def leaky_relu(x, slope: float = 0.1):
    """Elementwise max(x, slope*x); cache records the negative mask."""
    slope = x.dtype.type(slope)
    mask = x < 0
    out = np.maximum(x, slope * x)
    return out, mask


def leaky_relu_backward(grad_out, mask, slope: float = 0.1):
    # Gradient at exactly 0 is defined as 1. Arithmetic form avoids a
    # slow np.where over large activations.
    one = grad_out.dtype.type(1)
    slope = grad_out.dtype.type(slope)
    return grad_out - (one - slope) * (grad_out * mask)


def maxpool1d(x, width: int = 2):
    """Non-overlapping max pooling along the last axis; odd tails dropped."""
    B, F, n = x.shape
    n_out = n // width
    xr = x[:, :, : n_out * width].reshape(B, F, n_out, width)
    if width == 2:
        # ties resolve to the earlier index (strict comparison)
        arg = (xr[..., 1] > xr[..., 0]).astype(x.dtype)
        out = np.maximum(xr[..., 0], xr[..., 1])
    else:
        arg = xr.argmax(axis=3)
        out = np.take_along_axis(xr, arg[..., None], axis=3)[..., 0]
    cache = (arg, x.shape, width)
    return out, cache


def maxpool1d_backward(grad_out, cache):
    arg, x_shape, width = cache
    B, F, n = x_shape
    n_out = n // width
    grad_r = np.empty((B, F, n_out, width), dtype=grad_out.dtype)
    if width == 2:
        g1 = grad_out * arg
        grad_r[..., 1] = g1
        grad_r[..., 0] = grad_out - g1
    else:
        grad_r[:] = 0
        np.put_along_axis(grad_r, arg[..., None], grad_out[..., None], axis=3)
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    grad_x[:, :, : n_out * width] = grad_r.reshape(B, F, n_out * width)
    return grad_x


def dense_forward(x, w, b):
    """y = x @ w.T + b for x of shape (B, D) and w of shape (C, D)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense input dim {x.shape[1]} != weight dim {w.shape[1]}")
    return x @ w.T + b, x


def dense_backward(grad_out, w, cache):
    x = cache
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def cross_entropy(scores, labels):
    """Mean softmax cross-entropy over the batch and its score gradient."""
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    labels = np.asarray(labels)
    B, C = scores.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("label out of range")
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    log_z = np.log(exp.sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(B), labels]))
    grad = exp / exp.sum(axis=1, keepdims=True)
    grad[np.arange(B), labels] -= 1.0
    grad = (grad / B).astype(scores.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Model and optimizer state


@dataclass
class AdamParams:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ModelState:
    """Weights plus Adam moments for the configured architecture."""

    def __init__(self, config: ArchConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11E7]))
        cin = config.input_channels
        for m in range(config.num_conv_blocks):
            fan_in = cin * config.kernel_size
            fan_out = config.filters * config.kernel_size
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"conv{m}.w"] = rng.uniform(
                -bound, bound, (config.filters, cin, config.kernel_size)
            ).astype(dtype)
            self.params[f"conv{m}.b"] = np.zeros(config.filters, dtype=dtype)
            cin = config.filters
        bound = np.sqrt(6.0 / (config.flatten_dim + config.num_classes))
        self.params["dense.w"] = rng.uniform(
            -bound, bound, (config.num_classes, config.flatten_dim)
        ).astype(dtype)
        self.params["dense.b"] = np.zeros(config.num_classes, dtype=dtype)

        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def param_names(self) -> list[str]:
        return [name for name, _ in self.config.layer_shapes()]

    def get_weights(self) -> list[np.ndarray]:
        return [self.params[k].copy() for k in self.param_names()]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        names = self.param_names()
        if len(weights) != len(names):
            raise ShapeError("weight list length mismatch")
        for name, w in zip(names, weights):
            if w.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {w.shape} != {self.params[name].shape}")
            self.params[name] = w.astype(self.dtype)

    # -- forward / backward over the whole network

    def forward(self, x, train: bool = False):
        cfg = self.config
        caches = []
        h = x
        for m in range(cfg.num_conv_blocks):
            h, c_conv = conv1d_forward(h, self.params[f"conv{m}.w"],
                                       self.params[f"conv{m}.b"], cfg.stride, padding=1)
            h, c_act = leaky_relu(h, cfg.leaky_slope)
            h, c_pool = maxpool1d(h, cfg.pool_width)
            caches.append((c_conv, c_act, c_pool))
        B = h.shape[0]
        flat = h.reshape(B, -1)
        scores, c_dense = dense_forward(flat, self.params["dense.w"], self.params["dense.b"])
        if not train:
            return scores
        return scores, (caches, c_dense, h.shape)

    def backward(self, grad_scores, cache):
        cfg = self.config
        caches, c_dense, pre_flat_shape = cache
        grads: dict[str, np.ndarray] = {}
        g, grads["dense.w"], grads["dense.b"] = dense_backward(
            grad_scores, self.params["dense.w"], c_dense
        )
        g = g.reshape(pre_flat_shape)
        for m in reversed(range(cfg.num_conv_blocks)):
            c_conv, c_act, c_pool = caches[m]
            g = maxpool1d_backward(g, c_pool)
            g = leaky_relu_backward(g, c_act, cfg.leaky_slope)
            g, grads[f"conv{m}.w"], grads[f"conv{m}.b"] = conv1d_backward(
                g, self.params[f"conv{m}.w"], c_conv
            )
        return grads


def adam_step(state: ModelState, grads: dict[str, np.ndarray],
              opt: AdamParams = AdamParams()) -> None:
    """One Adam update with bias correction over every parameter tensor."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.step += 1
    t = state.step
    for k, g in grads.items():
        p = state.params[k]
        state.m[k] = opt.beta1 * state.m[k] + (1 - opt.beta1) * g
        state.v[k] = opt.beta2 * state.v[k] + (1 - opt.beta2) * g * g
        m_hat = state.m[k] / (1 - opt.beta1**t)
        v_hat = state.v[k] / (1 - opt.beta2**t)
        state.params[k] = p - (opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training loop


def train_epoch(state: ModelState, X, y, batch_size: int, rng: np.random.Generator,
                opt: AdamParams = AdamParams()) -> float:
    """One full shuffled pass; returns the mean per-batch loss."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    perm = rng.permutation(len(X))
    losses = []
    for start in range(0, len(X), batch_size):
        idx = perm[start : start + batch_size]
        scores, cache = state.forward(X[idx], train=True)
        loss, grad = cross_entropy(scores, y[idx])
        grads = state.backward(grad, cache)
        adam_step(state, grads, opt)
        losses.append(loss)
    return float(np.mean(losses))


def evaluate(state: ModelState, X, y, batch_size: int = 256):
    """Slice-level accuracy and confusion matrix; pure and deterministic."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    C = state.config.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    for start in range(0, len(X), batch_size):
        scores = state.forward(X[start : start + batch_size])
        pred = scores.argmax(axis=1)
        np.add.at(confusion, (y[start : start + batch_size], pred), 1)
    accuracy = float(np.trace(confusion) / len(X))
    return accuracy, confusion


# ---------------------------------------------------------------------------
# Checkpoint serialization (also the federated wire payload layout)

_CKPT_HEADER = struct.Struct("<4sHHHHIHIdHH")
# magic, version, M, F, k, L, Cin, C, slope, stride, pool


def encode_weights(config: ArchConfig, weights: list[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, config.num_conv_blocks, config.filters,
        config.kernel_size, config.input_len, config.input_channels,
        config.num_classes, config.leaky_slope, config.stride, config.pool_width,
    ))
    shapes = config.layer_shapes()
    if len(weights) != len(shapes):
        raise ShapeError("weight count does not match architecture")
    buf.write(struct.pack("<H", len(shapes)))
    for (name, shape), w in zip(shapes, weights):
        if tuple(w.shape) != shape:
            raise ShapeError(f"{name}: shape {w.shape} != {shape}")
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for w in weights:
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_weights(blob: bytes) -> tuple[ArchConfig, list[np.ndarray]]:
    if len(blob) < _CKPT_HEADER.size:
        raise ShapeError("checkpoint shorter than header")
    (magic, version, M, F, k, L, cin, C, slope, stride, pool) = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ShapeError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    config = ArchConfig(M, F, k, L, cin, C, slope, stride, pool)
    off = _CKPT_HEADER.size
    (n_tensors,) = struct.unpack_from("<H", blob, off)
    off += 2
    shapes = []
    for _ in range(n_tensors):
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        shapes.append(shape)
    expected = [s for _, s in config.layer_shapes()]
    if [tuple(s) for s in shapes] != [tuple(s) for s in expected]:
        raise ShapeError("shape table does not match architecture")
    weights = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        weights.append(arr.reshape(shape).copy())
    if off != len(blob):
        raise ShapeError(f"trailing bytes after tensors at offset {off}")
    return config, weights


def save_checkpoint(path, state: ModelState) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(state.config, state.get_weights()))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        config, weights = decode_weights(fh.read())
    state = ModelState(config)
    state.set_weights(weights)
    return state
