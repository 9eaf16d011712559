"""Residual CNN embedding network with hand-derived gradients and Adam.

The architecture is fixed (conv stem, three strided residual blocks, global
average pooling, dense head), so forward/backward are written explicitly
instead of through a generic autodiff graph. Default widths land the
parameter count near 70k with a 128-dim embedding:

    input 1x40x100
    stem   3x3 conv, 8 ch, stride 1          ->  8x40x100
    block1 two 3x3 convs, 16 ch, stride 2    -> 16x20x50   (1x1 projection skip)
    block2 two 3x3 convs, 32 ch, stride 2    -> 32x10x25
    block3 two 3x3 convs, 56 ch, stride 2    -> 56x5x13
    global average pool                       -> 56
    dense                                     -> 128

No batch normalization: it would couple samples within a batch and break
exact per-sample gradient checking. Training runs in float32; casting the
parameters to float64 gives a mirror build for finite-difference tests.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import MelFeatures
from .errors import (
    CacheMismatchError,
    CorruptCheckpointError,
    InvalidConfigError,
    NonFiniteGradientError,
    ShapeMismatchError,
)

CHECKPOINT_MAGIC = b"FSEDCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_mels: int = 40
    in_frames: int = 100
    embed_dim: int = 128
    stem_channels: int = 8
    # (out_channels, stride) per residual block.
    blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (56, 2))
    # Standardize each input window to zero mean / unit variance before the
    # stem. Parameter-free, so gradients stay exact; raw log-mel sits near
    # the log floor, far from the He-init operating range.
    standardize_input: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.blocks:
            raise InvalidConfigError("network needs at least one residual block")
        if self.embed_dim < 1 or self.stem_channels < 1:
            raise InvalidConfigError("embed_dim and stem_channels must be >= 1")

    def to_json(self) -> str:
        return json.dumps(
            {
                "in_mels": self.in_mels,
                "in_frames": self.in_frames,
                "embed_dim": self.embed_dim,
                "stem_channels": self.stem_channels,
                "blocks": [list(b) for b in self.blocks],
                "standardize_input": self.standardize_input,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        raw = json.loads(text)
        raw["blocks"] = tuple(tuple(b) for b in raw["blocks"])
        return cls(**raw)


@dataclass
class NetworkParams:
    """Named parameter tensors in declaration order, plus the config."""

    tensors: dict[str, np.ndarray]
    config: NetworkConfig

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
            config=self.config,
        )


def _layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter declaration order: name -> shape."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem.w", (config.stem_channels, 1, 3, 3)),
        ("stem.b", (config.stem_channels,)),
    ]
    in_ch = config.stem_channels
    for i, (out_ch, stride) in enumerate(config.blocks, start=1):
        shapes.append((f"block{i}.conv1.w", (out_ch, in_ch, 3, 3)))
        shapes.append((f"block{i}.conv1.b", (out_ch,)))
        shapes.append((f"block{i}.conv2.w", (out_ch, out_ch, 3, 3)))
        shapes.append((f"block{i}.conv2.b", (out_ch,)))
        if out_ch != in_ch or stride != 1:
            shapes.append((f"block{i}.proj.w", (out_ch, in_ch, 1, 1)))
            shapes.append((f"block{i}.proj.b", (out_ch,)))
        in_ch = out_ch
    shapes.append(("head.w", (config.embed_dim, in_ch)))
    shapes.append(("head.b", (config.embed_dim,)))
    return shapes


def init_network(config: NetworkConfig, rng: np.random.Generator | None = None) -> NetworkParams:
    """He fan-in initialization for weights, zeros for biases (float32)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return NetworkParams(tensors=tensors, config=config)


# ---------------------------------------------------------------------------
# conv2d via im2col
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, H_out*W_out) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def _col2im(
    dcols: np.ndarray,
    x_shape: tuple[int, ...],
    kh: int,
    kw: int,
    stride: int,
    pad: int,
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    n, c, h, w = x_shape
    ho, wo = out_hw
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return dx


def _conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _conv_forward(x, weight, bias, stride, pad):
    n = x.shape[0]
    c_out, c_in, kh, kw = weight.shape
    ho, wo = _conv_out_hw(x.shape[2], x.shape[3], kh, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    w2 = weight.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, cols) + bias[:, None]
    return out.reshape(n, c_out, ho, wo)


def _conv_backward(x, weight, stride, pad, d_out):
    n = x.shape[0]
    c_out, c_in, kh, kw = weight.shape
    ho, wo = d_out.shape[2], d_out.shape[3]
    cols = _im2col(x, kh, kw, stride, pad)
    d2 = d_out.reshape(n, c_out, ho * wo)
    dw = np.einsum("ncl,nkl->ck", d2, cols).reshape(weight.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(c_out, -1).T, d2)
    dx = _col2im(dcols, x.shape, kh, kw, stride, pad, (ho, wo))
    return dw, db, dx


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ActivationCache:
    """Activations retained for the backward pass, keyed by layer."""

    params: NetworkParams
    acts: dict[str, np.ndarray]
    batched: bool


def _as_input_batch(params: NetworkParams, x) -> np.ndarray:
    cfg = params.config
    if isinstance(x, MelFeatures):
        x = x.values
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.in_mels or x.shape[2] != cfg.in_frames:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match "
            f"(n, {cfg.in_mels}, {cfg.in_frames})"
        )
    x = x.astype(params.dtype)
    if cfg.standardize_input:
        flat = x.reshape(x.shape[0], -1)
        mu = flat.mean(axis=1)[:, None, None]
        sd = flat.std(axis=1)[:, None, None]
        x = (x - mu) / (sd + 1e-5)
    return x[:, None]  # (N, 1, F, T)


def forward_batch(params: NetworkParams, x) -> tuple[np.ndarray, ActivationCache]:
    """Embed a batch; x is (N, F, T) (or (F, T) for a single sample).

    Returns (N, embed_dim) embeddings and the cache for backward_batch.
    """
    t = params.tensors
    x4 = _as_input_batch(params, x)
    acts: dict[str, np.ndarray] = {"x": x4}

    h = np.maximum(_conv_forward(x4, t["stem.w"], t["stem.b"], 1, 1), 0.0)
    acts["stem.out"] = h
    for i, (out_ch, stride) in enumerate(params.config.blocks, start=1):
        acts[f"block{i}.in"] = h
        r1 = np.maximum(_conv_forward(h, t[f"block{i}.conv1.w"], t[f"block{i}.conv1.b"], stride, 1), 0.0)
        acts[f"block{i}.r1"] = r1
        main = _conv_forward(r1, t[f"block{i}.conv2.w"], t[f"block{i}.conv2.b"], 1, 1)
        if f"block{i}.proj.w" in t:
            skip = _conv_forward(h, t[f"block{i}.proj.w"], t[f"block{i}.proj.b"], stride, 0)
        else:
            skip = h
        h = np.maximum(main + skip, 0.0)
        acts[f"block{i}.out"] = h
    pooled = h.mean(axis=(2, 3))
    acts["gap.in_shape"] = np.array(h.shape)
    emb = pooled @ t["head.w"].T + t["head.b"]
    acts["gap.out"] = pooled
    return emb, ActivationCache(params=params, acts=acts, batched=True)


def forward(params: NetworkParams, x) -> tuple[np.ndarray, ActivationCache]:
    """Embed one F x T sample; returns (embed_dim,) vector and cache."""
    emb, cache = forward_batch(params, x)
    cache.batched = False
    return emb[0], cache


def backward_batch(
    params: NetworkParams,
    cache: ActivationCache,
    grad_embedding: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of sum_n <emb_n, grad_n> w.r.t. every parameter."""
    if cache.params is not params:
        raise CacheMismatchError("cache was produced by a different params object")
    t = params.tensors
    acts = cache.acts
    n = acts["x"].shape[0]
    grad_embedding = np.asarray(grad_embedding, dtype=params.dtype)
    if grad_embedding.ndim == 1:
        grad_embedding = grad_embedding[None]
    if grad_embedding.shape != (n, params.config.embed_dim):
        raise CacheMismatchError(
            f"grad shape {grad_embedding.shape} does not match cached batch "
            f"({n}, {params.config.embed_dim})"
        )

    grads: dict[str, np.ndarray] = {}
    pooled = acts["gap.out"]
    grads["head.w"] = grad_embedding.T @ pooled
    grads["head.b"] = grad_embedding.sum(axis=0)
    d_pool = grad_embedding @ t["head.w"]

    shape = tuple(acts["gap.in_shape"])
    hw = shape[2] * shape[3]
    d = np.broadcast_to((d_pool / hw)[:, :, None, None], shape).astype(params.dtype).copy()

    for i in range(len(params.config.blocks), 0, -1):
        out_ch, stride = params.config.blocks[i - 1]
        d_sum = d * (acts[f"block{i}.out"] > 0)
        r1 = acts[f"block{i}.r1"]
        dw2, db2, d_r1 = _conv_backward(r1, t[f"block{i}.conv2.w"], 1, 1, d_sum)
        grads[f"block{i}.conv2.w"] = dw2
        grads[f"block{i}.conv2.b"] = db2
        d_p1 = d_r1 * (r1 > 0)
        x_in = acts[f"block{i}.in"]
        dw1, db1, d_main = _conv_backward(x_in, t[f"block{i}.conv1.w"], stride, 1, d_p1)
        grads[f"block{i}.conv1.w"] = dw1
        grads[f"block{i}.conv1.b"] = db1
        if f"block{i}.proj.w" in t:
            dwp, dbp, d_skip = _conv_backward(x_in, t[f"block{i}.proj.w"], stride, 0, d_sum)
            grads[f"block{i}.proj.w"] = dwp
            grads[f"block{i}.proj.b"] = dbp
        else:
            d_skip = d_sum
        d = d_main + d_skip

    d_pre = d * (acts["stem.out"] > 0)
    dw, db, _ = _conv_backward(acts["x"], t["stem.w"], 1, 1, d_pre)
    grads["stem.w"] = dw
    grads["stem.b"] = db
    return {name: grads[name] for name in t}  # declaration order


def backward(
    params: NetworkParams,
    cache: ActivationCache,
    grad_embedding: np.ndarray,
) -> dict[str, np.ndarray]:
    """Single-sample variant of backward_batch."""
    grad_embedding = np.asarray(grad_embedding)
    if grad_embedding.ndim != 1:
        raise ShapeMismatchError("single-sample backward expects a 1-D gradient")
    return backward_batch(params, cache, grad_embedding[None])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: NetworkParams, lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return AdamState(m=zeros(), v=zeros(), step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if set(grads) != set(params.tensors):
        raise ShapeMismatchError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise ShapeMismatchError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {k}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_t: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.tensors.items():
        g = grads[k].astype(p.dtype)
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * np.square(g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_t[k] = (p - update).astype(p.dtype)
        new_m[k] = m
        new_v[k] = v
    new_params = NetworkParams(tensors=new_t, config=params.config)
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state


# ---------------------------------------------------------------------------
# Checkpoints: "FSEDCKPT" | version u32 | n_params u64 | config JSON |
#              per tensor: name, shape header, f32 data (little endian)
# ---------------------------------------------------------------------------

def save_checkpoint(params: NetworkParams, path: str | Path) -> None:
    cfg_bytes = params.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, params.total_count))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CorruptCheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path: str | Path) -> NetworkParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(f"{path}: bad checkpoint magic")
        version, n_params = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpointError(f"{path}: unsupported version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = NetworkConfig.from_json(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, 4 * size, f"tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    expected = [name for name, _ in _layer_shapes(config)]
    if list(tensors) != expected:
        raise CorruptCheckpointError(f"{path}: tensor list does not match config layout")
    params = NetworkParams(tensors=tensors, config=config)
    if params.total_count != n_params:
        raise CorruptCheckpointError(
            f"{path}: header says {n_params} parameters, file holds {params.total_count}"
        )
    return params
