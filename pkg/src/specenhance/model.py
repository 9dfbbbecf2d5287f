"""Residual stack of depthwise-separable convolutional autoencoder blocks.

Each block is 2 -> 256 -> 2 channels: a 5x5 depthwise convolution feeding a
pointwise (1x1) expansion, a per-channel PReLU, then a second depthwise +
pointwise pair projecting back, with an identity skip around the block.
Spatial shape is preserved via stride 1 and replicate-edge padding. No bias
terms anywhere. The backward pass is analytic reverse mode written against
the same primitives as the forward pass.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CacheMismatch,
    ChecksumMismatch,
    IoFailure,
    ShapeTooSmall,
    VersionUnsupported,
)

CHECKPOINT_MAGIC = b"ASE1"
CHECKPOINT_VERSION = 1

BLOCK_TENSOR_NAMES = ("dw1", "pw1", "alpha", "dw2", "pw2")


@dataclass
class ModelConfig:
    n_blocks: int = 1
    latent_channels: int = 256
    kernel_size: int = 5
    io_channels: int = 2

    def __post_init__(self):
        if self.n_blocks < 1 or self.latent_channels < 1:
            raise ValueError("n_blocks and latent_channels must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


@dataclass
class BlockParams:
    """One block's trainable tensors; also reused as the gradient container."""

    dw1: np.ndarray  # [io, k, k]
    pw1: np.ndarray  # [latent, io]
    alpha: np.ndarray  # [latent] PReLU slopes
    dw2: np.ndarray  # [latent, k, k]
    pw2: np.ndarray  # [io, latent]

    def tensors(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class ModelParams:
    config: ModelConfig
    blocks: list[BlockParams]
    norm_scale: float = 1.0


def param_count(cfg: ModelConfig) -> int:
    k2 = cfg.kernel_size**2
    per_block = (
        cfg.io_channels * k2  # dw1
        + cfg.latent_channels * cfg.io_channels  # pw1
        + cfg.latent_channels  # alpha
        + cfg.latent_channels * k2  # dw2
        + cfg.io_channels * cfg.latent_channels  # pw2
    )
    return cfg.n_blocks * per_block


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """He-style uniform init: kernels ~ U[-sqrt(6/fan_in), sqrt(6/fan_in)].

    Depthwise kernels see one channel each so fan_in = kernel_size^2;
    pointwise fan_in is the input channel count. PReLU slopes start at 0.
    """
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockParams(
                dw1=uniform((cfg.io_channels, k, k), k * k),
                pw1=uniform((cfg.latent_channels, cfg.io_channels), cfg.io_channels),
                alpha=np.zeros(cfg.latent_channels, dtype=np.float32),
                dw2=uniform((cfg.latent_channels, k, k), k * k),
                pw2=uniform((cfg.io_channels, cfg.latent_channels), cfg.latent_channels),
            )
        )
    return ModelParams(cfg, blocks)


def zero_params(cfg: ModelConfig) -> ModelParams:
    """All-zero kernels and slopes: the forward pass is the identity map."""
    k = cfg.kernel_size
    blocks = [
        BlockParams(
            dw1=np.zeros((cfg.io_channels, k, k), dtype=np.float32),
            pw1=np.zeros((cfg.latent_channels, cfg.io_channels), dtype=np.float32),
            alpha=np.zeros(cfg.latent_channels, dtype=np.float32),
            dw2=np.zeros((cfg.latent_channels, k, k), dtype=np.float32),
            pw2=np.zeros((cfg.io_channels, cfg.latent_channels), dtype=np.float32),
        )
        for _ in range(cfg.n_blocks)
    ]
    return ModelParams(cfg, blocks)


def zero_like_blocks(params: ModelParams) -> list[BlockParams]:
    return [
        BlockParams(*(np.zeros_like(t) for t in b.tensors())) for b in params.blocks
    ]


def cast_params(params: ModelParams, dtype) -> ModelParams:
    blocks = [BlockParams(*(t.astype(dtype) for t in b.tensors())) for b in params.blocks]
    return ModelParams(params.config, blocks, params.norm_scale)


# -- convolution primitives ---------------------------------------------------

def pad_replicate(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge")


def pad_replicate_backward(dpad: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of replicate padding: border gradients fold onto edge pixels."""
    d = dpad.copy()
    d[:, p, :] += d[:, :p, :].sum(axis=1)
    d[:, -p - 1, :] += d[:, -p:, :].sum(axis=1)
    d = d[:, p:-p, :]
    d[:, :, p] += d[:, :, :p].sum(axis=2)
    d[:, :, -p - 1] += d[:, :, -p:].sum(axis=2)
    return d[:, :, p:-p]


def depthwise_conv(xpad: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Per-channel valid cross-correlation of padded input [C,H+2p,W+2p]."""
    k = kern.shape[-1]
    h = xpad.shape[1] - k + 1
    w = xpad.shape[2] - k + 1
    out = np.zeros((xpad.shape[0], h, w), dtype=xpad.dtype)
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            np.multiply(xpad[:, i : i + h, j : j + w], kern[:, i, j, None, None], out=tmp)
            out += tmp
    return out


def depthwise_conv_backward(xpad, kern, dout):
    """Gradients of depthwise_conv w.r.t. kernel and the padded input."""
    k = kern.shape[-1]
    h, w = dout.shape[1], dout.shape[2]
    dkern = np.zeros_like(kern)
    dxpad = np.zeros_like(xpad)
    for i in range(k):
        for j in range(k):
            dkern[:, i, j] = np.einsum("chw,chw->c", xpad[:, i : i + h, j : j + w], dout)
            dxpad[:, i : i + h, j : j + w] += kern[:, i, j, None, None] * dout
    return dkern, dxpad


def pointwise_conv(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """1x1 channel mixing: [C,H,W] x [O,C] -> [O,H,W]."""
    c, h, w = x.shape
    return (weights @ x.reshape(c, h * w)).reshape(-1, h, w)


def pointwise_conv_backward(x, weights, dout):
    c, h, w = x.shape
    o = weights.shape[0]
    dw = dout.reshape(o, h * w) @ x.reshape(c, h * w).T
    dx = (weights.T @ dout.reshape(o, h * w)).reshape(c, h, w)
    return dw, dx


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, alpha[:, None, None] * x)


# -- forward / backward -------------------------------------------------------

def forward(params: ModelParams, x: np.ndarray, want_cache: bool = True):
    """Apply all blocks in sequence; returns (y, cache) with cache=None when
    want_cache is False. x is the raw [2, F, B] plane tensor."""
    cfg = params.config
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != cfg.io_channels:
        raise ShapeTooSmall(f"expected [{cfg.io_channels}, F, B] input, got {x.shape}")
    if x.shape[1] < cfg.kernel_size or x.shape[2] < cfg.kernel_size:
        raise ShapeTooSmall(
            f"spatial extent {x.shape[1:]} smaller than kernel {cfg.kernel_size}"
        )
    p = cfg.kernel_size // 2

    cache = [] if want_cache else None
    cur = x
    for b in params.blocks:
        dw1 = b.dw1.astype(cur.dtype, copy=False)
        pw1 = b.pw1.astype(cur.dtype, copy=False)
        alpha = b.alpha.astype(cur.dtype, copy=False)
        dw2 = b.dw2.astype(cur.dtype, copy=False)
        pw2 = b.pw2.astype(cur.dtype, copy=False)

        h_dw1 = depthwise_conv(pad_replicate(cur, p), dw1)
        h1 = pointwise_conv(h_dw1, pw1)
        h2 = prelu(h1, alpha)
        h_dw2 = depthwise_conv(pad_replicate(h2, p), dw2)
        h3 = pointwise_conv(h_dw2, pw2)
        nxt = h3 + cur
        if want_cache:
            cache.append((cur, h_dw1, h1, h2, h_dw2))
        cur = nxt
    return cur, cache


def backward(params: ModelParams, cache, dL_dy: np.ndarray):
    """Exact reverse-mode gradients for every tensor plus dL/dx.

    PReLU uses subgradient 1 at 0 on the input branch; the alpha branch
    accumulates the pre-activation only where it is strictly negative.
    """
    cfg = params.config
    if cache is None or len(cache) != cfg.n_blocks:
        raise CacheMismatch("cache does not match the model's block count")
    p = cfg.kernel_size // 2
    dL_dy = np.asarray(dL_dy)
    if cache and dL_dy.shape != cache[0][0].shape:
        raise CacheMismatch(
            f"gradient shape {dL_dy.shape} does not match cached input {cache[0][0].shape}"
        )

    grads = []
    d = dL_dy
    for b, (x_in, h_dw1, h1, h2, h_dw2) in zip(
        reversed(params.blocks), reversed(cache)
    ):
        dw1 = b.dw1.astype(d.dtype, copy=False)
        pw1 = b.pw1.astype(d.dtype, copy=False)
        alpha = b.alpha.astype(d.dtype, copy=False)
        dw2 = b.dw2.astype(d.dtype, copy=False)
        pw2 = b.pw2.astype(d.dtype, copy=False)

        # out = pw2(dw2(pad(h2))) + x_in
        d_pw2, d_hdw2 = pointwise_conv_backward(h_dw2, pw2, d)
        d_dw2, d_h2pad = depthwise_conv_backward(pad_replicate(h2, p), dw2, d_hdw2)
        d_h2 = pad_replicate_backward(d_h2pad, p)

        neg = h1 < 0
        d_h1 = d_h2 * np.where(neg, alpha[:, None, None], 1.0)
        d_alpha = np.where(neg, d_h2 * h1, 0.0).sum(axis=(1, 2))

        d_pw1, d_hdw1 = pointwise_conv_backward(h_dw1, pw1, d_h1)
        d_dw1, d_xpad = depthwise_conv_backward(pad_replicate(x_in, p), dw1, d_hdw1)
        d_x = pad_replicate_backward(d_xpad, p)

        grads.append(BlockParams(d_dw1, d_pw1, d_alpha, d_dw2, d_pw2))
        d = d_x + d  # identity skip adds dL/dy once per block

    grads.reverse()
    return grads, d


# -- checkpoint serialization -------------------------------------------------

def _pack_tensor(t: np.ndarray) -> bytes:
    out = struct.pack("<I", t.ndim)
    out += struct.pack(f"<{t.ndim}I", *t.shape)
    out += t.astype("<f4").tobytes()
    return out


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    body = CHECKPOINT_MAGIC
    body += struct.pack(
        "<IIIIf",
        CHECKPOINT_VERSION,
        cfg.n_blocks,
        cfg.latent_channels,
        cfg.kernel_size,
        params.norm_scale,
    )
    for b in params.blocks:
        for t in b.tensors():
            body += _pack_tensor(t)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    try:
        with open(path, "wb") as fh:
            fh.write(body)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumMismatch("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise ChecksumMismatch(f"implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = self.take(4 * count)
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def load_checkpoint(path) -> ModelParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc

    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a model checkpoint")
    if len(data) < 8:
        raise ChecksumMismatch("checkpoint truncated")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 trailer does not match")

    r = _Reader(data[:-4], 4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version} unsupported")
    n_blocks = r.u32()
    latent = r.u32()
    kernel = r.u32()
    norm_scale = r.f32()

    blocks = []
    for _ in range(n_blocks):
        blocks.append(BlockParams(*(r.tensor() for _ in BLOCK_TENSOR_NAMES)))
    io_channels = blocks[0].dw1.shape[0] if blocks else 2
    cfg = ModelConfig(n_blocks, latent, kernel, io_channels)
    return ModelParams(cfg, blocks, norm_scale)
