"""Post-training weight quantization and the integer inference path.

Weights are quantized per-tensor, symmetric around zero (scale = max-abs/127,
zero-point 0). At inference each convolution's input activations are
quantized dynamically from their live max-abs, products accumulate in int32,
and results are dequantized by (input scale x weight scale). PReLU slopes
and skip additions stay in float. A float16 storage variant keeps the float
forward path but halves the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import (
    BadMagic,
    ChecksumMismatch,
    IoFailure,
    NonFiniteInput,
    ShapeTooSmall,
    VersionUnsupported,
)
from .model import BlockParams, ModelConfig, ModelParams

QUANT_MAGIC = b"ASEQ"
QUANT_VERSION = 1
QMAX = 127

DTYPE_INT8 = 0
DTYPE_F32 = 1
DTYPE_F16 = 2

MODE_INT8 = "int8"
MODE_F16 = "float16"


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int8 (MODE_INT8) or float16 (MODE_F16)
    scale: float = 1.0

    def dequantize(self) -> np.ndarray:
        if self.values.dtype == np.int8:
            return self.values.astype(np.float32) * np.float32(self.scale)
        return self.values.astype(np.float32)


@dataclass
class QuantizedBlock:
    dw1: QuantizedTensor
    pw1: QuantizedTensor
    alpha: np.ndarray  # kept float32
    dw2: QuantizedTensor
    pw2: QuantizedTensor


@dataclass
class QuantizedModel:
    config: ModelConfig
    blocks: list[QuantizedBlock]
    norm_scale: float = 1.0
    mode: str = MODE_INT8


def quantize_tensor(t: np.ndarray) -> QuantizedTensor:
    """Symmetric int8: scale = max|t|/127 (1 for all-zero), q = round(t/scale)."""
    t = np.asarray(t)
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("tensor contains NaN or infinity")
    max_abs = float(np.max(np.abs(t))) if t.size else 0.0
    scale = max_abs / QMAX if max_abs > 0 else 1.0
    q = np.clip(np.round(t / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale)


def quantize_model(params: ModelParams, mode: str = MODE_INT8) -> QuantizedModel:
    """Quantize every convolution kernel; PReLU slopes stay float32."""
    if mode not in (MODE_INT8, MODE_F16):
        raise ValueError(f"unknown quantization mode {mode!r}")

    def pack(t: np.ndarray) -> QuantizedTensor:
        if mode == MODE_INT8:
            return quantize_tensor(t)
        if not np.all(np.isfinite(t)):
            raise NonFiniteInput("tensor contains NaN or infinity")
        return QuantizedTensor(t.astype(np.float16), 1.0)

    blocks = [
        QuantizedBlock(
            dw1=pack(b.dw1),
            pw1=pack(b.pw1),
            alpha=b.alpha.astype(np.float32),
            dw2=pack(b.dw2),
            pw2=pack(b.pw2),
        )
        for b in params.blocks
    ]
    return QuantizedModel(params.config, blocks, params.norm_scale, mode)


def dequantize_model(qm: QuantizedModel) -> ModelParams:
    blocks = [
        BlockParams(
            dw1=qb.dw1.dequantize(),
            pw1=qb.pw1.dequantize(),
            alpha=qb.alpha.astype(np.float32),
            dw2=qb.dw2.dequantize(),
            pw2=qb.pw2.dequantize(),
        )
        for qb in qm.blocks
    ]
    return ModelParams(qm.config, blocks, qm.norm_scale)


# -- integer inference ----------------------------------------------------------

def _quantize_activations(x: np.ndarray) -> tuple[np.ndarray, float]:
    max_abs = float(np.max(np.abs(x))) if x.size else 0.0
    scale = max_abs / QMAX if max_abs > 0 else 1.0
    q = np.clip(np.round(x / scale), -QMAX, QMAX).astype(np.int8)
    return q, scale


def _int_depthwise(x: np.ndarray, qt: QuantizedTensor, pad: int) -> np.ndarray:
    xq, sx = _quantize_activations(x)
    xpad = model_mod.pad_replicate(xq, pad).astype(np.int32)
    acc = model_mod.depthwise_conv(xpad, qt.values.astype(np.int32))
    return acc.astype(np.float32) * np.float32(sx * qt.scale)


def _int_pointwise(x: np.ndarray, qt: QuantizedTensor) -> np.ndarray:
    xq, sx = _quantize_activations(x)
    acc = model_mod.pointwise_conv(xq.astype(np.int32), qt.values.astype(np.int32))
    return acc.astype(np.float32) * np.float32(sx * qt.scale)


def quantized_forward(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Forward pass with per-convolution dynamic activation quantization."""
    if qm.mode == MODE_F16:
        y, _ = model_mod.forward(dequantize_model(qm), x, want_cache=False)
        return y

    cfg = qm.config
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != cfg.io_channels:
        raise ShapeTooSmall(f"expected [{cfg.io_channels}, F, B] input, got {x.shape}")
    if x.shape[1] < cfg.kernel_size or x.shape[2] < cfg.kernel_size:
        raise ShapeTooSmall(
            f"spatial extent {x.shape[1:]} smaller than kernel {cfg.kernel_size}"
        )
    p = cfg.kernel_size // 2

    cur = x
    for qb in qm.blocks:
        h = _int_depthwise(cur, qb.dw1, p)
        h = _int_pointwise(h, qb.pw1)
        h = model_mod.prelu(h, qb.alpha)
        h = _int_depthwise(h, qb.dw2, p)
        h = _int_pointwise(h, qb.pw2)
        cur = h + cur
    return cur


# -- serialization ----------------------------------------------------------------

def _pack_qtensor(qt: QuantizedTensor) -> bytes:
    v = qt.values
    if v.dtype == np.int8:
        tag, payload = DTYPE_INT8, v.astype("<i1").tobytes()
    elif v.dtype == np.float16:
        tag, payload = DTYPE_F16, v.astype("<f2").tobytes()
    else:
        tag, payload = DTYPE_F32, v.astype("<f4").tobytes()
    out = struct.pack("<B", tag)
    out += struct.pack("<I", v.ndim)
    out += struct.pack(f"<{v.ndim}I", *v.shape)
    if tag == DTYPE_INT8:
        out += struct.pack("<f", qt.scale)
    return out + payload


def save_quantized(qm: QuantizedModel, path) -> None:
    cfg = qm.config
    body = QUANT_MAGIC
    body += struct.pack(
        "<IIIIf",
        QUANT_VERSION,
        cfg.n_blocks,
        cfg.latent_channels,
        cfg.kernel_size,
        qm.norm_scale,
    )
    for qb in qm.blocks:
        body += _pack_qtensor(qb.dw1)
        body += _pack_qtensor(qb.pw1)
        body += _pack_qtensor(QuantizedTensor(qb.alpha.astype(np.float32)))
        body += _pack_qtensor(qb.dw2)
        body += _pack_qtensor(qb.pw2)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    try:
        with open(path, "wb") as fh:
            fh.write(body)
    except OSError as exc:
        raise IoFailure(f"cannot write quantized checkpoint {path}: {exc}") from exc


class _QReader(model_mod._Reader):
    def qtensor(self) -> QuantizedTensor:
        tag = struct.unpack("<B", self.take(1))[0]
        rank = self.u32()
        if rank > 8:
            raise ChecksumMismatch(f"implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        if tag == DTYPE_INT8:
            scale = self.f32()
            values = np.frombuffer(self.take(count), dtype="<i1").reshape(dims).copy()
            return QuantizedTensor(values, scale)
        if tag == DTYPE_F16:
            values = np.frombuffer(self.take(2 * count), dtype="<f2").reshape(dims).copy()
            return QuantizedTensor(values, 1.0)
        if tag == DTYPE_F32:
            values = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).copy()
            return QuantizedTensor(values, 1.0)
        raise ChecksumMismatch(f"unknown tensor dtype tag {tag}")


def load_quantized(path) -> QuantizedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read quantized checkpoint {path}: {exc}") from exc

    if len(data) < 4 or data[:4] != QUANT_MAGIC:
        raise BadMagic(f"{path}: not a quantized checkpoint")
    if len(data) < 8:
        raise ChecksumMismatch("quantized checkpoint truncated")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 trailer does not match")

    r = _QReader(data[:-4], 4)
    version = r.u32()
    if version != QUANT_VERSION:
        raise VersionUnsupported(f"quantized checkpoint version {version} unsupported")
    n_blocks = r.u32()
    latent = r.u32()
    kernel = r.u32()
    norm_scale = r.f32()

    blocks = []
    mode = MODE_INT8
    for _ in range(n_blocks):
        dw1 = r.qtensor()
        pw1 = r.qtensor()
        alpha = r.qtensor().values.astype(np.float32)
        dw2 = r.qtensor()
        pw2 = r.qtensor()
        blocks.append(QuantizedBlock(dw1, pw1, alpha, dw2, pw2))
        if dw1.values.dtype == np.float16:
            mode = MODE_F16
    io_channels = blocks[0].dw1.values.shape[0] if blocks else 2
    cfg = ModelConfig(n_blocks, latent, kernel, io_channels)
    return QuantizedModel(cfg, blocks, norm_scale, mode)
