"""Mini-batch Adam training with a decaying triangular learning-rate cycle.

Each pair is loaded from the manifest, center-cropped, transformed to
stacked spectrograms and normalized by the degraded clip's max-abs scale.
Per-epoch CSV rows go to train_log.csv and the best-validation parameters
are checkpointed.
"""

from __future__ import annotations

import dataclasses
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .audio_io import DatasetManifest, ManifestEntry, center_crop, read_wav
from .errors import ConfigError, EmptyTrainSet, PairLengthMismatch, ShapeMismatch
from .losses import SsimConfig, total_loss
from .model import BlockParams, ModelConfig, ModelParams
from .stft import StackedSpectrogram, StftConfig, stft_stack

TRAIN_CROP_SAMPLES = 100_000
NORM_FLOOR = 1e-8
# Datasets at or below this many pairs keep their spectrograms in memory.
CACHE_LIMIT = 256


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    min_lr: float = 1e-4
    max_lr: float = 1e-3
    cycle_period: int = 10  # epochs per triangular cycle
    lr_decay: float = 5e-4  # multiplicative (1 - decay) per optimizer step
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the best checkpoint

    def __post_init__(self):
        if not 0 < self.min_lr <= self.max_lr:
            raise ValueError("need 0 < min_lr <= max_lr")
        if not 0 <= self.lr_decay < 1:
            raise ValueError("lr_decay must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: list[BlockParams]
    v: list[BlockParams]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams  # best-validation parameters
    log: list[EpochRecord]
    checkpoint_path: Path
    log_path: Path


def init_adam_state(params: ModelParams, cfg: TrainConfig | None = None) -> AdamState:
    cfg = cfg or TrainConfig()
    return AdamState(
        m=model_mod.zero_like_blocks(params),
        v=model_mod.zero_like_blocks(params),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )


def lr_at_step(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Triangular wave min->max->min per cycle, decayed by (1-decay)^step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    period = max(1, cfg.cycle_period * max(1, steps_per_epoch))
    phase = (step % period) / period
    tri = 1.0 - abs(2.0 * phase - 1.0)
    return (cfg.min_lr + (cfg.max_lr - cfg.min_lr) * tri) * (1.0 - cfg.lr_decay) ** step


def adam_step(
    params: ModelParams, grads: list[BlockParams], state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update, applied in place and returned."""
    if len(grads) != len(params.blocks):
        raise ShapeMismatch("gradient block count does not match params")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for pb, gb, mb, vb in zip(params.blocks, grads, state.m, state.v):
        for theta, g, m, v in zip(pb.tensors(), gb.tensors(), mb.tensors(), vb.tensors()):
            if theta.shape != g.shape:
                raise ShapeMismatch(
                    f"gradient shape {g.shape} does not match parameter {theta.shape}"
                )
            g = g.astype(theta.dtype, copy=False)
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# -- data loading --------------------------------------------------------------

def load_pair_spectra(
    entry: ManifestEntry, stft_cfg: StftConfig, crop: int = TRAIN_CROP_SAMPLES
) -> tuple[StackedSpectrogram, StackedSpectrogram, float]:
    """(degraded, reference) spectrograms normalized by the degraded scale."""
    degraded = read_wav(entry.degraded_path)
    reference = read_wav(entry.reference_path)
    if len(degraded) != len(reference):
        raise PairLengthMismatch(
            f"{entry.degraded_path} has {len(degraded)} samples but "
            f"{entry.reference_path} has {len(reference)}"
        )
    degraded = center_crop(degraded, crop)
    reference = center_crop(reference, crop)
    deg_spec = stft_stack(degraded, stft_cfg)
    ref_spec = stft_stack(reference, stft_cfg)
    scale = max(NORM_FLOOR, float(np.max(np.abs(deg_spec.data))))
    deg_spec.data /= scale
    ref_spec.data /= scale
    return deg_spec, ref_spec, scale


class _PairSource:
    """Loads manifest pairs, caching spectrograms for small datasets."""

    def __init__(self, entries, stft_cfg, crop=TRAIN_CROP_SAMPLES):
        self.entries = entries
        self.stft_cfg = stft_cfg
        self.crop = crop
        self._cache: dict[int, tuple] = {}
        self._may_cache = len(entries) <= CACHE_LIMIT

    def __len__(self):
        return len(self.entries)

    def get(self, idx: int):
        if idx in self._cache:
            return self._cache[idx]
        item = load_pair_spectra(self.entries[idx], self.stft_cfg, self.crop)
        if self._may_cache:
            self._cache[idx] = item
        return item


def _sample_loss_and_grads(params, deg_spec, ref_spec, ssim_cfg):
    y, cache = model_mod.forward(params, deg_spec.data.astype(np.float32))
    loss, grad = total_loss(StackedSpectrogram(y), ref_spec, ssim_cfg)
    grads, _ = model_mod.backward(params, cache, grad.astype(np.float32))
    return loss, grads


def _sample_loss(params, deg_spec, ref_spec, ssim_cfg):
    y, _ = model_mod.forward(params, deg_spec.data.astype(np.float32), want_cache=False)
    loss, _ = total_loss(StackedSpectrogram(y), ref_spec, ssim_cfg)
    return loss


def batch_gradients(params, items, ssim_cfg, threads: int = 1):
    """Mean loss and mean per-sample gradients over one batch, reduced in
    index order so the result is independent of worker scheduling."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    lambda it: _sample_loss_and_grads(params, it[0], it[1], ssim_cfg),
                    items,
                )
            )
    else:
        results = [
            _sample_loss_and_grads(params, deg, ref, ssim_cfg) for deg, ref in items
        ]

    mean_loss = float(np.mean([r[0] for r in results]))
    inv = 1.0 / len(results)
    acc = model_mod.zero_like_blocks(params)
    for _, grads in results:
        for ab, gb in zip(acc, grads):
            for a, g in zip(ab.tensors(), gb.tensors()):
                a += inv * g.astype(a.dtype, copy=False)
    return mean_loss, acc


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    ssim_cfg: SsimConfig | None = None,
    out_dir="train_out",
    stft_cfg: StftConfig | None = None,
    threads: int = 1,
    crop: int = TRAIN_CROP_SAMPLES,
) -> TrainResult:
    """Run the full loop and checkpoint the best-validation parameters."""
    ssim_cfg = ssim_cfg or SsimConfig()
    stft_cfg = stft_cfg or StftConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_entries = manifest.for_split("train")
    val_entries = manifest.for_split("val")
    if not train_entries:
        raise EmptyTrainSet("manifest has no train entries")

    train_src = _PairSource(train_entries, stft_cfg, crop)
    val_src = _PairSource(val_entries, stft_cfg, crop)

    params = model_mod.init_params(model_cfg, train_cfg.seed)
    state = init_adam_state(params, train_cfg)

    n = len(train_src)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    order_rng = random.Random(train_cfg.seed)

    log: list[EpochRecord] = []
    log_path = out_dir / "train_log.csv"
    ckpt_path = out_dir / "best.ckpt"
    best_val = np.inf
    step = 0
    log_lines = ["epoch,step,lr,train_loss,val_loss"]

    for epoch in range(1, train_cfg.epochs + 1):
        order = list(range(n))
        order_rng.shuffle(order)
        epoch_losses = []
        lr = train_cfg.min_lr
        for start in range(0, n, train_cfg.batch_size):
            batch_idx = order[start : start + train_cfg.batch_size]
            items = [train_src.get(i)[:2] for i in batch_idx]
            lr = lr_at_step(train_cfg, step, steps_per_epoch)
            loss, grads = batch_gradients(params, items, ssim_cfg, threads)
            params, state = adam_step(params, grads, state, lr)
            epoch_losses.append(loss)
            step += 1

        if val_entries:
            val_losses = [
                _sample_loss(params, *val_src.get(i)[:2], ssim_cfg)
                for i in range(len(val_src))
            ]
            val_loss = float(np.mean(val_losses))
        else:
            val_loss = float(np.mean(epoch_losses))

        rec = EpochRecord(epoch, step, lr, float(np.mean(epoch_losses)), val_loss)
        log.append(rec)
        log_lines.append(
            f"{rec.epoch},{rec.step},{rec.lr!r},{rec.train_loss!r},{rec.val_loss!r}"
        )

        if val_loss < best_val:
            best_val = val_loss
            model_mod.save_checkpoint(params, ckpt_path)
        if train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            model_mod.save_checkpoint(params, out_dir / f"epoch_{epoch:04d}.ckpt")

    log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    best = model_mod.load_checkpoint(ckpt_path)
    return TrainResult(best, log, ckpt_path, log_path)


# -- config file ----------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """`key = value` lines; blank lines and '#' comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def configs_from_mapping(
    mapping: dict[str, str],
) -> tuple[ModelConfig, TrainConfig, SsimConfig]:
    """Distribute flat key/value pairs onto the three config dataclasses.

    Unknown keys are errors; values are coerced by the field's type.
    """
    targets = [(ModelConfig, {}), (TrainConfig, {}), (SsimConfig, {})]
    field_map: dict[str, tuple[int, type]] = {}
    for i, (cls, _) in enumerate(targets):
        for f in dataclasses.fields(cls):
            field_map[f.name] = (i, f)

    for key, raw in mapping.items():
        if key not in field_map:
            raise ConfigError(f"unknown config key {key!r}")
        i, f = field_map[key]
        try:
            targets[i][1][key] = _coerce(raw, f.type)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc

    try:
        return tuple(cls(**kwargs) for cls, kwargs in targets)  # type: ignore[return-value]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(raw: str, annotation) -> object:
    ann = str(annotation)
    if "int" in ann:
        return int(raw)
    if "float" in ann and "None" in ann:
        return None if raw.lower() in ("none", "auto") else float(raw)
    if "float" in ann:
        return float(raw)
    return raw
