"""Forward/inverse STFT with real/imaginary stacking.

Analysis uses a symmetric Hann window of length 1023 zero-padded at the
tail to the 1024-point transform size, hop 248, no centering. A 1024-point
real transform yields 513 one-sided bins; the Nyquist bin is dropped so the
stacked tensor is [2, frames, 512], and inversion reconstructs it as zero.
Inversion is least-squares overlap-add (window-squared normalized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip
from .errors import ClipTooShort, ShapeMismatch

OLA_EPS = 1e-8
POWER_EPS = 1e-10


@dataclass
class StftConfig:
    window_length: int = 1023
    hop: int = 248
    frame_length: int = 1024

    def __post_init__(self):
        if self.window_length > self.frame_length:
            raise ValueError("window_length must be <= frame_length")
        if not 1 <= self.hop <= self.window_length:
            raise ValueError("hop must be in [1, window_length]")

    @property
    def bins(self) -> int:
        return self.frame_length // 2


@dataclass
class StackedSpectrogram:
    """Real tensor [2, frames, bins]: plane 0 real part, plane 1 imaginary."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ShapeMismatch(f"expected [2, F, B], got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def bins(self) -> int:
        return self.data.shape[2]


def make_window(cfg: StftConfig) -> np.ndarray:
    """Symmetric Hann w[n] = 0.5(1 - cos(2*pi*n/(L-1))), tail-padded with zeros."""
    n = np.arange(cfg.window_length)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (cfg.window_length - 1)))
    out = np.zeros(cfg.frame_length)
    out[: cfg.window_length] = w
    return out


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    """Frame count for an uncentered analysis: floor((n - frame)/hop) + 1."""
    if n_samples < cfg.frame_length:
        return 0
    return (n_samples - cfg.frame_length) // cfg.hop + 1


def stft_stack(clip: AudioClip, cfg: StftConfig | None = None) -> StackedSpectrogram:
    """Windowed real FFT per frame, keeping bins 0..bins-1 (Nyquist dropped)."""
    cfg = cfg or StftConfig()
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.shape[0] < cfg.frame_length:
        raise ClipTooShort(
            f"clip of {x.shape[0]} samples < frame_length {cfg.frame_length}"
        )
    f = num_frames(x.shape[0], cfg)
    window = make_window(cfg)

    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop * np.arange(f)[:, None]
    frames = x[idx] * window[None, :]
    spec = np.fft.rfft(frames, n=cfg.frame_length, axis=1)[:, : cfg.bins]
    return StackedSpectrogram(np.stack([spec.real, spec.imag]))


def istft_unstack(
    spec: StackedSpectrogram,
    cfg: StftConfig | None = None,
    out_len: int | None = None,
    sample_rate: int = 22050,
) -> AudioClip:
    """Least-squares overlap-add inversion; the dropped Nyquist bin is zero."""
    cfg = cfg or StftConfig()
    if spec.bins != cfg.bins:
        raise ShapeMismatch(f"expected {cfg.bins} bins, got {spec.bins}")
    f = spec.frames
    if out_len is None:
        out_len = (f - 1) * cfg.hop + cfg.frame_length
    window = make_window(cfg)

    full = np.zeros((f, cfg.bins + 1), dtype=np.complex128)
    full[:, : cfg.bins] = spec.data[0] + 1j * spec.data[1]
    frames = np.fft.irfft(full, n=cfg.frame_length, axis=1)

    span = (f - 1) * cfg.hop + cfg.frame_length
    num = np.zeros(span)
    den = np.zeros(span)
    for t in range(f):
        start = t * cfg.hop
        num[start : start + cfg.frame_length] += window * frames[t]
        den[start : start + cfg.frame_length] += window * window

    out = np.zeros(span)
    covered = den > OLA_EPS
    out[covered] = num[covered] / den[covered]

    if out_len <= span:
        out = out[:out_len]
    else:
        out = np.concatenate([out, np.zeros(out_len - span)])
    return AudioClip(out, sample_rate)


def spectral_views(spec: StackedSpectrogram) -> dict[str, np.ndarray]:
    """Magnitude, power in dB and phase views of a stacked spectrogram."""
    re, im = spec.data[0], spec.data[1]
    magnitude = np.sqrt(re * re + im * im)
    power_db = 10.0 * np.log10(magnitude * magnitude + POWER_EPS)
    phase = np.arctan2(im, re)
    phase = np.where(phase <= -np.pi, np.pi, phase)  # pin range to (-pi, pi]
    return {"magnitude": magnitude, "power_db": power_db, "phase": phase}
