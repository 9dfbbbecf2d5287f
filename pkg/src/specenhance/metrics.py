"""Objective quality metrics: SNR, log-spectral distance and STOI.

STOI follows the published short-time intelligibility procedure: both
signals are resampled to 10 kHz with a polyphase windowed-sinc filter,
silent frames (reference energy more than 40 dB below the loudest frame)
are removed, one-third-octave band envelopes are built from 256-sample
frames, and per-band correlations over 30-frame segments are averaged
after normalizing and clipping the processed vector at -15 dB SDR.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .audio_io import AudioClip, DatasetManifest, read_wav
from .errors import IoFailure, LengthMismatch, SilentReference, TooShort

EPS = np.finfo(np.float64).eps

SNR_CAP_DB = 100.0
SNR_NOISE_FLOOR = 1e-20

LSD_FRAME = 2048
LSD_HOP = 512
LSD_EPS = 1e-10

STOI_FS = 10_000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG_FRAMES = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
RESAMPLE_TAPS_PER_PHASE = 64


@dataclass
class MetricsRow:
    clip: str
    snr_db: float
    lsd: float
    stoi: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    mean_snr_db: float
    mean_lsd: float
    mean_stoi: float


def snr(y: AudioClip, y_hat: AudioClip) -> float:
    """10*log10(||y||^2 / ||y - y_hat||^2), capped at +100 dB."""
    if len(y) != len(y_hat):
        raise LengthMismatch(f"{len(y)} vs {len(y_hat)} samples")
    ref = np.asarray(y.samples, dtype=np.float64)
    est = np.asarray(y_hat.samples, dtype=np.float64)
    sig = float(np.sum(ref * ref))
    if sig == 0.0:
        raise SilentReference("reference signal is all zeros")
    noise = float(np.sum((ref - est) ** 2))
    if noise < SNR_NOISE_FLOOR:
        return SNR_CAP_DB
    return 10.0 * math.log10(sig / noise)


def _log_power_frames(x: np.ndarray) -> np.ndarray:
    """Hann-2048 framed log10 power spectra, hop 512, no centering."""
    n = np.arange(LSD_FRAME)
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (LSD_FRAME - 1)))
    n_frames = (x.shape[0] - LSD_FRAME) // LSD_HOP + 1
    idx = np.arange(LSD_FRAME)[None, :] + LSD_HOP * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * window[None, :], axis=1)
    return np.log10(np.abs(spec) ** 2 + LSD_EPS)


def lsd(y: AudioClip, y_hat: AudioClip) -> float:
    """Per-frame RMS over bins of the log power spectrum gap, frame-averaged."""
    if len(y) != len(y_hat):
        raise LengthMismatch(f"{len(y)} vs {len(y_hat)} samples")
    if len(y) < LSD_FRAME:
        raise TooShort(f"need at least {LSD_FRAME} samples, got {len(y)}")
    s_ref = _log_power_frames(np.asarray(y.samples, dtype=np.float64))
    s_est = _log_power_frames(np.asarray(y_hat.samples, dtype=np.float64))
    gap = s_ref - s_est
    return float(np.mean(np.sqrt(np.mean(gap * gap, axis=1))))


# -- STOI -------------------------------------------------------------------------

def _resample_filter(p: int, q: int, taps_per_phase: int) -> np.ndarray:
    n_taps = taps_per_phase * p + 1  # odd length keeps the group delay integral
    m = np.arange(n_taps) - (n_taps - 1) / 2.0
    fc = 1.0 / max(p, q)
    h = fc * np.sinc(fc * m) * np.hanning(n_taps)
    return h / h.sum()


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling with 64 taps per phase."""
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(int(sr_in), int(sr_out))
    p, q = sr_out // g, sr_in // g
    h = _resample_filter(p, q, RESAMPLE_TAPS_PER_PHASE)
    return sp_signal.resample_poly(np.asarray(x, dtype=np.float64), p, q, window=h)


def _frame_signal(x: np.ndarray, frame: int, hop: int, window: np.ndarray) -> np.ndarray:
    n_frames = (x.shape[0] - frame) // hop + 1
    if n_frames < 1:
        raise TooShort(f"need at least {frame} samples, got {x.shape[0]}")
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx] * window[None, :]


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _remove_silent_frames(x: np.ndarray, z: np.ndarray):
    """Drop frames whose reference energy trails the loudest by > 40 dB;
    kept windowed frames are overlap-added back into both signals."""
    w = _stoi_window()
    xf = _frame_signal(x, STOI_FRAME, STOI_HOP, w)
    zf = _frame_signal(z, STOI_FRAME, STOI_HOP, w)
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    mask = energies > energies.max() - STOI_DYN_RANGE_DB
    xf, zf = xf[mask], zf[mask]
    if xf.shape[0] == 0:
        raise TooShort("no frames above the silence threshold")
    out_len = (xf.shape[0] - 1) * STOI_HOP + STOI_FRAME
    x_out = np.zeros(out_len)
    z_out = np.zeros(out_len)
    for i in range(xf.shape[0]):
        sl = slice(i * STOI_HOP, i * STOI_HOP + STOI_FRAME)
        x_out[sl] += xf[i]
        z_out[sl] += zf[i]
    return x_out, z_out


def _third_octave_matrix() -> np.ndarray:
    """Boolean [bands, bins] matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, STOI_FS, STOI_NFFT + 1)[: STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS, dtype=np.float64)
    freq_low = STOI_MIN_FREQ * 2.0 ** ((2.0 * k - 1.0) / 6.0)
    freq_high = STOI_MIN_FREQ * 2.0 ** ((2.0 * k + 1.0) / 6.0)
    obm = np.zeros((STOI_BANDS, f.shape[0]))
    for i in range(STOI_BANDS):
        lo = int(np.argmin(np.square(f - freq_low[i])))
        hi = int(np.argmin(np.square(f - freq_high[i])))
        obm[i, lo:hi] = 1.0
    return obm


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    w = _stoi_window()
    frames = _frame_signal(x, STOI_FRAME, STOI_HOP, w)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    power = (np.abs(spec) ** 2).T  # [bins, frames]
    return np.sqrt(_third_octave_matrix() @ power)  # [bands, frames]


def stoi(y: AudioClip, y_hat: AudioClip) -> float:
    """Short-time objective intelligibility of y_hat against reference y."""
    if len(y) != len(y_hat):
        raise LengthMismatch(f"{len(y)} vs {len(y_hat)} samples")
    x = resample(y.samples, y.sample_rate, STOI_FS)
    z = resample(y_hat.samples, y_hat.sample_rate, STOI_FS)
    x, z = _remove_silent_frames(x, z)

    xb = _band_envelopes(x)
    zb = _band_envelopes(z)
    n_frames = xb.shape[1]
    if n_frames < STOI_SEG_FRAMES:
        raise TooShort(
            f"need {STOI_SEG_FRAMES} analysis frames, got {n_frames}"
        )

    # sliding 30-frame segments: [segments, bands, 30]
    starts = np.arange(n_frames - STOI_SEG_FRAMES + 1)
    seg_idx = starts[:, None] + np.arange(STOI_SEG_FRAMES)[None, :]
    x_seg = xb[:, seg_idx].transpose(1, 0, 2)
    z_seg = zb[:, seg_idx].transpose(1, 0, 2)

    norm_const = np.linalg.norm(x_seg, axis=2, keepdims=True) / (
        np.linalg.norm(z_seg, axis=2, keepdims=True) + EPS
    )
    z_norm = z_seg * norm_const
    clip_gain = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    z_prime = np.minimum(z_norm, x_seg * clip_gain)

    x_c = x_seg - x_seg.mean(axis=2, keepdims=True)
    z_c = z_prime - z_prime.mean(axis=2, keepdims=True)
    x_c = x_c / (np.linalg.norm(x_c, axis=2, keepdims=True) + EPS)
    z_c = z_c / (np.linalg.norm(z_c, axis=2, keepdims=True) + EPS)
    return float(np.sum(x_c * z_c) / (x_seg.shape[0] * STOI_BANDS))


# -- batch evaluation ----------------------------------------------------------------

def evaluate_testset(
    manifest: DatasetManifest,
    mdl,
    out_path,
    bypass: bool = False,
    threads: int = 1,
) -> MetricsReport:
    """Enhance each test pair's degraded clip and score it against the
    reference; `mdl` is a ModelParams or QuantizedModel. With bypass=True the
    reference itself is scored (oracle sanity path)."""
    from .cli import enhance_clip  # local import; cli depends on this module

    entries = manifest.for_split("test")

    def evaluate_entry(entry):
        degraded = read_wav(entry.degraded_path)
        reference = read_wav(entry.reference_path)
        if bypass:
            enhanced = reference
        else:
            enhanced, _ = enhance_clip(mdl, degraded)
        return MetricsRow(
            clip=Path(entry.degraded_path).stem,
            snr_db=snr(reference, enhanced),
            lsd=lsd(reference, enhanced),
            stoi=stoi(reference, enhanced),
        )

    if threads > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate_entry, entries))
    else:
        rows = [evaluate_entry(e) for e in entries]

    if rows:
        means = (
            float(np.mean([r.snr_db for r in rows])),
            float(np.mean([r.lsd for r in rows])),
            float(np.mean([r.stoi for r in rows])),
        )
    else:
        means = (math.nan, math.nan, math.nan)
    report = MetricsReport(rows, *means)

    lines = ["clip,snr_db,lsd,stoi"]
    lines += [f"{r.clip},{r.snr_db!r},{r.lsd!r},{r.stoi!r}" for r in rows]
    lines.append(f"MEAN,{report.mean_snr_db!r},{report.mean_lsd!r},{report.mean_stoi!r}")
    try:
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write report {out_path}: {exc}") from exc
    return report
