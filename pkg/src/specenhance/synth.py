"""Synthetic signal generators for smoke tests and benchmarks.

The smoke dataset pairs a random harmonic signal (reference) with its
low-pass-filtered copy (degraded), standing in for the encoder pipeline so
nothing here depends on an external codec or corpus.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import AudioClip, DatasetManifest, ManifestEntry, save_manifest, write_wav


def harmonic_clip(rng: np.random.Generator, n_samples: int, sample_rate: int = 22050) -> AudioClip:
    """Sum of harmonics of a random fundamental with 1/k amplitude decay."""
    f0 = rng.uniform(80.0, 400.0)
    n_harmonics = int(rng.integers(8, 25))
    t = np.arange(n_samples) / sample_rate
    x = np.zeros(n_samples)
    for k in range(1, n_harmonics + 1):
        f = k * f0
        if f >= sample_rate / 2:
            break
        x += (1.0 / k) * np.sin(2.0 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x += 0.01 * rng.standard_normal(n_samples)  # keep spectra non-degenerate
    x /= np.max(np.abs(x)) + 1e-12
    return AudioClip(0.9 * x, sample_rate)


def lowpass(clip: AudioClip, cutoff_hz: float) -> AudioClip:
    """Brick-wall low-pass via FFT bin zeroing (the MP3-style band loss)."""
    spec = np.fft.rfft(clip.samples)
    freqs = np.fft.rfftfreq(len(clip), d=1.0 / clip.sample_rate)
    spec[freqs > cutoff_hz] = 0.0
    return AudioClip(np.fft.irfft(spec, n=len(clip)), clip.sample_rate)


def bandlimited_noise(
    rng: np.random.Generator,
    n_samples: int,
    sample_rate: int = 22050,
    cutoff_fraction: float = 0.85,
) -> AudioClip:
    """Random noise with no content above cutoff_fraction x Nyquist, so the
    dropped Nyquist bin carries negligible energy in round-trip tests."""
    n_bins = n_samples // 2 + 1
    spec = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    spec[int(cutoff_fraction * (n_samples // 2)) :] = 0.0
    spec[0] = spec[0].real
    x = np.fft.irfft(spec, n=n_samples)
    x /= np.max(np.abs(x)) + 1e-12
    return AudioClip(0.9 * x, sample_rate)


def speech_shaped_noise(
    rng: np.random.Generator, n_samples: int, sample_rate: int = 22050
) -> AudioClip:
    """White noise shaped by a 1/f envelope above 500 Hz."""
    n_bins = n_samples // 2 + 1
    spec = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate)
    envelope = 1.0 / (1.0 + freqs / 500.0)
    x = np.fft.irfft(spec * envelope, n=n_samples)
    x /= np.max(np.abs(x)) + 1e-12
    return AudioClip(0.9 * x, sample_rate)


def make_smoke_dataset(
    work_dir,
    n_train: int = 30,
    n_val: int = 4,
    n_test: int = 0,
    seed: int = 0,
    n_samples: int = 7000,
    sample_rate: int = 22050,
    cutoff_hz: float = 4000.0,
) -> DatasetManifest:
    """Write harmonic/low-passed WAV pairs and a matching manifest."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    entries = []
    counts = [("train", n_train), ("val", n_val), ("test", n_test)]
    i = 0
    for split, count in counts:
        for _ in range(count):
            reference = harmonic_clip(rng, n_samples, sample_rate)
            degraded = lowpass(reference, cutoff_hz)
            ref_path = work_dir / f"pair{i:03d}.ref.wav"
            deg_path = work_dir / f"pair{i:03d}.deg.wav"
            write_wav(reference, ref_path)
            write_wav(degraded, deg_path)
            entries.append(ManifestEntry(split, str(deg_path), str(ref_path)))
            i += 1

    manifest = DatasetManifest(entries, seed)
    save_manifest(manifest, work_dir / "manifest.tsv")
    return manifest
