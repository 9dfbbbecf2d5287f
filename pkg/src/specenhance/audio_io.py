"""WAV I/O, clip segmentation and the external-encoder degradation pipeline.

Only PCM16 mono little-endian RIFF/WAVE is supported; the MP3 round trip
that produces (degraded, reference) training pairs is delegated to an
external encoder invoked through a user-supplied command template.
"""

from __future__ import annotations

import random
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyClip,
    EncoderFailure,
    IoFailure,
    MalformedWav,
    ManifestError,
    UnsupportedFormat,
)

# Decoded PCM16 maps q -> q/32768; encoding rounds s*32768 and clamps, so a
# second round trip is bit-exact.
PCM_SCALE = 32768.0

SPLIT_FRACTIONS = {"train": 0.85, "val": 0.08, "test": 0.07}


@dataclass
class AudioClip:
    """Mono waveform: float samples in [-1, 1] plus sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be 1-D")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class ManifestEntry:
    split: str
    degraded_path: str
    reference_path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int

    def for_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def read_wav(path) -> AudioClip:
    """Decode a PCM16 mono WAV file; samples are scaled by 1/32768."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = data[offset : offset + 4]
        size = int.from_bytes(data[offset + 4 : offset + 8], "little")
        body_start = offset + 8
        if body_start + size > len(data):
            raise MalformedWav(f"{path}: chunk {chunk_id!r} overruns file")
        body = data[body_start : body_start + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedWav(f"{path}: fmt chunk too short")
            fmt = {
                "audio_format": int.from_bytes(body[0:2], "little"),
                "channels": int.from_bytes(body[2:4], "little"),
                "sample_rate": int.from_bytes(body[4:8], "little"),
                "bits": int.from_bytes(body[14:16], "little"),
            }
        elif chunk_id == b"data":
            pcm = body
        offset = body_start + size + (size & 1)  # chunks are word-aligned

    if fmt is None or pcm is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")
    if fmt["audio_format"] != 1 or fmt["bits"] != 16:
        raise UnsupportedFormat(
            f"{path}: only PCM16 supported, got format={fmt['audio_format']} bits={fmt['bits']}"
        )
    if fmt["channels"] != 1:
        raise UnsupportedFormat(f"{path}: expected mono, got {fmt['channels']} channels")

    raw = np.frombuffer(pcm[: len(pcm) - (len(pcm) % 2)], dtype="<i2")
    samples = np.clip(raw.astype(np.float64) / PCM_SCALE, -1.0, 1.0)
    return AudioClip(samples, fmt["sample_rate"])


def write_wav(clip: AudioClip, path) -> None:
    """Encode to PCM16 mono WAV: q = clamp(round(s*32768), -32768, 32767)."""
    q = np.rint(clip.samples * PCM_SCALE)
    q = np.clip(q, -32768, 32767).astype("<i2")
    pcm = q.tobytes()

    header = b"RIFF"
    header += (36 + len(pcm)).to_bytes(4, "little")
    header += b"WAVE"
    header += b"fmt " + (16).to_bytes(4, "little")
    header += (1).to_bytes(2, "little")  # PCM
    header += (1).to_bytes(2, "little")  # mono
    header += clip.sample_rate.to_bytes(4, "little")
    header += (clip.sample_rate * 2).to_bytes(4, "little")  # byte rate
    header += (2).to_bytes(2, "little")  # block align
    header += (16).to_bytes(2, "little")  # bits
    header += b"data" + len(pcm).to_bytes(4, "little")

    try:
        Path(path).write_bytes(header + pcm)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def split_clip(clip: AudioClip, parts: int) -> list[AudioClip]:
    """Cut into `parts` contiguous equal segments; the remainder tail is dropped."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if len(clip) < parts:
        raise EmptyClip(f"clip of {len(clip)} samples cannot be split into {parts}")
    seg = len(clip) // parts
    return [
        AudioClip(clip.samples[i * seg : (i + 1) * seg].copy(), clip.sample_rate)
        for i in range(parts)
    ]


def center_crop(clip: AudioClip, n_samples: int) -> AudioClip:
    """Centered crop used to draw fixed-size training samples from segments."""
    if len(clip) <= n_samples:
        return clip
    start = (len(clip) - n_samples) // 2
    return AudioClip(clip.samples[start : start + n_samples].copy(), clip.sample_rate)


def run_encoder(template: str, in_path, out_path, bitrate: int) -> None:
    """Run the external encoder command; {in} {out} {bitrate} are substituted."""
    cmd = template.format_map(
        {"in": str(in_path), "out": str(out_path), "bitrate": bitrate}
    )
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EncoderFailure(
            f"encoder exited {proc.returncode}: {cmd}\n"
            f"stdout: {proc.stdout.strip()}\nstderr: {proc.stderr.strip()}"
        )


def _align_pair(reference: AudioClip, degraded: AudioClip) -> tuple[AudioClip, AudioClip]:
    # Codec delay shows up as extra leading samples; cut heads down to the
    # common length so paired tensors stay sample-aligned.
    m = min(len(reference), len(degraded))
    if m == 0:
        raise EmptyClip("decoded clip is empty")
    return (
        AudioClip(reference.samples[len(reference) - m :], reference.sample_rate),
        AudioClip(degraded.samples[len(degraded) - m :], degraded.sample_rate),
    )


def _process_source(
    src: Path, work_dir: Path, template: str, parts: int, bitrates: tuple[int, int]
) -> list[tuple[str, str]]:
    """One source WAV -> high-bitrate reference and low-bitrate degraded segments."""
    stem = src.stem
    ref_full = work_dir / f"{stem}.ref_full.wav"
    deg_full = work_dir / f"{stem}.deg_full.wav"
    run_encoder(template, src, ref_full, bitrates[0])
    run_encoder(template, ref_full, deg_full, bitrates[1])

    reference = read_wav(ref_full)
    degraded = read_wav(deg_full)
    if reference.sample_rate != degraded.sample_rate:
        raise EncoderFailure(f"{src}: encoder changed the sample rate")
    reference, degraded = _align_pair(reference, degraded)

    pairs = []
    for i, (ref_seg, deg_seg) in enumerate(
        zip(split_clip(reference, parts), split_clip(degraded, parts))
    ):
        ref_path = work_dir / f"{stem}.seg{i}.ref.wav"
        deg_path = work_dir / f"{stem}.seg{i}.deg.wav"
        write_wav(ref_seg, ref_path)
        write_wav(deg_seg, deg_path)
        pairs.append((str(deg_path), str(ref_path)))
    return pairs


def prepare_dataset(
    source_dir,
    work_dir,
    encoder_cmd_template: str,
    seed: int,
    parts: int = 3,
    bitrates: tuple[int, int] = (128, 32),
    workers: int = 1,
) -> DatasetManifest:
    """Build the (degraded, reference) pair corpus and split it 85/8/7.

    Each source WAV goes through the encoder twice: once at the high bitrate
    to produce the reference, then again at the low bitrate to produce the
    degraded input. Both decoded clips are head-trimmed to equal length and
    split into `parts` segments. Split assignment shuffles pairs with `seed`
    and the manifest is persisted to work_dir/manifest.tsv.
    """
    source_dir = Path(source_dir)
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(source_dir.glob("*.wav"))

    pairs: list[tuple[str, str]] = []
    if sources:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = pool.map(
                    lambda s: _process_source(s, work_dir, encoder_cmd_template, parts, bitrates),
                    sources,
                )
                for r in results:
                    pairs.extend(r)
        else:
            for s in sources:
                pairs.extend(_process_source(s, work_dir, encoder_cmd_template, parts, bitrates))

    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n = len(pairs)
    n_train = round(SPLIT_FRACTIONS["train"] * n)
    n_val = round(SPLIT_FRACTIONS["val"] * n)

    entries = []
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        deg, ref = pairs[idx]
        entries.append(ManifestEntry(split, deg, ref))

    manifest = DatasetManifest(entries, seed)
    save_manifest(manifest, work_dir / "manifest.tsv")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"# seed={manifest.seed}"]
    lines += [
        f"{e.split}\t{e.degraded_path}\t{e.reference_path}" for e in manifest.entries
    ]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# seed="):
        raise ManifestError(f"{path}: manifest missing '# seed=' header")
    seed = int(lines[0].split("=", 1)[1])
    entries = []
    for ln in lines[1:]:
        fields = ln.split("\t")
        if len(fields) != 3 or fields[0] not in SPLIT_FRACTIONS:
            raise ManifestError(f"{path}: bad manifest line {ln!r}")
        entries.append(ManifestEntry(*fields))
    return DatasetManifest(entries, seed)
