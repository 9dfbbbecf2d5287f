"""Command-line surface: prepare, train, enhance, evaluate, quantize,
spectrogram, bench.

The enhancement pipeline runs the whole clip through a single forward pass:
read -> STFT -> divide by the clip's max-abs scale -> model -> rescale ->
inverse STFT -> write. Exit codes: 0 success, 1 usage error, 2 data error,
3 internal error; errors print one machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import quantize as quant_mod
from .audio_io import AudioClip, load_manifest, prepare_dataset, read_wav, write_wav
from .errors import ClipTooShort, ConfigError, SpecEnhanceError
from .metrics import evaluate_testset
from .stft import StackedSpectrogram, StftConfig, istft_unstack, spectral_views, stft_stack
from .synth import bandlimited_noise
from .train import (
    TrainConfig,
    configs_from_mapping,
    load_config_file,
    train as run_training,
)

NORM_FLOOR = 1e-8
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


@dataclass
class EnhanceRequest:
    input_path: str
    checkpoint_path: str
    output_path: str
    use_quantized: bool = False


def enhance_clip(mdl, clip: AudioClip, stft_cfg: StftConfig | None = None):
    """Enhance one clip in a single forward pass; returns (clip, seconds).

    `mdl` is a ModelParams (float path) or QuantizedModel (integer path).
    The timing covers only the model forward, not the STFT round trip.
    """
    stft_cfg = stft_cfg or StftConfig()
    if len(clip) < stft_cfg.frame_length:
        raise ClipTooShort(
            f"clip of {len(clip)} samples < frame_length {stft_cfg.frame_length}"
        )
    spec = stft_stack(clip, stft_cfg)
    scale = max(NORM_FLOOR, float(np.max(np.abs(spec.data))))
    x = (spec.data / scale).astype(np.float32)

    start = time.perf_counter()
    if isinstance(mdl, quant_mod.QuantizedModel):
        y = quant_mod.quantized_forward(mdl, x)
    else:
        y, _ = model_mod.forward(mdl, x, want_cache=False)
    elapsed = time.perf_counter() - start

    out_spec = StackedSpectrogram(y.astype(np.float64) * scale)
    out = istft_unstack(out_spec, stft_cfg, out_len=len(clip), sample_rate=clip.sample_rate)
    return out, elapsed


def enhance_file(req: EnhanceRequest, stft_cfg: StftConfig | None = None):
    """File-to-file enhancement; returns the forward-pass wall clock in seconds."""
    if req.use_quantized:
        mdl = quant_mod.load_quantized(req.checkpoint_path)
    else:
        mdl = model_mod.load_checkpoint(req.checkpoint_path)
    clip = read_wav(req.input_path)
    out, elapsed = enhance_clip(mdl, clip, stft_cfg)
    write_wav(out, req.output_path)
    return elapsed


def emit_spectrogram_image(clip: AudioClip, view: str, path, stft_cfg: StftConfig | None = None) -> None:
    """Render one spectral view as a binary PGM (P5), bin 0 at the bottom row.

    Values map linearly onto 0..255 over the view's [min, max]; the phase
    view uses the fixed range (-pi, pi].
    """
    views = spectral_views(stft_stack(clip, stft_cfg or StftConfig()))
    if view not in views:
        raise ConfigError(f"unknown view {view!r}; expected one of {sorted(views)}")
    data = views[view]  # [frames, bins]
    if view == "phase":
        lo, hi = -np.pi, np.pi
    else:
        lo, hi = float(data.min()), float(data.max())

    if hi > lo:
        scaled = (data - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(data)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    image = pixels.T[::-1, :]  # rows = bins, bottom row = bin 0

    height, width = image.shape[0], image.shape[1]
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def bench_latency(
    mdl,
    qm=None,
    n_trials: int = 5,
    clip_len: int = 100_000,
    seed: int = 0,
    stft_cfg: StftConfig | None = None,
) -> dict:
    """Time the forward pass only (no I/O, no STFT) over random clips."""
    if n_trials < 3:
        raise ConfigError("n_trials must be >= 3")
    stft_cfg = stft_cfg or StftConfig()
    rng = np.random.default_rng(seed)

    inputs = []
    for _ in range(n_trials):
        clip = bandlimited_noise(rng, clip_len)
        spec = stft_stack(clip, stft_cfg)
        scale = max(NORM_FLOOR, float(np.max(np.abs(spec.data))))
        inputs.append((spec.data / scale).astype(np.float32))

    def run(forward):
        times = []
        for x in inputs:
            start = time.perf_counter()
            forward(x)
            times.append((time.perf_counter() - start) * 1000.0)
        t = np.asarray(times)
        return {
            "mean_ms": float(t.mean()),
            "p50_ms": float(np.percentile(t, 50)),
            "p95_ms": float(np.percentile(t, 95)),
        }

    report = {"clip_len": clip_len, "n_trials": n_trials}
    report["float"] = run(lambda x: model_mod.forward(mdl, x, want_cache=False))
    if qm is not None:
        report["quantized"] = run(lambda x: quant_mod.quantized_forward(qm, x))
    return report


# -- argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="specenhance", description=__doc__)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="worker thread cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build (degraded, reference) pairs via the external encoder")
    p.add_argument("--source", required=True, help="directory of source WAVs")
    p.add_argument("--work", required=True, help="output directory")
    p.add_argument("--encoder", required=True, help="command template with {in} {out} {bitrate}")

    p = sub.add_parser("train", help="train on a prepared manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")

    p = sub.add_parser("enhance", help="reconstruct one WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--quantized", action="store_true", help="checkpoint is ASEQ format")

    p = sub.add_parser("evaluate", help="score the manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--quantized", action="store_true")
    p.add_argument("--bypass", action="store_true", help="score the reference itself (oracle)")

    p = sub.add_parser("quantize", help="convert a float checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[quant_mod.MODE_INT8, quant_mod.MODE_F16],
                   default=quant_mod.MODE_INT8)

    p = sub.add_parser("spectrogram", help="render a spectral view as PGM")
    p.add_argument("--input", required=True)
    p.add_argument("--view", choices=["magnitude", "power_db", "phase"], default="magnitude")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="latency statistics for the forward pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--quantized-checkpoint", default=None)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--clip-len", type=int, default=100_000)
    return parser


def _load_configs(args):
    mapping = load_config_file(args.config) if args.config else {}
    model_cfg, train_cfg, ssim_cfg = configs_from_mapping(mapping)
    if args.seed is not None:
        train_cfg.seed = args.seed
    return model_cfg, train_cfg, ssim_cfg


def _run(args) -> int:
    if args.command == "prepare":
        _, train_cfg, _ = _load_configs(args)
        manifest = prepare_dataset(
            args.source,
            args.work,
            args.encoder,
            seed=train_cfg.seed,
            workers=max(1, args.threads),
        )
        print(f"prepared {len(manifest.entries)} pairs under {args.work}")
        return EXIT_OK

    if args.command == "train":
        model_cfg, train_cfg, ssim_cfg = _load_configs(args)
        manifest = load_manifest(args.manifest)
        result = run_training(
            manifest, model_cfg, train_cfg, ssim_cfg, args.out, threads=args.threads
        )
        last = result.log[-1]
        print(
            f"trained {train_cfg.epochs} epochs; best checkpoint {result.checkpoint_path} "
            f"(final val_loss {last.val_loss:.6f})"
        )
        return EXIT_OK

    if args.command == "enhance":
        req = EnhanceRequest(args.input, args.checkpoint, args.output, args.quantized)
        elapsed = enhance_file(req)
        print(f"wrote {args.output} (forward pass {elapsed * 1000.0:.2f} ms)")
        return EXIT_OK

    if args.command == "evaluate":
        manifest = load_manifest(args.manifest)
        if args.quantized:
            mdl = quant_mod.load_quantized(args.checkpoint)
        else:
            mdl = model_mod.load_checkpoint(args.checkpoint)
        report = evaluate_testset(
            manifest, mdl, args.out, bypass=args.bypass, threads=args.threads
        )
        print(
            f"evaluated {len(report.rows)} clips: mean snr {report.mean_snr_db:.4f} dB, "
            f"lsd {report.mean_lsd:.4f}, stoi {report.mean_stoi:.4f}"
        )
        return EXIT_OK

    if args.command == "quantize":
        params = model_mod.load_checkpoint(args.checkpoint)
        qm = quant_mod.quantize_model(params, mode=args.mode)
        quant_mod.save_quantized(qm, args.out)
        ratio = Path(args.out).stat().st_size / Path(args.checkpoint).stat().st_size
        print(f"wrote {args.out} ({args.mode}, {ratio * 100.0:.1f}% of float size)")
        return EXIT_OK

    if args.command == "spectrogram":
        clip = read_wav(args.input)
        emit_spectrogram_image(clip, args.view, args.out)
        print(f"wrote {args.out} ({args.view})")
        return EXIT_OK

    if args.command == "bench":
        mdl = model_mod.load_checkpoint(args.checkpoint)
        qm = (
            quant_mod.load_quantized(args.quantized_checkpoint)
            if args.quantized_checkpoint
            else None
        )
        report = bench_latency(mdl, qm, n_trials=args.trials, clip_len=args.clip_len)
        for path in ("float", "quantized"):
            if path in report:
                stats = report[path]
                print(
                    f"{path}: mean {stats['mean_ms']:.2f} ms, "
                    f"p50 {stats['p50_ms']:.2f} ms, p95 {stats['p95_ms']:.2f} ms"
                )
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split())  # keep the report on one line
    return f"error: {type(exc).__name__}: {msg}"


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        code = _run(args)
    except ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        code = EXIT_USAGE
    except SpecEnhanceError as exc:
        print(_error_line(exc), file=sys.stderr)
        code = EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(_error_line(exc), file=sys.stderr)
        code = EXIT_INTERNAL
    return code


if __name__ == "__main__":
    sys.exit(main())
