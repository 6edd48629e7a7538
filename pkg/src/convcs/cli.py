"""Command-line entry point: ``convcs <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ArchMismatchError, ConfigError, ConvCSError
from .imageio import read_image, write_pgm
from .measurement import export_kernels, write_atlas
from .metrics import dft2_log_magnitude, highfreq_energy_ratio, MetricsReport
from .models import ARCHS, FULL_ARCHS, forward_full, gradcheck_model, mini_model
from .training import (
    Checkpoint,
    TrainConfig,
    corpus_files,
    evaluate,
    load_named_corpus,
    reconstruct_image,
    train,
    write_report,
)

CONFIG_ENV = "CONVCS_CONFIG"
GRADCHECK_SIZE = 32

log = logging.getLogger("convcs")


@dataclass
class CommandOutcome:
    exit_code: int = 0
    artifacts: list = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share exit code 1 with config errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# train

_LIST_FIELDS = {"train"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        if f.name in _LIST_FIELDS:
            p.add_argument(_flag(f.name), nargs="+", default=None, metavar="PATH",
                           help="training image files or directories")
            continue
        kind = type(f.default)
        p.add_argument(_flag(f.name), type=kind, default=None, metavar=kind.__name__.upper())


def _train_config(args) -> TrainConfig:
    """Defaults, then the JSON config, then command-line flags."""
    data = {}
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        data = TrainConfig.load(path).as_dict()
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return TrainConfig.from_dict(data)


def cmd_train(args) -> CommandOutcome:
    cfg = _train_config(args)
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: no output path given (config key or --checkpoint)")

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.6g", epoch, cfg.epochs, loss)

    result = train(cfg, progress=progress)
    out = CommandOutcome(artifacts=[Path(cfg.checkpoint)])
    if cfg.history:
        out.artifacts.append(Path(cfg.history))
    if result.patches_skipped:
        print(f"warning: skipped {result.patches_skipped} image(s) smaller than {cfg.patch_size} px",
              file=sys.stderr)
    print(f"trained {cfg.arch} at rate {cfg.rate}: {result.checkpoint.steps} steps, "
          f"final loss {result.history[-1]:.6g}")
    return out


# ---------------------------------------------------------------------------
# eval / compare


def _load_checkpoint(path, arch=None, rate=None) -> Checkpoint:
    ckpt = Checkpoint.load(path, expected_arch=arch)
    if rate is not None and abs(ckpt.model.rate - rate) > 1e-12:
        raise ArchMismatchError(f"checkpoint {path} was trained at rate {ckpt.model.rate}, not {rate}")
    return ckpt


def _test_corpus(path):
    corpus = load_named_corpus(path)
    if not corpus:
        raise ConfigError(f"no .pgm or .png images in {path}")
    return corpus


def _print_report(report: MetricsReport) -> None:
    m = report.means
    print(f"{report.arch} rate {report.rate}: mean PSNR {m['psnr']:.3f} dB, SSIM {m['ssim']:.4f}, "
          f"blockiness {m['blockiness']:.3f}, achieved rate {m['achieved_rate']:.4f}")
    if report.deltas:
        ref = report.reference
        print(f"  published {ref['method']} mean PSNR {ref['psnr']:.2f} dB (delta {report.deltas['psnr']:+.2f} dB)")
    for note in report.notes:
        print(f"  note: {note}")


def cmd_eval(args) -> CommandOutcome:
    ckpt = _load_checkpoint(args.checkpoint, args.arch, args.rate)
    corpus = _test_corpus(args.test_dir)
    report = evaluate(ckpt.model, corpus)
    out = CommandOutcome()
    stem = Path(args.checkpoint).stem
    json_path = args.json or Path(args.out_dir) / f"{stem}_metrics.json"
    csv_path = args.csv or Path(args.out_dir) / f"{stem}_metrics.csv"
    out.artifacts += write_report(report, json_path, csv_path)
    if args.images:
        img_dir = Path(args.out_dir) / f"{stem}_images"
        for name, img in corpus:
            truth = img[0, 0]
            recon = reconstruct_image(ckpt.model, truth)
            # ground truth | reconstruction, separated by a white column
            side = np.concatenate([truth, np.ones((truth.shape[0], 2)), recon], axis=1)
            out.artifacts.append(write_pgm(img_dir / f"{name}_side_by_side.pgm", side))
    _print_report(report)
    return out


def cmd_compare(args) -> CommandOutcome:
    corpus = _test_corpus(args.test_dir)
    table = []
    for path in args.checkpoints:
        ckpt = _load_checkpoint(path)
        report = evaluate(ckpt.model, corpus)
        ref = report.reference or {}
        table.append({"checkpoint": str(path), "arch": report.arch, "rate": report.rate, **report.means,
                      "reference_method": ref.get("method"), "reference_psnr": ref.get("psnr"),
                      "delta_psnr": (report.deltas or {}).get("psnr")})
    cols = ["checkpoint", "arch", "rate", "psnr", "ssim", "blockiness", "achieved_rate",
            "reference_method", "reference_psnr", "delta_psnr"]
    lines = [",".join(cols)]
    for row in table:
        lines.append(",".join("" if row[c] is None else (f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]))
                              for c in cols))
    out = CommandOutcome()
    if args.csv:
        p = Path(args.csv)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(lines) + "\n")
        out.artifacts.append(p)
    if args.json:
        p = Path(args.json)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        out.artifacts.append(p)
    for row in table:
        delta = "" if row["delta_psnr"] is None else f"  (published {row['reference_psnr']:.2f}, delta {row['delta_psnr']:+.2f})"
        print(f"{row['arch']:<18s} rate {row['rate']:<5g} PSNR {row['psnr']:7.3f} dB  SSIM {row['ssim']:.4f}  "
              f"blockiness {row['blockiness']:.3f}{delta}")
    return out


# ---------------------------------------------------------------------------
# reconstruct / visualize


def cmd_reconstruct(args) -> CommandOutcome:
    ckpt = _load_checkpoint(args.checkpoint, args.arch)
    image = read_image(args.input)
    recon = reconstruct_image(ckpt.model, image)
    h, w = image.shape
    print(f"{Path(args.input).name}: {h}x{w}, achieved rate {ckpt.model.achieved_rate(h, w):.4f}")
    return CommandOutcome(artifacts=[write_pgm(args.output, recon)])


def cmd_visualize(args) -> CommandOutcome:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model
    out_dir = Path(args.out_dir)
    stem = Path(args.checkpoint).stem
    atlas = export_kernels(model.measurer)
    out = CommandOutcome(artifacts=write_atlas(atlas, out_dir, f"{stem}_kernels"))
    print(f"{len(atlas)} measurement kernels written in spatial and frequency form")
    for path in corpus_files(args.images) if args.images else []:
        img = read_image(path)
        x = img[None, None]
        name = Path(path).stem
        if model.arch in FULL_ARCHS:
            t = forward_full(model, x)
            parts = {"preliminary": t.preliminary.data[0, 0], "residual": t.residual.data[0, 0],
                     "final": t.final.data[0, 0]}
        else:
            parts = {"final": model.reconstruct(x).data[0, 0]}
        for part, arr in parts.items():
            # the residual is signed and small; stretch it for viewing
            view = arr if part != "residual" else _stretch(arr)
            out.artifacts.append(write_pgm(out_dir / f"{name}_{part}.pgm", view))
            out.artifacts.append(write_pgm(out_dir / f"{name}_{part}_spectrum.pgm", dft2_log_magnitude(arr)))
        ratios = ", ".join(f"{k} {highfreq_energy_ratio(v):.3f}" for k, v in parts.items())
        print(f"{name}: high-frequency energy ratio {ratios}")
    return out


def _stretch(a: np.ndarray) -> np.ndarray:
    peak = np.abs(a).max()
    return np.full_like(a, 0.5) if peak == 0 else 0.5 + 0.5 * a / peak


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> CommandOutcome:
    model = mini_model(args.arch, args.rate, args.seed)
    image = np.random.default_rng(args.seed).random((1, 1, GRADCHECK_SIZE, GRADCHECK_SIZE))
    if args.inject_fault:
        with ad.inject_gradient_fault(args.inject_fault):
            report = gradcheck_model(model, image, args.tolerance, args.max_entries, args.seed)
    else:
        report = gradcheck_model(model, image, args.tolerance, args.max_entries, args.seed)
    print(f"gradcheck {args.arch} (mini: F={model.config.features}, R={model.config.residual_blocks}, "
          f"k={model.config.kernel}, s={model.config.stride}) rate {args.rate} seed {args.seed}, "
          f"{GRADCHECK_SIZE}x{GRADCHECK_SIZE} input")
    for line in report.lines():
        print("  " + line)
    if not report.passed:
        print(f"error: gradient check failed (max relative error {report.max_rel_error:.3e})", file=sys.stderr)
        return CommandOutcome(exit_code=2)
    return CommandOutcome()


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convcs", description="Fully convolutional compressive sensing toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory of images")
    p.add_argument("checkpoint")
    p.add_argument("test_dir")
    p.add_argument("--rate", type=float, help="expected measurement rate of the checkpoint")
    p.add_argument("--arch", choices=ARCHS, help="expected architecture of the checkpoint")
    p.add_argument("--out-dir", default=".", help="where reports and images go")
    p.add_argument("--json", help="report JSON path")
    p.add_argument("--csv", help="report CSV path")
    p.add_argument("--images", action="store_true", help="also write side-by-side reconstructions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="measure and reconstruct one image")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output", help="output .pgm path")
    p.add_argument("--arch", choices=ARCHS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("visualize-kernels", help="kernel atlas and reconstruction triples")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--images", nargs="+", help="images (or directories) to decompose")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference check of a miniature model")
    p.add_argument("--arch", choices=ARCHS, default="fully-conv-res")
    p.add_argument("--rate", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=64, help="probed entries per parameter")
    p.add_argument("--inject-fault", type=float, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="evaluate several checkpoints into one table")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--test-dir", required=True)
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_compare)
    return parser


def run(argv=None) -> CommandOutcome:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConvCSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(exit_code=exc.exit_code)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(exit_code=2)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return CommandOutcome(exit_code=2)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
