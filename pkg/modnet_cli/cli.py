#!/usr/bin/env python3
"""
MODNet CLI — Main entry point.
Usage: modnet <command> [options]
"""

import argparse
import sys

from modnet_cli import __version__
from modnet_cli.error_reporter import EXIT_OK, EXIT_USAGE, FileIOError, ModNetError, report_error


class ModNetArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {self.prog}: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="Global seed (default from config: 0)")
    shared.add_argument("--config", help="Plain-text config file (key = value)")
    shared.add_argument("--out", help="Output directory")
    shared.add_argument("--threads", type=int, help="Worker-count hint; never changes results")

    parser = ModNetArgumentParser(
        prog="modnet",
        description="MODNet CLI — Multi-offset point-cloud denoising toolchain",
    )
    parser.add_argument("--version", action="version", version=f"MODNet CLI v{__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Print tracebacks on errors")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # ── synth ───────────────────────────────────────────
    synth = subparsers.add_parser("synth", parents=[shared], help="Synthesize clean/noisy shapes and meshes")
    synth.add_argument("--shapes", help="Comma-separated kinds (cube,sphere,cylinder,torus,icosahedron)")
    synth.add_argument("--points", type=int, help="Points sampled per shape")
    synth.add_argument("--noise", help="model:sigma[,sigma...] or a preset (train, test, high)")
    synth.add_argument("--resolution", type=int, help="Mesh tessellation level")
    synth.add_argument("--split", choices=("train", "test"), default="train", help="Dataset split tag")

    # ── train ───────────────────────────────────────────
    train = subparsers.add_parser("train", parents=[shared], help="Train a model on a synthesized dataset")
    train.add_argument("--data", required=True, help="Directory holding manifest.json")
    train.add_argument("--epochs", type=int, help="Training epochs")
    train.add_argument("--batch-size", dest="batch_size", type=int, help="Patches per SGD step")
    train.add_argument("--lr-start", dest="lr_start", type=float, help="Initial learning rate")
    train.add_argument("--lr-end", dest="lr_end", type=float, help="Final learning rate")
    train.add_argument("--alpha", type=float, help="Projection/repulsion balance")
    train.add_argument("--beta", type=float, help="Weight of the per-scale pre-offset losses")
    train.add_argument("--radii", dest="radii_frac", help="Patch radii as bbox fractions, e.g. 0.03,0.04,0.05")
    train.add_argument("--n-patch", dest="n_patch", type=int, help="Points per scale patch")
    train.add_argument("--patches-per-shape", dest="patches_per_shape", type=int, help="Patch centers per shape per epoch")
    train.add_argument("--grad-clip", dest="grad_clip", type=float, help="Global grad-norm clip (0 disables)")

    # ── denoise ─────────────────────────────────────────
    denoise = subparsers.add_parser("denoise", parents=[shared], help="Denoise a point cloud with a checkpoint")
    denoise.add_argument("--checkpoint", required=True, help="Checkpoint written by train")
    denoise.add_argument("--input", required=True, help="Noisy XYZ file")
    denoise.add_argument("--radii", dest="radii_frac", help="Patch radii as bbox fractions")
    denoise.add_argument("--n-patch", dest="n_patch", type=int, help="Points per scale patch")
    denoise.add_argument("--batch", type=int, default=256, help="Patches per forward pass")
    denoise.add_argument("--export-weights", action="store_true", help="Write the per-point scale weights")

    # ── eval ────────────────────────────────────────────
    ev = subparsers.add_parser("eval", parents=[shared], help="CD / MSE / P2M metrics")
    ev.add_argument("--filtered", nargs="+", required=True, help="Filtered XYZ files")
    ev.add_argument("--gt", nargs="+", required=True, help="Ground-truth XYZ[N] files, one per filtered file")
    ev.add_argument("--mesh", nargs="*", default=[], help="Ground-truth OFF meshes for P2M")
    ev.add_argument("--names", nargs="*", default=[], help="Row names for the CSV")
    ev.add_argument("--neighbors", type=int, default=10, help="N for the MSE metric")
    ev.add_argument("--paper-scale", "--display-scale", dest="display_scale", action="store_true",
                    help="Display CD, P2M x1e4 and MSE x1e2 (metrics.csv stays raw)")

    # ── gradcheck ───────────────────────────────────────
    gc = subparsers.add_parser("gradcheck", parents=[shared], help="Finite-difference gradient verification")
    gc.add_argument("--full", action="store_true", help="End-to-end check at full network widths")
    gc.add_argument("--batches", type=int, default=5, help="Random mini-batches for the end-to-end check")
    gc.add_argument("--trials", type=int, default=1, help="Random shape draws per op for the per-op checks")

    # ── config ──────────────────────────────────────────
    subparsers.add_parser("config", parents=[shared], help="Show the effective configuration")

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_OK)

    try:
        # Route commands
        if args.command == "synth":
            from modnet_cli.train import handle_synth
            handle_synth(args)
        elif args.command == "train":
            from modnet_cli.train import handle_train
            handle_train(args)
        elif args.command == "denoise":
            from modnet_cli.model import handle_denoise
            handle_denoise(args)
        elif args.command == "eval":
            from modnet_cli.metrics import handle_eval
            handle_eval(args)
        elif args.command == "gradcheck":
            from modnet_cli.gradcheck import handle_gradcheck
            handle_gradcheck(args)
        elif args.command == "config":
            from modnet_cli.config_manager import handle_config
            handle_config(args)
        else:
            parser.print_help()
    except ModNetError as e:
        sys.exit(report_error(e, args.verbose))
    except OSError as e:
        sys.exit(report_error(FileIOError.from_os_error(e), args.verbose))
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
