"""Command-line surface: corpus generation, training, inference, checks.

Exit codes (also shown in ``--help``):

* 0 — success
* 2 — usage error or violated precondition (bad flag value, wrong sizes)
* 3 — I/O failure (missing or unwritable file; message names the path)
* 4 — file integrity failure (bad magic, truncation, version mismatch)
* 5 — numeric failure (non-finite loss, failed gradient verification)
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .data import build_corpus, load_corpus, load_slice, save_slice, export_pgm
from .errors import (ContractError, IntegrityError, NumericError, ShapeError)
from .tensor import Tensor
from .experiment import (CONFIG_CHOICES, _split_pairs, grad_check_ops,
                         grad_check_suite, named_config)
from .metrics import build_report, report_table
from .model import PARAM_BUDGET, init, load_checkpoint, param_count
from .tiling import BLEND_MODES, denoise_image
from .training import (TrainConfig, TrainLog, evaluate, load_optimizer_state,
                       optimizer_sidecar_path, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INTEGRITY = 4
EXIT_NUMERIC = 5

_EXIT_CODE_HELP = (
    "exit codes: 0 success; 2 usage or precondition error; 3 I/O failure; "
    "4 file integrity failure; 5 numeric failure"
)


def _log_path_for(ckpt_path: str) -> str:
    return str(ckpt_path) + ".csv"


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom_gen(args) -> int:
    pairs = build_corpus(
        args.out, patients=args.patients, slices_per_patient=args.slices,
        size=args.size, master_seed=args.seed, gaussian_sigma=args.sigma,
        streak_count=args.streaks)
    print(f"wrote {len(pairs)} slice pairs under {args.out} "
          f"({args.patients} patients x {args.slices} slices, {args.size}px)")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = load_corpus(args.data)
    train_pairs, test_pairs = _split_pairs(pairs, args.holdout)
    print(f"{len(train_pairs)} training pairs, {len(test_pairs)} held out "
          f"({args.holdout})")

    if args.resume is not None:
        ckpt = load_checkpoint(args.resume)
        params, model_cfg = ckpt.params, ckpt.config
        state = load_optimizer_state(optimizer_sidecar_path(args.resume), params)
        seed = ckpt.seed
        try:
            log = TrainLog.read_csv(_log_path_for(args.resume))
        except OSError:
            log = None
        print(f"resuming from {args.resume} at step {state.step}")
    else:
        model_cfg = named_config(args.config)
        params = init(model_cfg, seed=args.seed)
        state, log, seed = None, None, args.seed

    train_cfg = TrainConfig(
        batch_size=args.batch, learning_rate=args.lr, steps=args.steps,
        seed=seed, checkpoint_interval=args.checkpoint_interval)

    def progress(step, loss, wall_ms):
        if step % args.log_every == 0 or step == train_cfg.steps:
            print(f"step {step}/{train_cfg.steps}  loss {loss:.4f}  "
                  f"{wall_ms:.0f} ms", flush=True)

    params, state, log = train(
        params, model_cfg, train_pairs, train_cfg, state=state, log=log,
        ckpt_path=args.out, log_path=_log_path_for(args.out),
        progress=progress)
    print(f"checkpoint: {args.out} (step {state.step}); "
          f"log: {_log_path_for(args.out)}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model_cfg = ckpt.config
    if args.tile is not None and args.tile != model_cfg.tile_size:
        raise ContractError(
            f"--tile {args.tile} conflicts with the checkpoint's tile size "
            f"{model_cfg.tile_size}; the tile edge is baked into the weights")
    slice_in = load_slice(args.in_path)
    _, h, w = slice_in.pixels.shape
    if model_cfg.tile_size > h or model_cfg.tile_size > w:
        raise ContractError(
            f"--tile {model_cfg.tile_size} exceeds the {h}x{w} image "
            f"{args.in_path}")
    denoised = denoise_image(ckpt.params, slice_in.pixels, model_cfg,
                             stride=args.stride, blend=args.blend)
    # The slice format stores display units; clamp overshoot at the boundary.
    pixels = Tensor(np.clip(denoised.data, 0.0, 255.0))
    out_slice = replace(slice_in, pixels=pixels, kind="denoised")
    if str(args.out).endswith(".pgm"):
        export_pgm(out_slice, args.out)
    else:
        save_slice(out_slice, args.out)
    print(f"denoised {args.in_path} -> {args.out} "
          f"(tile {model_cfg.tile_size}, blend {args.blend})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    pairs = load_corpus(args.data)
    _, test_pairs = _split_pairs(pairs, args.holdout)
    report = evaluate(ckpt.params, ckpt.config, test_pairs,
                      stride=args.stride, blend=args.blend)
    baseline = build_report([n.pixels for _, n in test_pairs],
                            [c.pixels for c, _ in test_pairs])
    n_params = param_count(ckpt.config)
    model_name = f"model ({n_params / 1e6:.2f}M)"
    rows = []
    for i, (clean, _) in enumerate(test_pairs):
        rows.append((f"slice {clean.patient_id}/{clean.slice_index:04d}",
                     report.ssim_per_image[i], report.rmse_per_image[i],
                     "n/a"))
    rows.append(("noisy input (mean)", baseline.ssim, baseline.rmse, "n/a"))
    rows.append((f"{model_name} (mean)", report.ssim, report.rmse,
                 f"{n_params / 1e6:.2f}M"))
    print(report_table(rows, csv=args.csv))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.ops_only:
        checks = grad_check_ops()
        for c in checks:
            status = "ok" if c.passed else "FAIL"
            print(f"{status:4s} op    {c.name:28s} "
                  f"max rel err {c.report.max_rel_error:.3e} "
                  f"(tol {c.report.tol:g})")
        passed = all(c.passed for c in checks)
        print(("PASS" if passed else "FAIL") + f": {len(checks)} ops")
    else:
        suite = grad_check_suite(args.config)
        for line in suite.lines():
            print(line)
        passed = suite.passed
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_param_count(args) -> int:
    cfg = named_config(args.config)
    count = param_count(cfg)
    delta = 100.0 * (count - PARAM_BUDGET) / PARAM_BUDGET
    print(f"{count:,} parameters ({args.config} config)")
    print(f"target 1,850,000 ({delta:+.1f}%)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctlformer",
        description="Desk-scale low-dose CT denoiser toolkit.",
        epilog=_EXIT_CODE_HELP)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic slice corpus",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--slices", type=int, default=20,
                   help="slices per patient")
    p.add_argument("--size", type=int, default=128, help="slice edge, pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=15.0,
                   help="gaussian noise level in display units")
    p.add_argument("--streaks", type=int, default=4,
                   help="streak lines per slice")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train a denoiser on a corpus",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--data", required=True, help="corpus root directory")
    p.add_argument("--holdout", required=True,
                   help="patient id excluded from training")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.0001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default="experiment",
                   choices=sorted(CONFIG_CHOICES),
                   help="model size (ignored with --resume)")
    p.add_argument("--checkpoint-interval", type=int, default=500)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--resume", default=None, metavar="CKPT",
                   help="continue from this checkpoint and its sidecar state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one stored slice",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_path", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="output slice (.pgm extension writes a PGM preview)")
    p.add_argument("--tile", type=int, default=None,
                   help="override the checkpoint's tile size")
    p.add_argument("--stride", type=int, default=None,
                   help="tile stride (default: half the tile)")
    p.add_argument("--blend", default="cosine", choices=list(BLEND_MODES))
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out patient",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", required=True)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--blend", default="cosine", choices=list(BLEND_MODES))
    p.add_argument("--csv", action="store_true",
                   help="emit comma-separated values instead of a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check",
                       help="verify gradients against finite differences",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--config", default="tiny", choices=sorted(CONFIG_CHOICES))
    p.add_argument("--ops-only", action="store_true",
                   help="run only the per-operation sweep (much faster)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("param-count",
                       help="parameter count vs the design budget",
                       epilog=_EXIT_CODE_HELP)
    p.add_argument("--config", default="default", choices=sorted(CONFIG_CHOICES))
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
