"""Command-line interface.

    losa run        progressive sparse adaptation (mode losa)
    losa nm         same loop with mixed N:M masks (mode nm_losa)
    losa lora       uniform masks + fixed-rank dense adapters (mode lora_baseline)
    losa oneshot    uniform masks, no fine-tuning
    losa importance per-layer importance of a saved checkpoint, as JSON
    losa report     evaluate a saved sparse checkpoint against the dense model

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from losa.config import load_config, parse_overrides
from losa.driver import curve_csv, evaluate, remasked, report_json, run, run_losa, run_oneshot, steps_csv
from losa.errors import CheckpointError, ConfigError, InfeasibleError, NumericError, ShapeError
from losa.model import CalibBatch, forward_capture, load_calib, load_checkpoint, make_calib, make_synthetic, save_checkpoint
from losa.rmi import importance

log = logging.getLogger("losa")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

TRAIN_MODES = {"run": "losa", "nm": "nm_losa", "lora": "lora_baseline", "oneshot": "oneshot"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="losa", description="Low-rank sparse adaptation of layered linear models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for per-layer work (default: $LOSA_THREADS or 1)")

    helps = {
        "run": "progressive sparsification with sparsity-aware adapters",
        "nm": "progressive mixed N:M sparsification with adapters",
        "lora": "uniform one-shot masks plus fixed-rank dense adapters",
        "oneshot": "uniform one-shot masks, no fine-tuning",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        common(p)
        p.add_argument("--out", default="out", help="output directory (default: out)")

    p = sub.add_parser("importance", help="print per-layer importance of a checkpoint as JSON")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("report", help="evaluate a sparse checkpoint against the dense model")
    common(p)
    p.add_argument("--checkpoint", required=True, help="sparse model checkpoint")
    p.add_argument("--out", default=None, help="also write report.json here")
    return parser


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("LOSA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"LOSA_THREADS: expected int, got {env!r}") from None
    return 1


def dense_model(cfg):
    if cfg.model.checkpoint:
        return load_checkpoint(cfg.model.checkpoint).stack
    dims = cfg.model.dims
    sigma = None if cfg.model.sigma == "he" else cfg.model.sigma
    return make_synthetic(len(dims) - 1, dims, cfg.seed, sigma)


def calibration(cfg, width: int) -> CalibBatch:
    if cfg.calib.path:
        return load_calib(cfg.calib.path)
    return make_calib(cfg.calib.samples, width, cfg.seed)


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")


def cmd_train(args, cfg) -> int:
    threads = _threads(args.threads)
    stack = dense_model(cfg)
    calib = calibration(cfg, stack.weights[0].shape[1])
    model, reports = run(cfg, stack, calib, threads)
    final = evaluate(stack, model, calib)

    comparison = {cfg.mode: final["total_recon"]}
    if cfg.mode != "oneshot":
        comparison["oneshot"] = evaluate(stack, run_oneshot(cfg, stack, calib)[0], calib)["total_recon"]
    if cfg.mode == "lora_baseline":
        comparison["lora_baseline_remasked"] = evaluate(stack, remasked(stack, model), calib)["total_recon"]
        comparison["losa"] = evaluate(stack, run_losa(cfg, stack, calib, threads)[0], calib)["total_recon"]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", report_json(cfg, reports, final, {"comparison": comparison}))
    _write(out / "steps.csv", steps_csv(reports))
    _write(out / "curve.csv", curve_csv(reports))
    if cfg.mode == "lora_baseline":
        lines = ["mode,seed,total_recon"] + [f"{k},{cfg.seed},{v!r}" for k, v in sorted(comparison.items())]
        _write(out / "comparison.csv", "\n".join(lines) + "\n")
    _write(out / "timing.json", json.dumps({"wall_clock": [r.wall_clock for r in reports]}, indent=2) + "\n")

    meta = {"mode": cfg.mode, "mergeable": model.mergeable, "seed": cfg.seed}
    if model.mergeable:
        save_checkpoint(out / "model.ckpt", model.as_stack(stack.names), masks=model.masks, meta=meta)
    else:
        # keep M * W and the dense adapters separate: they cannot be folded into a sparse weight
        masked = model.as_stack(stack.names)
        masked.weights = [w * m.as_float() for w, m in zip(stack.weights, model.masks)]
        save_checkpoint(out / "model.ckpt", masked, adapters=model.adapters, masks=model.masks, meta=meta)

    print(json.dumps({"out": str(out), "total_recon": final["total_recon"],
                      "mean_sparsity": final["mean_sparsity"], "mean_rank": final["mean_rank"],
                      "comparison": comparison}, sort_keys=True))
    return EXIT_OK


def cmd_importance(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    calib = calibration(cfg, ckpt.stack.weights[0].shape[1])
    maps = forward_capture(ckpt.stack, calib, cfg.model.activation)
    p = importance(maps, cfg.rmi.maps, cfg.rmi.center)
    print(json.dumps({"layers": ckpt.stack.names, "p": [float(v) for v in p]}, sort_keys=True))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    from losa.driver import SparseModel
    from losa.masks import Mask
    from losa.adapters import effective_weight

    ckpt = load_checkpoint(args.checkpoint)
    dense = dense_model(cfg)
    calib = calibration(cfg, dense.weights[0].shape[1])
    masks = ckpt.masks or [Mask(w != 0.0) for w in ckpt.stack.weights]
    if ckpt.adapters is not None:
        weights = [effective_weight(w, m, ad, masked=False) for w, m, ad in zip(ckpt.stack.weights, masks, ckpt.adapters)]
        ranks = [ad.rank for ad in ckpt.adapters]
    else:
        weights, ranks = ckpt.stack.weights, [0] * len(ckpt.stack)
    model = SparseModel(weights, masks, ranks, cfg.model.activation,
                        mergeable=bool(ckpt.meta.get("mergeable", True)))
    result = evaluate(dense, model, calib)
    text = json.dumps({"config": cfg.to_flat(), "checkpoint": str(args.checkpoint), "final": result},
                      indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "report.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = parse_overrides(args.overrides)
        if args.command in TRAIN_MODES:
            overrides["mode"] = TRAIN_MODES[args.command]
        cfg = load_config(args.config, overrides)
        if args.command in TRAIN_MODES:
            return cmd_train(args, cfg)
        if args.command == "importance":
            return cmd_importance(args, cfg)
        return cmd_report(args, cfg)
    except (ConfigError, InfeasibleError, ShapeError) as exc:
        print(f"losa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"losa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"losa: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckpointError, OSError) as exc:
        print(f"losa: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
