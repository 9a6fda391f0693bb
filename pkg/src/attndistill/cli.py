"""Command line entry point: ``attndistill run | bench | finetune-vae``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .backbone import BackboneError, finetune_decoder, load_backbone
from .bench import bench, format_table, scaling_ok
from .image_io import ImageFormatError, load_image
from .tasks import TASKS, ConfigError, TaskConfig, load_task_config, run_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKBONE = 3
EXIT_IO = 4

# flag -> TaskConfig field
RUN_FLAGS = {
    "style": str,
    "content": str,
    "prompt": str,
    "seg_src": str,
    "seg_tgt": str,
    "layout": str,
    "lambda": float,
    "lr": float,
    "iters": int,
    "steps": int,
    "cfg_scale": float,
    "inner_steps": int,
    "sdedit_strength": float,
    "seed": int,
    "backbone": str,
    "out": str,
}
RENAMED = {"lambda": "content_weight", "iters": "iterations"}
PATH_FLAGS = ("style", "content", "seg_src", "seg_tgt", "layout", "out", "backbone")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attndistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one synthesis task")
    run.add_argument("task", nargs="?", choices=TASKS)
    run.add_argument("--config", help="YAML/JSON task config or a run manifest; flags override it")
    for flag, kind in RUN_FLAGS.items():
        run.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind, default=None)
    run.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None)
    run.add_argument("--vae-finetune", action="store_true", default=None)

    b = sub.add_parser("bench", help="time runs at several iteration counts")
    b.add_argument("--mode", choices=("optimize", "sample"), default="optimize")
    b.add_argument("--iterations", type=int, nargs="*", default=None,
                   help="defaults: 100 200 300 (optimize) or 1 2 3 (sample)")
    b.add_argument("--backbone", default="toy")
    b.add_argument("--style", default=None, help="example image; a procedural texture if omitted")
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--repeats", type=int, default=3, help="runs per count, minimum reported")
    b.add_argument("--json", action="store_true", help="print rows as JSON")

    ft = sub.add_parser("finetune-vae", help="fit the decoder to one example image")
    ft.add_argument("--style", required=True)
    ft.add_argument("--backbone", default="toy")
    ft.add_argument("--steps", type=int, default=50)
    ft.add_argument("--lr", type=float, default=1e-4)
    ft.add_argument("--out", required=True, help="where to write the decoder state (torch .pt)")
    return parser


def _task_config(args) -> TaskConfig:
    data = {}
    base = None
    if args.config:
        cfg = load_task_config(args.config)
        data, base = cfg.to_dict(), cfg.base_dir
    if args.task:
        data["task"] = args.task
    for flag in RUN_FLAGS:
        value = getattr(args, flag)
        if value is None:
            continue
        # paths given on the command line are relative to the working directory
        if flag in PATH_FLAGS and not (flag == "backbone" and value.startswith("toy")):
            value = str(Path(value).resolve())
        data[RENAMED.get(flag, flag)] = value
    if args.size is not None:
        data["size"] = list(args.size)
    if args.vae_finetune:
        data["vae_finetune"] = True
    data.setdefault("task", None)
    data.setdefault("out", None)
    return TaskConfig.from_dict(data, base_dir=base)


def cmd_run(args) -> int:
    cfg = _task_config(args)
    out = run_task(cfg)
    print(f"wrote {out.image_path} and {out.manifest_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    iterations = args.iterations
    if iterations is None:
        iterations = [100, 200, 300] if args.mode == "optimize" else [1, 2, 3]
    if not iterations:
        print("[]" if args.json else "no configurations")
        return EXIT_OK
    backbone = load_backbone(args.backbone)
    example = load_image(args.style) if args.style else None
    rows = bench(backbone, iterations, args.mode, example=example, steps=args.steps,
                 repeats=args.repeats)
    ok = scaling_ok(rows)
    if args.json:
        print(json.dumps({"rows": [r.__dict__ for r in rows], "scaling_ok": ok}))
    else:
        print(format_table(rows))
        print("scaling:", "ok" if ok else "NOT as expected")
    return EXIT_OK


def cmd_finetune(args) -> int:
    backbone = load_backbone(args.backbone)
    image = load_image(args.style)
    result = finetune_decoder(backbone, image, steps=args.steps, lr=args.lr)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    torch.save(result.decoder.state_dict(), args.out)
    print(f"L1 {result.losses[0]:.5f} -> {result.losses[-1]:.5f}; decoder written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": cmd_run, "bench": cmd_bench, "finetune-vae": cmd_finetune}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackboneError as exc:
        print(f"backbone error: {exc}", file=sys.stderr)
        return EXIT_BACKBONE
    except (ImageFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
