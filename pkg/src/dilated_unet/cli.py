"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a
gradient check or benchmark guard that does not pass).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import DilatedUNetError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dilated-unet", description="Dilated-UNet toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True, help="JSON file {model: {...}, train: {...}}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="write the JSON-lines training log here instead of stdout")

    p = sub.add_parser("eval", help="print a metrics report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("predict", help="write the argmax label mask of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of a block pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f64", action="store_true")

    p = sub.add_parser("bench", help="time the neighborhood kernel against the dense oracle")
    p.add_argument("--sizes", type=_int_list, default=[8, 16, 32])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--delta", type=_int_list, default=[1, 2])
    p.add_argument("--repeats", type=int, default=5)
    return parser


def _cmd_synth(args) -> int:
    from .io import synth_generate

    out = synth_generate(args.n, args.size, args.classes, args.seed, args.out)
    print(json.dumps({"out": str(out), "count": args.n}))
    return 0


def _cmd_train(args) -> int:
    from .io import checkpoint_save, load_dataset
    from .training import TrainConfig, train_loop
    from .unet import DilatedUNet, ModelConfig

    raw = json.loads(Path(args.config).read_text())
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    data = load_dataset(args.data, model_cfg.num_classes)
    model = DilatedUNet(model_cfg, seed=train_cfg.seed)
    log_file = open(args.log, "w") if args.log else sys.stdout
    try:
        def emit(record):
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

        train_loop(model, data, train_cfg, on_record=emit)
    finally:
        if args.log:
            log_file.close()
    checkpoint_save(model.params, model_cfg, args.out)
    return 0


def _cmd_eval(args) -> int:
    from .io import checkpoint_load, load_dataset
    from .metrics import evaluate
    from .unet import DilatedUNet

    params, config = checkpoint_load(args.ckpt)
    data = load_dataset(args.data, config.num_classes)
    print(evaluate(DilatedUNet(config, params), data).to_json())
    return 0


def _cmd_predict(args) -> int:
    from .io import checkpoint_load, pgm_read, pgm_write_raw
    from .unet import DilatedUNet

    params, config = checkpoint_load(args.ckpt)
    mask = DilatedUNet(config, params).predict(pgm_read(args.image))
    pgm_write_raw(args.out, mask.astype(np.uint8))
    return 0


def run_gradcheck(seed: int, f64: bool) -> float:
    from .gradcheck import block_pair_check

    return block_pair_check(seed, "f64" if f64 else "f32")


def _cmd_gradcheck(args) -> int:
    err = run_gradcheck(args.seed, args.f64)
    threshold = 1e-6 if args.f64 else 1e-4
    ok = err < threshold
    print(json.dumps({"max_relative_error": err, "threshold": threshold,
                      "mode": "f64" if args.f64 else "f32", "pass": ok}))
    return 0 if ok else 2


def _cmd_bench(args) -> int:
    from .bench import BenchGuardError, run_bench

    try:
        report = run_bench(args.sizes, args.k, args.delta, repeats=args.repeats)
    except BenchGuardError as exc:
        print(f"bench aborted: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=2))
    return 0


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
}


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (DilatedUNetError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
