"""Command-line interface: gen | train | eval | quant-sweep.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
The ADCCAL_OUT_ROOT environment variable overrides the configured output
root directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from adccal import pipeline
from adccal.calibrate import CalibrationError, TrainingDiverged
from adccal.config import ConfigError, load_config
from adccal.containers import ContainerError
from adccal.nn import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="adccal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate waveform records and ADC captures")
    p_gen.add_argument("--config", default=None, help="run configuration file")
    p_gen.add_argument("--out", default=None, help="output directory (default: <out_root>/dataset)")

    p_train = sub.add_parser("train", help="train the shared corrector network")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--dataset", required=True, help="directory with cap_train_*.cap")
    p_train.add_argument("--model-out", default=None, help="model file to write")
    p_train.add_argument("--resume", default=None, help="model file to continue from")

    p_eval = sub.add_parser("eval", help="evaluate ideal/nonideal/shift/nn variants")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--capture", required=True,
                        help="capture file, or a dataset directory of cap_eval_*.cap")
    p_eval.add_argument("--out", default=None, help="CSV output directory")

    p_quant = sub.add_parser("quant-sweep", help="post-training quantization sweep")
    p_quant.add_argument("--config", default=None)
    p_quant.add_argument("--model", required=True)
    p_quant.add_argument("--capture", required=True)
    p_quant.add_argument("--out", default=None, help="sweep CSV path")
    return parser


def _out_root(cfg) -> Path:
    return Path(os.environ.get("ADCCAL_OUT_ROOT", cfg.run.out_dir))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    root = _out_root(cfg)
    try:
        if args.command == "gen":
            out = Path(args.out) if args.out else root / "dataset"
            pipeline.run_gen(cfg, out)
        elif args.command == "train":
            model_out = Path(args.model_out) if args.model_out else root / "model.netmdl"
            pipeline.run_train(cfg, args.dataset, model_out, resume=args.resume)
        elif args.command == "eval":
            out = Path(args.out) if args.out else root / "eval"
            pipeline.run_eval(cfg, args.model, args.capture, out)
        elif args.command == "quant-sweep":
            out = Path(args.out) if args.out else root / "quant_sweep.csv"
            pipeline.run_quant_sweep(cfg, args.model, args.capture, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.DataError, ContainerError, FileNotFoundError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
