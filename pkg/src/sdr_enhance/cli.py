"""Command-line entry point: ``sdr-enhance {gen,train,eval,sweep,curve,trace}``.

Exit codes: 0 success, 1 partial failure or diverged training, 2 invalid
configuration or missing/unwritable files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .rnn import TrainingDiverged

log = logging.getLogger("sdr_enhance")


def _config(args) -> ex.ExperimentConfig:
    return ex.load_config(args.config)


def _seed(args, cfg):
    return cfg.seeds[0] if args.seed is None else args.seed


def _snr(args, cfg):
    return cfg.snr_list[0] if args.snr is None else args.snr


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdr-enhance", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False):
        p.add_argument("--config", help="TOML (or JSON) experiment config")
        p.add_argument("--out", required=True, help="output directory or file")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="directory written by `gen`")
        if model:
            p.add_argument("--model", help="directory written by `train`")
        return p

    common(sub.add_parser("gen", help="generate clean, noise and mixture CSVs"))
    p = common(sub.add_parser("train", help="train one model"), data=True)
    p.add_argument("--loss", required=True)
    p.add_argument("--snr", type=float)
    p = common(sub.add_parser("eval", help="score a model on the test mixture"), data=True, model=True)
    p.add_argument("--snr", type=float)
    p.add_argument("--loss", default="")
    p.add_argument("--eval-G", type=int)
    p.add_argument("--bypass", choices=["oracle", "identity"])
    p = common(sub.add_parser("sweep", help="loss x SNR x seed sweep with tables"))
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("curve", help="theoretical SDR(gamma) curve")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma-min", type=float, default=0.01)
    p.add_argument("--gamma-max", type=float, default=0.99)
    p.add_argument("--steps", type=int, default=99)
    p.add_argument("--include", type=float, nargs="*", default=[], help="extra gamma values")
    p = common(sub.add_parser("trace", help="clean/mixture/estimate traces"), data=True, model=True)
    p.add_argument("--snr", type=float)
    p.add_argument("--bypass", choices=["oracle", "identity"])

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        return _dispatch(args)
    except ex.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "curve":
        rows = ex.cmd_curve(args.gamma_min, args.gamma_max, args.steps, args.out, args.include)
        print(f"wrote {len(rows)} rows to {args.out}")
        return 0

    cfg = _config(args)
    if args.command == "gen":
        files = ex.cmd_gen(cfg, args.out, _seed(args, cfg))
        print(f"wrote {len(files)} signals to {args.out}")
        return 0
    if args.command == "train":
        result, elapsed = ex.cmd_train(cfg, args.data, args.loss, _snr(args, cfg), args.out, _seed(args, cfg))
        print(
            f"trained {args.loss}: {result.n_train} train / {result.n_val} val windows, "
            f"best epoch {result.best_epoch}, stopped at {result.stopped_epoch} ({elapsed:.1f} s)"
        )
        return 0
    if args.command == "eval":
        if args.model is None and args.bypass is None:
            raise ex.ConfigError("eval needs --model or --bypass")
        out = Path(args.out)
        out_csv = out / "eval.csv" if out.suffix != ".csv" else out
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        report = ex.cmd_eval(
            cfg,
            args.model,
            args.data,
            _snr(args, cfg),
            args.eval_G,
            loss=args.loss,
            seed=_seed(args, cfg),
            bypass=args.bypass,
            out_csv=out_csv,
        )
        print(f"SDR {report.sdr_db:.2f} dB, SIR {report.sir_db:.2f} dB -> {out_csv}")
        return 0
    if args.command == "sweep":
        result = ex.cmd_sweep(cfg, args.out, jobs=args.jobs)
        print(ex.format_tables(result))
        if result.failures:
            print(f"{len(result.failures)} run(s) failed: {sorted(result.failures)}", file=sys.stderr)
            return 1
        return 0
    if args.command == "trace":
        if args.model is None and args.bypass is None:
            raise ex.ConfigError("trace needs --model or --bypass")
        out = ex.cmd_trace(cfg, args.model, args.data, _snr(args, cfg), args.out, args.bypass)
        print(f"wrote trace to {out}")
        return 0
    raise ex.ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
