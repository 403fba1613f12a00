"""Command line entry points: train, sweep, coordinator, worker, eval."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_overrides
from .data import CorpusError, load_corpus
from .engine import Recorder, prepare, run_diloco
from .metrics import MetricsLog, write_sidecar
from .wire import ProtocolError

log = logging.getLogger("diloco")

SWEEP_AXES = ("H", "k", "drop_prob", "prune_frac", "pretrain_steps", "outer_opt", "data_regime")
SUMMARY_COLUMNS = ("run_id", "axis", "value", "final_val_ppl", "compute_inner_steps",
                   "sequential_inner_steps", "dropped_total", "seconds")


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("DILOCO_OUT_DIR") or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args, extra: dict | None = None) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    if extra:
        overrides = {**extra, **overrides}
    return load_config(args.config, args.preset, overrides, args.seed)


def _run_id(cfg: RunConfig, default: str) -> RunConfig:
    if cfg.run_id:
        return cfg
    return dataclasses.replace(cfg, run_id=f"{default}-s{cfg.seed}")


def _execute(cfg: RunConfig, out: Path, transport: str | None = None, bind=None):
    """One run with its CSV, JSON sidecar and final parameters written to ``out``."""
    corpus = load_corpus(cfg.corpus_path())
    csv_path = out / f"{cfg.run_id}.csv"
    if csv_path.exists():
        csv_path.unlink()
    start = time.perf_counter()
    with MetricsLog(csv_path) as sink:
        if bind is not None:
            from .transport import coordinator_serve
            result = coordinator_serve(bind, cfg, corpus, sink=sink)
        else:
            result = run_diloco(cfg, corpus, transport=transport, sink=sink)
    seconds = time.perf_counter() - start
    np.save(out / f"{cfg.run_id}_params.npy", result.theta)
    write_sidecar(out / f"{cfg.run_id}.json", cfg.resolved().to_dict(),
                  {**result.summary, "seconds": seconds})
    log.info("%s: final val ppl %.4f (%.1fs) -> %s", cfg.run_id,
             result.summary["final_val_ppl"], seconds, csv_path)
    return result, seconds


def cmd_train(args) -> int:
    cfg = _run_id(_config(args), args.preset or "train")
    result, _ = _execute(cfg, _out_dir(args))
    print(f"{cfg.run_id} final_val_ppl={result.summary['final_val_ppl']:.6g}")
    return 0


def _sweep_values(axis: str, text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    return [parse_overrides([f"{axis}={v}"])[axis] for v in vals]


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"axis {args.axis!r} not sweepable; choose from {', '.join(SWEEP_AXES)}")
    base = _config(args)
    user_keys = set(parse_overrides(args.overrides))
    out = _out_dir(args)
    rows = []
    for value in _sweep_values(args.axis, args.values):
        change = {args.axis: value}
        if args.axis == "H":
            # communication frequency changes, total inner steps stay fixed
            n = base.total_inner_steps
            if n % int(value):
                raise ConfigError(f"H: {value} does not divide the {n} total inner steps")
            change["T"] = n // int(value)
        if args.axis == "outer_opt" and "outer_lr" not in user_keys:
            change["outer_lr"] = None
        cfg = dataclasses.replace(base, **change).validate()
        cfg = dataclasses.replace(cfg, run_id=f"{base.run_id or 'sweep'}-{args.axis}={value}")
        result, seconds = _execute(cfg, out)
        s = result.summary
        rows.append(dict(run_id=cfg.run_id, axis=args.axis, value=value,
                         final_val_ppl=s["final_val_ppl"],
                         compute_inner_steps=s["compute_inner_steps"],
                         sequential_inner_steps=s["sequential_inner_steps"],
                         dropped_total=s["dropped_total"], seconds=round(seconds, 3)))
        print(f"{cfg.run_id} final_val_ppl={s['final_val_ppl']:.6g}")
    summary = out / f"{base.run_id or 'sweep'}-{args.axis}-summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    print(f"summary -> {summary}")
    return 0


def cmd_coordinator(args) -> int:
    cfg = _run_id(_config(args, {"transport": "tcp"}), "coordinator")
    result, _ = _execute(cfg, _out_dir(args), bind=args.bind)
    print(f"{cfg.run_id} final_val_ppl={result.summary['final_val_ppl']:.6g}")
    return 0


def cmd_worker(args) -> int:
    from .transport import worker_run

    cfg = _config(args, {"transport": "tcp"})
    worker_run(args.connect, args.worker_id, cfg, load_corpus(cfg.corpus_path()))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = np.load(args.params)
    expected = cfg.model_config().num_params
    if params.shape != (expected,):
        raise ConfigError(f"params has shape {params.shape}, model needs ({expected},)")
    prep = prepare(cfg, load_corpus(cfg.corpus_path()))
    ppl = Recorder(cfg, prep.val).ppl(params)
    print(f"val_ppl={ppl:.6g}")
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML file or a run's JSON sidecar")
    p.add_argument("--preset", help="named configuration (baseline, diloco-default, ...)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help="output directory (default $DILOCO_OUT_DIR or ./runs)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diloco", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one run with the in-process transport")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="one run per value of a config key")
    _common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("coordinator", help="serve a TCP run")
    _common(p)
    p.add_argument("--bind", default="127.0.0.1:5555", help="host:port")
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="join a TCP run")
    _common(p)
    p.add_argument("--connect", required=True, help="coordinator host:port")
    p.add_argument("--worker-id", type=int, required=True)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("eval", help="validation perplexity of saved parameters")
    _common(p)
    p.add_argument("--params", required=True, help=".npy parameter vector")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, ProtocolError, ConnectionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
