"""Command-line entry point: ``kno generate | train | eval | experiment``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from kno.harness.experiments import (
    ALIASES,
    ExperimentConfig,
    at_resolution,
    data_root,
    problem_from_spec,
    run_experiment,
    train_logged,
)
from kno.model import ModelConfig
from kno.pdegen import SolverBlowUpError, build_dataset
from kno.persistence import (
    CheckpointError,
    MetricsLog,
    TensorFormatError,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from kno.training import NonFiniteLossError, TrainConfig, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("kno")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setting(text: str) -> tuple[int, int, int]:
    try:
        o, f, r = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--setting expects o,f,r integers, got {text!r}")
    return o, f, r


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _read_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _data_path(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or p.exists() else data_root() / p


def cmd_generate(args) -> int:
    cfg = _read_config(args.config)
    if "problem" not in cfg:
        raise UsageError("generate config needs a 'problem' entry")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    problem = problem_from_spec(cfg["problem"])
    ds = build_dataset(problem, cfg.get("n_train", 100), cfg.get("n_test", 20), seed)
    resolutions = args.resolution or cfg.get("resolutions") or [problem.s]
    out = Path(args.out)
    for s in resolutions:
        part = at_resolution(ds, s)
        target = out if len(resolutions) == 1 else out / f"s{s}"
        save_dataset(part, target)
        print(
            f"wrote {target}: {part.snapshots.shape[0]} trajectories "
            f"({part.n_train} train / {part.n_test} test), grid {s}, "
            f"{part.snapshots.shape[1]} snapshots over t in [0, {problem.t_end}]"
        )
    return EXIT_OK


def _configs(args, cfg: dict, d: int) -> tuple[ModelConfig, TrainConfig]:
    model = dict(cfg.get("model", {}))
    if args.setting:
        model["o"], model["f"], model["r_train"] = args.setting
    if not {"o", "f", "r_train"} <= model.keys():
        raise UsageError("model needs o, f, r_train (config 'model' or --setting o,f,r)")
    model["d"] = d
    tcfg = TrainConfig(**cfg.get("train", {}))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    return ModelConfig(**model), tcfg


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    ds = load_dataset(_data_path(args.data))
    ds = at_resolution(ds, args.resolution)
    mcfg, tcfg = _configs(args, cfg, ds.problem.d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with MetricsLog(out / "history.jsonl", "train", {"model": mcfg.to_dict(), "train": tcfg.to_dict()}) as mlog:
        ckpt, history = train_logged(ds, mcfg, tcfg, mlog, {})
    save_checkpoint(ckpt, out / "checkpoint")
    metrics = evaluate(ckpt, ds.test, args.horizon or mcfg.r_train, tcfg.stride)
    print(json.dumps({"epochs": len(history), "test": metrics.to_dict()}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_data_path(args.ckpt))
    ds = at_resolution(load_dataset(_data_path(args.data)), args.resolution)
    horizon = args.horizon or ckpt.model_config.r_train
    metrics = evaluate(ckpt, ds.split(args.split), horizon)
    print(json.dumps(metrics.to_dict(), indent=2))
    return EXIT_OK


def cmd_experiment(args) -> int:
    raw = _read_config(args.config)
    raw["kind"] = ALIASES[args.kind]
    if args.setting:
        raw["settings"] = [list(s) for s in args.setting]
    if args.resolution:
        raw["eval_resolutions"] = args.resolution
    if args.horizon is not None:
        raw["horizon"] = args.horizon
    cfg = ExperimentConfig.from_dict(raw)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        if cfg.kind != "ablation":
            cfg.seeds = [args.seed]
    out = Path(args.out)
    report = run_experiment(cfg, out)
    print(json.dumps(report["results"], indent=2, default=float)[:4000])
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kno", description="Koopman neural operator toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--resolution", type=_int_list, help="grid size(s), comma separated")
        p.add_argument("--horizon", type=int)
        if data:
            p.add_argument("--data", required=True, help="dataset directory (relative paths resolve under $KNO_DATA_DIR)")

    g = sub.add_parser("generate", help="generate PDE datasets")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model")
    common(t, data=True)
    t.add_argument("--setting", type=_setting, help="o,f,r")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=int)
    e.add_argument("--resolution", type=int)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run one of the five experiments")
    x.add_argument("kind", choices=sorted(ALIASES))
    common(x)
    x.add_argument("--setting", type=_setting, action="append", help="o,f,r (repeatable)")
    x.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "train" and args.resolution:
        args.resolution = args.resolution[0]
    try:
        return args.func(args)
    except (FileNotFoundError, TensorFormatError, CheckpointError, json.JSONDecodeError) as err:
        print(f"kno: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (SolverBlowUpError, NonFiniteLossError) as err:
        print(f"kno: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, TypeError, KeyError) as err:
        print(f"kno: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
