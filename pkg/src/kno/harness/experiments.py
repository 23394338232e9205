"""The five experiment protocols, driven by ``ExperimentConfig``.

Each experiment writes three files into its output directory:

* ``report.json`` - resolved configuration, dataset hashes and results;
* ``table.tsv`` - one flat row per evaluated configuration, for plotting;
* ``metrics.jsonl`` - per-epoch training records.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from kno.model import ModelConfig, count_parameters, init_params
from kno.pdegen import (
    Dataset,
    build_dataset,
    burgers_problem,
    downsample_dataset,
    ns_problem,
)
from kno.persistence import (
    Checkpoint,
    MetricsLog,
    dataset_hash,
    load_dataset,
    save_dataset,
)
from kno.spectral import GrfParams
from kno.training import EpochRecord, Metrics, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

KINDS = ("mesh_independence", "long_term", "zeroshot_resolution", "zeroshot_length", "ablation")
ALIASES = {
    "mesh": "mesh_independence",
    "longterm": "long_term",
    "zeroshot-res": "zeroshot_resolution",
    "zeroshot-len": "zeroshot_length",
    "ablation": "ablation",
}
DATA_ENV = "KNO_DATA_DIR"


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "kno"))


@dataclass
class ExperimentConfig:
    kind: str
    data: dict
    settings: list[tuple[int, int, int]]
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_resolution: int | None = None
    eval_resolutions: list[int] = field(default_factory=list)
    horizon: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None

    def __post_init__(self):
        self.kind = ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if not self.settings:
            raise ValueError("settings list must be non-empty")
        self.settings = [tuple(int(v) for v in s) for s in self.settings]
        if not ("path" in self.data or "problem" in self.data):
            raise ValueError("data needs either 'path' or a generation 'problem'")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        raw["train"] = TrainConfig(**raw.get("train", {}))
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "data": self.data,
            "settings": [list(s) for s in self.settings],
            "model": self.model,
            "train": self.train.to_dict(),
            "train_resolution": self.train_resolution,
            "eval_resolutions": list(self.eval_resolutions),
            "horizon": self.horizon,
            "seeds": list(self.seeds),
        }

    def model_config(self, setting, d: int) -> ModelConfig:
        o, f, r = setting
        return ModelConfig(o=o, f=f, r_train=r, d=d, **self.model)


def problem_from_spec(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind")
    if "ic" in spec:
        spec["ic"] = GrfParams(**spec["ic"])
    if kind == "burgers1d":
        return burgers_problem(**spec)
    if kind == "navier_stokes2d":
        return ns_problem(**spec)
    raise ValueError(f"unknown PDE kind {kind!r}")


def _spec_key(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def resolve_dataset(data: dict, cache_dir=None) -> Dataset:
    """Load ``data['path']`` or generate from ``data['problem']``.

    Generated datasets are cached under ``cache_dir`` (or the data root when
    ``data['cache']`` is true), keyed by the generation spec.
    """
    if "path" in data:
        path = Path(data["path"])
        if not path.is_absolute():
            path = data_root() / path
        return load_dataset(path)
    gen = {k: data[k] for k in ("problem", "n_train", "n_test", "seed") if k in data}
    if cache_dir is None and data.get("cache"):
        cache_dir = data_root()
    if cache_dir is not None:
        target = Path(cache_dir) / _spec_key(gen)
        if (target / "dataset.json").exists():
            return load_dataset(target)
    ds = build_dataset(
        problem_from_spec(gen["problem"]), gen["n_train"], gen["n_test"], gen.get("seed", 0)
    )
    if cache_dir is not None:
        save_dataset(ds, target)
    return ds


def at_resolution(ds: Dataset, s: int | None) -> Dataset:
    if s is None or s == ds.s:
        return ds
    if ds.s % s:
        raise ValueError(f"resolution {s} does not divide dataset grid {ds.s}")
    return downsample_dataset(ds, ds.s // s)


def train_logged(ds, mcfg, tcfg, mlog: MetricsLog | None, tag: dict):
    def on_epoch(rec: EpochRecord):
        if mlog is None:
            return
        base = dict(tag, epoch=rec.epoch)
        mlog.write(dict(base, metric="lr", value=rec.lr))
        mlog.write(dict(base, metric="train_total", value=rec.train.total))
        mlog.write(dict(base, metric="train_pred", value=rec.train.pred_loss))
        mlog.write(dict(base, metric="train_recon", value=rec.train.recon_loss))
        if rec.test is not None:
            mlog.write(dict(base, metric="test_mse", value=rec.test.mse))
            mlog.write(dict(base, metric="test_rel_l2", value=rec.test.rel_l2))

    return train(ds, mcfg, tcfg, on_epoch=on_epoch)


def _metrics_row(m: Metrics) -> dict:
    return {"mse": m.mse, "rel_l2": m.rel_l2}


def relative_spread(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float((values.max() - values.min()) / values.mean())


def mesh_independence(cfg: ExperimentConfig, ds: Dataset, mlog=None) -> dict:
    """Train once per setting at ``train_resolution``; evaluate zero-shot at every other resolution."""
    train_s = cfg.train_resolution or ds.s
    eval_s = list(cfg.eval_resolutions) or [ds.s]
    train_ds = at_resolution(ds, train_s)
    rows = []
    for setting in cfg.settings:
        mcfg = cfg.model_config(setting, ds.problem.d)
        ckpt, _ = train_logged(train_ds, mcfg, cfg.train, mlog, {"setting": list(setting)})
        train_metric = evaluate(ckpt, train_ds.test, mcfg.r_train, cfg.train.stride)
        mses = {}
        for s in eval_s:
            m = evaluate(ckpt, at_resolution(ds, s).test, mcfg.r_train, cfg.train.stride)
            mses[s] = m.mse
            rows.append(
                dict(setting=list(setting), resolution=s, params=count_parameters(mcfg), **_metrics_row(m))
            )
        rows.append(
            dict(
                setting=list(setting),
                resolution=train_s,
                params=count_parameters(mcfg),
                role="train_resolution",
                **_metrics_row(train_metric),
            )
        )
        spread = relative_spread(list(mses.values()))
        rows.append(dict(setting=list(setting), summary="spread", value=spread))
    spreads = [r["value"] for r in rows if r.get("summary") == "spread"]
    return {"rows": rows, "spread": spreads}


def long_term(cfg: ExperimentConfig, ds: Dataset, mlog=None) -> dict:
    """Multi-step rollouts over ``horizon`` steps with per-step error curves."""
    horizon = cfg.horizon or (ds.snapshots.shape[1] - cfg.model.get("m", 1))
    rows = []
    for setting in cfg.settings:
        mcfg = cfg.model_config(setting, ds.problem.d)
        ckpt, _ = train_logged(ds, mcfg, cfg.train, mlog, {"setting": list(setting)})
        m = evaluate(ckpt, ds.test, horizon, cfg.train.stride)
        rows.append(
            dict(
                setting=list(setting),
                horizon=horizon,
                params=count_parameters(mcfg),
                per_step_mse=[float(v) for v in m.per_step_mse],
                per_step_rel_l2=[float(v) for v in m.per_step],
                final_mse=float(m.per_step_mse[-1]),
                **_metrics_row(m),
            )
        )
    return {"rows": rows}


def zeroshot_resolution(cfg: ExperimentConfig, ds: Dataset, mlog=None) -> dict:
    """Train at the coarse resolution, evaluate at coarse and every finer resolution."""
    coarse = cfg.train_resolution or ds.s
    fine = list(cfg.eval_resolutions) or [ds.s]
    coarse_ds = at_resolution(ds, coarse)
    rows = []
    for setting in cfg.settings:
        mcfg = cfg.model_config(setting, ds.problem.d)
        horizon = cfg.horizon or mcfg.r_train
        ckpt, _ = train_logged(coarse_ds, mcfg, cfg.train, mlog, {"setting": list(setting)})
        base = evaluate(ckpt, coarse_ds.test, horizon, cfg.train.stride)
        rows.append(dict(setting=list(setting), resolution=coarse, role="train", **_metrics_row(base)))
        for s in fine:
            m = evaluate(ckpt, at_resolution(ds, s).test, horizon, cfg.train.stride)
            rows.append(
                dict(
                    setting=list(setting),
                    resolution=s,
                    role="zero-shot",
                    ratio_to_train=m.mse / base.mse,
                    **_metrics_row(m),
                )
            )
    return {"rows": rows}


def zeroshot_length(cfg: ExperimentConfig, ds: Dataset, mlog=None) -> dict:
    """Train on the first ``m + r_train`` snapshots, then extend the rollout to ``horizon`` steps."""
    rows = []
    for setting in cfg.settings:
        mcfg = cfg.model_config(setting, ds.problem.d)
        horizon = cfg.horizon or (ds.snapshots.shape[1] - mcfg.m)
        if horizon <= mcfg.r_train:
            raise ValueError("zero-shot length horizon must exceed r_train")
        n_sup = mcfg.m + mcfg.r_train
        sup_ds = Dataset(
            np.ascontiguousarray(ds.snapshots[:, :n_sup]), ds.n_train, ds.problem, ds.seeds
        )
        ckpt, _ = train_logged(sup_ds, mcfg, cfg.train, mlog, {"setting": list(setting)})
        supervised = evaluate(ckpt, ds.test[:, :n_sup], mcfg.r_train, stride=n_sup)
        extended = evaluate(ckpt, ds.test[:, : mcfg.m + horizon], horizon, stride=mcfg.m + horizon)
        ext_mse = extended.per_step_mse
        rows.append(
            dict(
                setting=list(setting),
                r_train=mcfg.r_train,
                horizon=horizon,
                supervised_per_step_mse=[float(v) for v in supervised.per_step_mse],
                extended_per_step_mse=[float(v) for v in ext_mse],
                prefix_identical=bool(
                    np.array_equal(ext_mse[: mcfg.r_train], supervised.per_step_mse)
                    and np.array_equal(extended.per_step[: mcfg.r_train], supervised.per_step)
                ),
                supervised_mean_mse=float(ext_mse[: mcfg.r_train].mean()),
                extended_mean_mse=float(ext_mse[mcfg.r_train :].mean()),
                supervised_mse=supervised.mse,
            )
        )
    return {"rows": rows}


ABLATIONS = ("full", "no_reconstruction", "no_conv", "no_koopman")


def ablation_variant(name: str, mcfg: ModelConfig, tcfg: TrainConfig):
    if name == "full":
        return mcfg, tcfg
    if name == "no_reconstruction":
        return mcfg, replace(tcfg, lambda_rec=0.0)
    if name == "no_conv":
        return replace(mcfg, conv=False), tcfg
    if name == "no_koopman":
        return replace(mcfg, spectral=False), tcfg
    raise ValueError(f"unknown ablation {name!r}")


def ablation(cfg: ExperimentConfig, ds: Dataset, mlog=None) -> dict:
    """Matched-budget variants over every seed; reports per-seed and median test MSE."""
    rows = []
    medians = {}
    for setting in cfg.settings:
        base_m = cfg.model_config(setting, ds.problem.d)
        per_variant = {}
        for name in ABLATIONS:
            scores = []
            for seed in cfg.seeds:
                mcfg, tcfg = ablation_variant(name, base_m, replace(cfg.train, seed=seed))
                tag = {"setting": list(setting), "variant": name, "seed": seed}
                ckpt, _ = train_logged(ds, mcfg, tcfg, mlog, tag)
                m = evaluate(ckpt, ds.test, mcfg.r_train, tcfg.stride)
                scores.append(m.mse)
                rows.append(
                    dict(
                        setting=list(setting),
                        variant=name,
                        seed=seed,
                        params=count_parameters(mcfg),
                        model_config=mcfg.to_dict(),
                        lambda_rec=tcfg.lambda_rec,
                        **_metrics_row(m),
                    )
                )
            per_variant[name] = float(np.median(scores))
        medians[str(list(setting))] = per_variant
    return {"rows": rows, "median_mse": medians}


RUNNERS = {
    "mesh_independence": mesh_independence,
    "long_term": long_term,
    "zeroshot_resolution": zeroshot_resolution,
    "zeroshot_length": zeroshot_length,
    "ablation": ablation,
}


def _flatten(row: dict) -> dict:
    flat = {}
    for k, v in row.items():
        flat[k] = json.dumps(v) if isinstance(v, (list, dict)) else v
    return flat


def write_table(rows: list[dict], path: Path) -> None:
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow(_flatten(row))


def run_experiment(cfg: ExperimentConfig, out=None, ds: Dataset | None = None, cache_dir=None) -> dict:
    """Run one experiment end to end; writes report files when ``out`` is given."""
    out = Path(out or cfg.out) if (out or cfg.out) else None
    if ds is None:
        ds = resolve_dataset(cfg.data, cache_dir)
    mlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if metrics_path.exists():
            metrics_path.unlink()
        mlog = MetricsLog(metrics_path, cfg.kind, cfg.to_dict())
    try:
        results = RUNNERS[cfg.kind](cfg, ds, mlog)
    finally:
        if mlog is not None:
            mlog.close()
    report = {
        "experiment": cfg.kind,
        "config": cfg.to_dict(),
        "dataset": {
            "sha256": dataset_hash(ds),
            "shape": list(ds.snapshots.shape),
            "n_train": ds.n_train,
            "n_test": ds.n_test,
            "problem": ds.problem.to_dict(),
        },
        "results": results,
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_table(results["rows"], out / "table.tsv")
    return report


def initial_checkpoint(mcfg: ModelConfig, tcfg: TrainConfig, ds: Dataset) -> Checkpoint:
    """Untrained model with the dataset's normalizer, as returned by ``train`` with zero epochs."""
    return Checkpoint(init_params(mcfg, tcfg.seed), mcfg, tcfg, ds.mean.copy(), ds.std.copy())
