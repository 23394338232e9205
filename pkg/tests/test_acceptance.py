"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Generated datasets are cached in the pytest cache directory so reruns skip
the solver work; runtime limits are checked on the test body.
"""

from dataclasses import replace

import numpy as np
import pytest

from kno.harness.cli import main
from kno.harness.experiments import ExperimentConfig, resolve_dataset, run_experiment
from kno.model import ModelConfig, count_parameters, init_params, kno_step
from kno.pdegen import burgers_problem, burgers_solve, grid, ns_problem, ns_vorticity_solve
from kno.persistence import load_checkpoint, save_checkpoint, serialized_scalar_count, sha256_file
from kno.spectral import dft_oracle, fft_forward, fft_inverse, grf_sample, pad_modes, truncate_modes
from kno.training import TrainConfig, evaluate, gradient_check, model_loss_fn, train

BURGERS_256 = {
    "problem": {"kind": "burgers1d", "s": 256},
    "n_train": 200,
    "n_test": 40,
    "seed": 0,
}
BURGERS_2048 = {
    "problem": {"kind": "burgers1d", "s": 2048},
    "n_train": 40,
    "n_test": 10,
    "seed": 1000,
}
NS_1E3 = {
    "problem": {"kind": "navier_stokes2d", "nu": 1e-3, "s": 64, "dt_internal": 1e-2},
    "n_train": 80,
    "n_test": 20,
    "seed": 0,
}


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture(scope="module")
def burgers_256(data_cache):
    return resolve_dataset(BURGERS_256, data_cache)


def test_criterion_1_spectral_correctness(criterion):
    with criterion(1, "spectral correctness", limit_s=10) as info:
        rng = np.random.default_rng(2024)
        worst_oracle = worst_round = worst_parseval = 0.0
        for i in range(100):
            s = int(2 ** rng.integers(2, 9))
            d = 1 + i % 2
            x = rng.standard_normal((s,) * d)
            c = fft_forward(x).coeffs
            worst_oracle = max(worst_oracle, np.abs(c - dft_oracle(x).coeffs).max())
            worst_round = max(worst_round, np.abs(fft_inverse(fft_forward(x)) - x).max())
            w = np.full(c.shape[-1], 2.0)
            w[0] = w[-1] = 1.0
            energy = np.sum(w * np.abs(c) ** 2) / x.size
            worst_parseval = max(worst_parseval, abs(energy - np.sum(x**2)) / np.sum(x**2))
        info.update(oracle=worst_oracle, round_trip=worst_round, parseval=worst_parseval)
        assert worst_oracle < 1e-8
        assert worst_round < 1e-10
        assert worst_parseval < 1e-10


def test_criterion_2_gradient_fidelity(criterion):
    with criterion(2, "gradient fidelity", limit_s=120) as info:
        cfg = ModelConfig(o=4, f=3, r_train=2, units=1)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 16, 1))
        y = rng.standard_normal((2, 2, 16, 1))
        fn = model_loss_fn(x, y, cfg, 0.5)
        params = init_params(cfg, 11)
        full = gradient_check(fn, params)
        layers = {
            "encoder": ["encoder.weight", "encoder.bias"],
            "koopman": ["unit0.koopman"],
            "conv": ["unit0.conv.weight", "unit0.conv.bias"],
            "decoder": ["decoder.hidden.weight", "decoder.hidden.bias", "decoder.out.weight", "decoder.out.bias"],
        }
        per_layer = {k: gradient_check(fn, params, names=v).max_rel_error for k, v in layers.items()}
        info["full"] = full.max_rel_error
        info.update(per_layer)
        assert full.passed(1e-3), full
        assert all(v < 1e-4 for v in per_layer.values()), per_layer


def test_criterion_3_solver_physics(criterion):
    with criterion(3, "solver physics", limit_s=300) as info:
        tg = []
        for nu in (1e-3, 1e-4):
            p = ns_problem(nu=nu, s=64, t_end=1.0, forcing="none")
            x = grid(64)
            w0 = np.sin(2 * np.pi * x)[:, None] * np.cos(2 * np.pi * x)[None, :]
            out = ns_vorticity_solve(p, w0).snapshots[-1, ..., 0]
            tg.append(rel_l2(out, np.exp(-8 * np.pi**2 * nu) * w0))
        info["taylor_green"] = tg

        p = burgers_problem(s=1024)
        traj = burgers_solve(p, 1e-6 * np.sin(2 * np.pi * grid(1024)))
        amp = fft_forward(traj.snapshots[:, :, 0], axes=(1,)).coeffs[:, 1]
        heat = abs(abs(amp[-1]) / abs(amp[0]) / np.exp(-0.1 * 4 * np.pi**2) - 1)
        info["heat"] = heat

        u0 = grf_sample(p.ic.with_seed(0), 1024)
        a = burgers_solve(p, u0).snapshots[-1]
        b = burgers_solve(replace(p, dt_internal=p.dt_internal / 2), u0).snapshots[-1]
        info["burgers_dt_halving"] = rel_l2(a, b)

        q = ns_problem(s=64)
        w0 = grf_sample(q.ic.with_seed(0), 64, 2)
        a = ns_vorticity_solve(q, w0).snapshots[-1]
        b = ns_vorticity_solve(replace(q, dt_internal=q.dt_internal / 2), w0).snapshots[-1]
        info["ns_dt_halving"] = rel_l2(a, b)

        assert max(tg) < 1e-4
        assert heat < 1e-3
        assert info["burgers_dt_halving"] < 1e-6
        assert info["ns_dt_halving"] < 1e-6


def test_criterion_4_mesh_independence(criterion, data_cache):
    with criterion(4, "mesh independence", limit_s=1200) as info:
        ds = resolve_dataset(BURGERS_2048, data_cache)
        cfg = ExperimentConfig(
            kind="mesh_independence",
            data=BURGERS_2048,
            settings=[(16, 10, 10)],
            train=TrainConfig(epochs=10),
            train_resolution=256,
            eval_resolutions=[512, 1024, 2048],
        )
        res = run_experiment(cfg, ds=ds)["results"]
        mses = [r["mse"] for r in res["rows"] if "resolution" in r and "role" not in r]
        info["mse"] = mses
        info["spread"] = res["spread"][0]
        assert len(mses) == 3
        assert res["spread"][0] < 1e-3


def test_criterion_5_resolution_invariance(criterion):
    with criterion(5, "exact resolution invariance", limit_s=60) as info:
        worst = 0.0
        rng = np.random.default_rng(5)
        for d, s, f in [(1, 64, 10), (1, 256, 16), (2, 32, 6), (2, 64, 10)]:
            cfg = ModelConfig(o=8, f=f, r_train=1, d=d, units=2)
            p = init_params(cfg, s)
            axes = (1,) if d == 1 else (1, 2)
            raw = rng.standard_normal((2,) + (s,) * d + (cfg.o,))
            spec = truncate_modes(fft_forward(raw, axes=axes), f)
            z_coarse = fft_inverse(pad_modes(spec, s))
            z_fine = fft_inverse(pad_modes(spec, 2 * s))
            for _ in range(3):
                for u in range(cfg.units):
                    z_coarse = kno_step(z_coarse, p, cfg, u)
                    z_fine = kno_step(z_fine, p, cfg, u)
            sub = z_fine[:, ::2] if d == 1 else z_fine[:, ::2, ::2]
            worst = max(worst, np.abs(sub - z_coarse).max())
        info["max_abs_diff"] = worst
        assert worst < 1e-10


def test_criterion_6_burgers_learning(criterion, burgers_256):
    with criterion(6, "desk-scale Burgers learning", limit_s=1800) as info:
        mcfg = ModelConfig(o=16, f=10, r_train=10)
        tcfg = TrainConfig(epochs=100, seed=0)
        untrained = evaluate(train(burgers_256, mcfg, replace(tcfg, epochs=0))[0], burgers_256.test, 10)
        ckpt, history = train(burgers_256, mcfg, tcfg)
        final = evaluate(ckpt, burgers_256.test, 10)
        last = history.records[-1].test
        info.update(
            rel_l2=final.rel_l2, mse=final.mse, untrained_mse=untrained.mse,
            last_epoch_rel_l2=last.rel_l2, epochs=len(history),
        )
        assert final.rel_l2 <= 5e-2
        assert final.mse * 10 <= untrained.mse


def test_criterion_7_zero_shot_length(criterion, data_cache):
    with criterion(7, "zero-shot length trend") as info:
        ds = resolve_dataset(NS_1E3, data_cache)
        cfg = ExperimentConfig(
            kind="zeroshot_length",
            data=NS_1E3,
            settings=[(16, 8, 21)],
            model={"m": 10},
            train=TrainConfig(epochs=60, batch_size=8),
            horizon=41,
        )
        row = run_experiment(cfg, ds=ds)["results"]["rows"][0]
        info.update(
            prefix_identical=row["prefix_identical"],
            mse_10_30=row["supervised_mean_mse"],
            mse_30_50=row["extended_mean_mse"],
        )
        assert row["prefix_identical"]
        assert row["extended_mean_mse"] > row["supervised_mean_mse"]


def test_criterion_8_ablation_direction(criterion, burgers_256):
    with criterion(8, "ablation direction") as info:
        cfg = ExperimentConfig(
            kind="ablation",
            data=BURGERS_256,
            settings=[(16, 10, 10)],
            train=TrainConfig(epochs=10),
            seeds=[0, 1, 2],
        )
        medians = run_experiment(cfg, ds=burgers_256)["results"]["median_mse"]["[16, 10, 10]"]
        info.update(medians)
        full = medians["full"]
        assert all(medians[k] >= full for k in ("no_reconstruction", "no_conv", "no_koopman")), medians


def test_criterion_9_reproducibility(criterion, tmp_path, capsys):
    with criterion(9, "reproducibility") as info:
        gen = tmp_path / "gen.json"
        gen.write_text('{"problem": {"kind": "burgers1d", "s": 128, "t_end": 0.5}, "n_train": 6, "n_test": 2}')
        runs = []
        for tag in ("a", "b"):
            data, out = tmp_path / f"data_{tag}", tmp_path / f"run_{tag}"
            assert main(["generate", "--config", str(gen), "--out", str(data), "--seed", "3"]) == 0
            assert main(["train", "--data", str(data), "--out", str(out), "--setting", "8,6,4", "--epochs", "3"]) == 0
            capsys.readouterr()
            assert main(["eval", "--ckpt", str(out / "checkpoint"), "--data", str(data), "--horizon", "8"]) == 0
            runs.append((data, out, capsys.readouterr().out))
        (da, ra, ea), (db, rb, eb) = runs
        same_data = sha256_file(da / "snapshots.knot") == sha256_file(db / "snapshots.knot")
        files = sorted(p.name for p in (ra / "checkpoint").iterdir())
        same_ckpt = all(
            (ra / "checkpoint" / n).read_bytes() == (rb / "checkpoint" / n).read_bytes() for n in files
        )
        same_history = (ra / "history.jsonl").read_bytes() == (rb / "history.jsonl").read_bytes()
        same_eval = ea == eb

        ckpt = load_checkpoint(ra / "checkpoint")
        save_checkpoint(ckpt, tmp_path / "resaved")
        round_trip = all(
            (ra / "checkpoint" / n).read_bytes() == (tmp_path / "resaved" / n).read_bytes() for n in files
        )
        count_ok = serialized_scalar_count(ra / "checkpoint") == count_parameters(ckpt.model_config)
        info.update(
            data=same_data, checkpoint=same_ckpt, history=same_history, eval=same_eval,
            round_trip=round_trip, scalar_count=count_ok,
        )
        assert same_data and same_ckpt and same_history and same_eval
        assert round_trip and count_ok
