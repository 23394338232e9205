"""Losses, Adam, the training loop, rollout metrics and finite-difference checks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from kno.model import ModelConfig, Params, backward, build_hankel_windows, forward, init_params
from kno.persistence import Checkpoint
from kno.spectral import make_rng

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    epochs: int = 100
    batch_size: int = 16
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 25
    lambda_rec: float = 0.5
    seed: int = 0
    normalize: bool = True
    stride: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lambda_rec < 0:
            raise ValueError("lambda_rec must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> OptimState:
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass(frozen=True)
class LossBreakdown:
    pred_loss: float
    recon_loss: float
    total: float


@dataclass
class Metrics:
    mse: float
    rel_l2: float
    per_step: np.ndarray
    per_step_mse: np.ndarray
    normalized: bool = False

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "rel_l2": self.rel_l2,
            "per_step": [float(v) for v in self.per_step],
            "per_step_mse": [float(v) for v in self.per_step_mse],
            "normalized": self.normalized,
        }


def loss(predictions, targets, reconstruction, last_input, lambda_rec: float):
    """Mean-squared prediction loss plus weighted reconstruction loss.

    Returns ``(LossBreakdown, grad_predictions, grad_reconstruction)``.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if predictions.shape != np.shape(targets):
        raise ValueError(f"predictions {predictions.shape} vs targets {np.shape(targets)}")
    if reconstruction.shape != np.shape(last_input):
        raise ValueError(
            f"reconstruction {reconstruction.shape} vs input {np.shape(last_input)}"
        )
    e_pred = predictions - targets
    e_rec = reconstruction - last_input
    pred_loss = float(np.mean(e_pred**2)) if e_pred.size else 0.0
    recon_loss = float(np.mean(e_rec**2))
    total = pred_loss + lambda_rec * recon_loss
    g_pred = 2.0 * e_pred / max(e_pred.size, 1)
    g_rec = 2.0 * lambda_rec * e_rec / e_rec.size
    return LossBreakdown(pred_loss, recon_loss, total), g_pred, g_rec


def adam_update(params: Params, grads: Params, state: OptimState, cfg: TrainConfig, lr=None):
    """One bias-corrected Adam step; complex tensors update their real and imaginary parts independently."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("params, grads and optimizer state must share the same keys")
    lr = cfg.lr if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        gr = _real_view(g)
        m = cfg.beta1 * _real_view(state.m[k]) + (1.0 - cfg.beta1) * gr
        v = cfg.beta2 * _real_view(state.v[k]) + (1.0 - cfg.beta2) * gr * gr
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)
        new_p[k] = (_real_view(p) - step).view(p.dtype)
        new_m[k] = m.view(p.dtype)
        new_v[k] = v.view(p.dtype)
    return new_p, OptimState(new_m, new_v, t)


def _real_view(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    return x.view(np.float64) if np.iscomplexobj(x) else x


def window_arrays(snapshots: np.ndarray, m: int, r: int, stride: int = 1):
    """Sliding windows over ``[n, T, spatial..., c]``.

    Returns ``inputs [N, spatial..., m*c]`` (oldest snapshot first) and
    ``targets [N, r, spatial..., c]``, trajectory-major.
    """
    inputs, targets = [], []
    for traj in snapshots:
        for w in build_hankel_windows(traj, m, r, stride):
            inputs.append(w.input)
            targets.append(w.targets)
    return np.stack(inputs), np.stack(targets)


def _normalize(x, mean, std):
    return (x - mean) / std


def _normalize_inputs(x, mean, std, m):
    return (x - np.tile(mean, m)) / np.tile(std, m)


def _train_step(params, mcfg, tcfg, x, y, state, lr):
    preds, recon, tape = forward(x, params, mcfg, y.shape[1])
    breakdown, g_pred, g_rec = loss(preds, y, recon, x[..., -mcfg.c :], tcfg.lambda_rec)
    if not np.isfinite(breakdown.total):
        raise NonFiniteLossError(f"non-finite loss {breakdown.total}")
    grads = backward(tape, g_pred, g_rec)
    params, state = adam_update(params, grads, state, tcfg, lr)
    return params, state, breakdown


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: LossBreakdown
    test: Metrics | None = None

    def to_dict(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "train": asdict(self.train)}
        if self.test is not None:
            out["test"] = self.test.to_dict()
        return out


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def train(
    dataset,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    eval_every: int = 1,
):
    """Train on ``dataset.train`` and track test metrics; returns ``(best checkpoint, history)``.

    The returned checkpoint holds the parameters with the lowest test MSE
    (the initial parameters when ``epochs == 0``).
    """
    if dataset.snapshots.shape[-1] != mcfg.c or dataset.snapshots.ndim != mcfg.d + 3:
        raise ValueError("dataset shape is incompatible with the model configuration")
    mean = dataset.mean if tcfg.normalize else np.zeros(mcfg.c)
    std = dataset.std if tcfg.normalize else np.ones(mcfg.c)
    params = init_params(mcfg, tcfg.seed)
    ckpt = Checkpoint(params, mcfg, tcfg, mean.copy(), std.copy())
    history = History()
    if tcfg.epochs == 0:
        return ckpt, history

    x_all, y_all = window_arrays(dataset.train, mcfg.m, mcfg.r_train, tcfg.stride)
    x_all = _normalize_inputs(x_all, mean, std, mcfg.m)
    y_all = _normalize(y_all, mean, std)
    n = x_all.shape[0]
    rng = make_rng(tcfg.seed + 1)
    state = OptimState.zeros(params)
    best, best_mse = ckpt, np.inf
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr * tcfg.lr_decay_factor ** (epoch // tcfg.lr_decay_every)
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start : start + tcfg.batch_size]
            try:
                params, state, lb = _train_step(params, mcfg, tcfg, x_all[idx], y_all[idx], state, lr)
            except NonFiniteLossError as err:
                raise NonFiniteLossError(f"{err} at epoch {epoch}, batch {b}") from err
            sums += len(idx) * np.array([lb.pred_loss, lb.recon_loss, lb.total])
        sums /= n
        record = EpochRecord(epoch, lr, LossBreakdown(*map(float, sums)))
        current = Checkpoint(params, mcfg, tcfg, mean.copy(), std.copy())
        last_epoch = epoch == tcfg.epochs - 1
        if dataset.n_test and ((epoch + 1) % eval_every == 0 or last_epoch):
            record.test = evaluate(current, dataset.test, mcfg.r_train, stride=tcfg.stride)
            if record.test.mse < best_mse:
                best, best_mse = current, record.test.mse
        elif not np.isfinite(best_mse):
            best = current
        log.info("epoch %d lr %.2e train %.4e", epoch, lr, record.train.total)
        history.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return best, history


def rollout(ckpt: Checkpoint, inputs: np.ndarray, r_pred: int, batch_size: int = 64) -> np.ndarray:
    """Predict ``r_pred`` steps for physical-unit window inputs; returns physical units."""
    cfg = ckpt.model_config
    mean, std = ckpt.mean, ckpt.std
    x = _normalize_inputs(inputs, mean, std, cfg.m)
    out = np.empty((x.shape[0], r_pred) + x.shape[1:-1] + (cfg.c,))
    for start in range(0, x.shape[0], batch_size):
        preds, _, _ = forward(x[start : start + batch_size], ckpt.params, cfg, r_pred, keep_tape=False)
        out[start : start + batch_size] = preds * std + mean
    return out


def compute_metrics(predictions: np.ndarray, targets: np.ndarray, normalized: bool = False) -> Metrics:
    """MSE and relative L2 over ``[N, r, spatial..., c]`` rollouts."""
    if predictions.shape != targets.shape:
        raise ValueError(f"predictions {predictions.shape} vs targets {targets.shape}")
    n, r = predictions.shape[:2]
    err = (predictions - targets).reshape(n, r, -1)
    tru = targets.reshape(n, r, -1)
    sq_err = np.sum(err**2, axis=2)
    sq_tru = np.sum(tru**2, axis=2)
    points = err.shape[2]
    per_step = np.mean(np.sqrt(sq_err) / np.sqrt(sq_tru), axis=0)
    per_step_mse = np.mean(sq_err, axis=0) / points
    rel_l2 = float(np.mean(np.sqrt(sq_err.sum(axis=1)) / np.sqrt(sq_tru.sum(axis=1))))
    mse = float(np.mean(sq_err) / points)
    return Metrics(mse, rel_l2, per_step, per_step_mse, normalized)


def evaluate(
    ckpt: Checkpoint, snapshots: np.ndarray, r_pred: int, stride: int = 1, batch_size: int = 64
) -> Metrics:
    """Roll out every window of ``snapshots`` ``[n, T, spatial..., c]``; metrics in physical units."""
    cfg = ckpt.model_config
    if snapshots.shape[1] < cfg.m + r_pred:
        raise ValueError(
            f"horizon too long: {r_pred} steps need {cfg.m + r_pred} snapshots, "
            f"have {snapshots.shape[1]}"
        )
    inputs, targets = window_arrays(snapshots, cfg.m, r_pred, stride)
    preds = rollout(ckpt, inputs, r_pred, batch_size)
    return compute_metrics(preds, targets)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    step: float = 1e-5,
    abs_floor: float = 1e-6,
    max_params: int = 5000,
    names=None,
) -> GradCheckReport:
    """Compare analytic gradients from ``fn`` with central differences, scalar by scalar.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    roundoff on vanishing gradient entries from dominating. Complex tensors are
    perturbed on their real and imaginary parts separately. ``names`` restricts
    the check to a subset of parameter tensors.
    """
    names = list(params) if names is None else list(names)
    total = sum(params[k].size * (2 if np.iscomplexobj(params[k]) else 1) for k in names)
    if total > max_params:
        raise ValueError(f"gradient check guard: {total} scalars > {max_params}")
    work = {k: np.array(v, copy=True) for k, v in params.items()}
    _, grads = fn(work)
    worst = GradCheckReport(0.0, "", -1, 0.0, 0.0, total)
    for name in names:
        flat = _real_view(work[name]).reshape(-1)
        g = _real_view(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = fn(work)[0]
            flat[i] = orig - step
            lm = fn(work)[0]
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), abs_floor)
            if rel > worst.max_rel_error or worst.worst_index < 0:
                worst = GradCheckReport(rel, name, i, float(g[i]), float(num), total)
    return worst


def model_loss_fn(x: np.ndarray, y: np.ndarray, cfg: ModelConfig, lambda_rec: float):
    """Closure ``params -> (total loss, grads)`` for one batch, for use with ``gradient_check``."""

    def fn(params: Params):
        preds, recon, tape = forward(x, params, cfg, y.shape[1])
        lb, g_pred, g_rec = loss(preds, y, recon, x[..., -cfg.c :], lambda_rec)
        return lb.total, backward(tape, g_pred, g_rec)

    return fn
