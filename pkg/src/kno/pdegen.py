"""Pseudo-spectral ground-truth solvers and dataset assembly.

Two PDE families on the unit torus:

* 1-D viscous Burgers, ``u_t = -(u^2/2)_x + nu u_xx``, integrating-factor RK4;
* 2-D incompressible Navier-Stokes in vorticity form,
  ``w_t = -(u . grad) w + nu lap w + forcing``, Crank-Nicolson diffusion with a
  Heun predictor-corrector on advection and forcing.

Both use the 2/3 rule on the quadratic term. Solvers are vectorized over a
leading batch axis; every row evolves independently.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from kno.spectral import BURGERS_GRF, NS_GRF, GrfParams, check_grid_size, grf_sample

log = logging.getLogger(__name__)

KINDS = ("burgers1d", "navier_stokes2d")


class SolverBlowUpError(RuntimeError):
    """Non-finite values appeared during time integration."""

    def __init__(self, step: int, trajectory: int | None = None):
        self.step = step
        self.trajectory = trajectory
        where = f" in trajectory {trajectory}" if trajectory is not None else ""
        super().__init__(f"solver blow-up at step {step}{where}")


def _ratio(num: float, den: float, what: str) -> int:
    q = num / den
    n = int(round(q))
    if n < 1 or abs(q - n) > 1e-9 * max(1.0, q):
        raise ValueError(f"{what}: {num} is not an integer multiple of {den}")
    return n


@dataclass(frozen=True)
class PdeProblem:
    kind: str
    nu: float
    s: int
    dt_internal: float
    dt_record: float
    t_end: float
    ic: GrfParams
    forcing: str = "none"  # "none" | "default"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown PDE kind {self.kind!r}")
        if not self.nu > 0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")
        check_grid_size(self.s)
        if self.dt_internal > self.dt_record:
            raise ValueError("dt_internal must not exceed dt_record")
        if self.forcing not in ("none", "default"):
            raise ValueError(f"unknown forcing {self.forcing!r}")
        if self.kind == "burgers1d" and self.forcing != "none":
            raise ValueError("Burgers problems take no forcing")
        self.substeps
        self.n_records

    @property
    def d(self) -> int:
        return 1 if self.kind == "burgers1d" else 2

    @property
    def substeps(self) -> int:
        return _ratio(self.dt_record, self.dt_internal, "dt_record")

    @property
    def n_records(self) -> int:
        return _ratio(self.t_end, self.dt_record, "t_end")

    @property
    def t_steps(self) -> int:
        return self.n_records + 1

    def forcing_field(self) -> np.ndarray | None:
        return make_forcing(self.s) if self.forcing == "default" else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> PdeProblem:
        data = dict(data)
        data["ic"] = GrfParams(**data["ic"])
        return cls(**data)


def burgers_problem(s: int = 4096, **overrides) -> PdeProblem:
    base = dict(
        kind="burgers1d", nu=0.1, s=s, dt_internal=1e-4, dt_record=0.025, t_end=1.0, ic=BURGERS_GRF
    )
    base.update(overrides)
    return PdeProblem(**base)


def ns_problem(nu: float = 1e-3, s: int = 64, **overrides) -> PdeProblem:
    t_end = 50.0 if nu >= 1e-3 else 30.0
    base = dict(
        kind="navier_stokes2d",
        nu=nu,
        s=s,
        dt_internal=1e-3,
        dt_record=1.0,
        t_end=t_end,
        ic=NS_GRF,
        forcing="default",
    )
    base.update(overrides)
    return PdeProblem(**base)


@dataclass
class Trajectory:
    """Snapshots ``[T, spatial..., c]`` recorded every ``dt_record``."""

    snapshots: np.ndarray
    dt_record: float
    problem: PdeProblem | None = None

    @property
    def t_steps(self) -> int:
        return self.snapshots.shape[0]

    @property
    def s(self) -> int:
        return self.snapshots.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.t_steps) * self.dt_record


def grid(s: int) -> np.ndarray:
    return np.arange(s) / s


def make_forcing(s: int) -> np.ndarray:
    """0.1 (sin(2 pi (x + y)) + cos(2 pi (x + y))) on an ``s x s`` grid."""
    s = check_grid_size(s)
    x = grid(s)
    phase = 2 * np.pi * (x[:, None] + x[None, :])
    return 0.1 * (np.sin(phase) + np.cos(phase))


def _dealias_mask_1d(s: int) -> np.ndarray:
    k = np.arange(s // 2 + 1)
    return k < s / 3


def _angular(s: int, half: bool) -> np.ndarray:
    k = np.arange(s // 2 + 1) if half else np.fft.fftfreq(s, d=1.0 / s)
    return 2 * np.pi * k


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.all(np.isfinite(x.reshape(x.shape[0], -1)), axis=1))
        raise SolverBlowUpError(step, int(bad[0]) if x.shape[0] > 1 else None)


def _burgers_batch(problem: PdeProblem, inits: np.ndarray) -> np.ndarray:
    s = problem.s
    dt = problem.dt_internal
    k = _angular(s, half=True)
    mask = _dealias_mask_1d(s)
    e_half = np.exp(-problem.nu * k**2 * dt / 2)
    e_full = e_half**2
    ik_half = -0.5j * k * mask

    def nonlinear(v):
        u = sfft.irfft(v * mask, n=s, axis=-1)
        return ik_half * sfft.rfft(u * u, axis=-1)

    out = np.empty((inits.shape[0], problem.t_steps, s))
    out[:, 0] = inits
    v = sfft.rfft(inits, axis=-1)
    step = 0
    for rec in range(1, problem.t_steps):
        for _ in range(problem.substeps):
            a = dt * nonlinear(v)
            b = dt * nonlinear(e_half * (v + a / 2))
            c = dt * nonlinear(e_half * v + b / 2)
            dd = dt * nonlinear(e_full * v + e_half * c)
            v = e_full * v + (e_full * a + 2 * e_half * (b + c) + dd) / 6
            step += 1
        out[:, rec] = sfft.irfft(v, n=s, axis=-1)
        _check_finite(out[:, rec], step)
    return out


def _ns_batch(problem: PdeProblem, inits: np.ndarray, forcing: np.ndarray | None) -> np.ndarray:
    s = problem.s
    dt = problem.dt_internal
    kx = _angular(s, half=False)[:, None]
    ky = _angular(s, half=True)[None, :]
    k2 = kx**2 + ky**2
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    kmax = s / 3
    mask = (np.abs(kx / (2 * np.pi)) < kmax) & (np.abs(ky / (2 * np.pi)) < kmax)
    # velocity from streamfunction: psi = w / |k|^2, u = d_y psi, v = -d_x psi
    u_op = 1j * ky * inv_k2 * mask
    v_op = -1j * kx * inv_k2 * mask
    dx_op = 1j * kx * mask
    dy_op = 1j * ky * mask
    f_hat = sfft.rfft2(forcing) if forcing is not None else 0.0
    half = 0.5 * problem.nu * dt * k2
    lhs = 1.0 / (1.0 + half)
    rhs = 1.0 - half

    def tendency(w):
        stacked = np.stack([u_op * w, v_op * w, dx_op * w, dy_op * w])
        u, v, wx, wy = sfft.irfft2(stacked, s=(s, s), axes=(-2, -1))
        adv = sfft.rfft2(u * wx + v * wy, axes=(-2, -1))
        return f_hat - mask * adv

    out = np.empty((inits.shape[0], problem.t_steps, s, s))
    out[:, 0] = inits
    w = sfft.rfft2(inits, axes=(-2, -1))
    step = 0
    for rec in range(1, problem.t_steps):
        for _ in range(problem.substeps):
            f1 = tendency(w)
            w_pred = (rhs * w + dt * f1) * lhs
            f2 = tendency(w_pred)
            w = (rhs * w + 0.5 * dt * (f1 + f2)) * lhs
            step += 1
        out[:, rec] = sfft.irfft2(w, s=(s, s), axes=(-2, -1))
        _check_finite(out[:, rec], step)
    return out


def _as_batch(init: np.ndarray, problem: PdeProblem) -> np.ndarray:
    init = np.asarray(init, dtype=np.float64)
    shape = (problem.s,) * problem.d
    if init.shape[-problem.d :] != shape:
        raise ValueError(f"initial field shape {init.shape} does not match grid {shape}")
    return init.reshape((-1,) + shape)


def burgers_solve(problem: PdeProblem, init: np.ndarray) -> Trajectory:
    """Integrate Burgers from ``init`` (shape ``[s]``); snapshots ``[T, s, 1]``."""
    if problem.kind != "burgers1d":
        raise ValueError(f"burgers_solve needs a burgers1d problem, got {problem.kind}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _burgers_batch(problem, _as_batch(init, problem))
    return Trajectory(out[0, ..., None], problem.dt_record, problem)


def ns_vorticity_solve(
    problem: PdeProblem, init_vorticity: np.ndarray, forcing: np.ndarray | None = None
) -> Trajectory:
    """Integrate vorticity from ``init_vorticity`` (``[s, s]``); snapshots ``[T, s, s, 1]``.

    ``forcing`` overrides the problem's forcing field when given.
    """
    if problem.kind != "navier_stokes2d":
        raise ValueError(f"ns_vorticity_solve needs a navier_stokes2d problem, got {problem.kind}")
    if forcing is None:
        forcing = problem.forcing_field()
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=np.float64)
        if abs(forcing.mean()) > 1e-12 * max(1.0, np.abs(forcing).max()):
            raise ValueError("forcing must have zero spatial mean")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _ns_batch(problem, _as_batch(init_vorticity, problem), forcing)
    return Trajectory(out[0, ..., None], problem.dt_record, problem)


def solve_batch(problem: PdeProblem, inits: np.ndarray) -> np.ndarray:
    """Solve many initial conditions at once; returns ``[B, T, spatial..., 1]``."""
    inits = _as_batch(inits, problem)
    with np.errstate(over="ignore", invalid="ignore"):
        if problem.kind == "burgers1d":
            out = _burgers_batch(problem, inits)
        else:
            out = _ns_batch(problem, inits, problem.forcing_field())
    return out[..., None]


@dataclass
class Dataset:
    """Stacked trajectories ``[n, T, spatial..., c]``; the first ``n_train`` form the training split."""

    snapshots: np.ndarray
    n_train: int
    problem: PdeProblem
    seeds: list[int]
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None or self.std is None:
            self.mean, self.std = normalizer_stats(self.snapshots[: self.n_train])
        if np.any(self.std <= 0):
            raise ValueError("normalizer std must be positive")

    @property
    def n_test(self) -> int:
        return self.snapshots.shape[0] - self.n_train

    @property
    def train(self) -> np.ndarray:
        return self.snapshots[: self.n_train]

    @property
    def test(self) -> np.ndarray:
        return self.snapshots[self.n_train :]

    @property
    def s(self) -> int:
        return self.snapshots.shape[2]

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise ValueError(f"unknown split {name!r}")

    def trajectories(self, split: str | None = None) -> list[Trajectory]:
        data = self.snapshots if split is None else self.split(split)
        return [Trajectory(x, self.problem.dt_record, self.problem) for x in data]


def normalizer_stats(snapshots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over every axis but the last."""
    flat = snapshots.reshape(-1, snapshots.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


def build_dataset(
    problem: PdeProblem, n_train: int, n_test: int, base_seed: int = 0, chunk: int = 64
) -> Dataset:
    """Generate ``n_train + n_test`` trajectories; trajectory ``i`` uses seed ``base_seed + i``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    n = n_train + n_test
    seeds = [base_seed + i for i in range(n)]
    inits = np.stack([grf_sample(problem.ic.with_seed(sd), problem.s, problem.d) for sd in seeds])
    parts = []
    for start in range(0, n, chunk):
        log.info("solving trajectories %d-%d of %d", start, min(start + chunk, n) - 1, n)
        try:
            parts.append(solve_batch(problem, inits[start : start + chunk]))
        except SolverBlowUpError as err:
            idx = start + (err.trajectory or 0)
            raise SolverBlowUpError(err.step, idx) from err
    return Dataset(np.concatenate(parts), n_train, problem, seeds)


def downsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep every ``factor``-th grid point along each spatial axis."""
    snaps = downsample_array(traj.snapshots, factor, lead=1)
    problem = traj.problem
    if problem is not None:
        problem = replace(problem, s=problem.s // factor)
    return Trajectory(snaps, traj.dt_record, problem)


def downsample_array(x: np.ndarray, factor: int, lead: int) -> np.ndarray:
    """Strided subsampling of spatial axes ``lead .. ndim-2`` (channels last)."""
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"downsample factor must be a power of two, got {factor}")
    sl = [slice(None)] * x.ndim
    for ax in range(lead, x.ndim - 1):
        if x.shape[ax] % factor:
            raise ValueError(f"factor {factor} does not divide grid size {x.shape[ax]}")
        sl[ax] = slice(None, None, factor)
    return np.ascontiguousarray(x[tuple(sl)])


def downsample_dataset(ds: Dataset, factor: int) -> Dataset:
    """Coarser copy of ``ds`` sharing the same underlying solutions and normalizer."""
    snaps = downsample_array(ds.snapshots, factor, lead=2)
    problem = replace(ds.problem, s=ds.problem.s // factor)
    return Dataset(snaps, ds.n_train, problem, list(ds.seeds), ds.mean.copy(), ds.std.copy())
