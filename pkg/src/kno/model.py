"""Koopman neural operator: fixed computation graph with hand-written backward pass.

Data layout is batch-first and channels-last: fields are ``[B, s, c]`` in 1-D
and ``[B, s, s, c]`` in 2-D. One rollout step advances the latent state by one
recording interval:

    z -> irfft(pad(K . trunc(rfft(z)))) + (z @ W_conv + b_conv)

repeated over the cascade units. The encoder and decoder act pointwise, and
the Koopman matrices act on a fixed set of low modes, so the same parameters
evaluate at any grid size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from kno.spectral import (
    ComplexSpectrum,
    fft_forward,
    fft_inverse,
    make_rng,
    pad_modes,
    retained_mode_count,
    truncate_modes,
)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    o: int
    f: int
    r_train: int
    m: int = 1
    units: int = 1
    d: int = 1
    c: int = 1
    spectral: bool = True
    conv: bool = True

    def __post_init__(self):
        for name in ("o", "f", "r_train", "m", "units", "c"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d not in (1, 2):
            raise ValueError(f"ModelConfig.d must be 1 or 2, got {self.d}")

    @property
    def in_channels(self) -> int:
        return self.m * self.c + self.d

    @property
    def modes(self) -> int:
        return retained_mode_count(self.f, self.d)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], type]]:
    """Canonical parameter names, shapes and dtypes, in serialization order."""
    o = cfg.o
    shapes: dict[str, tuple[tuple[int, ...], type]] = {
        "encoder.weight": ((cfg.in_channels, o), np.float64),
        "encoder.bias": ((o,), np.float64),
    }
    for u in range(cfg.units):
        if cfg.spectral:
            shapes[f"unit{u}.koopman"] = ((cfg.modes, o, o), np.complex128)
        if cfg.conv:
            shapes[f"unit{u}.conv.weight"] = ((o, o), np.float64)
            shapes[f"unit{u}.conv.bias"] = ((o,), np.float64)
    shapes["decoder.hidden.weight"] = ((o, o), np.float64)
    shapes["decoder.hidden.bias"] = ((o,), np.float64)
    shapes["decoder.out.weight"] = ((o, cfg.c), np.float64)
    shapes["decoder.out.bias"] = ((cfg.c,), np.float64)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    """Real scalar count; complex Koopman entries count twice."""
    o, c = cfg.o, cfg.c
    per_unit = 0
    if cfg.spectral:
        per_unit += cfg.modes * o * o * 2
    if cfg.conv:
        per_unit += o * o + o
    encoder = cfg.in_channels * o + o
    decoder = o * o + o + o * c + c
    return encoder + cfg.units * per_unit + decoder


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Kaiming-uniform affine maps, Koopman entries uniform in [0, 1/o) (real and imaginary)."""
    rng = make_rng(seed)
    params: Params = {}
    fan_in = {"encoder": cfg.in_channels}
    for name, (shape, dtype) in param_shapes(cfg).items():
        if dtype is np.complex128:
            re = rng.random(shape)
            im = rng.random(shape)
            params[name] = (re + 1j * im) / cfg.o
            continue
        n_in = fan_in.get(name.split(".")[0], cfg.o)
        bound = 1.0 / np.sqrt(n_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class WindowSample:
    """``input [spatial..., m*c]`` (oldest snapshot first) and ``targets [r, spatial..., c]``."""

    input: np.ndarray
    targets: np.ndarray


def build_hankel_windows(traj, m: int, r: int, stride: int = 1) -> list[WindowSample]:
    """Delay-embedded windows of one trajectory, starting at 0, stride, 2*stride, ...

    ``traj`` is a ``Trajectory`` or a snapshot array ``[T, spatial..., c]``.
    """
    snaps = getattr(traj, "snapshots", traj)
    t_steps = snaps.shape[0]
    if m < 1 or r < 0 or stride < 1:
        raise ValueError("need m >= 1, r >= 0 and stride >= 1")
    if t_steps < m + r:
        raise ValueError(f"trajectory too short: T={t_steps} < m + r = {m + r}")
    return [
        WindowSample(np.concatenate(list(snaps[t0 : t0 + m]), axis=-1), snaps[t0 + m : t0 + m + r])
        for t0 in range(0, t_steps - m - r + 1, stride)
    ]


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def coordinate_channels(s: int, d: int) -> np.ndarray:
    """Normalized grid coordinates in [0, 1), shape ``[s]*d + [d]``."""
    x = np.arange(s) / s
    if d == 1:
        return x[:, None]
    gx, gy = np.meshgrid(x, x, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def _spatial_axes(d: int) -> tuple[int, ...]:
    return (1,) if d == 1 else (1, 2)


def _check_channels(x: np.ndarray, cfg: ModelConfig, want: int, what: str) -> None:
    if x.ndim != cfg.d + 2 or x.shape[-1] != want:
        raise ValueError(
            f"{what}: expected [B, {'s, ' * cfg.d}{want}] array, got shape {x.shape}"
        )


def _augment(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    s = x.shape[1]
    coords = np.broadcast_to(coordinate_channels(s, cfg.d), x.shape[:-1] + (cfg.d,))
    return np.concatenate([x, coords], axis=-1)


def encode(x: np.ndarray, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Observation function: append coordinates, pointwise affine map, tanh."""
    _check_channels(x, cfg, cfg.m * cfg.c, "encode")
    return np.tanh(_pointwise(_augment(x, cfg), params["encoder.weight"], params["encoder.bias"]))


def koopman_apply(spec: ComplexSpectrum, k_weights: np.ndarray) -> ComplexSpectrum:
    """Per-mode complex matrix-vector product ``out_j = K_j in_j``.

    Channels must sit on the axis right after the transformed axes.
    """
    c = spec.coeffs
    lead = c.shape[: spec.axes[0]]
    mode_shape = c.shape[spec.axes[0] : spec.axes[-1] + 1]
    n_modes = int(np.prod(mode_shape))
    o = c.shape[-1]
    if k_weights.shape != (n_modes, o, o):
        raise ValueError(
            f"mode-count mismatch: spectrum has {n_modes} modes x {o} channels, "
            f"weights are {k_weights.shape}"
        )
    flat = c.reshape((-1, n_modes, o)).transpose(1, 0, 2)
    out = np.matmul(flat, k_weights.transpose(0, 2, 1)).transpose(1, 0, 2)
    return ComplexSpectrum(out.reshape(c.shape), spec.s, spec.f, spec.axes)


def _spectral_branch(z: np.ndarray, k: np.ndarray, cfg: ModelConfig):
    s = z.shape[1]
    spec = truncate_modes(fft_forward(z, axes=_spatial_axes(cfg.d)), cfg.f)
    y = fft_inverse(pad_modes(koopman_apply(spec, k), s))
    return y, spec.coeffs


def kno_step(z: np.ndarray, params: Params, cfg: ModelConfig, unit: int) -> np.ndarray:
    """One cascade unit: spectral Koopman branch plus pointwise conv complement."""
    _check_channels(z, cfg, cfg.o, "kno_step")
    return _step(z, params, cfg, unit)[0]


def _pointwise(x, weight, bias):
    out = x.reshape(-1, x.shape[-1]) @ weight
    out += bias
    return out.reshape(x.shape[:-1] + (weight.shape[1],))


def _step(z, params, cfg, unit):
    coeffs = None
    out = 0.0
    if cfg.spectral:
        out, coeffs = _spectral_branch(z, params[f"unit{unit}.koopman"], cfg)
    if cfg.conv:
        out = out + _pointwise(z, params[f"unit{unit}.conv.weight"], params[f"unit{unit}.conv.bias"])
    return out, coeffs


def decode(z: np.ndarray, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Inverse observation: pointwise affine, tanh, pointwise affine."""
    _check_channels(z, cfg, cfg.o, "decode")
    return _decode(z, params)[0]


def _decode(z, params):
    a = np.tanh(_pointwise(z, params["decoder.hidden.weight"], params["decoder.hidden.bias"]))
    return _pointwise(a, params["decoder.out.weight"], params["decoder.out.bias"]), a


@dataclass
class Tape:
    cfg: ModelConfig
    params: Params
    x_aug: np.ndarray
    # steps[j][u] = (unit input, truncated spectrum of it)
    steps: list
    # latents[j] = z_j for j = 0..r, stacked on a leading axis; dec_hidden likewise
    latents: np.ndarray
    dec_hidden: np.ndarray


def forward(x: np.ndarray, params: Params, cfg: ModelConfig, r_pred: int, keep_tape: bool = True):
    """Roll the model out ``r_pred`` steps from the window input ``x`` ``[B, spatial..., m*c]``.

    Returns ``(predictions [B, r_pred, spatial..., c], reconstruction [B, spatial..., c], tape)``;
    the reconstruction decodes the initial latent and is compared with the newest input snapshot.
    """
    if r_pred < 0:
        raise ValueError("r_pred must be >= 0")
    _check_channels(x, cfg, cfg.m * cfg.c, "forward")
    x_aug = _augment(x, cfg)
    z = np.tanh(_pointwise(x_aug, params["encoder.weight"], params["encoder.bias"]))
    latents = np.empty((r_pred + 1,) + z.shape)
    latents[0] = z
    steps = []
    for j in range(r_pred):
        unit_tape = []
        for u in range(cfg.units):
            z_next, coeffs = _step(z, params, cfg, u)
            unit_tape.append((z, coeffs))
            z = z_next
        latents[j + 1] = z
        if keep_tape:
            steps.append(unit_tape)
    # decoding is pointwise and independent per step, so all steps go in one batch
    out, hidden = _decode(latents, params)
    preds = np.moveaxis(out[1:], 0, 1)
    tape = Tape(cfg, params, x_aug, steps, latents, hidden) if keep_tape else None
    return preds, out[0], tape


def _spectral_weights(f: int) -> np.ndarray:
    """Half-axis multiplicity: the DC column appears once in irfft, others twice."""
    w = np.full(f, 2.0)
    w[0] = 1.0
    return w


def _spectral_backward(g_out, z, coeffs, k, cfg):
    """Cotangents of the spectral branch w.r.t. its input and Koopman weights."""
    axes = _spatial_axes(cfg.d)
    s = z.shape[1]
    n = float(s) ** cfg.d
    w = _spectral_weights(cfg.f)
    # last spectral axis is the half axis; broadcast over the channel axis
    w = w[:, None]
    g_y = truncate_modes(fft_forward(g_out, axes=axes), cfg.f).coeffs * (w / n)
    lead = g_y.shape[:1]
    mode_shape = g_y.shape[1:-1]
    n_modes = int(np.prod(mode_shape))
    o = g_y.shape[-1]
    g_y_flat = g_y.reshape(lead + (n_modes, o)).transpose(1, 0, 2)
    x_flat = coeffs.reshape(lead + (n_modes, o)).transpose(1, 0, 2)
    # per mode: dK = gY X^H, dX = K^H gY
    g_k = np.matmul(g_y_flat.transpose(0, 2, 1), np.conj(x_flat))
    g_x = np.matmul(g_y_flat, np.conj(k)).transpose(1, 0, 2).reshape(g_y.shape)
    g_x = g_x * (1.0 / w)
    g_z = fft_inverse(pad_modes(ComplexSpectrum(g_x, s, cfg.f, axes), s)) * n
    return g_z, g_k


def _affine_backward(g_out, x_in, weight, grads, wname, bname):
    g2 = g_out.reshape(-1, g_out.shape[-1])
    grads[wname] += x_in.reshape(-1, x_in.shape[-1]).T @ g2
    grads[bname] += np.ones(g2.shape[0]) @ g2
    return (g2 @ weight.T).reshape(x_in.shape)


def _decode_backward(g_y, z, a, params, grads):
    g_a = _affine_backward(
        g_y, a, params["decoder.out.weight"], grads, "decoder.out.weight", "decoder.out.bias"
    )
    g_h = g_a * (1.0 - a * a)
    return _affine_backward(
        g_h, z, params["decoder.hidden.weight"], grads, "decoder.hidden.weight", "decoder.hidden.bias"
    )


def backward(tape: Tape, g_preds: np.ndarray, g_recon: np.ndarray) -> Params:
    """Reverse-mode gradients for a recorded rollout.

    Complex Koopman gradients follow ``dL/dRe + i dL/dIm``.
    """
    cfg, params = tape.cfg, tape.params
    r = len(tape.steps)
    z0 = tape.latents[0]
    want_preds = (z0.shape[0], r) + z0.shape[1:-1] + (cfg.c,)
    if g_preds.shape != want_preds:
        raise ValueError(f"prediction cotangent shape {g_preds.shape} != {want_preds}")
    if g_recon.shape != want_preds[:1] + want_preds[2:]:
        raise ValueError(f"reconstruction cotangent shape {g_recon.shape} mismatch")
    grads = zeros_like_params(params)
    g_out = np.concatenate([g_recon[None], np.moveaxis(g_preds, 1, 0)])
    g_latents = _decode_backward(g_out, tape.latents, tape.dec_hidden, params, grads)
    g_z = np.zeros_like(z0)
    for j in range(r, 0, -1):
        g_z = g_z + g_latents[j]
        for u in range(cfg.units - 1, -1, -1):
            z_in, coeffs = tape.steps[j - 1][u]
            g_in = np.zeros_like(g_z)
            if cfg.spectral:
                kname = f"unit{u}.koopman"
                g_spec, g_k = _spectral_backward(g_z, z_in, coeffs, params[kname], cfg)
                grads[kname] += g_k
                g_in += g_spec
            if cfg.conv:
                g_in += _affine_backward(
                    g_z,
                    z_in,
                    params[f"unit{u}.conv.weight"],
                    grads,
                    f"unit{u}.conv.weight",
                    f"unit{u}.conv.bias",
                )
            g_z = g_in
    g_z = g_z + g_latents[0]
    g_h = g_z * (1.0 - z0 * z0)
    g2 = g_h.reshape(-1, g_h.shape[-1])
    grads["encoder.weight"] += tape.x_aug.reshape(-1, tape.x_aug.shape[-1]).T @ g2
    grads["encoder.bias"] += np.ones(g2.shape[0]) @ g2
    return grads
