"""Variance schedules, forward noising, the epsilon objective and samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

# eps_model(x_t, t, cond) -> predicted noise, same shape as x_t.
# ``t`` is an integer array with one step per batch row.
EpsModel = Callable[[object, np.ndarray, object], object]


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step tables indexed by ``t - 1`` for ``t = 1..T``."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        """ᾱ_t with the convention ᾱ_0 = 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def check_step(self, t, low: int = 1) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < low or t.max() > self.T):
            raise ValueError(f"diffusion step(s) {t.tolist()} outside [{low}, {self.T}]")
        return t


def make_schedule(kind: str = "cosine", T: int = 20, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Build a linear or cosine schedule with ᾱ accumulated in 64-bit.

    The cosine kind ignores ``beta_start``/``beta_end`` and clips betas to 0.999.
    """
    if T < 1:
        raise ValueError(f"make_schedule: need T >= 1, got {T}")
    if kind == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError(f"make_schedule: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"make_schedule: unknown kind {kind!r} (expected 'linear' or 'cosine')")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return VarianceSchedule(kind, T, beta, alpha, alpha_bar)


def _per_row(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    """Lay per-step scalars out so they scale the leading axis of an ndim array."""
    v = np.asarray(values)
    if t.ndim == 0:
        return v
    return v.reshape(t.shape + (1,) * (ndim - t.ndim))


def q_sample(plan0: np.ndarray, t, noise: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Closed-form draw from q(x_t | x_0).

    ``t`` is a scalar or one step per leading row of ``plan0``.
    """
    plan0 = np.asarray(plan0)
    noise = np.asarray(noise)
    if noise.shape != plan0.shape:
        raise T.ShapeError(f"q_sample: noise shape {noise.shape} does not match plan shape {plan0.shape}")
    t = sched.check_step(t)
    ab = _per_row(sched.alpha_bar[t - 1], t, plan0.ndim)
    return np.sqrt(ab) * plan0 + np.sqrt(1.0 - ab) * noise


def slot_weights(horizon: int, latent_dim: int, first_slot_weight: float = 1.0, weighted_slot: int = 0, inpaint_first: bool = False) -> np.ndarray:
    """Per-element loss weights for one (H, D) plan."""
    w = np.ones((horizon, latent_dim))
    w[weighted_slot] = first_slot_weight
    if inpaint_first:
        w[0] = 0.0
    return w


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class CleanPlanHead:
    """Noise model whose network guesses the clean plan: eps = (x - sqrt(ab) u) / sqrt(1 - ab).

    Training still regresses the injected noise. The wrapped network only has
    to produce a near-constant clean plan, so a sampler trajectory that drifts
    away from the noising distribution is pulled back instead of amplified.
    """

    def __init__(self, net, sched: VarianceSchedule):
        self.net, self.sched = net, sched

    def __call__(self, x, t, cond) -> Tensor:
        u = _as_tensor(self.net(x, t, cond))
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        ab = self.sched.alpha_bar_at(np.asarray(t)).reshape(-1, *([1] * (xd.ndim - 1)))
        inv = np.broadcast_to(1.0 / np.sqrt(1.0 - ab), xd.shape).astype(xd.dtype)
        gain = np.broadcast_to(np.sqrt(ab / (1.0 - ab)), xd.shape).astype(xd.dtype)
        return Tensor(xd * inv) - u * Tensor(np.ascontiguousarray(gain))


def ddpm_loss(
    eps_model: EpsModel,
    plan0: np.ndarray,
    cond,
    rng: np.random.Generator,
    sched: VarianceSchedule,
    first_slot_weight: float = 1.0,
    weighted_slot: int = 0,
    inpaint_first: bool = False,
    p: int = 2,
    t: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    snr_clip: tuple[float, float] | None = None,
) -> Tensor:
    """Weighted mean of |eps - eps_model(x_t, t, cond)|^p over a (B, H, D) batch.

    ``t`` and ``noise`` are drawn from ``rng`` unless given. With
    ``inpaint_first`` slot 0 of x_t is left clean (it carries the current
    state) and excluded from the loss. The weighted mean divides by the weight
    total, so a zero predictor scores E[eps^2] = 1 under any weighting.

    ``snr_clip=(lo, hi)`` rescales each row by clip(snr, lo, hi) / snr with
    snr = ab / (1 - ab). In clean-plan units the weight becomes clip(snr, lo, hi),
    so nearly pure-noise steps still train the network instead of contributing
    a vanishing ab / (1 - ab) share of the gradient.
    """
    if p not in (1, 2):
        raise ValueError(f"ddpm_loss: loss power must be 1 or 2, got {p}")
    plan0 = np.asarray(plan0, dtype=T.get_dtype())
    if plan0.ndim != 3:
        raise T.ShapeError(f"ddpm_loss: expected a (B, H, D) plan batch, got {plan0.shape}")
    B, H, D = plan0.shape
    if t is None:
        t = rng.integers(1, sched.T + 1, size=B)
    if noise is None:
        noise = rng.standard_normal(plan0.shape)
    t = sched.check_step(np.broadcast_to(np.asarray(t), (B,)))
    noise = np.asarray(noise, dtype=plan0.dtype)
    x_t = q_sample(plan0, t, noise, sched).astype(plan0.dtype)
    if inpaint_first:
        x_t[:, 0] = plan0[:, 0]
    eps_hat = _as_tensor(eps_model(x_t, t, cond))
    if eps_hat.shape != plan0.shape:
        raise T.ShapeError(f"ddpm_loss: model output {eps_hat.shape} does not match plan {plan0.shape}")
    if not np.all(np.isfinite(eps_hat.data)):
        raise FloatingPointError(f"ddpm_loss: non-finite model output at diffusion steps {sorted(set(t.tolist()))}")
    w = slot_weights(H, D, first_slot_weight, weighted_slot, inpaint_first)
    scale = 1.0 / (B * w.sum())
    if snr_clip is not None:
        lo, hi = snr_clip
        if not 0 < lo <= hi:
            raise ValueError(f"ddpm_loss: snr_clip needs 0 < lo <= hi, got {snr_clip}")
        ab = sched.alpha_bar_at(t)
        snr = np.maximum(ab, 1e-12) / (1.0 - ab)
        w = w[None] * (np.clip(snr, lo, hi) / snr).reshape(B, 1, 1)
    diff = Tensor(noise) - eps_hat
    err = diff.square() if p == 2 else T.abs_(diff)
    return (err * Tensor(w.astype(plan0.dtype))).sum() * scale


def ddpm_step(plan_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: VarianceSchedule, z: np.ndarray | None = None) -> np.ndarray:
    """Ancestral reverse step with fixed variance sigma_t^2 = beta_t; z is ignored at t = 1."""
    if not 1 <= int(t) <= sched.T:
        raise ValueError(f"ddpm_step: step {t} outside [1, {sched.T}]")
    t = int(t)
    beta = sched.beta[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = (np.asarray(plan_t) - beta / math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(1.0 - beta)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(beta) * np.asarray(z)


def ddim_timesteps(T_steps: int, n_steps: int) -> np.ndarray:
    """Descending steps: floor of an even grid from T down to 1 (just [T] when n_steps is 1)."""
    if not 1 <= n_steps <= T_steps:
        raise ValueError(f"ddim: n_steps must lie in [1, {T_steps}], got {n_steps}")
    if n_steps == 1:
        return np.array([T_steps])
    return np.floor(np.linspace(T_steps, 1, n_steps) + 1e-9).astype(int)


def ddim_update(x: np.ndarray, eps_hat: np.ndarray, ab_t: float, ab_prev: float, eta: float, z: np.ndarray | None) -> np.ndarray:
    x0 = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps_hat
    out = math.sqrt(ab_prev) * x0 + direction
    if sigma > 0.0 and z is not None:
        out = out + sigma * z
    return out


class Normalizer:
    """Per-dimension standardization over the last axis."""

    def __init__(self, mean: np.ndarray | None = None, std: np.ndarray | None = None, min_std: float = 1e-6):
        self.min_std = min_std
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)
        self.clamped = np.zeros(0, dtype=bool)
        if self.std is not None:
            # near-constant dimensions are passed through with unit scale
            self.clamped = self.std < min_std
            self.std = np.where(self.clamped, 1.0, self.std)

    @classmethod
    def fit(cls, data: np.ndarray, min_std: float = 1e-6) -> Normalizer:
        flat = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        if flat.shape[0] == 0:
            raise ValueError("Normalizer.fit: empty corpus")
        return cls(flat.mean(axis=0), flat.std(axis=0), min_std)

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.std is not None

    def _check(self, x: np.ndarray) -> None:
        if not self.fitted:
            raise RuntimeError("Normalizer: statistics have not been fitted")
        if np.shape(x)[-1] != self.mean.shape[0]:
            raise T.ShapeError(f"Normalizer: last axis {np.shape(x)[-1]} does not match stats width {self.mean.shape[0]}")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def arrays(self, prefix: str = "normalizer") -> dict[str, np.ndarray]:
        self._check(np.zeros(self.mean.shape))
        return {f"{prefix}.mean": self.mean, f"{prefix}.std": self.std, f"{prefix}.clamped": self.clamped.astype(np.float64)}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "normalizer") -> Normalizer:
        norm = cls()
        norm.mean = np.asarray(arrays[f"{prefix}.mean"], dtype=np.float64)
        norm.std = np.asarray(arrays[f"{prefix}.std"], dtype=np.float64)
        norm.clamped = np.asarray(arrays[f"{prefix}.clamped"]) > 0.5
        return norm


def _gaussian(rng, shape: tuple[int, ...]) -> np.ndarray:
    """One draw of ``shape``; a sequence of generators supplies one row each."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"ddim_sample: {len(rng)} generators for a batch of {shape[0]}")
        return np.stack([r.standard_normal(shape[1:]) for r in rng]) if rng else np.zeros(shape)
    return rng.standard_normal(shape)


def ddim_sample(
    eps_model: EpsModel,
    cond,
    sched: VarianceSchedule,
    n_steps: int,
    eta: float,
    rng,
    shape: tuple[int, ...],
    normalizer: Normalizer | None = None,
    first_slot: np.ndarray | None = None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Strided DDIM sampling starting from a unit gaussian draw of ``shape``.

    ``rng`` is a generator, or a list with one generator per batch row so each
    row's noise is independent of its batch mates.

    ``first_slot`` (B, D), given in data units, pins slot 0 of the plan through
    every step, matching training with ``inpaint_first``. With a normalizer the
    result is returned denormalized.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"ddim_sample: eta must lie in [0, 1], got {eta}")
    steps = ddim_timesteps(sched.T, n_steps)
    x = _gaussian(rng, shape) if x_init is None else np.array(x_init, dtype=np.float64)
    pin = None
    if first_slot is not None:
        pin = normalizer.normalize(first_slot) if normalizer is not None else np.asarray(first_slot, dtype=np.float64)
        x[:, 0] = pin
    B = shape[0]
    with T.no_grad():
        for i, t in enumerate(steps):
            t_prev = int(steps[i + 1]) if i + 1 < len(steps) else 0
            eps_hat = eps_model(x.astype(T.get_dtype()), np.full(B, int(t)), cond)
            eps_hat = np.asarray(eps_hat.data if isinstance(eps_hat, Tensor) else eps_hat, dtype=np.float64)
            z = _gaussian(rng, shape) if eta > 0.0 else None
            x = ddim_update(x, eps_hat, float(sched.alpha_bar_at(t)), float(sched.alpha_bar_at(t_prev)), eta, z)
            if pin is not None:
                x[:, 0] = pin
    return normalizer.denormalize(x) if normalizer is not None else x
