"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GradCheckError(FloatingPointError):
    """A function evaluation produced a non-finite value."""


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def _central_difference(f: Callable[[], Tensor], buf: np.ndarray, flat_index: int, eps: float, label: str) -> float:
    flat = buf.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    with T.no_grad():
        hi = f().item()
    flat[flat_index] = orig - eps
    with T.no_grad():
        lo = f().item()
    flat[flat_index] = orig
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise GradCheckError(f"non-finite function value while perturbing {label}[{flat_index}]")
    return (hi - lo) / (2.0 * eps)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences for ``f`` at ``x``.

    Runs in 64-bit. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    with T.float_mode(64):
        data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
            raise GradCheckError(f"non-finite input at index {bad}")
        xt = Tensor(data, requires_grad=True, name="x")
        out = f(xt)
        if not np.isfinite(out.item()):
            raise GradCheckError("non-finite function value at the unperturbed input")
        if out.requires_grad:
            out.backward(ensure=[xt])
            analytic = xt.grad.reshape(-1).copy()
        else:
            analytic = np.zeros(data.size)
        numeric = np.array(
            [_central_difference(lambda: f(xt), xt.data, i, eps, "x") for i in range(data.size)]
        )
    return float(_rel_errors(analytic, numeric).max()) if data.size else 0.0


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    fraction: float = 1.0,
    rng: np.random.Generator | None = None,
    min_per_param: int = 1,
) -> tuple[float, str]:
    """Check d(loss)/d(params) on a random subset of coordinates.

    ``params`` must already hold 64-bit data. Returns the max relative error
    and the ``name[index]`` label where it occurred.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward(ensure=list(params.values()))
    worst, where = 0.0, ""
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check_params: parameter {name} is {p.data.dtype}, need float64")
        n = p.data.size
        k = min(n, max(min_per_param, int(round(fraction * n))))
        idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
        analytic = p.grad.reshape(-1)[idx]
        numeric = np.array([_central_difference(loss_fn, p.data, int(i), eps, name) for i in idx])
        errs = _rel_errors(analytic, numeric)
        j = int(np.argmax(errs))
        if errs[j] > worst:
            worst, where = float(errs[j]), f"{name}[{int(idx[j])}]"
    for p in params.values():
        p.grad = None
    return worst, where


# ---------------------------------------------------------------------------
# op suite


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], tuple[int, ...]]]:
    def const(*shape):
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    w2 = const(4, 3)
    other = const(2, 4)
    kern = const(5, 3, 3)
    kern2 = const(3, 3, 4)
    bias5 = const(5)
    gw, gb = const(4), const(4)
    keys, vals = const(2, 5, 4), const(2, 5, 6)
    cat_other = const(2, 2)
    conv_in = const(2, 6, 3)
    gn_in = const(2, 5, 4)
    bcast_w = const(2, 3, 4)
    queries = const(2, 3, 4)
    return [
        ("add", lambda x: T.add(x, other).sin().sum(), (2, 4)),
        ("add_leading_expansion", lambda x: T.add(other, x).square().sum(), (4,)),
        ("sub", lambda x: T.sub(other, x).square().sum(), (2, 4)),
        ("mul", lambda x: T.mul(x, x).sin().sum(), (2, 4)),
        ("reciprocal", lambda x: (1.0 / (x.square() + 1.0)).sum(), (3,)),
        ("matmul", lambda x: T.matmul(x, w2).sin().sum(), (2, 4)),
        ("matmul_batched", lambda x: T.matmul(x, x.swapaxes(-1, -2)).sum(), (2, 3, 4)),
        ("conv1d", lambda x: T.conv1d(x, kern, bias5).sin().sum(), (2, 7, 3)),
        ("conv1d_stride2", lambda x: T.conv1d(x, kern2, None, stride=2, padding=1).sin().sum(), (2, 8, 3)),
        ("conv1d_kernel", lambda w: T.conv1d(conv_in, w, None).sin().sum(), (4, 3, 3)),
        ("upsample_nearest1d", lambda x: T.upsample_nearest1d(x, 2).sin().sum(), (2, 4, 3)),
        ("group_norm", lambda x: (T.group_norm(x, 2, gw, gb) * T.Tensor(np.linspace(-1, 1, 24).reshape(6, 4))).sin().sum(), (2, 6, 4)),
        ("group_norm_affine", lambda w: T.group_norm(gn_in, 2, w, gb).sin().sum(), (4,)),
        ("silu", lambda x: T.silu(x).sum(), (3, 4)),
        ("mish", lambda x: T.mish(x).sum(), (3, 4)),
        ("tanh", lambda x: T.tanh(x).square().sum(), (5,)),
        ("sigmoid", lambda x: T.sigmoid(x).square().sum(), (5,)),
        ("exp_log", lambda x: T.log(T.exp(x) + 1.0).sum(), (5,)),
        ("softmax", lambda x: (T.softmax(x, axis=1) * T.Tensor(np.arange(12.0).reshape(3, 4))).sum(), (3, 4)),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0).sin().sum(), (3, 4)),
        ("concat", lambda x: T.concat([x, cat_other], axis=1).sin().sum(), (2, 3)),
        ("stack", lambda x: T.stack([x, x * 2.0], axis=0).sin().sum(), (2, 3)),
        ("sum_axis", lambda x: x.sum(axis=1).square().sum(), (3, 4)),
        ("mean_axis", lambda x: x.mean(axis=(0, 2)).square().sum(), (2, 3, 4)),
        ("reshape_transpose", lambda x: x.reshape(4, 3).transpose().sin().sum(), (3, 4)),
        ("broadcast_to", lambda x: (T.broadcast_to(x, (2, 3, 4)) * bcast_w).sum(), (3, 1)),
        ("getitem", lambda x: x[:, 1:3].sin().sum(), (3, 4)),
        ("pow", lambda x: (x.square() + 1.0).__pow__(1.5).sum(), (4,)),
        ("attention", lambda q: T.scaled_dot_product_attention(q, keys, vals).sin().sum(), (2, 3, 4)),
        ("attention_keys", lambda k: T.scaled_dot_product_attention(queries, k, vals).sin().sum(), (2, 5, 4)),
    ]


def run_op_suite(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Grad-check every registered op on random small inputs (64-bit)."""
    rng = np.random.default_rng(seed)
    results = {}
    with T.float_mode(64):
        for name, f, shape in _op_cases(rng):
            x = rng.standard_normal(shape)
            results[name] = grad_check(f, x, eps)
    return results


def op_names() -> Sequence[str]:
    return [name for name, _, _ in _op_cases(np.random.default_rng(0))]


def check_denoiser_loss(seed: int = 0, fraction: float = 0.05, eps: float = 1e-6) -> tuple[float, str]:
    """Grad-check the weighted noise-regression loss of a small temporal U-Net."""
    from . import diffusion as D
    from .denoiser import DenoiserConfig, TemporalUNet

    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(horizon=4, latent_dim=3, embed_dim=8, model_dim=8, groups=2, context_tokens=2)
    with T.float_mode(64):
        net = TemporalUNet(cfg, rng)
        net.cast(64)
        sched = D.make_schedule("cosine", 10)
        plan = rng.standard_normal((2, cfg.horizon, cfg.latent_dim))
        cond = rng.standard_normal((2, cfg.embed_dim))
        t = np.array([3, 8])
        noise = rng.standard_normal(plan.shape)

        def loss():
            return D.ddpm_loss(net, plan, cond, rng, sched, first_slot_weight=10.0, weighted_slot=1,
                               inpaint_first=True, t=t, noise=noise)

        return grad_check_params(loss, net.params, eps, fraction, rng, min_per_param=2)
