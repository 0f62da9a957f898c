"""Temporal U-Net noise predictor over latent plans.

Plans are ``(B, H, D)``: H goal slots of width D. The slot axis is the
convolution axis and features stay channels-last, ``(B, H, C)``, throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import Module, uniform_init
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    horizon: int = 8
    latent_dim: int = 32
    embed_dim: int = 64
    model_dim: int = 64
    dim_mults: tuple[int, ...] = (1, 2)
    kernel_size: int = 5
    groups: int = 8
    attn_heads: int = 1
    context_tokens: int = 4

    def validate(self) -> None:
        levels = len(self.dim_mults)
        if levels < 1:
            raise ValueError("denoiser: need at least one resolution level")
        factor = 2 ** (levels - 1)
        if self.horizon < 2 or self.horizon % factor:
            raise ValueError(f"denoiser: horizon {self.horizon} not divisible by {factor} ({levels} levels)")
        for mult in self.dim_mults:
            if (self.model_dim * mult) % self.groups:
                raise ValueError(f"denoiser: {self.groups} groups do not divide width {self.model_dim * mult}")
        if self.embed_dim % self.context_tokens:
            raise ValueError(f"denoiser: embed_dim {self.embed_dim} not divisible into {self.context_tokens} tokens")
        width = self.model_dim * self.dim_mults[-1]
        if width % self.attn_heads:
            raise ValueError(f"denoiser: {self.attn_heads} heads do not divide bottleneck width {width}")
        if self.model_dim % 2:
            raise ValueError("denoiser: model_dim must be even for the step embedding")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_mults"] = list(self.dim_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        d = dict(d)
        d["dim_mults"] = tuple(d["dim_mults"])
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of integer step(s) ``t``.

    Entry ``2i`` is ``sin(t * f_i)`` and ``2i + 1`` is ``cos(t * f_i)`` with
    frequencies ``f_i`` spaced geometrically from 1 down to 1e-4.
    """
    if dim % 2:
        raise ValueError(f"timestep_embedding: dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timestep_embedding: steps must be non-negative")
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class TemporalUNet(Module):
    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        dims = [c.latent_dim] + [c.model_dim * m for m in c.dim_mults]
        tdim = c.model_dim
        self.time_dim = tdim

        self._linear("time.0", tdim, 4 * tdim, rng)
        self._linear("time.1", 4 * tdim, tdim, rng)

        self.down: list[tuple[str, str, bool]] = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self._resblock(f"down{i}.res0", din, dout, rng)
            self._resblock(f"down{i}.res1", dout, dout, rng)
            if not last:
                self._conv(f"down{i}.downsample", dout, dout, 3, rng)
            self.down.append((f"down{i}.res0", f"down{i}.res1", not last))

        mid = dims[-1]
        self._resblock("mid.res0", mid, mid, rng)
        self._cross_attention("mid.attn", mid, rng)
        self._resblock("mid.res1", mid, mid, rng)

        # up path mirrors the down path; each level consumes that level's skip
        self._build_up(dims, rng)

        self._conv("final.conv", dims[1], dims[1], c.kernel_size, rng)
        self._norm("final.norm", dims[1])
        self._conv("final.out", dims[1], c.latent_dim, 1, rng)

    # -- parameter construction ------------------------------------------------
    def _linear(self, name: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
        self._param(f"{name}.w", uniform_init(rng, (fan_in, fan_out), fan_in))
        if bias:
            self._param(f"{name}.b", uniform_init(rng, (fan_out,), fan_in))

    def _conv(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        fan_in = cin * k
        self._param(f"{name}.w", uniform_init(rng, (cout, cin, k), fan_in))
        self._param(f"{name}.b", uniform_init(rng, (cout,), fan_in))

    def _norm(self, name: str, ch: int) -> None:
        self._param(f"{name}.g", np.ones(ch))
        self._param(f"{name}.b", np.zeros(ch))

    def _resblock(self, name: str, cin: int, cout: int, rng) -> None:
        k = self.config.kernel_size
        self._conv(f"{name}.conv0", cin, cout, k, rng)
        self._norm(f"{name}.norm0", cout)
        self._linear(f"{name}.time", self.time_dim, cout, rng)
        self._conv(f"{name}.conv1", cout, cout, k, rng)
        self._norm(f"{name}.norm1", cout)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1, rng)

    def _cross_attention(self, name: str, ch: int, rng) -> None:
        tok = self.config.embed_dim // self.config.context_tokens
        self._norm(f"{name}.norm", ch)
        self._linear(f"{name}.q", ch, ch, rng, bias=False)
        self._linear(f"{name}.k", tok, ch, rng, bias=False)
        self._linear(f"{name}.v", tok, ch, rng, bias=False)
        self._linear(f"{name}.o", ch, ch, rng)

    def _build_up(self, dims: list[int], rng) -> None:
        levels = len(dims) - 1
        incoming = dims[-1]
        for i in reversed(range(levels)):
            skip = dims[i + 1]
            out = dims[max(i, 1)]
            self._resblock(f"up{i}.res0", incoming + skip, out, rng)
            self._resblock(f"up{i}.res1", out, out, rng)
            incoming = out
        self.up = [(i, f"up{i}.res0", f"up{i}.res1", i > 0) for i in reversed(range(levels))]

    # -- forward -----------------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _conv_fwd(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return T.conv1d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), stride=stride)

    def _norm_fwd(self, name: str, x: Tensor) -> Tensor:
        return T.group_norm(x, self.config.groups, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _res_fwd(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        h = T.mish(self._norm_fwd(f"{name}.norm0", self._conv_fwd(f"{name}.conv0", x)))
        tproj = T.linear(T.mish(temb), self._p(f"{name}.time.w"), self._p(f"{name}.time.b"))
        B, L, C = h.shape
        h = h + T.broadcast_to(tproj.reshape(B, 1, C), (B, L, C))
        h = T.mish(self._norm_fwd(f"{name}.norm1", self._conv_fwd(f"{name}.conv1", h)))
        skip = self._conv_fwd(f"{name}.skip", x) if f"{name}.skip.w" in self.params else x
        return h + skip

    def _attn_fwd(self, name: str, x: Tensor, ctx: Tensor) -> Tensor:
        B, L, C = x.shape
        heads = self.config.attn_heads
        dh = C // heads
        h = self._norm_fwd(f"{name}.norm", x)
        q = T.matmul(h, self._p(f"{name}.q.w"))
        k = T.matmul(ctx, self._p(f"{name}.k.w"))
        v = T.matmul(ctx, self._p(f"{name}.v.w"))
        M = ctx.shape[1]
        q = q.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
        k = k.reshape(B, M, heads, dh).transpose(0, 2, 1, 3)
        v = v.reshape(B, M, heads, dh).transpose(0, 2, 1, 3)
        a = T.scaled_dot_product_attention(q, k, v).transpose(0, 2, 1, 3).reshape(B, L, C)
        out = T.linear(a, self._p(f"{name}.o.w"), self._p(f"{name}.o.b"))
        return x + out

    def context_tokens(self, cond: Tensor | np.ndarray | None, batch: int) -> Tensor:
        c = self.config
        tok = c.embed_dim // c.context_tokens
        if cond is None:
            return Tensor(np.zeros((batch, c.context_tokens, tok)))
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if cond.shape != (batch, c.embed_dim):
            raise T.ShapeError(f"denoiser: condition shape {cond.shape}, expected {(batch, c.embed_dim)}")
        return cond.reshape(batch, c.context_tokens, tok)

    def __call__(self, plan: Tensor | np.ndarray, t, cond=None) -> Tensor:
        """Predict the noise in ``plan`` (B, H, D) at diffusion step(s) ``t``."""
        c = self.config
        plan = plan if isinstance(plan, Tensor) else Tensor(plan)
        if plan.ndim != 3 or plan.shape[1:] != (c.horizon, c.latent_dim):
            raise T.ShapeError(f"denoiser: plan shape {plan.shape}, expected (B, {c.horizon}, {c.latent_dim})")
        B = plan.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        temb = Tensor(timestep_embedding(t, self.time_dim))
        temb = T.linear(temb, self._p("time.0.w"), self._p("time.0.b"))
        temb = T.linear(T.mish(temb), self._p("time.1.w"), self._p("time.1.b"))
        ctx = self.context_tokens(cond, B)

        x = plan
        skips = []
        for i, (r0, r1, has_down) in enumerate(self.down):
            x = self._res_fwd(r0, x, temb)
            x = self._res_fwd(r1, x, temb)
            skips.append(x)
            if has_down:
                x = self._conv_fwd(f"down{i}.downsample", x, stride=2)

        x = self._res_fwd("mid.res0", x, temb)
        x = self._attn_fwd("mid.attn", x, ctx)
        x = self._res_fwd("mid.res1", x, temb)

        for i, r0, r1, has_up in self.up:
            x = T.concat([x, skips[i]], axis=2)
            x = self._res_fwd(r0, x, temb)
            x = self._res_fwd(r1, x, temb)
            if has_up:
                x = T.upsample_nearest1d(x, 2)

        x = T.mish(self._norm_fwd("final.norm", self._conv_fwd("final.conv", x)))
        return self._conv_fwd("final.out", x)
