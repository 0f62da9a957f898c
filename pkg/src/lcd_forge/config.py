"""Run configuration: key=value files, flag overrides, validation and stage hashes."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    float64: bool = False
    jobs: int = 1
    # expert data
    expert_episodes_per_task: int = 120
    episode_length: int = 48
    prefix_max: int = 24
    # low-level policy
    stride: int = 4
    frame_offset: int = 0
    llp_hidden: int = 128
    latent_dim: int = 32
    llp_epochs: int = 60
    llp_batch: int = 256
    llp_lr: float = 1e-3
    # on-policy collection and caching
    collect_episodes_per_task: int = 100
    include_failures: bool = False
    # high-level policy
    horizon: int = 8
    diffusion_steps: int = 20
    schedule: str = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    model_dim: int = 64
    embed_width: int = 64
    hlp_batch: int = 64
    hlp_lr: float = 1e-3
    hlp_steps: int = 12000
    ema_decay: float = 0.995
    first_slot_weight: float = 10.0
    loss_p: int = 2
    hlp_head: str = "clean"
    snr_weighting: bool = True
    snr_clip_lo: float = 1.0
    snr_clip_hi: float = 5.0
    token_dropout: float = 0.3
    unknown_tokens: float = 0.35
    checkpoint_every: int = 2000
    embeddings_path: str = ""
    # evaluation
    ddim_steps: int = 10
    eta: float = 0.0
    timeout: int = 360
    eval_chains: int = 100
    eval_chain_length: int = 5
    heldout_template_chains: int = 100
    heldout_task_episodes: int = 100
    bc_epochs: int = 30
    # suboptimality check
    gamma: float = 0.9
    r_max: float = 1.0
    subopt_seeds: int = 3
    subopt_episodes_per_task: int = 20
    lipschitz_probes: int = 100000

    def validate(self) -> None:
        positive = ["expert_episodes_per_task", "episode_length", "stride", "llp_hidden", "latent_dim", "llp_epochs",
                    "llp_batch", "collect_episodes_per_task", "horizon", "diffusion_steps", "model_dim", "embed_width",
                    "hlp_batch", "hlp_steps", "ddim_steps", "timeout", "eval_chains", "eval_chain_length",
                    "heldout_template_chains", "heldout_task_episodes", "bc_epochs", "subopt_seeds",
                    "subopt_episodes_per_task", "lipschitz_probes", "jobs", "checkpoint_every"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.frame_offset < 0 or self.prefix_max < 0:
            raise ConfigError("frame_offset and prefix_max must be >= 0")
        if self.stride + self.frame_offset >= self.episode_length:
            raise ConfigError(f"stride + frame_offset ({self.stride + self.frame_offset}) must be below episode_length ({self.episode_length})")
        if (self.horizon - 1) * self.stride + 1 > self.episode_length:
            raise ConfigError(f"a plan spans {(self.horizon - 1) * self.stride + 1} steps, longer than episode_length {self.episode_length}")
        if self.horizon % 2:
            raise ConfigError(f"horizon must be even for the two-level denoiser, got {self.horizon}")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"schedule must be 'linear' or 'cosine', got {self.schedule!r}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if not 1 <= self.ddim_steps <= self.diffusion_steps:
            raise ConfigError(f"ddim_steps must lie in [1, {self.diffusion_steps}], got {self.ddim_steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.hlp_head not in ("clean", "noise"):
            raise ConfigError(f"hlp_head must be 'clean' or 'noise', got {self.hlp_head!r}")
        if not 0.0 < self.snr_clip_lo <= self.snr_clip_hi:
            raise ConfigError(f"need 0 < snr_clip_lo <= snr_clip_hi, got {self.snr_clip_lo}, {self.snr_clip_hi}")
        if not (0.0 <= self.token_dropout < 1.0 and 0.0 <= self.unknown_tokens <= 1.0):
            raise ConfigError(f"need token_dropout in [0, 1) and unknown_tokens in [0, 1], got "
                              f"{self.token_dropout}, {self.unknown_tokens}")
        if self.loss_p not in (1, 2):
            raise ConfigError(f"loss_p must be 1 or 2, got {self.loss_p}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 1 <= self.eval_chain_length <= 5:
            raise ConfigError("eval_chain_length must lie in [1, 5]")
        for name in ("llp_lr", "hlp_lr", "first_slot_weight", "r_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    # -- serialization --------------------------------------------------------------
    def to_text(self, keys=None) -> str:
        d = asdict(self)
        keys = sorted(d) if keys is None else sorted(keys)
        return "".join(f"{k}={_fmt(d[k])}\n" for k in keys)

    def stage_hash(self, stage: str) -> str:
        text = self.to_text(STAGE_KEYS[stage])
        return hashlib.sha256(f"{stage}\n{text}".encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value, f"{source}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def set(self, key: str, value, where: str = "override") -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                parsed = value if isinstance(value, bool) else _parse_bool(value)
            elif kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError:
            raise ConfigError(f"{where}: bad value {value!r} for {key} ({kind})") from None
        setattr(self, key, parsed)


def _parse_bool(value: str) -> bool:
    v = str(value).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_EXPERT = ("seed", "expert_episodes_per_task", "episode_length", "prefix_max")
_LLP = _EXPERT + ("float64", "stride", "frame_offset", "llp_hidden", "latent_dim", "llp_epochs", "llp_batch", "llp_lr")
_ONPOLICY = _LLP + ("collect_episodes_per_task",)
_LATENTS = _ONPOLICY + ("include_failures", "embed_width", "embeddings_path")
_HLP = _LATENTS + ("horizon", "diffusion_steps", "schedule", "beta_start", "beta_end", "model_dim", "hlp_batch",
                   "hlp_lr", "hlp_steps", "ema_decay", "first_slot_weight", "loss_p", "hlp_head",
                   "snr_weighting", "snr_clip_lo", "snr_clip_hi", "token_dropout", "unknown_tokens")
_EVAL = _HLP + ("ddim_steps", "eta", "timeout", "eval_chains", "eval_chain_length", "heldout_template_chains",
                "heldout_task_episodes", "bc_epochs")
_SUBOPT = _LLP + ("gamma", "r_max", "subopt_seeds", "subopt_episodes_per_task", "lipschitz_probes", "timeout")
STAGE_KEYS = {
    "expert": _EXPERT,
    "llp": _LLP,
    "onpolicy": _ONPOLICY,
    "latents": _LATENTS,
    "hlp": _HLP,
    "eval": _EVAL,
    "subopt": _SUBOPT,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named stage (``env``, ``collect``, ``train``, ``eval`` ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)]))
