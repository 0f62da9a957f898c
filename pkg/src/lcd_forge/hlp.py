"""High-level policy training: on-policy collection, latent caching, plan subsampling, diffusion fitting."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffusion as D
from . import env
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Episode, TrajectoryDataset, diversified_start
from .denoiser import DenoiserConfig, TemporalUNet
from .language import TRAIN, HashEmbedder, sample_instruction, tokenize
from .optim import Adam, ema_update
from .tasks import TaskSpec, get_task


# ---------------------------------------------------------------------------
# on-policy collection


def expert_lookahead(obs: np.ndarray, blocks: np.ndarray, targets: np.ndarray, steps: int) -> np.ndarray:
    """Where the scripted expert would be ``steps`` transitions from each row of ``obs``."""
    x = np.array(obs, dtype=np.float64)
    for _ in range(steps):
        x = env.dynamics(x, env.expert_actions(x, blocks, targets))[0]
    return x


@dataclass
class CollectionReport:
    success_rate: dict[str, float]
    flagged: list[str]
    episodes: int


def collect_onpolicy(llp, tasks: Sequence[TaskSpec], episodes_per_task: int, rng: np.random.Generator, c: int,
                     length: int, prefix_max: int = 0, embedder: HashEmbedder | None = None
                     ) -> tuple[TrajectoryDataset, CollectionReport]:
    """Roll the LLP out with expert-derived goals refreshed every ``c`` steps.

    Each episode gets a task, a train-split instruction, and a start state.
    Every ``c`` steps the goal becomes the encoding of the state the scripted
    expert would reach ``c`` steps later. ``llp`` needs ``encode`` and ``act``.
    """
    starts, task_rows, texts = [], [], []
    for task in tasks:
        for _ in range(episodes_per_task):
            starts.append(diversified_start(rng, tasks, prefix_max))
            task_rows.append(task)
            texts.append(sample_instruction(task, TRAIN, rng, embedder).text)
    obs = np.stack(starts)
    blocks, targets = env.batched_targets(task_rows, obs)
    n = len(obs)
    states = np.empty((n, length, env.OBS_DIM))
    actions = np.empty((n, length - 1, env.ACT_DIM))
    states[:, 0] = obs
    goal = None
    for i in range(length - 1):
        if i % c == 0:
            goal = llp.encode(expert_lookahead(obs, blocks, targets, c))
        actions[:, i] = env.clip_action(llp.act(obs, goal))
        obs = env.dynamics(obs, actions[:, i])[0]
        states[:, i + 1] = obs
    episodes, per_task = [], {}
    for j, task in enumerate(task_rows):
        ok = bool(task.satisfied(states[j], targets[j]).any())
        per_task.setdefault(task.task_id, []).append(ok)
        episodes.append(Episode(states[j], actions[j], task.task_id, texts[j], TRAIN, ok))
    rates = {k: float(np.mean(v)) for k, v in per_task.items()}
    flagged = [k for k, r in rates.items() if r == 0.0]
    return TrajectoryDataset(episodes), CollectionReport(rates, flagged, n)


# ---------------------------------------------------------------------------
# latent caching

LATENT_FORMAT = "lcd-forge-latents-1"
PLAN_FORMAT = "lcd-forge-plans-1"


def params_hash(arrays) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class LatentEpisodes:
    latents: list[np.ndarray]
    embeddings: np.ndarray
    task_ids: list[str]
    texts: list[str]
    encoder_hash: str

    def __len__(self) -> int:
        return len(self.latents)

    def size_report(self, state_dim: int = env.OBS_DIM) -> dict[str, float]:
        steps = sum(len(z) for z in self.latents)
        width = self.latents[0].shape[1] if self.latents else 0
        cached, raw = steps * width, steps * state_dim
        return {"cached_floats": cached, "raw_floats": raw, "ratio": cached / raw if raw else 0.0}

    def append(self, other: LatentEpisodes) -> None:
        if other.encoder_hash != self.encoder_hash:
            raise ValueError(f"latent cache: encoder {other.encoder_hash} differs from cached encoder {self.encoder_hash}")
        self.latents += other.latents
        self.embeddings = np.concatenate([self.embeddings, other.embeddings])
        self.task_ids += other.task_ids
        self.texts += other.texts


def cache_latents(data: TrajectoryDataset, llp, encoder_hash: str, embedder: HashEmbedder,
                  include_failures: bool = False) -> LatentEpisodes:
    """Encode every kept episode once with the frozen encoder."""
    kept = [e for e in data.episodes if include_failures or e.success]
    latents = [llp.encode(e.states).astype(np.float32) for e in kept]
    emb = embedder.embed_many([e.text for e in kept]).astype(np.float32).reshape(len(kept), embedder.width)
    return LatentEpisodes(latents, emb, [e.task_id for e in kept], [e.text for e in kept], encoder_hash)


def save_latents(path: str | Path, cache: LatentEpisodes, config_hash: str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = cache.latents[0].shape[1] if cache.latents else 0
    lines = [f"#format {LATENT_FORMAT}", f"#episodes {len(cache)}", f"#latent_dim {width}",
             f"#embed_width {cache.embeddings.shape[1] if cache.embeddings.ndim == 2 else 0}",
             f"#encoder_hash {cache.encoder_hash}", f"#config_hash {config_hash}"]
    lines += [f"{len(z)}\t{tid}\t{text}" for z, tid, text in zip(cache.latents, cache.task_ids, cache.texts)]
    blob = np.concatenate(cache.latents) if cache.latents else np.zeros((0, width))
    (path / "latents.f32").write_bytes(blob.astype("<f4").tobytes())
    (path / "embeddings.f32").write_bytes(cache.embeddings.astype("<f4").tobytes())
    (path / "index.txt").write_text("\n".join(lines) + "\n")


def _header(path: Path, fmt: str, expect_hash: str | None) -> tuple[dict[str, str], list[str]]:
    index = path / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"index not found: {index}")
    header, rows = {}, []
    for line in index.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            header[key] = value
        elif line:
            rows.append(line)
    if header.get("format") != fmt:
        raise ValueError(f"{path}: expected format {fmt}, found {header.get('format')!r}")
    if expect_hash is not None and header.get("config_hash") != expect_hash:
        raise ValueError(f"{path}: config hash {header.get('config_hash')} does not match expected {expect_hash}")
    return header, rows


def load_latents(path: str | Path, expect_hash: str | None = None) -> LatentEpisodes:
    path = Path(path)
    header, rows = _header(path, LATENT_FORMAT, expect_hash)
    width, ew = int(header["latent_dim"]), int(header["embed_width"])
    parts = [r.split("\t", 2) for r in rows]
    lengths = [int(p[0]) for p in parts]
    blob = np.frombuffer((path / "latents.f32").read_bytes(), dtype="<f4").astype(np.float32)
    emb = np.frombuffer((path / "embeddings.f32").read_bytes(), dtype="<f4").astype(np.float32)
    if blob.size != sum(lengths) * width or emb.size != len(parts) * ew:
        raise ValueError(f"{path}: blob sizes do not match the index")
    blob = blob.reshape(-1, width)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    latents = [blob[offsets[i]:offsets[i + 1]] for i in range(len(parts))]
    return LatentEpisodes(latents, emb.reshape(len(parts), ew), [p[1] for p in parts], [p[2] for p in parts],
                          header["encoder_hash"])


# ---------------------------------------------------------------------------
# plan subsampling


@dataclass
class PlanSet:
    plans: np.ndarray
    embeddings: np.ndarray
    episode: np.ndarray
    start: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.plans)


def plan_starts(length: int, c: int, H: int) -> np.ndarray:
    """Window starts on multiples of c whose last slot stays inside the episode."""
    span = (H - 1) * c
    return np.arange(0, length - span, c) if length > span else np.zeros(0, dtype=int)


def subsample_plans(latents: Sequence[np.ndarray], embeddings: np.ndarray, c: int, H: int) -> PlanSet:
    """Every window (z_t0, z_t0+c, ..., z_t0+(H-1)c) with t0 a multiple of c."""
    if c < 1 or H < 2:
        raise ValueError(f"subsample_plans: need c >= 1 and H >= 2, got c={c}, H={H}")
    width = latents[0].shape[1] if len(latents) else 0
    plans, owners, starts = [], [], []
    skipped = 0
    for i, z in enumerate(latents):
        t0 = plan_starts(len(z), c, H)
        if t0.size == 0:
            skipped += 1
            continue
        idx = t0[:, None] + c * np.arange(H)
        plans.append(np.asarray(z)[idx])
        owners.append(np.full(len(t0), i))
        starts.append(t0)
    if not plans:
        return PlanSet(np.zeros((0, H, width)), np.zeros((0, np.shape(embeddings)[-1])), np.zeros(0, int), np.zeros(0, int), skipped)
    owner = np.concatenate(owners)
    return PlanSet(np.concatenate(plans), np.asarray(embeddings)[owner], owner, np.concatenate(starts), skipped)


def save_plans(path: str | Path, plans: PlanSet, encoder_hash: str, config_hash: str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, H, width = plans.plans.shape
    lines = [f"#format {PLAN_FORMAT}", f"#plans {n}", f"#horizon {H}", f"#latent_dim {width}",
             f"#embed_width {plans.embeddings.shape[1]}", f"#encoder_hash {encoder_hash}",
             f"#config_hash {config_hash}", f"#skipped {plans.skipped}"]
    lines += [f"{e}\t{s}" for e, s in zip(plans.episode.tolist(), plans.start.tolist())]
    (path / "plans.f32").write_bytes(plans.plans.astype("<f4").tobytes())
    (path / "embeddings.f32").write_bytes(plans.embeddings.astype("<f4").tobytes())
    (path / "index.txt").write_text("\n".join(lines) + "\n")


def load_plans(path: str | Path, expect_hash: str | None = None) -> tuple[PlanSet, dict[str, str]]:
    path = Path(path)
    header, rows = _header(path, PLAN_FORMAT, expect_hash)
    n, H, width, ew = (int(header[k]) for k in ("plans", "horizon", "latent_dim", "embed_width"))
    plans = np.frombuffer((path / "plans.f32").read_bytes(), dtype="<f4")
    emb = np.frombuffer((path / "embeddings.f32").read_bytes(), dtype="<f4")
    if plans.size != n * H * width or emb.size != n * ew or len(rows) != n:
        raise ValueError(f"{path}: blob sizes do not match the index")
    owner = np.array([int(r.split("\t")[0]) for r in rows], dtype=int)
    start = np.array([int(r.split("\t")[1]) for r in rows], dtype=int)
    return PlanSet(plans.reshape(n, H, width).astype(np.float32), emb.reshape(n, ew).astype(np.float32), owner, start,
                   int(header.get("skipped", 0))), header


# ---------------------------------------------------------------------------
# the diffusion high-level policy


@dataclass
class HLPConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: str = "cosine"
    diffusion_steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    first_slot_weight: float = 10.0
    loss_p: int = 2
    ema_decay: float = 0.995
    lr: float = 1e-3
    batch: int = 64
    steps: int = 6000
    checkpoint_every: int = 2000
    head: str = "clean"
    snr_clip: tuple[float, float] | None = (1.0, 5.0)
    token_dropout: float = 0.0
    unknown_tokens: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HLPConfig:
        d = dict(d)
        d["denoiser"] = DenoiserConfig.from_dict(d["denoiser"])
        if d.get("snr_clip") is not None:
            d["snr_clip"] = tuple(d["snr_clip"])
        return cls(**d)


class HighLevelPolicy:
    """Temporal U-Net noise model with an EMA copy, a plan normalizer and a schedule.

    Slot 0 of every plan carries the current state latent: it is clean in
    training and pinned while sampling. Slot 1 is the next goal.
    """

    def __init__(self, config: HLPConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        self.net = TemporalUNet(config.denoiser, rng)
        self.ema = TemporalUNet(config.denoiser, np.random.default_rng(0))
        self.ema.load_state_dict(self.net.state_dict())
        self.normalizer: D.Normalizer | None = None
        self.sched = D.make_schedule(config.schedule, config.diffusion_steps, config.beta_start, config.beta_end)
        if config.head not in ("clean", "noise"):
            raise ValueError(f"HLPConfig.head must be 'clean' or 'noise', got {config.head!r}")

    def eps_model(self, use_ema: bool = False):
        net = self.ema if use_ema else self.net
        return D.CleanPlanHead(net, self.sched) if self.config.head == "clean" else net

    @property
    def latent_dim(self) -> int:
        return self.config.denoiser.latent_dim

    @property
    def embed_dim(self) -> int:
        return self.config.denoiser.embed_dim

    def cast(self, bits: int) -> None:
        self.net.cast(bits)
        self.ema.cast(bits)

    def loss(self, plans_norm: np.ndarray, cond: np.ndarray, rng: np.random.Generator, t=None, noise=None) -> T.Tensor:
        c = self.config
        return D.ddpm_loss(self.eps_model(), plans_norm, cond, rng, self.sched, first_slot_weight=c.first_slot_weight,
                           weighted_slot=1, inpaint_first=True, p=c.loss_p, t=t, noise=noise,
                           snr_clip=c.snr_clip)

    def sample(self, cond: np.ndarray, current: np.ndarray, rng, n_steps: int, eta: float = 0.0,
               use_ema: bool = True) -> np.ndarray:
        """Plans (B, H, D) in latent units, slot 0 pinned to ``current``."""
        if self.normalizer is None:
            raise RuntimeError("HighLevelPolicy: no normalizer fitted")
        cond = np.atleast_2d(cond)
        current = np.atleast_2d(current)
        if cond.shape[1] != self.embed_dim or current.shape[1] != self.latent_dim:
            raise T.ShapeError(f"sample: condition {cond.shape} / state latent {current.shape} do not match "
                               f"embed width {self.embed_dim} / latent width {self.latent_dim}")
        net = self.eps_model(use_ema)
        shape = (len(cond), self.config.denoiser.horizon, self.latent_dim)
        cond_t = cond.astype(T.get_dtype())
        return D.ddim_sample(net, cond_t, self.sched, n_steps, eta, rng, shape, self.normalizer, first_slot=current)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"ema.{k}": v for k, v in self.ema.state_dict().items()})
        if self.normalizer is not None:
            out.update(self.normalizer.arrays())
        return out

    def save(self, stem: str | Path, meta: dict | None = None) -> None:
        save_checkpoint(stem, self.arrays(), {"hlp_config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, stem: str | Path) -> tuple[HighLevelPolicy, dict]:
        arrays, meta = load_checkpoint(stem)
        policy = cls(HLPConfig.from_dict(meta["hlp_config"]))
        policy.net.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("net.")})
        policy.ema.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("ema.")})
        if "normalizer.mean" in arrays:
            policy.normalizer = D.Normalizer.from_arrays(arrays)
        return policy, meta


def filler_tokens(texts: Sequence[str], task_ids: Sequence[str]) -> frozenset[str]:
    """Tokens found in the instructions of every task of some kind.

    Such a token cannot tell tasks of that kind apart, so dropping or
    replacing it keeps the instruction unambiguous.
    """
    by_task: dict[str, set[str]] = {}
    for text, tid in zip(texts, task_ids):
        by_task.setdefault(tid, set()).update(tokenize(text))
    kinds: dict[str, list[set[str]]] = {}
    for tid, toks in by_task.items():
        kinds.setdefault(get_task(tid).kind, []).append(toks)
    out: set[str] = set()
    for sets in kinds.values():
        out |= set.intersection(*sets)
    return frozenset(out)


class InstructionAugmenter:
    """Re-embeds training instructions as random paraphrases.

    Each token in ``filler`` is dropped with probability ``dropout`` and, when
    dropped, replaced half the time by a fresh gaussian row, the way an
    out-of-table word would hash. Each of two extra slots then receives such a
    row with probability ``unknown``. Texts with an external embedding keep
    that vector unchanged.
    """

    def __init__(self, embedder: HashEmbedder, texts: Sequence[str], dropout: float, unknown: float,
                 filler: frozenset[str] = frozenset()):
        if not (0.0 <= dropout < 1.0 and 0.0 <= unknown <= 1.0):
            raise ValueError(f"InstructionAugmenter: need dropout in [0, 1) and unknown in [0, 1], got {dropout}, {unknown}")
        self.embedder, self.dropout, self.unknown = embedder, dropout, unknown
        unique = sorted(set(texts))
        lookup = {t: i for i, t in enumerate(unique)}
        self.owner = np.array([lookup[t] for t in texts], dtype=int)
        self.fixed = [embedder(t) if t in embedder.external else None for t in unique]
        self.rows = [None if f is not None else embedder.token_rows(t) for t, f in zip(unique, self.fixed)]
        self.droppable = [None if f is not None else np.array([tok in filler for tok in tokenize(t)])
                          for t, f in zip(unique, self.fixed)]

    def __call__(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        width = self.embedder.width
        out = np.empty((len(idx), width))
        for j, k in enumerate(self.owner[idx]):
            if self.fixed[k] is not None:
                out[j] = self.fixed[k]
                continue
            rows = self.rows[k]
            drop = self.droppable[k] & (rng.random(len(rows)) < self.dropout)
            if drop.all():
                drop[rng.integers(len(rows))] = False
            n_new = int((rng.random(int(drop.sum())) < 0.5).sum()) + int((rng.random(2) < self.unknown).sum())
            v = np.concatenate([rows[~drop], rng.standard_normal((n_new, width))]).mean(axis=0)
            out[j] = v / np.linalg.norm(v)
        return out


@dataclass
class HLPHistory:
    losses: list[float]
    final_loss: float


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def train_hlp(plans: np.ndarray, embeddings: np.ndarray, config: HLPConfig, rng: np.random.Generator,
              on_checkpoint: Callable[[HighLevelPolicy, int], None] | None = None,
              log: Callable[[str], None] | None = None, texts: Sequence[str] | None = None,
              embedder: HashEmbedder | None = None,
              filler: frozenset[str] = frozenset()) -> tuple[HighLevelPolicy, HLPHistory]:
    """Fit the noise model on normalized plans conditioned on instruction embeddings.

    With ``texts`` and ``embedder`` given and a nonzero ``token_dropout`` or
    ``unknown_tokens`` rate, each batch re-embeds paraphrased instructions
    instead of using ``embeddings``; only ``filler`` tokens are ever dropped.
    """
    plans = np.asarray(plans, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    dc = config.denoiser
    if plans.ndim != 3 or plans.shape[1:] != (dc.horizon, dc.latent_dim):
        raise T.ShapeError(f"train_hlp: plans {plans.shape} do not match horizon {dc.horizon} / latent {dc.latent_dim}")
    if embeddings.shape != (len(plans), dc.embed_dim):
        raise T.ShapeError(f"train_hlp: condition shape {embeddings.shape}, expected ({len(plans)}, {dc.embed_dim})")
    if len(plans) == 0:
        raise ValueError("train_hlp: no plans")
    policy = HighLevelPolicy(config, rng)
    bits = 64 if T.get_dtype() == np.float64 else 32
    policy.cast(bits)
    policy.normalizer = D.Normalizer.fit(plans)
    normed = policy.normalizer.normalize(plans).astype(T.get_dtype())
    cond = embeddings.astype(T.get_dtype())
    augment = None
    if config.token_dropout > 0 or config.unknown_tokens > 0:
        if texts is None or embedder is None:
            raise ValueError("train_hlp: instruction augmentation needs the plan texts and the embedder")
        if len(texts) != len(plans) or embedder.width != dc.embed_dim:
            raise T.ShapeError(f"train_hlp: {len(texts)} texts / embed width {embedder.width} for {len(plans)} plans "
                               f"and embed width {dc.embed_dim}")
        augment = InstructionAugmenter(embedder, texts, config.token_dropout, config.unknown_tokens, filler)
    opt = Adam(policy.net.params, lr=config.lr)
    shadow = policy.ema.state_dict()
    losses = []
    last_good = policy.net.state_dict()
    for step in range(1, config.steps + 1):
        idx = rng.integers(len(normed), size=config.batch)
        opt.zero_grad()
        batch_cond = cond[idx] if augment is None else augment(idx, rng).astype(T.get_dtype())
        loss = policy.loss(normed[idx], batch_cond, rng)
        value = loss.item()
        if not np.isfinite(value):
            policy.net.load_state_dict(last_good)
            raise FloatingPointError(f"train_hlp: loss became {value} at step {step}")
        loss.backward(ensure=list(policy.net.params.values()))
        opt.step()
        shadow = ema_update(policy.net.params, shadow, config.ema_decay)
        losses.append(value)
        if step % config.checkpoint_every == 0 or step == config.steps:
            policy.ema.load_state_dict(shadow)
            last_good = policy.net.state_dict()
            if on_checkpoint is not None:
                on_checkpoint(policy, step)
            if log is not None:
                log(f"step {step}: loss {np.mean(losses[-100:]):.4f}")
    policy.ema.load_state_dict(shadow)
    return policy, HLPHistory(losses, float(np.mean(losses[-50:])))
