"""Goal-conditioned low-level policy: state encoder, action head, hindsight relabeling, BC training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import env
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Episode
from .nn import MLP, Module
from .optim import Adam
from .tensor import Tensor

_ACT_LOW = env.ACTION_LOW
_ACT_SPAN = env.ACTION_HIGH - env.ACTION_LOW


def squash(u: Tensor) -> Tensor:
    """Map unbounded head outputs into the action box through tanh."""
    return (T.tanh(u) + 1.0) * Tensor(0.5 * _ACT_SPAN) + Tensor(_ACT_LOW)


def _prep(obs) -> Tensor:
    # center the unit-box observation
    data = obs.data if isinstance(obs, Tensor) else np.asarray(obs)
    return Tensor((data - 0.5) * 2.0)


class LowLevelPolicy(Module):
    """pi_lo(s, g) = head(E(s), g): the state reaches the action only through E."""

    def __init__(self, rng: np.random.Generator, obs_dim: int = env.OBS_DIM, latent_dim: int = 32,
                 hidden: int = 128, act_dim: int = env.ACT_DIM):
        super().__init__()
        self.obs_dim, self.latent_dim, self.hidden, self.act_dim = obs_dim, latent_dim, hidden, act_dim
        self.encoder = MLP([obs_dim, hidden, hidden, latent_dim], rng, prefix="encoder")
        self.head = MLP([2 * latent_dim, hidden, hidden, act_dim], rng, prefix="head")
        self.params.update(self.encoder.params)
        self.params.update(self.head.params)

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "latent_dim": self.latent_dim, "hidden": self.hidden, "act_dim": self.act_dim}

    def encode_t(self, obs) -> Tensor:
        return self.encoder(_prep(obs))

    def act_t(self, z: Tensor, goal: Tensor) -> Tensor:
        if goal.shape[-1] != self.latent_dim:
            raise T.ShapeError(f"act: goal width {goal.shape[-1]} does not match latent width {self.latent_dim}")
        return squash(self.head(T.concat([z, goal], axis=-1)))

    def encode(self, obs: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.encode_t(np.atleast_2d(obs)).data.astype(np.float64)

    def act(self, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
        goal = np.atleast_2d(goal)
        if goal.shape[-1] != self.latent_dim:
            raise T.ShapeError(f"act: goal width {goal.shape[-1]} does not match latent width {self.latent_dim}")
        with T.no_grad():
            z = self.encode_t(np.atleast_2d(obs))
            return self.act_t(z, Tensor(goal)).data.astype(np.float64)


class GoalReachingExpert:
    """Scripted stand-in for a trained LLP whose latent is the raw observation.

    Moves whichever block the goal displaces most, or else steers the gripper
    to the goal's gripper position.
    """

    latent_dim = env.OBS_DIM

    def encode(self, obs: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(obs, dtype=np.float64)).copy()

    def act(self, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
        obs, goal = np.atleast_2d(obs), np.atleast_2d(goal)
        shift = np.linalg.norm((goal[:, 2:] - obs[:, 2:]).reshape(len(obs), env.N_BLOCKS, 2), axis=-1)
        block = np.where(shift.max(axis=1) > 1e-3, shift.argmax(axis=1), -1)
        idx = np.clip(block, 0, env.N_BLOCKS - 1)
        target = np.where((block >= 0)[:, None], goal[np.arange(len(goal))[:, None], 2 + 2 * idx[:, None] + np.arange(2)], goal[:, :2])
        return env.expert_actions(obs, block, target)


# ---------------------------------------------------------------------------
# hindsight relabeling


@dataclass
class RelabeledPairs:
    episode: np.ndarray
    t: np.ndarray
    goal_index: np.ndarray
    offset: np.ndarray
    states: np.ndarray
    goals: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def subset(self, mask: np.ndarray) -> RelabeledPairs:
        return RelabeledPairs(*(getattr(self, f)[mask] for f in
                                ("episode", "t", "goal_index", "offset", "states", "goals", "actions")))

    def triples(self) -> list[tuple[int, int, int]]:
        return sorted(zip(self.episode.tolist(), self.t.tolist(), self.goal_index.tolist()))


def relabel_count(lengths: Sequence[int], c: int, o: int) -> int:
    return int(sum(max(0, n - c - o) for n in lengths))


def build_relabeled(episodes: Sequence[Episode], c: int, o: int, rng: np.random.Generator) -> RelabeledPairs:
    """(s_t, s_{t+c+d}, a_t) for t < len - c - o with d ~ Unif{-o..o}.

    Offsets are drawn as one vector in (episode, t) order; goal indices are
    clipped to ``[t + 1, len - 1]``.
    """
    if c < 1 or o < 0:
        raise ValueError(f"build_relabeled: need c >= 1 and o >= 0, got c={c}, o={o}")
    if not episodes:
        raise ValueError("build_relabeled: no episodes")
    lengths = [ep.length for ep in episodes]
    short = sum(n <= c + o for n in lengths)
    if short:
        raise ValueError(f"build_relabeled: c + o = {c + o} reaches the length of {short} of {len(lengths)} episodes (shortest {min(lengths)})")
    count = relabel_count(lengths, c, o)
    d = rng.integers(-o, o + 1, size=count) if o > 0 else np.zeros(count, dtype=int)
    cols = {k: [] for k in ("episode", "t", "goal_index", "states", "goals", "actions")}
    pos = 0
    for i, ep in enumerate(episodes):
        n = ep.length - c - o
        t = np.arange(n)
        goal = np.clip(t + c + d[pos:pos + n], t + 1, ep.length - 1)
        cols["episode"].append(np.full(n, i))
        cols["t"].append(t)
        cols["goal_index"].append(goal)
        cols["states"].append(ep.states[t])
        cols["goals"].append(ep.states[goal])
        cols["actions"].append(ep.actions[t])
        pos += n
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return RelabeledPairs(cat["episode"], cat["t"], cat["goal_index"], d, cat["states"], cat["goals"], cat["actions"])


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_finite: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_finite = last_finite


def fit(params: dict[str, Tensor], batch_loss: Callable[[np.ndarray], Tensor], n: int, epochs: int,
        batch: int, lr: float, rng: np.random.Generator, cosine: bool = False) -> list[float]:
    """Minibatch Adam over ``n`` examples; returns the mean loss per epoch.

    With ``cosine`` the step size follows a half cosine from ``lr`` down to 0
    across all updates.
    """
    if n == 0:
        raise ValueError("fit: no training examples")
    opt = Adam(params, lr=lr)
    per_epoch = -(-n // batch)
    total_updates = epochs * per_epoch
    history = []
    last = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if cosine:
                done = epoch * per_epoch + start // batch
                opt.state.lr = 0.5 * lr * (1.0 + math.cos(math.pi * done / total_updates))
            opt.zero_grad()
            loss = batch_loss(idx)
            value = loss.item()
            if not np.isfinite(value):
                for k, p in params.items():
                    p.data = last[k]
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}", last)
            loss.backward(ensure=list(params.values()))
            opt.step()
            total += value * len(idx)
        last = {k: p.data.copy() for k, p in params.items()}
        history.append(total / n)
    return history


@dataclass
class LLPReport:
    val_max: float
    val_mean: float
    n_train: int
    n_val: int
    history: list[float] = field(default_factory=list)


def validation_errors(llp: LowLevelPolicy, pairs: RelabeledPairs) -> np.ndarray:
    z = llp.encode(pairs.states)
    g = llp.encode(pairs.goals)
    with T.no_grad():
        pred = llp.act_t(Tensor(z), Tensor(g)).data
    return np.linalg.norm(pred - pairs.actions, axis=1)


def validation_mask(pairs: RelabeledPairs, val_every: int) -> np.ndarray:
    """Every ``val_every``-th episode is held out, so the set never depends on training randomness."""
    return pairs.episode % val_every == 0


def train_llp(pairs: RelabeledPairs, rng: np.random.Generator, epochs: int = 30, batch: int = 256, lr: float = 1e-3,
              hidden: int = 128, latent_dim: int = 32, val_every: int = 10,
              cosine: bool = False) -> tuple[LowLevelPolicy, LLPReport]:
    """Fit pi_lo end to end on relabeled pairs by mean squared action error.

    Returns the policy and a report whose ``val_max`` is the sup action error
    on the validation episodes.
    """
    if len(pairs) == 0:
        raise ValueError("train_llp: empty pair set")
    val = validation_mask(pairs, val_every)
    train = pairs.subset(~val)
    held = pairs.subset(val)
    if len(train) == 0 or len(held) == 0:
        raise ValueError(f"train_llp: need both training and validation pairs, got {len(train)} and {len(held)}")
    llp = LowLevelPolicy(rng, latent_dim=latent_dim, hidden=hidden)
    llp.cast(32 if T.get_dtype() == np.float32 else 64)

    def batch_loss(idx):
        z = llp.encode_t(train.states[idx])
        g = llp.encode_t(train.goals[idx])
        diff = llp.act_t(z, g) - Tensor(train.actions[idx])
        return diff.square().sum() * (1.0 / len(idx))

    history = fit(llp.params, batch_loss, len(train), epochs, batch, lr, rng, cosine)
    errs = validation_errors(llp, held)
    return llp, LLPReport(float(errs.max()), float(errs.mean()), len(train), len(held), history)


def save_llp(stem, llp: LowLevelPolicy, meta: dict | None = None) -> None:
    save_checkpoint(stem, llp.state_dict(), {"llp_config": llp.config(), **(meta or {})})


def load_llp(stem) -> tuple[LowLevelPolicy, dict]:
    arrays, meta = load_checkpoint(stem)
    cfg = meta["llp_config"]
    llp = LowLevelPolicy(np.random.default_rng(0), cfg["obs_dim"], cfg["latent_dim"], cfg["hidden"], cfg["act_dim"])
    llp.load_state_dict(arrays)
    return llp, meta
