"""Deterministic 2-D tabletop: a point gripper and three colored blocks.

The observation is the 8-vector ``(gx, gy, x_red, y_red, x_green, y_green,
x_blue, y_blue)``; an action is ``(vx, vy, grip)`` with velocities in
``[-A_MAX, A_MAX]`` and grip in ``[0, 1]``. Blocks couple to the gripper
through a soft grasp weight so the transition map stays globally Lipschitz;
see ``docs/dynamics.md`` for the constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tasks import TaskSpec

DT = 0.05
A_MAX = 1.0
GRASP_RADIUS = 0.05
RELEASE_RADIUS = 0.10
HOLD_RADIUS = 0.05
SNAP_RADIUS = 0.03
N_BLOCKS = 3
OBS_DIM = 2 + 2 * N_BLOCKS
ACT_DIM = 3
RESET_MARGIN = 0.25
MIN_SEPARATION = 0.2
ACTION_LOW = np.array([-A_MAX, -A_MAX, 0.0])
ACTION_HIGH = np.array([A_MAX, A_MAX, 1.0])


def lipschitz_design(dt: float = DT, a_max: float = A_MAX, n_blocks: int = N_BLOCKS,
                     r_in: float = GRASP_RADIUS, r_out: float = RELEASE_RADIUS) -> float:
    """Analytic Lipschitz bound of ``step`` in the joint (state, action) Euclidean norm."""
    c = 2.0 * math.sqrt(2.0) * a_max * dt
    L = 1.0 / (r_out - r_in)
    K = n_blocks
    return math.sqrt((3 + c * L * K) ** 2 + (1 + c * L * math.sqrt(K)) ** 2 + (2 * dt) ** 2 + (2 * c * K) ** 2)


K_DESIGN = lipschitz_design()


@dataclass
class State:
    gripper: np.ndarray
    blocks: np.ndarray
    grasp: np.ndarray = field(default_factory=lambda: np.zeros(N_BLOCKS))
    t: int = 0

    def obs(self) -> np.ndarray:
        return np.concatenate([self.gripper, self.blocks.reshape(-1)])

    @classmethod
    def from_obs(cls, obs: np.ndarray, grasp: np.ndarray | None = None, t: int = 0) -> State:
        obs = np.asarray(obs, dtype=np.float64)
        return cls(obs[:2].copy(), obs[2:].reshape(N_BLOCKS, 2).copy(),
                   np.zeros(N_BLOCKS) if grasp is None else np.asarray(grasp, dtype=np.float64), t)

    @property
    def grasped(self) -> int | None:
        idx = np.flatnonzero(self.grasp > 0.5)
        return int(idx[0]) if idx.size else None


def clip_action(a: np.ndarray) -> np.ndarray:
    return np.clip(a, ACTION_LOW, ACTION_HIGH)


def _grip_strength(grip: np.ndarray) -> np.ndarray:
    return np.clip(2.0 * grip - 0.5, 0.0, 1.0)


def _proximity(d: np.ndarray) -> np.ndarray:
    return np.clip((RELEASE_RADIUS - d) / (RELEASE_RADIUS - GRASP_RADIUS), 0.0, 1.0)


def dynamics(obs: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched transition on (..., 8) observations and (..., 3) actions.

    Returns the next observation and each block's coupling weight, which sums
    to at most 1 over blocks.
    """
    obs = np.asarray(obs, dtype=np.float64)
    a = clip_action(np.asarray(action, dtype=np.float64))
    g = obs[..., :2]
    blocks = obs[..., 2:].reshape(obs.shape[:-1] + (N_BLOCKS, 2))
    g_next = np.clip(g + DT * a[..., :2], 0.0, 1.0)
    move = g_next - g
    dist = np.linalg.norm(blocks - g[..., None, :], axis=-1)
    r = _grip_strength(a[..., 2])[..., None] * _proximity(dist)
    w = r / np.maximum(1.0, r.sum(axis=-1, keepdims=True))
    blocks_next = np.clip(blocks + w[..., None] * move[..., None, :], 0.0, 1.0)
    nxt = np.concatenate([g_next, blocks_next.reshape(obs.shape[:-1] + (2 * N_BLOCKS,))], axis=-1)
    return nxt, w


def step(s: State, a: np.ndarray) -> State:
    nxt, w = dynamics(s.obs(), a)
    return State.from_obs(nxt, grasp=w, t=s.t + 1)


def reset(task: TaskSpec | None, seed) -> State:
    """Blocks uniform in the margin box with pairwise separation; gripper at the center.

    The task does not influence the layout; it is accepted so callers can
    reset per task uniformly.
    """
    rng = np.random.default_rng(seed)
    while True:
        blocks = rng.uniform(RESET_MARGIN, 1.0 - RESET_MARGIN, size=(N_BLOCKS, 2))
        gaps = np.linalg.norm(blocks[:, None] - blocks[None], axis=-1)[np.triu_indices(N_BLOCKS, 1)]
        if gaps.min() >= MIN_SEPARATION:
            return State(np.array([0.5, 0.5]), blocks)


def success(trajectory: np.ndarray, task: TaskSpec, target: np.ndarray | None = None) -> bool:
    """True iff the task predicate holds at any step; the target defaults to one resolved from step 0."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim == 1:
        traj = traj[None]
    if traj.shape[0] == 0:
        raise ValueError("success: empty trajectory")
    target = task.target(traj[0]) if target is None else target
    return bool(task.satisfied(traj, target).any())


def expert_actions(obs: np.ndarray, blocks: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Batched scripted controller.

    ``blocks[i]`` is the block index to move, or -1 to drive the gripper itself
    to ``targets[i]``. Between ``HOLD_RADIUS`` and ``SNAP_RADIUS`` of the block the
    grip ramps up and the heading blends from the block toward the target, so
    the controller is continuous in the observation and easier to imitate.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    blocks = np.atleast_1d(blocks)
    targets = np.atleast_2d(targets)
    n = obs.shape[0]
    g = obs[:, :2]
    idx = np.clip(blocks, 0, N_BLOCKS - 1)
    b = obs[np.arange(n)[:, None], 2 + 2 * idx[:, None] + np.arange(2)]
    is_push = blocks >= 0
    tracked = np.where(is_push[:, None], b, g)
    err = targets - tracked
    done = np.linalg.norm(err, axis=1) <= 0.005
    gap = np.linalg.norm(b - g, axis=1)
    hold = np.where(is_push, np.clip((HOLD_RADIUS - gap) / (HOLD_RADIUS - SNAP_RADIUS), 0.0, 1.0), 1.0)
    vel = (hold[:, None] * err + (1.0 - hold[:, None]) * (b - g)) / DT
    act = np.zeros((n, ACT_DIM))
    act[:, :2] = np.clip(vel, -A_MAX, A_MAX)
    act[:, 2] = np.where(is_push, hold, 0.0)
    act[done] = 0.0
    return act


def scripted_expert(s: State | np.ndarray, task: TaskSpec, target: np.ndarray) -> np.ndarray:
    obs = s.obs() if isinstance(s, State) else np.asarray(s)
    block = task.block if task.kind == "push" else -1
    return expert_actions(obs[None], np.array([block]), np.asarray(target)[None])[0]


@dataclass
class LipschitzEstimate:
    k_hat: float
    state: np.ndarray
    action: np.ndarray
    delta_state: np.ndarray
    delta_action: np.ndarray


def _probe_points(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    obs = rng.uniform(0.0, 1.0, size=(n, OBS_DIM))
    # half the probes put the gripper inside the coupling ring of some block
    near = rng.random(n) < 0.5
    which = rng.integers(N_BLOCKS, size=n)
    angle = rng.uniform(0.0, 2 * math.pi, size=n)
    radius = rng.uniform(0.0, RELEASE_RADIUS * 1.2, size=n)
    anchor = obs[np.arange(n)[:, None], 2 + 2 * which[:, None] + np.arange(2)]
    ring = np.clip(anchor + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1), 0.0, 1.0)
    obs[near, :2] = ring[near]
    act = rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, ACT_DIM))
    return obs, act


def _local_gain(f_joint, z: np.ndarray, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Spectral norm of the central-difference Jacobian at each row of z, and its top input direction."""
    n, dim = z.shape
    cols = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        cols.append((f_joint(z + e) - f_joint(z - e)) / (2 * h))
    jac = np.stack(cols, axis=-1)
    _, sv, vt = np.linalg.svd(jac)
    return sv[:, 0], vt[:, 0, :]


def estimate_lipschitz(
    n_probes: int,
    rng: np.random.Generator,
    dynamics_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    scale: float = 1e-4,
    batch: int = 20000,
    refine_points: int = 64,
    refine_rounds: int = 150,
) -> LipschitzEstimate:
    """Max ratio |f(x + dx, a + da) - f(x, a)| / |(dx, da)| over small probe pairs.

    Each probe point gets a pair along the top right-singular vector of its
    central-difference Jacobian. After the random sweep, the best
    ``refine_points`` points are hill-climbed on that local gain so the
    maximum is not left to the luck of the draw. ``dynamics_fn`` defaults to
    the environment transition.
    """
    if n_probes < 1:
        raise ValueError(f"estimate_lipschitz: need n_probes >= 1, got {n_probes}")
    f = dynamics_fn or (lambda x, a: dynamics(x, a)[0])
    low = np.concatenate([np.zeros(OBS_DIM), ACTION_LOW])
    high = np.concatenate([np.ones(OBS_DIM), ACTION_HIGH])

    def f_joint(z):
        return np.asarray(f(z[:, :OBS_DIM], z[:, OBS_DIM:]), dtype=np.float64)

    points, gains = [], []
    done = 0
    while done < n_probes:
        n = min(batch, n_probes - done)
        z = np.concatenate(_probe_points(n, rng), axis=1)
        gain, _ = _local_gain(f_joint, z)
        keep = np.argsort(gain)[-refine_points:]
        points.append(z[keep])
        gains.append(gain[keep])
        done += n
    z = np.concatenate(points)
    gain = np.concatenate(gains)
    keep = np.argsort(gain)[-refine_points:]
    z, gain = z[keep], gain[keep]
    step_size = 0.02
    for _ in range(refine_rounds):
        cand = np.clip(z + step_size * rng.standard_normal(z.shape), low, high)
        cand_gain, _ = _local_gain(f_joint, cand)
        better = cand_gain > gain
        z[better], gain[better] = cand[better], cand_gain[better]
        step_size *= 0.98
    _, direction = _local_gain(f_joint, z)
    z2 = z + scale * direction
    dz = z2 - z
    ratio = np.linalg.norm(f_joint(z2) - f_joint(z), axis=1) / np.linalg.norm(dz, axis=1)
    j = int(np.argmax(ratio))
    return LipschitzEstimate(float(ratio[j]), z[j, :OBS_DIM], z[j, OBS_DIM:], dz[j, :OBS_DIM], dz[j, OBS_DIM:])


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    final_state: np.ndarray
    completed: list[bool] = field(default_factory=list)


def rollout_expert(start: np.ndarray, task: TaskSpec, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-length expert episode: ``length`` observations and ``length - 1`` actions."""
    obs = np.empty((length, OBS_DIM))
    acts = np.empty((length - 1, ACT_DIM))
    obs[0] = start
    target = task.target(start)
    block = task.block if task.kind == "push" else -1
    for i in range(length - 1):
        acts[i] = expert_actions(obs[i][None], np.array([block]), target[None])[0]
        obs[i + 1] = dynamics(obs[i], acts[i])[0]
    return obs, acts


def random_policy_actions(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, ACT_DIM))


def batched_targets(tasks: Sequence[TaskSpec], obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Block index (-1 for reach) and resolved target per row."""
    blocks = np.array([t.block if t.kind == "push" else -1 for t in tasks])
    targets = np.stack([t.target(o) for t, o in zip(tasks, obs)]) if len(tasks) else np.zeros((0, 2))
    return blocks, targets
