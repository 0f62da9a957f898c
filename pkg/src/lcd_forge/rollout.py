"""Closed-loop evaluation: agents, lockstep chain rollouts, MT-LHC metrics, baselines, bound check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import env
from . import tensor as T
from .data import TrajectoryDataset
from .env import EpisodeResult
from .hlp import HighLevelPolicy, expert_lookahead
from .language import HashEmbedder, templates
from .llp import fit, squash
from .nn import MLP, Module
from .tasks import DEFAULT_TIMEOUT, DIRECTIONS, PUSH_DISTANCE, TaskSpec, get_task
from .tensor import Tensor

MAX_CHAIN = 5
EDGE_MARGIN = 0.05


# ---------------------------------------------------------------------------
# agents


@dataclass
class RowContext:
    """What the engine knows about the rows it asks an agent to act for."""

    rows: np.ndarray
    local_step: np.ndarray
    embedding: np.ndarray
    blocks: np.ndarray
    targets: np.ndarray


class Agent:
    def start(self, n_rows: int, seeds: Sequence[int]) -> None:
        """Called once before a batch of ``n_rows`` chains, with one seed per chain."""

    def act(self, obs: np.ndarray, ctx: RowContext) -> np.ndarray:
        raise NotImplementedError


class HierarchicalAgent(Agent):
    """Samples a latent plan every ``c`` steps of the current task and tracks its first goal with the LLP."""

    def __init__(self, hlp: HighLevelPolicy, llp, c: int, ddim_steps: int, eta: float = 0.0):
        if hlp.latent_dim != llp.latent_dim:
            raise T.ShapeError(f"HLP plans {hlp.latent_dim}-wide latents, LLP expects {llp.latent_dim}")
        self.hlp, self.llp, self.c, self.ddim_steps, self.eta = hlp, llp, c, ddim_steps, eta

    def start(self, n_rows, seeds):
        self.goals = np.zeros((n_rows, self.llp.latent_dim))
        self.rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 7])) for s in seeds]

    def act(self, obs, ctx):
        if ctx.embedding.shape[1] != self.hlp.embed_dim:
            raise T.ShapeError(f"instruction embedding width {ctx.embedding.shape[1]} does not match HLP width {self.hlp.embed_dim}")
        replan = ctx.local_step % self.c == 0
        if replan.any():
            rows = ctx.rows[replan]
            z = self.llp.encode(obs[replan])
            plans = self.hlp.sample(ctx.embedding[replan], z, [self.rngs[r] for r in rows], self.ddim_steps, self.eta)
            self.goals[rows] = plans[:, 1]
        return self.llp.act(obs, self.goals[ctx.rows])


class ExpertGoalAgent(Agent):
    """LLP driven by the encoding of where the scripted expert would be ``c`` steps ahead."""

    def __init__(self, llp, c: int):
        self.llp, self.c = llp, c

    def start(self, n_rows, seeds):
        self.goals = np.zeros((n_rows, self.llp.latent_dim))

    def act(self, obs, ctx):
        replan = ctx.local_step % self.c == 0
        if replan.any():
            ahead = expert_lookahead(obs[replan], ctx.blocks[replan], ctx.targets[replan], self.c)
            self.goals[ctx.rows[replan]] = self.llp.encode(ahead)
        return self.llp.act(obs, self.goals[ctx.rows])


class NullGoalAgent(Agent):
    """Always asks the LLP to stay where it is."""

    def __init__(self, llp):
        self.llp = llp

    def act(self, obs, ctx):
        return self.llp.act(obs, self.llp.encode(obs))


class ExpertAgent(Agent):
    def act(self, obs, ctx):
        return env.expert_actions(obs, ctx.blocks, ctx.targets)


class RandomAgent(Agent):
    def start(self, n_rows, seeds):
        self.rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 11])) for s in seeds]

    def act(self, obs, ctx):
        return np.stack([env.random_policy_actions(1, self.rngs[r])[0] for r in ctx.rows])


class FlatPolicy(Module):
    """Language-conditioned behavior cloning: (state, instruction embedding) -> action."""

    def __init__(self, rng: np.random.Generator, embed_width: int, hidden: int = 256):
        super().__init__()
        self.embed_width = embed_width
        self.mlp = MLP([env.OBS_DIM + embed_width, hidden, hidden, env.ACT_DIM], rng, prefix="flat")
        self.params.update(self.mlp.params)

    def forward(self, obs: np.ndarray, emb: np.ndarray) -> Tensor:
        if emb.shape[-1] != self.embed_width:
            raise T.ShapeError(f"flat policy: embedding width {emb.shape[-1]}, expected {self.embed_width}")
        x = np.concatenate([(np.asarray(obs) - 0.5) * 2.0, emb], axis=-1)
        return squash(self.mlp(Tensor(x)))

    def act(self, obs: np.ndarray, emb: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.forward(obs, emb).data.astype(np.float64)


class FlatAgent(Agent):
    def __init__(self, policy: FlatPolicy):
        self.policy = policy

    def act(self, obs, ctx):
        return self.policy.act(obs, ctx.embedding)


def flat_bc_baseline(data: TrajectoryDataset, embedder: HashEmbedder, rng: np.random.Generator, epochs: int = 30,
                     batch: int = 256, lr: float = 1e-3, hidden: int = 256) -> tuple[FlatPolicy, list[float]]:
    """Fit the flat baseline on every (state, instruction, action) triple of the dataset."""
    if not data.episodes:
        raise ValueError("flat_bc_baseline: empty dataset")
    obs = np.concatenate([e.states[:-1] for e in data.episodes])
    acts = np.concatenate([e.actions for e in data.episodes])
    emb = np.concatenate([np.repeat(embedder(e.text)[None], len(e.actions), axis=0) for e in data.episodes])
    policy = FlatPolicy(rng, embedder.width, hidden)
    policy.cast(32 if T.get_dtype() == np.float32 else 64)

    def batch_loss(idx):
        diff = policy.forward(obs[idx], emb[idx]) - Tensor(acts[idx])
        return diff.square().sum() * (1.0 / len(idx))

    history = fit(policy.params, batch_loss, len(obs), epochs, batch, lr, rng)
    return policy, history


# ---------------------------------------------------------------------------
# chained rollouts


@dataclass(frozen=True)
class ChainSpec:
    """A chain of up to five tasks.

    With ``tasks`` set the sequence is fixed. Otherwise each position draws,
    without replacement, a task from ``pool`` that is valid from the state
    where the previous position ended.
    """

    length: int
    seed: int
    split: str
    pool: tuple[str, ...] = ()
    tasks: tuple[str, ...] | None = None
    texts: tuple[str, ...] | None = None
    start: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.length <= MAX_CHAIN:
            raise ValueError(f"chain length must lie in [1, {MAX_CHAIN}], got {self.length}")
        if self.tasks is not None and len(self.tasks) != self.length:
            raise ValueError(f"chain lists {len(self.tasks)} tasks for length {self.length}")
        if self.tasks is None and not self.pool:
            raise ValueError("chain needs either a fixed task list or a task pool")


@dataclass
class ChainResult:
    index: int
    seed: int
    length: int
    tasks: list[str] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    completed: int = 0
    final_state: np.ndarray | None = None

    def episode(self, timeout: int) -> EpisodeResult:
        flags = [i < self.completed for i in range(len(self.tasks))]
        used = sum(self.steps)
        return EpisodeResult(self.completed == self.length, used, self.final_state, flags)


def task_valid(task: TaskSpec, obs: np.ndarray) -> bool:
    """The push target stays inside the table margin and the predicate does not already hold."""
    target = task.target(obs)
    if task.kind == "push":
        start = task.tracked(obs)
        raw = start + PUSH_DISTANCE * np.asarray(DIRECTIONS[task.direction])
        if np.any(raw < EDGE_MARGIN) or np.any(raw > 1.0 - EDGE_MARGIN):
            return False
    return not bool(task.satisfied(obs, target))


def run_chains(agent: Agent, chains: Sequence[ChainSpec], timeout: int, embedder: HashEmbedder) -> list[ChainResult]:
    """Lockstep rollout of every chain; a chain stops at its first timed-out position."""
    if not chains:
        raise ValueError("run_chains: empty chain list")
    n = len(chains)
    rngs = [np.random.default_rng(np.random.SeedSequence([int(c.seed), 3])) for c in chains]
    obs = np.stack([np.asarray(c.start) if c.start is not None else env.reset(None, c.seed).obs() for c in chains])
    emb = np.zeros((n, embedder.width))
    blocks = np.full(n, -1)
    targets = np.zeros((n, 2))
    local = np.zeros(n, dtype=int)
    alive = np.ones(n, dtype=bool)
    task_of: list[TaskSpec | None] = [None] * n
    results = [ChainResult(i, c.seed, c.length) for i, c in enumerate(chains)]
    agent.start(n, [c.seed for c in chains])

    def begin(i: int) -> bool:
        spec, res = chains[i], results[i]
        k = len(res.tasks)
        if spec.tasks is not None:
            task = get_task(spec.tasks[k])
        else:
            options = [get_task(t) for t in spec.pool if t not in res.tasks]
            options = [t for t in options if task_valid(t, obs[i])]
            if not options:
                return False
            task = options[int(rngs[i].integers(len(options)))]
        if spec.texts is not None:
            text = spec.texts[k]
        else:
            choices = templates(task, spec.split)
            text = choices[int(rngs[i].integers(len(choices)))]
        res.tasks.append(task.task_id)
        res.texts.append(text)
        task_of[i] = task
        emb[i] = embedder(text)
        blocks[i] = task.block if task.kind == "push" else -1
        targets[i] = task.target(obs[i])
        local[i] = 0
        return True

    for i in range(n):
        alive[i] = begin(i)
    while alive.any():
        rows = np.flatnonzero(alive)
        ctx = RowContext(rows, local[rows], emb[rows], blocks[rows], targets[rows])
        actions = env.clip_action(np.asarray(agent.act(obs[rows], ctx), dtype=np.float64))
        obs[rows] = env.dynamics(obs[rows], actions)[0]
        local[rows] += 1
        for i in rows:
            task = task_of[i]
            if task.satisfied(obs[i], targets[i]):
                res = results[i]
                res.completed += 1
                res.steps.append(int(local[i]))
                alive[i] = res.completed < res.length and begin(i)
            elif local[i] >= timeout:
                results[i].steps.append(int(local[i]))
                alive[i] = False
    for i, res in enumerate(results):
        res.final_state = obs[i].copy()
    return results


def hierarchical_rollout(hlp: HighLevelPolicy, llp, embedder: HashEmbedder, task: TaskSpec, text: str,
                         start: np.ndarray, seed: int, c: int = 4, ddim_steps: int = 10, eta: float = 0.0,
                         timeout: int = DEFAULT_TIMEOUT, agent: Agent | None = None) -> EpisodeResult:
    """One instruction from one start state, replanning every ``c`` steps."""
    if embedder.width != hlp.embed_dim:
        raise T.ShapeError(f"embedder width {embedder.width} does not match HLP width {hlp.embed_dim}")
    agent = agent or HierarchicalAgent(hlp, llp, c, ddim_steps, eta)
    spec = ChainSpec(1, seed, "train", tasks=(task.task_id,), texts=(text,), start=tuple(np.asarray(start, dtype=float)))
    res = run_chains(agent, [spec], timeout, embedder)[0]
    return res.episode(timeout)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MTLHCResult:
    rates: list[float]
    avg_horizon_len: float
    mean_completed: float
    chains: list[ChainResult]

    def to_dict(self) -> dict:
        return {"rates": self.rates, "avg_horizon_len": self.avg_horizon_len, "mean_completed": self.mean_completed,
                "n_chains": len(self.chains)}


def horizon_rates(completed: Sequence[int], max_len: int = MAX_CHAIN) -> list[float]:
    n = len(completed)
    return [sum(c >= k for c in completed) / n for k in range(1, max_len + 1)]


def summarize(results: Sequence[ChainResult], max_len: int = MAX_CHAIN) -> MTLHCResult:
    """Per-horizon success and average horizon length, checked two ways in exact arithmetic."""
    if not results:
        raise ValueError("summarize: no chain results")
    completed = [r.completed for r in results]
    n = len(completed)
    counts = [sum(c >= k for c in completed) for k in range(1, max_len + 1)]
    exact_sum = sum(Fraction(k, n) for k in counts)
    exact_mean = Fraction(sum(completed), n)
    if exact_sum != exact_mean:
        raise AssertionError(f"horizon identity violated: {exact_sum} != {exact_mean}")
    return MTLHCResult([k / n for k in counts], float(exact_sum), float(exact_mean), list(results))


def avg_horizon_len(rates: Sequence[float]) -> float:
    return math.fsum(rates)


def eval_mtlhc(agent: Agent, chains: Sequence[ChainSpec], timeout: int, embedder: HashEmbedder) -> MTLHCResult:
    return summarize(run_chains(agent, chains, timeout, embedder))


def make_chains(n: int, length: int, split: str, pool: Sequence[TaskSpec], seed_base: int) -> list[ChainSpec]:
    ids = tuple(t.task_id for t in pool)
    return [ChainSpec(length, seed_base + i, split, pool=ids) for i in range(n)]


def chain_rows(label: str, split: str, result: MTLHCResult) -> list[dict]:
    return [{"method": label, "split": split, "chain": r.index, "seed": r.seed, "completed": r.completed,
             "tasks": " ".join(r.tasks), "steps": " ".join(map(str, r.steps))} for r in result.chains]


# ---------------------------------------------------------------------------
# suboptimality bound


STATE_ACTION_DIAMETER = math.sqrt(
    env.OBS_DIM * 1.0 + float(np.sum((env.ACTION_HIGH - env.ACTION_LOW) ** 2))
)


def suboptimality_bound(gamma: float, r_max: float, k_f: float, dom: float, eps: float) -> float:
    """2 gamma / (1 - gamma)^2 * R_max * K_f * dom * eps."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return 2.0 * gamma / (1.0 - gamma) ** 2 * r_max * k_f * dom * eps


def discounted_return(steps: int | None, gamma: float, r_max: float = 1.0) -> float:
    """Reward ``r_max`` on the transition that first satisfies the task, 0 elsewhere."""
    return 0.0 if steps is None else r_max * gamma ** (steps - 1)


@dataclass
class SuboptReport:
    eps_hat: float
    k_hat: float
    gamma: float
    r_max: float
    dom: float
    bound: float
    realized_gap: float
    per_seed_gap: list[float]
    expert_return: list[float]
    llp_return: list[float]

    @property
    def holds(self) -> bool:
        return all(g <= self.bound for g in self.per_seed_gap)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["holds"] = self.holds
        return d


def _returns(results: Sequence[ChainResult], gamma: float, r_max: float) -> np.ndarray:
    return np.array([discounted_return(r.steps[0] if r.completed else None, gamma, r_max) for r in results])


def check_suboptimality(llp, eps_hat: float | None, k_hat: float, tasks: Sequence[TaskSpec], seeds: Sequence[int],
                        episodes_per_task: int, c: int, embedder: HashEmbedder, gamma: float = 0.9,
                        r_max: float = 1.0, timeout: int = 360, dom: float = STATE_ACTION_DIAMETER) -> SuboptReport:
    """Compare the bound with the measured value gap between the expert and the goal-driven LLP.

    For each seed the same start states run under the scripted expert and under
    the LLP following the expert's c-step-ahead goals.
    """
    if eps_hat is None:
        raise ValueError("check_suboptimality: no validation action error available; train the LLP first")
    bound = suboptimality_bound(gamma, r_max, k_hat, dom, eps_hat)
    gaps, exp_ret, llp_ret = [], [], []
    for seed in seeds:
        chains = []
        for j, task in enumerate(tasks):
            for e in range(episodes_per_task):
                chains.append(ChainSpec(1, int(seed) * 100003 + j * 1009 + e, "train", tasks=(task.task_id,)))
        expert = _returns(run_chains(ExpertAgent(), chains, timeout, embedder), gamma, r_max)
        follower = _returns(run_chains(ExpertGoalAgent(llp, c), chains, timeout, embedder), gamma, r_max)
        gaps.append(float(np.mean(expert - follower)))
        exp_ret.append(float(expert.mean()))
        llp_ret.append(float(follower.mean()))
    return SuboptReport(float(eps_hat), float(k_hat), gamma, r_max, dom, bound, float(np.mean(gaps)), gaps, exp_ret, llp_ret)
