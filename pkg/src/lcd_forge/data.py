"""Trajectory datasets: in-memory episodes, expert generation, and the on-disk format.

A dataset directory holds ``index.txt`` plus two little-endian float32 blobs,
``states.f32`` and ``actions.f32``, with episodes concatenated in index order.
``index.txt`` starts with ``#key value`` header lines (format, episodes,
state_dim, action_dim, config_hash and free-form provenance), followed by one
tab-separated line per episode: ``length task_id split success text``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import env
from .language import TRAIN, HashEmbedder, held_out_texts, sample_instruction
from .tasks import ALL_TASKS, TaskSpec, get_task

FORMAT = "lcd-forge-trajectories-1"


class DatasetError(ValueError):
    pass


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    task_id: str
    text: str
    split: str = TRAIN
    success: bool = True

    def __post_init__(self) -> None:
        if self.states.ndim != 2 or self.actions.ndim != 2 or len(self.actions) != len(self.states) - 1:
            raise DatasetError(f"episode {self.task_id}: {self.states.shape} states do not pair with {self.actions.shape} actions")

    @property
    def length(self) -> int:
        return len(self.states)

    @property
    def task(self) -> TaskSpec:
        return get_task(self.task_id)


@dataclass
class TrajectoryDataset:
    episodes: list[Episode]
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def successful(self) -> TrajectoryDataset:
        return TrajectoryDataset([e for e in self.episodes if e.success], dict(self.meta))


def check_split_hygiene(episodes: Iterable[Episode]) -> None:
    """Training data may only carry train-split instructions."""
    banned = held_out_texts(ALL_TASKS)
    for i, ep in enumerate(episodes):
        if ep.split != TRAIN or ep.text in banned:
            raise DatasetError(f"episode {i} ({ep.task_id}) carries held-out instruction {ep.text!r}")


def save_dataset(path: str | Path, data: TrajectoryDataset, config_hash: str, training: bool = True) -> None:
    path = Path(path)
    if training:
        check_split_hygiene(data.episodes)
    path.mkdir(parents=True, exist_ok=True)
    state_dim = data.episodes[0].states.shape[1] if data.episodes else env.OBS_DIM
    action_dim = data.episodes[0].actions.shape[1] if data.episodes else env.ACT_DIM
    lines = [f"#format {FORMAT}", f"#episodes {len(data)}", f"#state_dim {state_dim}",
             f"#action_dim {action_dim}", f"#config_hash {config_hash}"]
    for key, value in sorted(data.meta.items()):
        lines.append(f"#{key} {value}")
    for ep in data.episodes:
        if "\t" in ep.text or "\n" in ep.text:
            raise DatasetError(f"instruction text {ep.text!r} contains a tab or newline")
        lines.append(f"{ep.length}\t{ep.task_id}\t{ep.split}\t{int(ep.success)}\t{ep.text}")
    states = np.concatenate([e.states for e in data.episodes]) if data.episodes else np.zeros((0, state_dim))
    actions = np.concatenate([e.actions for e in data.episodes]) if data.episodes else np.zeros((0, action_dim))
    (path / "states.f32").write_bytes(states.astype("<f4").tobytes())
    (path / "actions.f32").write_bytes(actions.astype("<f4").tobytes())
    (path / "index.txt").write_text("\n".join(lines) + "\n")


def read_header(path: str | Path) -> dict[str, str]:
    index = Path(path) / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"dataset index not found: {index}")
    header = {}
    for line in index.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            header[key] = value
    return header


def load_dataset(path: str | Path, expect_hash: str | None = None) -> TrajectoryDataset:
    path = Path(path)
    header = read_header(path)
    if header.get("format") != FORMAT:
        raise DatasetError(f"{path}: unknown dataset format {header.get('format')!r}")
    if expect_hash is not None and header.get("config_hash") != expect_hash:
        raise DatasetError(f"{path}: config hash {header.get('config_hash')} does not match expected {expect_hash}")
    sd, ad = int(header["state_dim"]), int(header["action_dim"])
    rows = [line.split("\t", 4) for line in (path / "index.txt").read_text().splitlines() if line and not line.startswith("#")]
    if len(rows) != int(header["episodes"]):
        raise DatasetError(f"{path}: header declares {header['episodes']} episodes, index lists {len(rows)}")
    states = np.frombuffer((path / "states.f32").read_bytes(), dtype="<f4").astype(np.float64)
    actions = np.frombuffer((path / "actions.f32").read_bytes(), dtype="<f4").astype(np.float64)
    lengths = [int(r[0]) for r in rows]
    if states.size != sum(lengths) * sd or actions.size != sum(n - 1 for n in lengths) * ad:
        raise DatasetError(f"{path}: blob sizes do not match the episode lengths in the index")
    states = states.reshape(-1, sd)
    actions = actions.reshape(-1, ad)
    episodes = []
    s0 = a0 = 0
    for (length, task_id, split, ok, text), n in zip(rows, lengths):
        episodes.append(Episode(states[s0:s0 + n], actions[a0:a0 + n - 1], task_id, text, split, ok == "1"))
        s0 += n
        a0 += n - 1
    meta = {k: v for k, v in header.items() if k not in ("format", "episodes", "state_dim", "action_dim", "config_hash")}
    return TrajectoryDataset(episodes, meta)


def diversified_start(rng: np.random.Generator, pool: Sequence[TaskSpec], prefix_max: int) -> np.ndarray:
    """A reset layout, then a random number of expert steps on a random task.

    Moves the gripper (and possibly a block) away from the canonical reset so
    later episodes start from the kinds of states a chain reaches.
    """
    obs = env.reset(None, rng.integers(2**63)).obs()
    steps = int(rng.integers(prefix_max + 1)) if prefix_max > 0 else 0
    if steps:
        task = pool[int(rng.integers(len(pool)))]
        obs = env.rollout_expert(obs, task, steps + 1)[0][-1]
    return obs


def generate_expert(tasks: Sequence[TaskSpec], episodes_per_task: int, length: int, prefix_max: int,
                    rng: np.random.Generator, embedder: HashEmbedder | None = None) -> TrajectoryDataset:
    """Scripted-expert episodes of fixed ``length`` states with train-split instructions."""
    episodes = []
    for task in tasks:
        for _ in range(episodes_per_task):
            start = diversified_start(rng, tasks, prefix_max)
            states, actions = env.rollout_expert(start, task, length)
            instr = sample_instruction(task, TRAIN, rng, embedder)
            ok = env.success(states, task)
            episodes.append(Episode(states, actions, task.task_id, instr.text, TRAIN, ok))
    return TrajectoryDataset(episodes)

