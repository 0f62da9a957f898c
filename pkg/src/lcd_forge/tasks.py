"""The toy task family: push a colored block one step in a direction, or reach a corner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS = ("red", "green", "blue")
DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, 1.0),
    "down": (0.0, -1.0),
}
CORNERS = {
    "bottom left": (0.2, 0.2),
    "bottom right": (0.8, 0.2),
    "top left": (0.2, 0.8),
    "top right": (0.8, 0.8),
}
PUSH_DISTANCE = 0.2
SUCCESS_THRESHOLD = 0.05
DEFAULT_TIMEOUT = 360
HELD_OUT_TASKS = ("push-red-up", "push-green-down", "push-blue-left", "push-green-right")


@dataclass(frozen=True)
class TaskSpec:
    """One task identity and its success predicate parameters.

    Push targets are relative: the chosen block must end up ``PUSH_DISTANCE``
    along ``direction`` from where it stood when the task began. Reach targets
    are fixed corner points for the gripper.
    """

    task_id: str
    kind: str
    color: str | None = None
    direction: str | None = None
    corner: str | None = None
    threshold: float = SUCCESS_THRESHOLD
    max_steps: int = DEFAULT_TIMEOUT

    @property
    def block(self) -> int | None:
        return COLORS.index(self.color) if self.color is not None else None

    @property
    def held_out(self) -> bool:
        return self.task_id in HELD_OUT_TASKS

    @property
    def params(self) -> dict[str, str]:
        if self.kind == "push":
            return {"color": self.color, "direction": self.direction}
        return {"corner": self.corner}

    def target(self, obs: np.ndarray) -> np.ndarray:
        """Resolve the 2-D target point from the observation at task start."""
        obs = np.asarray(obs, dtype=np.float64)
        if self.kind == "push":
            start = obs[2 + 2 * self.block: 4 + 2 * self.block]
            return np.clip(start + PUSH_DISTANCE * np.asarray(DIRECTIONS[self.direction]), 0.0, 1.0)
        return np.asarray(CORNERS[self.corner], dtype=np.float64)

    def tracked(self, obs: np.ndarray) -> np.ndarray:
        """The point the predicate watches: the task's block, or the gripper."""
        obs = np.asarray(obs)
        if self.kind == "push":
            return obs[..., 2 + 2 * self.block: 4 + 2 * self.block]
        return obs[..., 0:2]

    def satisfied(self, obs: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Per-row predicate over one or more observations."""
        return np.linalg.norm(self.tracked(obs) - target, axis=-1) <= self.threshold


def _build() -> tuple[TaskSpec, ...]:
    tasks = []
    for color in COLORS:
        for direction in DIRECTIONS:
            tasks.append(TaskSpec(f"push-{color}-{direction}", "push", color=color, direction=direction))
    for corner in CORNERS:
        tasks.append(TaskSpec(f"reach-{corner.replace(' ', '-')}", "reach", corner=corner))
    return tuple(tasks)


ALL_TASKS = _build()
TASKS = {t.task_id: t for t in ALL_TASKS}
TRAIN_TASKS = tuple(t for t in ALL_TASKS if not t.held_out)
HELD_OUT = tuple(TASKS[name] for name in HELD_OUT_TASKS)


def get_task(task_id: str) -> TaskSpec:
    try:
        return TASKS[task_id]
    except KeyError:
        raise KeyError(f"unknown task id {task_id!r}") from None
