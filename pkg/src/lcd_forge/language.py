"""Templated instructions and a frozen hashed bag-of-tokens text embedding."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tasks import TaskSpec

TRAIN = "train"
HELD_OUT = "held-out"
SPLITS = (TRAIN, HELD_OUT)

_PUSH_TEMPLATES = {
    TRAIN: (
        "push the {color} block {direction}",
        "move the {color} block {direction}",
        "shove the {color} cube {direction}",
        "push {direction} the {color} block",
        "the {color} block should go {direction}",
    ),
    HELD_OUT: (
        "please push the {color} block {direction}",
        "slide that {color} block {direction}",
    ),
}
_REACH_TEMPLATES = {
    TRAIN: (
        "move the gripper to the {corner} corner",
        "reach the {corner} corner",
        "go to the {corner} corner",
        "put the gripper in the {corner} corner",
        "the gripper should go to the {corner} corner",
    ),
    HELD_OUT: (
        "please reach the {corner} corner",
        "slide over to the {corner} corner",
    ),
}

EMBED_WIDTH = 64
TABLE_ROWS = 4096
TABLE_SEED = 20240611
_TOKEN = re.compile(r"[a-z0-9]+")


def templates(task: TaskSpec, split: str) -> tuple[str, ...]:
    if split not in SPLITS:
        raise ValueError(f"unknown template split {split!r}")
    source = _PUSH_TEMPLATES if task.kind == "push" else _REACH_TEMPLATES
    return tuple(t.format(**task.params) for t in source[split])


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class EmbeddingError(KeyError):
    pass


class HashEmbedder:
    """Deterministic text -> unit vector map standing in for a frozen language model.

    Each token hashes (blake2b) to a row of a fixed gaussian table; rows are
    averaged and L2-normalized. ``external`` entries, keyed by exact text,
    take precedence; with ``fallback=False`` an unlisted text is an error.
    """

    def __init__(self, width: int = EMBED_WIDTH, external: dict[str, np.ndarray] | None = None, fallback: bool = True):
        self.width = width
        self.fallback = fallback
        self._table = np.random.default_rng(TABLE_SEED).standard_normal((TABLE_ROWS, width))
        self.external: dict[str, np.ndarray] = {}
        for text, vec in (external or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (width,):
                raise EmbeddingError(f"external embedding for {text!r} has width {vec.shape}, expected {width}")
            self.external[text] = vec

    @staticmethod
    def bucket(token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % TABLE_ROWS

    def token_rows(self, text: str) -> np.ndarray:
        """The table rows averaged by ``hashed``, one per token."""
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"embed: no tokens in {text!r}")
        return self._table[[self.bucket(tok) for tok in tokens]]

    def hashed(self, text: str) -> np.ndarray:
        v = self.token_rows(text).mean(axis=0)
        return v / np.linalg.norm(v)

    def __call__(self, text: str) -> np.ndarray:
        if text in self.external:
            return self.external[text].copy()
        if not self.fallback:
            raise EmbeddingError(f"no external embedding for {text!r} and fallback is disabled")
        return self.hashed(text)

    def embed_many(self, texts) -> np.ndarray:
        return np.stack([self(t) for t in texts]) if texts else np.zeros((0, self.width))


_DEFAULT = HashEmbedder()


def embed(text: str) -> np.ndarray:
    """Hash embedding at the default width."""
    return _DEFAULT(text)


def write_embedding_table(path: str | Path, table: dict[str, np.ndarray]) -> None:
    """``width N`` header, then a text line and a line of N floats per entry."""
    widths = {np.shape(v) for v in table.values()}
    if len(widths) > 1:
        raise EmbeddingError(f"embedding table mixes widths {sorted(widths)}")
    width = next(iter(widths))[0] if widths else 0
    lines = [f"width {width}"]
    for text, vec in table.items():
        if "\n" in text or not text.strip():
            raise EmbeddingError(f"embedding text {text!r} must be a single nonblank line")
        lines.append(text)
        lines.append(" ".join(repr(float(x)) for x in np.asarray(vec, dtype=np.float64)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_external_embeddings(path: str | Path, width: int | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding table not found: {path}")
    lines = path.read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("width "):
        raise EmbeddingError(f"{path}: first line must be 'width N'")
    declared = int(lines[0].split()[1])
    if width is not None and declared != width:
        raise EmbeddingError(f"{path}: table width {declared} does not match configured width {width}")
    body = lines[1:]
    if len(body) % 2:
        raise EmbeddingError(f"{path}: dangling text line without a vector")
    table = {}
    for i in range(0, len(body), 2):
        vec = np.array([float(x) for x in body[i + 1].split()], dtype=np.float64)
        if vec.shape != (declared,):
            raise EmbeddingError(f"{path}:{i + 3}: vector has {vec.size} values, expected {declared}")
        table[body[i]] = vec
    return table


@dataclass(frozen=True)
class Instruction:
    task_id: str
    text: str
    split: str
    embedding: np.ndarray


def sample_instruction(task: TaskSpec, split: str, rng: np.random.Generator, embedder: HashEmbedder | None = None) -> Instruction:
    options = templates(task, split)
    if not options:
        raise ValueError(f"task {task.task_id} has no {split} templates")
    text = options[int(rng.integers(len(options)))]
    embedder = embedder or _DEFAULT
    return Instruction(task.task_id, text, split, embedder(text))


def held_out_texts(tasks) -> set[str]:
    return {text for task in tasks for text in templates(task, HELD_OUT)}
