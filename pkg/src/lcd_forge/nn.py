"""Minimal parameter containers and layers on top of the tensor engine."""

from __future__ import annotations

import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds a flat, ordered ``name -> Tensor`` parameter dict."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        p = Tensor(data, requires_grad=True, name=name)
        self.params[name] = p
        return p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield name, p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            if missing or extra:
                raise KeyError(f"state dict mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in self.params.items():
            if name not in arrays:
                continue
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.astype(T.get_dtype())

    def cast(self, bits: int) -> None:
        dtype = np.float64 if bits == 64 else np.float32
        for p in self.params.values():
            p.data = p.data.astype(dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class MLP(Module):
    """Stack of affine layers with Mish between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, prefix: str = "mlp"):
        super().__init__()
        self.sizes = tuple(sizes)
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = self._param(f"{prefix}.{i}.w", uniform_init(rng, (fan_in, fan_out), fan_in))
            b = self._param(f"{prefix}.{i}.b", uniform_init(rng, (fan_out,), fan_in))
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.sizes[0]:
            raise T.ShapeError(f"MLP: expected input width {self.sizes[0]}, got {x.shape}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = T.linear(x, w, b)
            if i < last:
                x = T.mish(x)
        return x
