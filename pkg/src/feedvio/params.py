"""Named parameter blocks, clipped SGD, and the on-disk tensor archive.

Archive format: a NumPy ``.npz`` file, one float64 array per named block,
stored under the block name with its shape.  Loading checks names and
shapes against the expected layout when one is given.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

log = logging.getLogger(__name__)


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable-by-convention ordered mapping of named float64 arrays.

    Optimizer steps return a new ``ParamSet`` so a reader holding a reference
    always sees a consistent snapshot.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray]):
        self._blocks = {k: np.array(v, dtype=float) for k, v in blocks.items()}

    def __getitem__(self, key):
        return self._blocks[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._blocks.items()}

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._blocks.items()})

    def replace(self, **blocks) -> "ParamSet":
        new = dict(self._blocks)
        new.update(blocks)
        return ParamSet(new)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._blocks.values()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self._blocks.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._blocks.values())

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return ParamSet({k: v + other[k] for k, v in self._blocks.items()})

    def scaled(self, s: float) -> "ParamSet":
        return ParamSet({k: s * v for k, v in self._blocks.items()})

    def __repr__(self):
        return f"ParamSet({self.shapes()})"


class ClippedSGD:
    """Plain gradient descent with global-norm clipping.

    A step whose gradient is not finite is skipped and counted in ``skipped``.
    ``clip_norm=None`` disables clipping.
    """

    def __init__(self, clip_norm: float | None = 1.0):
        self.clip_norm = clip_norm
        self.skipped = 0
        self.applied = 0

    def step(self, params: ParamSet, grads: ParamSet, learning_rate: float) -> ParamSet:
        if set(params) != set(grads) or any(params[k].shape != grads[k].shape for k in params):
            raise ValueError("gradient blocks do not match parameter blocks")
        if not grads.is_finite():
            self.skipped += 1
            log.warning("non-finite gradient, update skipped (%d so far)", self.skipped)
            return params
        scale = 1.0
        norm = grads.global_norm()
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.applied += 1
        return ParamSet({k: params[k] - learning_rate * scale * grads[k] for k in params})


def save_params(params: ParamSet, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v, dtype=np.float64) for k, v in params.items()})


def load_params(path, expected: Mapping[str, tuple] | None = None) -> ParamSet:
    with np.load(Path(path), allow_pickle=False) as data:
        blocks = {k: data[k] for k in data.files}
    if expected is not None:
        if set(blocks) != set(expected):
            raise ValueError(f"archive blocks {sorted(blocks)} do not match expected {sorted(expected)}")
        for k, shape in expected.items():
            if blocks[k].shape != tuple(shape):
                raise ValueError(f"block {k!r} has shape {blocks[k].shape}, expected {tuple(shape)}")
        blocks = {k: blocks[k] for k in expected}
    return ParamSet(blocks)
