"""Reverse-mode recording for the primitive set in :mod:`mdseg.ndnet.ops`.

Values are plain numpy arrays. The tape keeps a reference to every array it
records, so array identity is a stable key for the tape's lifetime.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, node: str):
        super().__init__(f"non-finite values produced by {node}")
        self.node = node


class TapeError(RuntimeError):
    pass


@dataclass
class Entry:
    kind: str
    inputs: tuple[np.ndarray | None, ...]
    output: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str = ""


class Tape:
    def __init__(self):
        self.entries: list[Entry] = []

    def __len__(self):
        return len(self.entries)

    def record(self, kind, inputs, output, vjp, name=""):
        self.entries.append(Entry(kind, tuple(inputs), output, vjp, name))

    def backward(self, output: np.ndarray, grad: np.ndarray) -> dict[int, np.ndarray]:
        """Propagate ``grad`` from ``output`` back through every recorded entry.

        Returns a mapping from ``id(array)`` to accumulated gradient for all
        arrays that were inputs of recorded entries but not outputs (leaves).
        Entries are visited once each, in reverse recording order.
        """
        if not any(e.output is output for e in self.entries):
            raise TapeError("output was not produced on this tape")
        grad = np.asarray(grad)
        if grad.shape != output.shape:
            raise TapeError(f"gradient shape {grad.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): grad}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for x, gx in zip(entry.inputs, entry.vjp(g)):
                if x is None or gx is None:
                    continue
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else gx
        return grads
