"""Frozen, replayable records of a computation."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .core import ShapeError, Tensor, UnboundLeafError, vjp as _vjp


class Graph:
    """Append-only list of primitive applications leading to one output.

    Entries are ``("leaf", position)``, ``("const", array)`` or
    ``("op", primitive, parent_indices, attrs)``; parents always precede
    children.  ``forward`` re-evaluates the recorded primitives on new leaf
    values, which is what finite-difference checks need.
    """

    def __init__(self, output: Tensor, leaves: Sequence[Tensor]):
        self.output = output
        self.leaves = list(leaves)
        leaf_pos = {id(t): k for k, t in enumerate(self.leaves)}

        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            if t.node is not None and id(t) not in leaf_pos:
                stack.extend(t.node.inputs)
        ordered = sorted(seen.values(), key=lambda t: t.order)

        index = {}
        self.entries = []
        for t in ordered:
            if id(t) in leaf_pos:
                entry = ("leaf", leaf_pos[id(t)])
            elif t.node is None:
                entry = ("const", t.data)
            else:
                parents = tuple(index[id(x)] for x in t.node.inputs)
                entry = ("op", t.node.prim, parents, t.node.attrs)
            index[id(t)] = len(self.entries)
            self.entries.append(entry)
        self._out_index = index[id(output)]

    @classmethod
    def trace(cls, fn: Callable[..., Tensor], *values) -> "Graph":
        leaves = [Tensor(v, requires_grad=True) for v in values]
        return cls(fn(*leaves), leaves)

    def __len__(self):
        return len(self.entries)

    def forward(self, inputs: Mapping[int, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
        """Replay the graph.  ``inputs`` maps leaf position to value."""
        if not isinstance(inputs, Mapping):
            inputs = dict(enumerate(inputs))
        vals = []
        for k, entry in enumerate(self.entries):
            kind = entry[0]
            if kind == "leaf":
                pos = entry[1]
                if pos not in inputs:
                    raise UnboundLeafError(f"leaf {pos} is not bound")
                v = np.asarray(inputs[pos], dtype=np.float64)
                expected = self.leaves[pos].shape
                if v.shape != expected:
                    raise ShapeError(f"leaf {pos}: expected shape {expected}, got {v.shape}")
            elif kind == "const":
                v = entry[1]
            else:
                _, prim, parents, attrs = entry
                try:
                    v = np.asarray(prim.forward(*(vals[p] for p in parents), **attrs), dtype=np.float64)
                except ValueError as exc:
                    raise ShapeError(f"node {k} ({prim.name}): {exc}") from exc
            vals.append(v)
        return vals[self._out_index]

    def vjp(self, seed, wrt: Sequence[Tensor] | None = None, create_graph: bool = False):
        """VJP of the recorded output with respect to the leaves (default: all)."""
        return _vjp(self.output, seed, self.leaves if wrt is None else wrt, create_graph=create_graph)
