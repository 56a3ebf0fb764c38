"""Heterogeneous stack memory with a soft pointer.

A memory block ``M`` has shape ``(..., T_stack, A + C + 1)``; every row is
split into an object-attention slice ``det`` (A entries), one slice per
attribute family (C entries in total) and a scalar ``num``.  The pointer ``p``
has shape ``(..., T_stack)`` and marks the top of the stack.  Push and pop
are the zero-padded shift convolutions of :func:`softvqa.autodiff.conv1d`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schema import AttributeSchema

UP = (0.0, 0.0, 1.0)  # pointer moves to the next slot
DOWN = (1.0, 0.0, 0.0)  # pointer moves back one slot


@dataclass(frozen=True)
class MemoryLayout:
    max_objects: int
    schema: AttributeSchema

    @property
    def width(self) -> int:
        return self.max_objects + self.schema.num_categorical + 1

    @property
    def slices(self) -> dict:
        """Slice name -> (start, stop); ``det``, ``m_<family>`` ..., ``num`` in row order."""
        A = self.max_objects
        out = {"det": (0, A)}
        for fam in self.schema.family_names:
            start = A + self.schema.offsets[fam]
            out[fam] = (start, start + self.schema.cardinality(fam))
        out["num"] = (self.width - 1, self.width)
        return out

    def span(self, name: str) -> tuple:
        key = name[2:] if name.startswith("m_") else name
        try:
            return self.slices[key]
        except KeyError:
            raise KeyError(f"unknown memory slice {name!r}; have {list(self.slices)}") from None


def init_memory(layout: MemoryLayout, t_stack: int, batch: int | None = None,
                rng: np.random.Generator | None = None) -> tuple:
    """Zero memory (or uniform random in [0, 1) when ``rng`` is given) and a one-hot pointer at slot 0."""
    lead = () if batch is None else (batch,)
    shape = lead + (t_stack, layout.width)
    M = rng.random(shape) if rng is not None else np.zeros(shape)
    p = np.zeros(lead + (t_stack,))
    p[..., 0] = 1.0
    return ad.constant(M), ad.constant(p)


def _outer(p: Tensor, row: Tensor) -> Tensor:
    """(..., T) x (..., W) -> (..., T, W)."""
    if p.ndim == 1:
        return ad.reshape(p, (p.shape[0], 1)) @ ad.reshape(row, (1, row.shape[0]))
    return ad.reshape(p, p.shape + (1,)) @ ad.reshape(row, row.shape[:-1] + (1, row.shape[-1]))


def _rowwise(p: Tensor, M: Tensor) -> Tensor:
    """Broadcast a per-row weight (..., T) across the columns of M."""
    return ad.broadcast_to(ad.reshape(p, p.shape + (1,)), M.shape)


def push(M: Tensor, p: Tensor, row: Tensor) -> tuple:
    """Shift the pointer up and blend ``row`` into the rows it lands on."""
    if row.shape[-1] != M.shape[-1]:
        raise ad.ShapeError("push", M.shape, row.shape)
    p2 = ad.conv1d(p, UP)
    M2 = M * (1.0 - _rowwise(p2, M)) + _outer(p2, row)
    return M2, p2


def read(M: Tensor, p: Tensor) -> Tensor:
    """Pointer-weighted row sum."""
    if p.ndim == 1:
        return ad.reshape(ad.reshape(p, (1, p.shape[0])) @ M, (M.shape[-1],))
    return ad.reshape(ad.reshape(p, p.shape[:-1] + (1, p.shape[-1])) @ M, p.shape[:-1] + (M.shape[-1],))


def pop(M: Tensor, p: Tensor) -> tuple:
    """Read the row under the pointer and move the pointer down one slot."""
    return read(M, p), ad.conv1d(p, DOWN)


def read_slice(row: Tensor, layout: MemoryLayout, name: str) -> Tensor:
    """Sub-vector of ``row`` for a named slice; ``num`` comes back as a scalar per row."""
    a, b = layout.span(name)
    if a == layout.width - 1:
        return row[..., a]
    return row[..., a:b]
