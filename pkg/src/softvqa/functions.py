"""Closed-form soft relaxations of the DSL functions.

All functions take batched operands with a leading batch axis ``B``:
attention slices are ``(B, A)``, scalars ``(B,)``, attribute distributions
``(B, K)``, attribute probabilities ``(B, A, K)`` and relation probabilities
``(B, A, A, R)`` with ``P_rel[b, i, j, r]`` = P(object j is in relation r to
reference object i).  For binary functions the first operand is the deeper
stack entry and the second the top of the stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SoftParams:
    tau: float = 0.25
    gamma: float = 0.5
    eps: float = 1e-6
    clamp_outputs: bool = False  # clamp probability slices into [0, 1]

    def __post_init__(self):
        if self.tau <= 0 or self.gamma <= 0 or not (0 < self.eps < 0.5):
            raise ValueError(f"invalid soft-function hyperparameters {self}")


def _col(x: Tensor) -> Tensor:
    return ad.reshape(x, x.shape + (1,))


def _bvec_mat(v: Tensor, m: Tensor) -> Tensor:
    """(B, n) x (B, n, k) -> (B, k)."""
    B, n = v.shape
    return ad.reshape(ad.reshape(v, (B, 1, n)) @ m, (B, m.shape[-1]))


def _bmat_vec(m: Tensor, v: Tensor) -> Tensor:
    """(B, n, k) x (B, k) -> (B, n)."""
    return ad.reshape(m @ _col(v), m.shape[:2])


def _maybe_clamp(x: Tensor, sp: SoftParams) -> Tensor:
    return ad.clamp(x, 0.0, 1.0) if sp.clamp_outputs else x


# set functions -------------------------------------------------------------

def scene(live: np.ndarray) -> Tensor:
    return ad.constant(np.asarray(live, dtype=float))


def unique(det: Tensor, live: np.ndarray, sp: SoftParams) -> Tensor:
    m = ad.clamp(det, sp.eps, 1.0 - sp.eps)
    odds = (m / (1.0 - m)) * ad.constant(np.asarray(live, dtype=float))
    return odds / ad.broadcast_to(_col(ad.sum(odds, axis=-1)), odds.shape)


def intersect(det1: Tensor, det2: Tensor) -> Tensor:
    return ad.minimum(det1, det2)


def union(det1: Tensor, det2: Tensor) -> Tensor:
    return ad.maximum(det1, det2)


# aggregates ----------------------------------------------------------------

def count(det: Tensor) -> Tensor:
    return ad.sum(det, axis=-1)


def exist(det: Tensor) -> Tensor:
    return ad.max(det, axis=-1)


# numeric comparisons -------------------------------------------------------

def equal_integer(a: Tensor, b: Tensor, sp: SoftParams) -> Tensor:
    return ad.sigmoid((sp.tau - ad.abs(a - b)) / (sp.gamma * sp.tau))


def greater_than(a: Tensor, b: Tensor, sp: SoftParams) -> Tensor:
    return ad.sigmoid((a - b - sp.gamma) / sp.tau)


def less_than(a: Tensor, b: Tensor, sp: SoftParams) -> Tensor:
    return ad.sigmoid((b - a - sp.gamma) / sp.tau)


# attribute / relation functions ---------------------------------------------

def relate(det: Tensor, P_rel: Tensor, p_rel_arg: Tensor, sp: SoftParams) -> Tensor:
    B, A, _, R = P_rel.shape
    q = ad.reshape(ad.reshape(P_rel, (B, A * A, R)) @ _col(p_rel_arg), (B, A, A))  # q[i, j]
    return _maybe_clamp(_bvec_mat(det, q), sp)


def filter_attr(det: Tensor, P_attr: Tensor, p_arg: Tensor) -> Tensor:
    return ad.minimum(det, _bmat_vec(P_attr, p_arg))


def query_attr(det: Tensor, P_attr: Tensor, p_arg: Tensor, sp: SoftParams) -> Tensor:
    """min(p_arg, P^T det), renormalised to a distribution over the family's values."""
    v = ad.minimum(p_arg, _bvec_mat(det, P_attr))
    z = ad.maximum(ad.sum(v, axis=-1), ad.constant(np.full(v.shape[0], sp.eps)))
    return v / ad.broadcast_to(_col(z), v.shape)


def same_attr(det: Tensor, P_attr: Tensor, sp: SoftParams) -> Tensor:
    B, A, _ = P_attr.shape
    gram = P_attr @ ad.transpose(P_attr, (0, 2, 1))
    off = ad.constant(np.broadcast_to(1.0 - np.eye(A), (B, A, A)))
    return _maybe_clamp(_bmat_vec(gram * off, det), sp)


def equal_attr(m1: Tensor, m2: Tensor) -> Tensor:
    return ad.sum(m1 * m2, axis=-1)
