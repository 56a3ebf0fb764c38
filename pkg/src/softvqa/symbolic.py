"""Exact discrete semantics of the DSL (the symbolic oracle).

Programs are sequences of ``(function name, argument)`` pairs where the
argument is an attribute value name, a relation name or ``None``.  Execution
runs over discrete :class:`SceneLabels` with an explicit typed stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import FunctionCatalog
from .schema import BOOLEAN, COUNT


class ExecutionFault(RuntimeError):
    """Malformed program: stack underflow, type mismatch, or a non-singleton referent (strict)."""


@dataclass(frozen=True)
class Answer:
    type: str  # a family name, "count" or "boolean"
    value: object  # value name (str), int or bool

    def to_json(self) -> dict:
        return {"type": self.type, "value": self.value}

    @classmethod
    def from_json(cls, d: dict) -> "Answer":
        return cls(d["type"], d["value"])


@dataclass
class SceneLabels:
    """Discrete object labels: per family an index per object, plus relations[i, j, r]."""

    attrs: dict
    relations: np.ndarray  # bool (n, n, R): object j stands in relation r to reference i

    @property
    def n(self) -> int:
        return self.relations.shape[0]

    def copy(self) -> "SceneLabels":
        return SceneLabels({k: v.copy() for k, v in self.attrs.items()}, self.relations.copy())


@dataclass
class DiscreteState:
    """Typed value stack: ("set", frozenset) | ("value", family, index) | ("int", k) | ("bool", b)."""

    stack: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # per step: the popped operands

    def push(self, v) -> None:
        self.stack.append(v)

    def pop(self, kind: str):
        if not self.stack:
            raise ExecutionFault("stack underflow")
        v = self.stack.pop()
        if v[0] != kind:
            raise ExecutionFault(f"expected {kind}, found {v[0]}")
        return v


def _referent(s: frozenset, strict: bool, what: str):
    if len(s) == 1:
        return next(iter(s))
    if strict:
        raise ExecutionFault(f"{what}: expected a single object, found {len(s)}")
    return min(s) if s else None


def execute_steps(program, labels: SceneLabels, catalog: FunctionCatalog, strict: bool = True) -> DiscreteState:
    schema = catalog.schema
    st = DiscreteState()
    n = labels.n
    for name, arg in program:
        if name not in catalog.by_name:
            raise ExecutionFault(f"unknown function {name!r}")
        spec = catalog[name]
        kind, fam = spec.kind, spec.family
        if kind == "scene":
            st.trace.append(())
            st.push(("set", frozenset(range(n))))
            continue
        if spec.pops == 1:
            a = st.stack[-1] if st.stack else None
            st.trace.append((a,))
        else:
            st.trace.append(tuple(st.stack[-2:]))
        if kind == "unique":
            s = st.pop("set")[1]
            ref = _referent(s, strict, "unique")
            st.push(("set", frozenset() if ref is None else frozenset([ref])))
        elif kind == "count":
            st.push(("int", len(st.pop("set")[1])))
        elif kind == "exist":
            st.push(("bool", len(st.pop("set")[1]) > 0))
        elif kind in ("intersect", "union"):
            b = st.pop("set")[1]
            a = st.pop("set")[1]
            st.push(("set", a & b if kind == "intersect" else a | b))
        elif kind in ("equal_integer", "greater_than", "less_than"):
            b = st.pop("int")[1]
            a = st.pop("int")[1]
            res = {"equal_integer": a == b, "greater_than": a > b, "less_than": a < b}[kind]
            st.push(("bool", bool(res)))
        elif kind == "relate":
            r = schema.relations.index(arg)
            s = st.pop("set")[1]
            rel = labels.relations[:, :, r]
            st.push(("set", frozenset(j for i in s for j in range(n) if rel[i, j])))
        elif kind == "filter":
            v = schema.value_index(fam, arg)
            s = st.pop("set")[1]
            st.push(("set", frozenset(i for i in s if labels.attrs[fam][i] == v)))
        elif kind == "query":
            s = st.pop("set")[1]
            ref = _referent(s, strict, name)
            st.push(("value", fam, None if ref is None else int(labels.attrs[fam][ref])))
        elif kind == "same":
            s = st.pop("set")[1]
            col = labels.attrs[fam]
            st.push(("set", frozenset(j for i in s for j in range(n) if j != i and col[j] == col[i])))
        elif kind == "equal":
            b = st.pop("value")
            a = st.pop("value")
            if a[1] != fam or b[1] != fam:
                raise ExecutionFault(f"{name}: operands of family {a[1]}/{b[1]}")
            st.push(("bool", a[2] is not None and a[2] == b[2]))
        else:  # pragma: no cover - catalog kinds are closed
            raise ExecutionFault(f"unsupported kind {kind}")
    return st


def symbolic_execute(program, labels: SceneLabels, catalog: FunctionCatalog, strict: bool = True) -> Answer:
    """Run ``program`` and convert the top of the stack into an :class:`Answer`."""
    st = execute_steps(program, labels, catalog, strict)
    if not st.stack:
        raise ExecutionFault("empty stack at end of program")
    top = st.stack[-1]
    if top[0] == "int":
        return Answer(COUNT, int(top[1]))
    if top[0] == "bool":
        return Answer(BOOLEAN, bool(top[1]))
    if top[0] == "value":
        fam = top[1]
        vals = catalog.schema.values[fam]
        return Answer(fam, None if top[2] is None else vals[top[2]])
    raise ExecutionFault("program ends with an object set, not an answer")


def try_execute(program, labels: SceneLabels, catalog: FunctionCatalog, strict: bool = False):
    """Like :func:`symbolic_execute` but returns ``None`` on a fault."""
    try:
        return symbolic_execute(program, labels, catalog, strict)
    except ExecutionFault:
        return None
