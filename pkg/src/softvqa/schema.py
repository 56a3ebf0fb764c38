"""Attribute families and relations of the synthetic scene domain."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

COUNT = "count"
BOOLEAN = "boolean"


@dataclass(frozen=True)
class AttributeSchema:
    families: tuple  # ((name, (value, ...)), ...)
    relations: tuple

    def __post_init__(self):
        names = [n for n, _ in self.families]
        if len(set(names)) != len(names):
            raise ValueError(f"family names must be unique: {names}")
        for name, values in self.families:
            if len(set(values)) != len(values) or not values:
                raise ValueError(f"values of family {name!r} must be unique and nonempty")
        if len(set(self.relations)) != len(self.relations) or not self.relations:
            raise ValueError("relation names must be unique and nonempty")
        if {COUNT, BOOLEAN} & set(names):
            raise ValueError("'count' and 'boolean' are reserved question types")

    @cached_property
    def family_names(self) -> tuple:
        return tuple(n for n, _ in self.families)

    @cached_property
    def values(self) -> dict:
        return {n: tuple(v) for n, v in self.families}

    def cardinality(self, family: str) -> int:
        return len(self.values[family])

    @cached_property
    def num_categorical(self) -> int:
        """C: total categorical width of a memory row."""
        return sum(len(v) for _, v in self.families)

    @cached_property
    def offsets(self) -> dict:
        """Start of each family's block inside the concatenated categorical vector."""
        out, pos = {}, 0
        for n, v in self.families:
            out[n] = pos
            pos += len(v)
        return out

    @cached_property
    def question_types(self) -> tuple:
        return self.family_names + (COUNT, BOOLEAN)

    def value_index(self, family: str, value: str) -> int:
        return self.values[family].index(value)

    def family_of_value(self, value: str) -> str:
        hits = [n for n, v in self.families if value in v]
        if len(hits) != 1:
            raise KeyError(f"value {value!r} is ambiguous or unknown: {hits}")
        return hits[0]


def default_schema() -> AttributeSchema:
    """CLEVR-like defaults: 8 colors, 3 shapes, 2 materials, 2 sizes (C = 15)."""
    return AttributeSchema(
        families=(
            ("color", ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")),
            ("shape", ("cube", "sphere", "cylinder")),
            ("material", ("rubber", "metal")),
            ("size", ("small", "large")),
        ),
        relations=("left", "right", "front", "behind"),
    )
