"""The DSL function catalog shared by the parser, soft executor and symbolic oracle."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

from .schema import AttributeSchema

# kind -> (pops, writes); writes "attr" means the family's categorical slice
_BASE = (
    ("scene", 0, "det"),
    ("unique", 1, "det"),
    ("count", 1, "num"),
    ("exist", 1, "num"),
    ("intersect", 2, "det"),
    ("union", 2, "det"),
    ("equal_integer", 2, "num"),
    ("greater_than", 2, "num"),
    ("less_than", 2, "num"),
    ("relate", 1, "det"),
)
_PER_FAMILY = (
    ("filter", 1, "det"),
    ("query", 1, "attr"),
    ("same", 1, "det"),
    ("equal", 2, "num"),
)


class CatalogError(ValueError):
    """Inconsistent wiring between catalog entries and argument heads."""


@dataclass(frozen=True)
class FunctionSpec:
    id: int
    name: str
    kind: str
    pops: int
    pushes: int
    family: str | None  # family the function reads/writes, if any
    argument: str | None  # "family" | "relation" | None: which parser head feeds p_arg
    writes: str  # "det" | "num" | "attr:<family>"


class FunctionCatalog:
    def __init__(self, schema: AttributeSchema, specs: list):
        self.schema = schema
        self.specs = tuple(specs)
        if [s.id for s in self.specs] != list(range(len(self.specs))):
            raise CatalogError("function ids must be dense and ordered")
        self.by_name = {s.name: s for s in self.specs}
        if len(self.by_name) != len(self.specs):
            raise CatalogError("duplicate function names")
        for s in self.specs:
            if s.family is not None and s.family not in schema.family_names:
                raise CatalogError(f"{s.name}: unknown family {s.family!r}")
            if s.argument == "family" and s.family is None:
                raise CatalogError(f"{s.name}: family argument without a family head")
            if s.writes.startswith("attr:") and s.writes[5:] != s.family:
                raise CatalogError(f"{s.name}: writes slice of another family")
            if s.pushes != 1 or s.pops not in (0, 1, 2):
                raise CatalogError(f"{s.name}: arity must be 0..2 pops and exactly 1 push")

    @classmethod
    def build(cls, schema: AttributeSchema) -> "FunctionCatalog":
        specs = []
        for kind, pops, writes in _BASE:
            arg = "relation" if kind == "relate" else None
            specs.append(FunctionSpec(len(specs), kind, kind, pops, 1, None, arg, writes))
        for kind, pops, writes in _PER_FAMILY:
            for fam in schema.family_names:
                arg = "family" if kind in ("filter", "query") else None
                w = f"attr:{fam}" if writes == "attr" else writes
                specs.append(FunctionSpec(len(specs), f"{kind}_{fam}", kind, pops, 1, fam, arg, w))
        return cls(schema, specs)

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def __getitem__(self, key):
        return self.by_name[key] if isinstance(key, str) else self.specs[key]

    def index(self, name: str) -> int:
        return self.by_name[name].id

    def ids(self, kind: str) -> list:
        return [s.id for s in self.specs if s.kind == kind]

    def manifest(self) -> dict:
        return {
            "families": [[n, list(v)] for n, v in self.schema.families],
            "relations": list(self.schema.relations),
            "functions": [asdict(s) for s in self.specs],
        }

    def digest(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
