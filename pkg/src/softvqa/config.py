"""Flat ``key = value`` run configuration shared by the CLI and the sweep harness.

One namespace covers the dataset, model and trainer dataclasses.  A key that
several of them define (``max_objects``, ``d_feat``, ``qa_percent``,
``sup_percent``, ``seed``) is applied to all of them, so a single value can
never disagree with itself.  ``data_seed`` is the dataset seed.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DatasetConfig
from .model import ModelConfig
from .scene import SceneConfig, TEMPLATE_FAMILIES
from .training import TrainConfig


class UsageError(ValueError):
    """Malformed configuration or flag."""


# keys that belong to the baselines rather than any dataclass
EXTRA_DEFAULTS = {"reinforce_decay": 0.99, "abduction_budget": 32, "abduction_targets": "corrections",
                  "trace_samples": 8}

_RENAMED = {"data_seed": ("dataset", "seed")}
_SKIP = {("scene", "schema"), ("dataset", "scene"), ("dataset", "seed")}


def _targets() -> dict:
    """Flat key -> list of (section, field name)."""
    out = {}
    for section, cls in (("dataset", DatasetConfig), ("scene", SceneConfig), ("model", ModelConfig),
                         ("train", TrainConfig)):
        for f in fields(cls):
            if (section, f.name) not in _SKIP:
                out.setdefault(f.name, []).append((section, f.name))
    for key, target in _RENAMED.items():
        out[key] = [target]
    for key in EXTRA_DEFAULTS:
        out[key] = [("extra", key)]
    return out


KEYS = _targets()


def parse_value(text: str):
    s = text.strip()
    if s.lower() in ("none", "null"):
        return None
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        if k not in KEYS:
            raise UsageError(f"{path}:{n}: unknown key {k!r}")
        out[k] = parse_value(v)
    return out


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extra: dict = field(default_factory=lambda: dict(EXTRA_DEFAULTS))
    flat: dict = field(default_factory=dict)  # the overrides this was built from

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        sections = {"dataset": {}, "scene": {}, "model": {}, "train": {}, "extra": dict(EXTRA_DEFAULTS)}
        for k, v in flat.items():
            if k not in KEYS:
                raise UsageError(f"unknown config key {k!r}")
            if k == "templates":
                v = tuple(t.strip() for t in v.split(",")) if isinstance(v, str) else tuple(v)
                unknown = [t for t in v if t not in TEMPLATE_FAMILIES]
                if unknown:
                    raise UsageError(f"unknown template families {unknown}")
            for section, name in KEYS[k]:
                sections[section][name] = v
        try:
            scene = SceneConfig(**sections["scene"])
            dataset = DatasetConfig(scene=scene, **sections["dataset"])
            model = ModelConfig(**sections["model"])
            train = TrainConfig(**sections["train"])
        except TypeError as e:
            raise UsageError(str(e)) from None
        return cls(dataset, model, train, sections["extra"], dict(flat))

    def with_overrides(self, **kw) -> "RunConfig":
        flat = dict(self.flat)
        flat.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_flat(flat)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = read_config_file(path) if path else {}
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)
