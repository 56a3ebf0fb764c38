"""Seeded experiment grids: one training run per (method, qa%, sup%, seed) cell.

Every cell runs in isolation (fresh dataset, fresh model) and writes one JSON
file.  Aggregates are always recomputed from those files, so a sweep that is
killed and restarted skips the finished cells and emits the same aggregates.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .baselines import train_abduction, train_reinforce
from .catalog import FunctionCatalog
from .config import RunConfig, UsageError
from .data import build_dataset
from .model import SoftVQAModel
from .scene import ConfigError
from .training import DivergenceError, RunMetrics, train

TRAINABLE = ("soft-e2e", "reinforce", "abduction")
METHODS = TRAINABLE + ("symbolic-eval",)


def run_method(method: str, model: SoftVQAModel, dataset, cfg: RunConfig, log=None) -> RunMetrics:
    if method == "soft-e2e":
        return train(model, dataset, cfg.train, log)
    if method == "reinforce":
        return train_reinforce(model, dataset, cfg.train, cfg.extra["reinforce_decay"], log)
    if method == "abduction":
        return train_abduction(model, dataset, cfg.train, cfg.extra["abduction_budget"],
                               cfg.extra["abduction_targets"], log)
    raise UsageError(f"method {method!r} is evaluation-only; trainable methods are {list(TRAINABLE)}")


@dataclass
class ExperimentSpec:
    methods: tuple = ("soft-e2e",)
    qa_grid: tuple = (1, 5, 10, 100)
    sup_grid: tuple = (0.1, 0.5, 1)
    seeds: int = 5
    budget: int = 200_000
    out_dir: str = "sweep"
    overrides: dict = field(default_factory=dict)  # flat config keys applied to every cell
    precision: str = "high"

    def __post_init__(self):
        if not self.methods or not self.qa_grid or not self.sup_grid:
            raise UsageError("method, qa and sup grids must be nonempty")
        if self.seeds < 1:
            raise UsageError("seeds must be >= 1")
        bad = [m for m in self.methods if m not in TRAINABLE]
        if bad:
            raise UsageError(f"cannot sweep {bad}; trainable methods are {list(TRAINABLE)}")
        self.methods, self.qa_grid, self.sup_grid = tuple(self.methods), tuple(self.qa_grid), tuple(self.sup_grid)

    def cells(self) -> list:
        return [(m, qa, sup, s) for m in self.methods for qa in self.qa_grid for sup in self.sup_grid
                for s in range(self.seeds)]

    def cell_config(self, qa, sup, seed) -> RunConfig:
        flat = dict(self.overrides)
        flat.update(qa_percent=qa, sup_percent=sup, seed=seed, max_samples=self.budget)
        return RunConfig.from_flat(flat)


def cell_name(method, qa, sup, seed) -> str:
    return f"{method}_qa{qa:g}_sup{sup:g}_seed{seed}"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_cell(spec: ExperimentSpec, method, qa, sup, seed) -> dict:
    """Train one cell and write its record; divergence and bad data are recorded, not raised."""
    ad.set_precision(spec.precision)
    cfg = spec.cell_config(qa, sup, seed)
    rec = {"method": method, "qa_percent": qa, "sup_percent": sup, "seed": seed, "config": cfg.flat,
           "catalog_digest": FunctionCatalog.build(cfg.dataset.scene.schema).digest(), "version": __version__}
    try:
        ds = build_dataset(cfg.dataset)
        model = SoftVQAModel(cfg.model, ds.schema, len(ds.vocab))
        rec["metrics"] = run_method(method, model, ds, cfg).to_json()
        rec["status"] = "ok"
    except DivergenceError as e:
        rec.update(status="diverged", error=str(e))
    except ConfigError as e:
        rec.update(status="invalid", error=str(e))
    path = Path(spec.out_dir) / "cells" / (cell_name(method, qa, sup, seed) + ".json")
    _write_atomic(path, json.dumps(rec, indent=1, sort_keys=True) + "\n")
    return rec


def _load_cell(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None  # absent or torn: rerun


@dataclass
class SweepResult:
    spec: ExperimentSpec
    cells: dict  # (method, qa, sup, seed) -> record

    @property
    def failed(self) -> list:
        return [k for k, r in sorted(self.cells.items()) if r["status"] != "ok"]

    def metrics(self, method, qa, sup) -> list:
        """RunMetrics for every seed; None marks a failed run."""
        out = []
        for s in range(self.spec.seeds):
            r = self.cells[(method, qa, sup, s)]
            out.append(RunMetrics(**r["metrics"]) if r["status"] == "ok" else None)
        return out

    def curve(self, method, qa, sup) -> tuple:
        """(samples, mean, std) over seeds; a checkpoint has a value only when every seed has one.

        Each run holds its last evaluated accuracy until its next checkpoint
        (and after an early stop), so runs with different schedules align.
        """
        runs = self.metrics(method, qa, sup)
        grid = sorted({r["samples"] for m in runs if m for r in m.records})
        mean, std = [], []
        for s in grid:
            vals = []
            for m in runs:
                seen = [r["accuracy"] for r in m.records if r["samples"] <= s] if m else []
                vals.append(seen[-1] if seen else np.nan)
            v = np.array(vals)
            ok = not np.isnan(v).any() and len(v) == self.spec.seeds
            mean.append(float(v.mean()) if ok else np.nan)
            std.append(float(v.std()) if ok else np.nan)
        return np.array(grid, dtype=int), np.array(mean), np.array(std)

    def final(self, method, qa, sup) -> np.ndarray:
        return np.array([m.final_accuracy if m else np.nan for m in self.metrics(method, qa, sup)])

    # -- files -------------------------------------------------------------------

    def runs_text(self) -> str:
        lines = ["method qa_percent sup_percent seed status final_accuracy best_accuracy samples"]
        for (m, qa, sup, s), r in sorted(self.cells.items()):
            if r["status"] == "ok":
                rm = RunMetrics(**r["metrics"])
                tail = f"{rm.final_accuracy:.6f} {rm.best_accuracy:.6f} {rm.records[-1]['samples']}"
            else:
                tail = "nan nan 0"
            lines.append(f"{m} {qa:g} {sup:g} {s} {r['status']} {tail}")
        return "\n".join(lines) + "\n"

    def sample_efficiency_text(self) -> str:
        lines = ["method qa_percent sup_percent n_ok mean std median"]
        for m in self.spec.methods:
            for qa in self.spec.qa_grid:
                for sup in self.spec.sup_grid:
                    v = self.final(m, qa, sup)
                    ok = v[~np.isnan(v)]
                    stats = (f"{ok.mean():.6f} {ok.std():.6f} {np.median(ok):.6f}" if len(ok) == len(v)
                             else "nan nan nan")
                    lines.append(f"{m} {qa:g} {sup:g} {len(ok)} {stats}")
        return "\n".join(lines) + "\n"

    def curves_text(self, qa, sup) -> str:
        curves = {m: self.curve(m, qa, sup) for m in self.spec.methods}
        grid = sorted({int(s) for g, _, _ in curves.values() for s in g})
        head = ["samples"] + [f"{c}_{m}" for m in self.spec.methods for c in ("mean", "std")]
        lines = [" ".join(head)]
        for s in grid:
            row = [str(s)]
            for m in self.spec.methods:
                g, mu, sd = curves[m]
                idx = np.searchsorted(g, s, side="right") - 1  # hold the last checkpoint
                row += ["nan", "nan"] if idx < 0 else [f"{mu[idx]:.6f}", f"{sd[idx]:.6f}"]
            lines.append(" ".join(row))
        return "\n".join(lines) + "\n"

    def write(self) -> list:
        out = Path(self.spec.out_dir)
        written = [out / "runs.txt", out / "sample_efficiency.txt"]
        _write_atomic(written[0], self.runs_text())
        _write_atomic(written[1], self.sample_efficiency_text())
        for qa in self.spec.qa_grid:
            for sup in self.spec.sup_grid:
                p = out / f"curves_qa{qa:g}_sup{sup:g}.txt"
                _write_atomic(p, self.curves_text(qa, sup))
                written.append(p)
        return written


def code_digest() -> str:
    """Hash of this package's sources: cells computed by other code are never reused."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def spec_manifest(spec: ExperimentSpec) -> dict:
    cfg = spec.cell_config(spec.qa_grid[0], spec.sup_grid[0], 0)
    desc = asdict(spec)
    desc.pop("out_dir")  # a sweep directory may be moved and resumed elsewhere
    return {"spec": desc, "catalog_digest": FunctionCatalog.build(cfg.dataset.scene.schema).digest(),
            "version": __version__, "code_digest": code_digest()}


def run_sweep(spec: ExperimentSpec, jobs: int = 1, log=None) -> SweepResult:
    out = Path(spec.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    text = json.dumps(spec_manifest(spec), indent=2, sort_keys=True) + "\n"
    if manifest.exists() and manifest.read_text() != text:
        raise ConfigError(f"{out} holds a different sweep; use a fresh --out-dir")
    _write_atomic(manifest, text)
    done, todo = {}, []
    for key in spec.cells():
        rec = _load_cell(out / "cells" / (cell_name(*key) + ".json"))
        if rec is None:
            todo.append(key)
        else:
            done[key] = rec
    if log:
        log(f"{len(done)} cells done, {len(todo)} to run")
    if jobs <= 1:
        for key in todo:
            done[key] = run_cell(spec, *key)
            if log:
                log(f"{cell_name(*key)}: {done[key]['status']}")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(run_cell, spec, *key) for key in todo}
            for key, fut in futures.items():
                done[key] = fut.result()
                if log:
                    log(f"{cell_name(*key)}: {done[key]['status']}")
    result = SweepResult(spec, done)
    result.write()
    return result
