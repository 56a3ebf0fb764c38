"""``softvqa`` command line: generate, train, eval, sweep, dump-catalog.

Exit codes: 0 success, 1 usage error, 2 data/contract mismatch, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .baselines import predict_symbolic
from .catalog import CatalogError, FunctionCatalog
from .config import RunConfig, UsageError, load_run_config, parse_value
from .data import Dataset, build_dataset
from .model import ModelConfig, SoftVQAModel, evaluate_predictions
from .scene import ConfigError
from .schema import default_schema
from .symbolic import ExecutionFault, symbolic_execute
from .sweep import METHODS, TRAINABLE, ExperimentSpec, run_method, run_sweep
from .training import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class ContractError(Exception):
    """Artifacts on disk disagree with each other or with this build."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    d = (lambda v: v) if default else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="flat key = value file")
    p.add_argument("--seed", type=int, default=d(None),
                   help="data seed for generate, model and training seed otherwise")
    p.add_argument("--precision", choices=("high", "standard"), default=d("high"))
    p.add_argument("--trace", action="store_true", default=d(False),
                   help="write per-step execution records to trace.jsonl")
    p.add_argument("--jobs", type=int, default=d(1), help="concurrent sweep cells")
    p.add_argument("--out-dir", default=d("run"))
    p.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, default=False)
    p = _Parser(prog="softvqa", description="Soft-program VQA: data, training, evaluation and sweeps.")
    p.add_argument("--version", action="version", version=__version__)
    _global_flags(p, default=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="synthesize a dataset into --out-dir")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", required=True, help="dataset directory from generate")
    t.add_argument("--method", choices=METHODS, default="soft-e2e")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", help="run directory or .svqt file from train")
    e.add_argument("--method", choices=METHODS, default="soft-e2e")
    e.add_argument("--oracle-program", action="store_true", help="execute ground-truth programs")
    e.add_argument("--oracle-vision", action="store_true", help="use ground-truth perception")

    s = sub.add_parser("sweep", parents=[common], help="run a seeded (method x qa%% x sup%%) grid")
    s.add_argument("--method", default="soft-e2e", help="comma-separated trainable methods")
    s.add_argument("--qa-grid", default="1,5,10,100")
    s.add_argument("--sup-grid", default="0.1,0.5,1")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--budget", type=int, default=200_000, help="samples seen per run")

    sub.add_parser("dump-catalog", parents=[common], help="print the function catalog manifest")
    return p


# ---------------------------------------------------------------------------
# helpers


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def _config(args, seed_key: str = "seed") -> RunConfig:
    flat = _overrides(args)
    if args.seed is not None:
        flat[seed_key] = args.seed
    return load_run_config(args.config, flat)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _tree_digest(root: Path, names) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update((root / n).read_bytes())
    return h.hexdigest()[:16]


DATA_FILES = ("dataset.json", "questions.jsonl", "scenes.jsonl", "vocab.txt")


def _load_dataset(path) -> tuple:
    root = Path(path)
    missing = [n for n in DATA_FILES if not (root / n).exists()]
    if missing:
        raise ContractError(f"{root}: not a dataset directory (missing {', '.join(missing)})")
    return Dataset.load(root, default_schema()), _tree_digest(root, DATA_FILES)


def _manifest(command, cfg: RunConfig, seed, catalog: FunctionCatalog, **extra) -> dict:
    return {"command": command, "version": __version__, "seed": seed, "catalog_digest": catalog.digest(),
            "config": cfg.flat, "resolved": {"dataset": asdict(cfg.dataset), "model": asdict(cfg.model),
                                             "train": asdict(cfg.train), "extra": cfg.extra}, **extra}


def _train_config_for(cfg: RunConfig, ds: Dataset) -> RunConfig:
    # the auto loss weights follow the dataset's actual QA share
    keep = {k: ds.config[k] for k in ("qa_percent", "sup_percent") if k not in cfg.flat}
    return cfg.with_overrides(**keep)


def write_trace(path: Path, model: SoftVQAModel, ds: Dataset, samples, oracle_program=False,
                oracle_vision=False) -> int:
    """One JSON line per (sample, step): top-3 functions, pointer, and the slices read at the pointer."""
    from .parser import oracle_parser
    from .perception import oracle_perception
    batch = model.encode(ds, samples)
    with ad.no_grad():
        parsed = oracle_parser([q.program for q in samples], model.catalog,
                               model.config.t_steps) if oracle_program else None
        perc = oracle_perception(batch.scenes, model.schema, model.config.max_objects) if oracle_vision else None
        res = model.forward(batch, parsed, perc, trace=True)
    names = [s.name for s in model.catalog]
    n = 0
    with open(path, "w") as fh:
        for b, q in enumerate(samples):
            for rec in res.trace.steps:
                w, p, M = rec["w"][b], rec["p"][b], rec["memory"][b]
                top = np.argsort(-w, kind="stable")[:3]
                row = p @ M
                fh.write(json.dumps({
                    "sample": b, "question": q.text, "step": rec["step"],
                    "top3": [[names[j], round(float(w[j]), 6)] for j in top],
                    "pointer": [round(float(x), 6) for x in p],
                    "readout": {k: [round(float(x), 6) for x in row[a:z]]
                                for k, (a, z) in model.layout.slices.items()},
                }) + "\n")
                n += 1
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args, seed_key="data_seed")
    out = Path(args.out_dir)
    ds = build_dataset(cfg.dataset)
    ds.save(out)
    _write_json(out / "manifest.json", _manifest("generate", cfg, cfg.dataset.seed, ds.catalog,
                                                 data_digest=_tree_digest(out, DATA_FILES)))
    c = len(ds.train), len(ds.val), len(ds.qa_train), len(ds.sup_train)
    print(f"wrote {out}: {len(ds.scenes)} scenes, train {c[0]} (qa {c[2]}, sup {c[3]}), val {c[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.method not in TRAINABLE:
        raise UsageError(f"{args.method} is evaluation-only; train one of {', '.join(TRAINABLE)}")
    ds, digest = _load_dataset(args.data)
    cfg = _train_config_for(_config(args), ds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = SoftVQAModel(cfg.model, ds.schema, len(ds.vocab))
    _write_json(out / "manifest.json", _manifest("train", cfg, cfg.train.seed, model.catalog, method=args.method,
                                                 data=str(args.data), data_digest=digest,
                                                 model=model.manifest()))
    with open(out / "train.log", "w") as logf:
        def log(msg):
            print(msg, file=logf, flush=True)
        metrics = run_method(args.method, model, ds, cfg, log)
    model.save(out / "model.svqt")
    (out / "metrics.txt").write_text(metrics.to_text())
    _write_json(out / "metrics.json", metrics.to_json())
    if args.trace:
        k = cfg.extra["trace_samples"]
        write_trace(out / "trace.jsonl", model, ds, ds.val[:k], oracle_program=cfg.train.fixed_programs)
    print(f"{args.method}: final accuracy {metrics.final_accuracy:.4f} after {metrics.records[-1]['samples']} "
          f"samples -> {out}")
    return EXIT_OK


def _load_model(path, ds: Dataset) -> SoftVQAModel:
    p = Path(path)
    ckpt = p / "model.svqt" if p.is_dir() else p
    man_path = ckpt.parent / "manifest.json"
    if not ckpt.exists() or not man_path.exists():
        raise ContractError(f"{path}: need model.svqt with a manifest.json beside it")
    man = json.loads(man_path.read_text())
    if man.get("catalog_digest") != ds.catalog.digest():
        raise ContractError(f"catalog digest mismatch: checkpoint {man.get('catalog_digest')}, "
                            f"dataset {ds.catalog.digest()}")
    info = man.get("model", {})
    if info.get("vocab_size") != len(ds.vocab):
        raise ContractError(f"vocabulary size mismatch: checkpoint {info.get('vocab_size')}, "
                            f"dataset {len(ds.vocab)}")
    model = SoftVQAModel(ModelConfig(**info["model"]), ds.schema, len(ds.vocab))
    try:
        model.load(ckpt)
    except (KeyError, ad.ShapeError) as e:
        raise ContractError(f"{ckpt}: {e}") from None
    return model


def cmd_eval(args) -> int:
    ds, digest = _load_dataset(args.data)
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model = _load_model(args.checkpoint, ds)
    elif args.oracle_vision:
        model = SoftVQAModel(cfg.model, ds.schema, len(ds.vocab))  # perception unused
    else:
        raise UsageError("eval needs --checkpoint (or --oracle-vision)")
    if args.method == "soft-e2e":
        res = model.evaluate(ds, oracle_program=args.oracle_program, oracle_vision=args.oracle_vision)
    elif args.oracle_vision:
        def oracle(chunk):
            out_ = []
            for q in chunk:
                try:
                    out_.append(symbolic_execute(q.program, ds.scene_of(q).labels(), ds.catalog, strict=False))
                except ExecutionFault:
                    out_.append(None)
            return out_
        res = evaluate_predictions(ds.val, oracle)
    else:
        res = evaluate_predictions(ds.val, lambda chunk: predict_symbolic(model, ds, chunk))
    res.update(method=args.method, oracle_program=args.oracle_program, oracle_vision=args.oracle_vision)
    _write_json(out / "eval.json", res)
    _write_json(out / "manifest.json", _manifest("eval", cfg, cfg.train.seed, ds.catalog, method=args.method,
                                                 data=str(args.data), data_digest=digest,
                                                 checkpoint=args.checkpoint))
    if args.trace and args.method == "soft-e2e":
        write_trace(out / "trace.jsonl", model, ds, ds.val[:cfg.extra["trace_samples"]], args.oracle_program,
                    args.oracle_vision)
    print(f"{args.method}: accuracy {res['accuracy']:.4f} on {res['n']} validation questions")
    return EXIT_OK


def _grid(text: str) -> tuple:
    try:
        return tuple(float(x) if "." in x else int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad grid {text!r}; expected comma-separated numbers") from None


def cmd_sweep(args) -> int:
    flat = load_run_config(args.config, _overrides(args)).flat
    if args.seed is not None:
        flat.setdefault("data_seed", args.seed)
    spec = ExperimentSpec(tuple(m.strip() for m in args.method.split(",")), _grid(args.qa_grid),
                          _grid(args.sup_grid), args.seeds, args.budget, args.out_dir, flat, args.precision)
    result = run_sweep(spec, args.jobs, log=lambda m: print(m, flush=True))
    for key in result.failed:
        r = result.cells[key]
        print(f"failed cell {key}: {r['status']}: {r.get('error', '')}", file=sys.stderr)
    print(f"{len(result.cells)} runs -> {args.out_dir}")
    statuses = {result.cells[k]["status"] for k in result.failed}
    if "diverged" in statuses:
        return EXIT_DIVERGED
    return EXIT_DATA if statuses else EXIT_OK


def cmd_dump_catalog(args) -> int:
    cfg = _config(args)
    cat = FunctionCatalog.build(cfg.dataset.scene.schema)
    man = dict(cat.manifest(), digest=cat.digest())
    for f in man["functions"]:
        f["arity"] = f["pops"]  # stack operands consumed
    text = json.dumps(man, indent=2, sort_keys=True) + "\n"
    if args.out_dir != "run":
        _write_json(Path(args.out_dir) / "catalog.json", man)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "dump-catalog": cmd_dump_catalog}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        ad.set_precision(args.precision)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"softvqa: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ConfigError, CatalogError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"softvqa: data/contract error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"softvqa: numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        ad.set_precision("high")


if __name__ == "__main__":
    sys.exit(main())
