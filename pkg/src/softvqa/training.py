"""Losses and the two-phase training loop of the soft end-to-end model.

Phase 1 warms the model up on the directly supervised samples alone.  Phase 2
trains on QA batches with the supervised samples mixed in at a fixed ratio,
minimising::

    L = L_xent + L_mse + L_type + alpha * L_obj + beta * L_fp
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Dataset, pad_program
from .memory import MemoryLayout
from .nn import Adam
from .parser import ParserOutput, oracle_parser
from .perception import PerceptionOutput
from .schema import BOOLEAN, COUNT

TABLE_WEIGHTS = {5.0: 3.0, 10.0: 6.0, 100.0: 10.0}


class DivergenceError(FloatingPointError):
    """A non-finite loss was produced during training."""


def resolve_weight(value, qa_percent: float) -> float:
    """``"auto"`` -> table value for 5/10/100 % QA data, sqrt(% QA) otherwise."""
    if value == "auto":
        if float(qa_percent) in TABLE_WEIGHTS:
            return TABLE_WEIGHTS[float(qa_percent)]
        return math.sqrt(qa_percent)
    v = float(value)
    if v < 0:
        raise ValueError("loss weights must be nonnegative")
    return v


@dataclass
class TrainConfig:
    qa_percent: float = 100.0
    sup_percent: float = 1.0
    alpha: object = "auto"
    beta: object = "auto"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    batch_size: int = 64
    sup_ratio: int = 7  # QA samples per supervised sample inside a joint batch
    warmup_iters: int = 200
    max_samples: int = 200_000
    eval_interval: int = 500  # iterations
    eval_samples: int | None = 1000
    seed: int = 0
    boolean_loss: str = "mse"  # or "bce"
    fixed_programs: bool = False  # execute ground-truth programs; the parser is not trained
    target_accuracy: float | None = None  # stop once validation accuracy reaches this

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.qa_percent <= 100 and 0 < self.sup_percent <= 100):
            raise ValueError("qa_percent and sup_percent must lie in (0, 100]")
        if self.boolean_loss not in ("mse", "bce"):
            raise ValueError("boolean_loss must be 'mse' or 'bce'")
        resolve_weight(self.alpha, self.qa_percent)
        resolve_weight(self.beta, self.qa_percent)

    @property
    def weights(self) -> tuple:
        return resolve_weight(self.alpha, self.qa_percent), resolve_weight(self.beta, self.qa_percent)


@dataclass
class RunMetrics:
    seed: int
    method: str = "soft-e2e"
    records: list = field(default_factory=list)  # dicts with samples, accuracy, losses
    alpha: float = 0.0
    beta: float = 0.0
    seconds: float = 0.0

    COLUMNS = ("samples", "accuracy", "loss", "qa_xent", "qa_mse", "type", "obj", "fp")

    def add(self, samples: int, accuracy: float, **losses) -> None:
        if self.records and samples < self.records[-1]["samples"]:
            raise ValueError("samples seen must be nondecreasing")
        rec = {"samples": int(samples), "accuracy": float(accuracy)}
        rec.update({k: float(v) for k, v in losses.items()})
        self.records.append(rec)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1]["accuracy"] if self.records else float("nan")

    @property
    def best_accuracy(self) -> float:
        return max((r["accuracy"] for r in self.records), default=float("nan"))

    def samples_to_reach(self, accuracy: float):
        for r in self.records:
            if r["accuracy"] >= accuracy:
                return r["samples"]
        return None

    def to_text(self) -> str:
        lines = [" ".join(self.COLUMNS)]
        for r in self.records:
            lines.append(" ".join(
                str(r["samples"]) if c == "samples" else f"{r.get(c, float('nan')):.6f}" for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def _xent_rows(probs: Tensor, target: np.ndarray, eps: float) -> Tensor:
    """Per-row -log p[target] of (already normalised) rows."""
    B = probs.shape[0]
    picked = probs[np.arange(B), target]
    return -ad.log(ad.clamp(picked, eps, None))


def qa_loss(row: Tensor, answers, layout: MemoryLayout, weights: np.ndarray | None = None,
            eps: float = 1e-6, boolean_loss: str = "mse") -> tuple:
    """(L_xent, L_mse) of final rows against answers, averaged over the batch.

    Categorical answers take the cross-entropy of the answer family's slice
    (clamped at ``eps`` and renormalised); counts and booleans take the
    squared error of ``num`` (booleans against 0/1, or the binary cross
    entropy with ``boolean_loss="bce"``).  ``weights`` masks samples out.
    """
    schema = layout.schema
    B = row.shape[0]
    wts = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
    N = max(float(wts.sum()), 1.0)
    xent, mse = ad.constant(0.0), ad.constant(0.0)
    spans = layout.slices
    for fam in schema.family_names:
        idx = [b for b, a in enumerate(answers) if a.type == fam and wts[b] > 0]
        if not idx:
            continue
        lo, hi = spans[fam]
        sl = ad.clamp(row[idx, lo:hi], eps, None)
        sl = sl / ad.broadcast_to(ad.reshape(ad.sum(sl, axis=-1), (len(idx), 1)), sl.shape)
        tgt = np.array([schema.value_index(fam, answers[b].value) for b in idx])
        per = _xent_rows(sl, tgt, eps)
        xent = xent + ad.sum(per * ad.constant(wts[idx])) / N
    num = row[:, -1]
    idx = [b for b, a in enumerate(answers) if a.type in (COUNT, BOOLEAN) and wts[b] > 0]
    if idx:
        pred = num[idx]
        tgt = np.array([float(answers[b].value) for b in idx])
        w = ad.constant(wts[idx])
        if boolean_loss == "bce":
            is_b = np.array([answers[b].type == BOOLEAN for b in idx])
            sq = ad.square(pred - ad.constant(tgt)) * ad.constant((~is_b).astype(float))
            pc = ad.clamp(pred, eps, 1.0 - eps)
            bce = -(ad.constant(tgt) * ad.log(pc) + ad.constant(1.0 - tgt) * ad.log(1.0 - pc))
            per = sq + bce * ad.constant(is_b.astype(float))
        else:
            per = ad.square(pred - ad.constant(tgt))
        mse = mse + ad.sum(per * w) / N
    return xent, mse


def type_loss(qtype: Tensor, answers, schema, weights: np.ndarray | None = None, eps: float = 1e-6) -> Tensor:
    B = qtype.shape[0]
    wts = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
    tgt = np.array([schema.question_types.index(a.type) for a in answers])
    return ad.sum(_xent_rows(qtype, tgt, eps) * ad.constant(wts)) / max(float(wts.sum()), 1.0)


def object_loss(perception: PerceptionOutput, scenes, rows, schema, eps: float = 1e-6) -> Tensor:
    """Mean attribute cross-entropy over (object, family) plus mean relation BCE
    over ordered pairs of distinct live objects, for batch rows ``rows``."""
    attr_terms, rel_terms = [], []
    for b in rows:
        s = scenes[b]
        n = s.n
        for f in schema.family_names:
            p = perception.attrs[f][b, :n]
            tgt = np.array([o.attrs[f] for o in s.objects])
            attr_terms.append(ad.sum(_xent_rows(p, tgt, eps)))
        if n > 1:
            off = ~np.eye(n, dtype=bool)
            P = perception.relations[b, :n, :n]
            y = s.relations.astype(float)
            pc = ad.clamp(P, eps, 1.0 - eps)
            bce = -(ad.constant(y) * ad.log(pc) + ad.constant(1.0 - y) * ad.log(1.0 - pc))
            mask = np.broadcast_to(off[..., None], y.shape).astype(float)
            rel_terms.append((ad.sum(bce * ad.constant(mask)), float(mask.sum())))
    n_attr = sum(scenes[b].n for b in rows) * len(schema.family_names)
    loss = ad.constant(0.0)
    if attr_terms:
        loss = loss + _total(attr_terms) / float(n_attr)
    if rel_terms:
        loss = loss + _total([t for t, _ in rel_terms]) / float(sum(c for _, c in rel_terms))
    return loss


def program_loss(parsed: ParserOutput, programs, rows, catalog, t_steps: int, eps: float = 1e-6) -> Tensor:
    """Mean cross-entropy of function attention over all (padded) steps plus
    mean cross-entropy of argument heads over steps that take an argument."""
    schema = catalog.schema
    rows = list(rows)
    fn_terms, arg_terms = [], []
    for i in range(t_steps):
        tgt_fn = []
        by_head = {}
        for r, b in enumerate(rows):
            name, arg = pad_program(programs[b], t_steps)[i]
            spec = catalog[name]
            tgt_fn.append(spec.id)
            if arg is not None:
                head = "relation" if spec.argument == "relation" else spec.family
                idx = schema.relations.index(arg) if head == "relation" else schema.value_index(head, arg)
                by_head.setdefault(head, []).append((b, idx))
        fn_terms.append(ad.sum(_xent_rows(parsed.w[i][rows], np.array(tgt_fn), eps)))
        for head, pairs in by_head.items():
            bs = [b for b, _ in pairs]
            arg_terms.append((ad.sum(_xent_rows(parsed.args[i][head][bs], np.array([k for _, k in pairs]), eps)),
                              len(pairs)))
    loss = _total(fn_terms) / float(t_steps * len(rows))
    if arg_terms:
        loss = loss + _total([t for t, _ in arg_terms]) / float(sum(c for _, c in arg_terms))
    return loss


def _total(terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# batch loss


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict

    def values(self) -> dict:
        return {k: float(v.data) for k, v in self.parts.items()}


def batch_loss(model, batch: Batch, qa_mask: np.ndarray, sup_mask: np.ndarray, alpha: float, beta: float,
               fixed_programs: bool = False, boolean_loss: str = "mse") -> LossBreakdown:
    """Total loss of a batch; QA terms over ``qa_mask`` rows, supervision over ``sup_mask`` rows."""
    cfg = model.config
    schema = model.schema
    answers = [q.answer for q in batch.samples]
    programs = [q.program for q in batch.samples]
    perception = model.perceive(batch)
    parsed = oracle_parser(programs, model.catalog, cfg.t_steps) if fixed_programs else model.parse(batch)
    zero = ad.constant(0.0)
    parts = {"qa_xent": zero, "qa_mse": zero, "type": zero, "obj": zero, "fp": zero}
    qa_rows = np.flatnonzero(qa_mask)
    sup_rows = np.flatnonzero(sup_mask)
    if qa_rows.size:
        res = model.forward(batch, parsed, perception)
        w = qa_mask.astype(float)
        parts["qa_xent"], parts["qa_mse"] = qa_loss(res.row, answers, model.layout, w, cfg.eps, boolean_loss)
        if not fixed_programs:
            parts["type"] = type_loss(parsed.qtype, answers, schema, w, cfg.eps)
    if sup_rows.size:
        parts["obj"] = object_loss(perception, batch.scenes, sup_rows, schema, cfg.eps)
        if not fixed_programs:
            parts["fp"] = program_loss(parsed, programs, sup_rows, model.catalog, cfg.t_steps, cfg.eps)
            # the question-type head is part of the parse
            parts["fp"] = parts["fp"] + type_loss(parsed.qtype[sup_rows], [answers[b] for b in sup_rows],
                                                  schema, None, cfg.eps)
    total = parts["qa_xent"] + parts["qa_mse"] + parts["type"] + alpha * parts["obj"] + beta * parts["fp"]
    return LossBreakdown(total, parts)


# ---------------------------------------------------------------------------
# training loop


class BatchSampler:
    """Seeded epoch shuffler over a sample list."""

    def __init__(self, items: list, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self._order, self._pos = [], 0

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self._pos >= len(self._order):
                self._order = list(self.rng.permutation(len(self.items)))
                self._pos = 0
            out.append(self.items[self._order[self._pos]])
            self._pos += 1
        return out


def _eval_subset(dataset: Dataset, n: int | None, seed: int) -> list:
    val = dataset.val
    if n is None or n >= len(val):
        return val
    rng = np.random.default_rng(10_000 + seed)
    return [val[i] for i in sorted(rng.choice(len(val), size=n, replace=False))]


def train(model, dataset: Dataset, config: TrainConfig, log=None) -> RunMetrics:
    """Two-phase training; returns metrics (the model is updated in place)."""
    t0 = time.time()
    rng = np.random.default_rng(config.seed)
    alpha, beta = config.weights
    metrics = RunMetrics(config.seed, "soft-e2e", alpha=alpha, beta=beta)
    names = model.vision.params(model.store) if config.fixed_programs else None
    opt = Adam(model.store, config.lr, config.beta1, config.beta2, config.adam_eps, config.clip_norm)
    qa = BatchSampler(dataset.qa_train, rng)
    sup_items = dataset.sup_train
    sup = BatchSampler(sup_items, rng) if sup_items else None
    eval_set = _eval_subset(dataset, config.eval_samples, config.seed)
    bs = config.batch_size
    n_sup = max(1, bs // (config.sup_ratio + 1)) if sup else 0
    samples, it = 0, 0
    last = {}

    def evaluate():
        acc = model.evaluate(dataset, eval_set, oracle_program=config.fixed_programs)["accuracy"]
        metrics.add(samples, acc, **last)
        if log:
            log(f"samples={samples} acc={acc:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in last.items()))
        return acc

    def step(items, qa_mask, sup_mask, a=alpha, b=beta):
        nonlocal last
        batch = model.encode(dataset, items)
        model.store.zero_grad()
        lb = batch_loss(model, batch, qa_mask, sup_mask, a, b, config.fixed_programs, config.boolean_loss)
        val = float(lb.total.data)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite loss {val} after {samples} samples")
        lb.total.backward()
        opt.step(names)
        last = dict(lb.values(), loss=val)

    # phase 1: supervised warm-up (unit weights; the QA terms are absent)
    if sup:
        for _ in range(config.warmup_iters):
            if samples >= config.max_samples:
                break
            items = sup.take(min(bs, len(sup_items)))
            k = len(items)
            step(items, np.zeros(k, dtype=bool), np.ones(k, dtype=bool), 1.0, 1.0)
            samples += k
    evaluate()
    # phase 2: joint training
    while samples < config.max_samples:
        items = qa.take(bs - n_sup) + (sup.take(n_sup) if n_sup else [])
        mask = np.arange(len(items)) < bs - n_sup
        step(items, mask, ~mask)
        samples += len(items)
        it += 1
        if it % config.eval_interval == 0 or samples >= config.max_samples:
            acc = evaluate()
            if config.target_accuracy is not None and acc >= config.target_accuracy:
                break
    metrics.seconds = time.time() - t0
    return metrics
