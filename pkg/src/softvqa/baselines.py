"""Discrete baselines: REINFORCE and abduction training of the perception heads.

Both keep the program fixed (the ground-truth program of each question) and
treat the perception heads as distributions over discrete scene labels.
They share the model, dataset and metrics types of the soft trainer so the
three methods can be compared sample for sample.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import SoftVQAModel, evaluate_predictions
from .nn import Adam
from .schema import AttributeSchema
from .symbolic import ExecutionFault, SceneLabels, symbolic_execute
from .training import BatchSampler, DivergenceError, RunMetrics, TrainConfig, _eval_subset


# ---------------------------------------------------------------------------
# discrete views of the perception output


@dataclass
class LabelDistribution:
    """Per-scene perception probabilities restricted to the live objects."""

    attrs: dict  # family -> (n, K)
    relations: np.ndarray  # (n, n, R)

    @property
    def n(self) -> int:
        return self.relations.shape[0]

    def argmax(self, rng: np.random.Generator | None = None) -> SceneLabels:
        """Most likely labels; exact ties are broken uniformly at random when ``rng`` is given
        (an untrained zero-initialised head would otherwise label everything with value 0)."""
        attrs = {}
        for f, p in self.attrs.items():
            if rng is None:
                attrs[f] = np.argmax(p, axis=1)
            else:
                top = p >= p.max(axis=1, keepdims=True)
                attrs[f] = np.argmax(top * rng.random(p.shape), axis=1)
        rel = self.relations > 0.5
        if rng is not None:
            rel |= (self.relations == 0.5) & (rng.random(rel.shape) < 0.5)
        n = self.n
        rel[np.arange(n), np.arange(n)] = False
        return SceneLabels(attrs, rel)

    def sample(self, rng: np.random.Generator) -> SceneLabels:
        attrs = {}
        for f, p in self.attrs.items():
            cum = np.cumsum(p, axis=1)
            u = rng.random((p.shape[0], 1)) * cum[:, -1:]
            attrs[f] = np.minimum((u > cum).sum(axis=1), p.shape[1] - 1)
        rel = rng.random(self.relations.shape) < self.relations
        n = self.n
        rel[np.arange(n), np.arange(n)] = False
        return SceneLabels(attrs, rel)


def label_distributions(perception, scenes) -> list:
    out = []
    for b, s in enumerate(scenes):
        n = s.n
        out.append(LabelDistribution({f: v.data[b, :n].astype(float) for f, v in perception.attrs.items()},
                                     perception.relations.data[b, :n, :n].astype(float)))
    return out


def predict_symbolic(model: SoftVQAModel, dataset: Dataset, samples) -> list:
    """Answers from executing ground-truth programs on argmax perception (non-strict)."""
    batch = model.encode(dataset, samples)
    with ad.no_grad():
        dists = label_distributions(model.perceive(batch), batch.scenes)
    out = []
    for q, d in zip(samples, dists):
        try:
            out.append(symbolic_execute(q.program, d.argmax(), dataset.catalog, strict=False))
        except ExecutionFault:
            out.append(None)
    return out


def _answers_equal(a, b) -> bool:
    return a is not None and a.type == b.type and a.value == b.value


def _reward(program, labels, answer, catalog, strict: bool = False) -> float:
    try:
        return float(_answers_equal(symbolic_execute(program, labels, catalog, strict), answer))
    except ExecutionFault:
        return 0.0


# ---------------------------------------------------------------------------
# REINFORCE


@dataclass
class ReinforceState:
    baseline: float = 0.0
    decay: float = 0.99


def log_prob(perception, b: int, n: int, labels: SceneLabels, schema: AttributeSchema, eps: float):
    """log pi(labels) for batch row ``b`` as a differentiable scalar."""
    terms = []
    rows = np.arange(n)
    for f in schema.family_names:
        p = perception.attrs[f][b, :n]
        terms.append(ad.sum(ad.log(ad.clamp(p[rows, labels.attrs[f]], eps, None))))
    if n > 1:
        P = ad.clamp(perception.relations[b, :n, :n], eps, 1.0 - eps)
        y = labels.relations.astype(float)
        off = np.broadcast_to((~np.eye(n, dtype=bool))[..., None], y.shape).astype(float)
        ll = ad.constant(y) * ad.log(P) + ad.constant(1.0 - y) * ad.log(1.0 - P)
        terms.append(ad.sum(ll * ad.constant(off)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def reinforce_step(model: SoftVQAModel, dataset: Dataset, samples, state: ReinforceState,
                   rng: np.random.Generator):
    """Surrogate loss -(1/B) sum (R - b) log pi(sampled labels); also returns the mean reward.

    The baseline is the reward EMA before this batch; it is updated afterwards.
    """
    batch = model.encode(dataset, samples)
    perception = model.perceive(batch)
    dists = label_distributions(perception, batch.scenes)
    rewards, terms = [], []
    for b, (q, d) in enumerate(zip(samples, dists)):
        lab = d.sample(rng)
        R = _reward(q.program, lab, q.answer, dataset.catalog)
        rewards.append(R)
        adv = R - state.baseline
        if adv != 0.0:
            terms.append(adv * log_prob(perception, b, d.n, lab, model.schema, model.config.eps))
    loss = ad.constant(0.0)
    for t in terms:
        loss = loss - t
    loss = loss / float(len(samples))
    mean_r = float(np.mean(rewards))
    for R in rewards:
        state.baseline = state.decay * state.baseline + (1.0 - state.decay) * R
    return loss, mean_r


# ---------------------------------------------------------------------------
# abduction


@dataclass(frozen=True)
class Correction:
    step: int
    obj: int  # object index (reference object for relation flips)
    family: str  # attribute family, or "relation:<name>"
    new_label: int  # new value index, or 0/1 for a relation bit (with ``target`` the subject)
    cost: float
    target: int = -1  # subject object of a relation flip


def apply_corrections(labels: SceneLabels, corrections, schema: AttributeSchema) -> SceneLabels:
    out = labels.copy()
    for c in corrections:
        if c.family.startswith("relation:"):
            r = schema.relations.index(c.family.split(":", 1)[1])
            out.relations[c.obj, c.target, r] = bool(c.new_label)
        else:
            out.attrs[c.family][c.obj] = c.new_label
    return out


def _step_candidates(t: int, name: str, arg, inputs, dist: LabelDistribution, labels: SceneLabels,
                     catalog, eps: float) -> list:
    """Single-label flips that can change the output of step ``t``."""
    spec = catalog[name]
    schema = catalog.schema
    n = dist.n
    out = []
    if spec.kind in ("filter", "query", "same"):
        fam = spec.family
        if spec.kind == "same":
            objs = range(n)
        else:
            objs = sorted(inputs) if inputs is not None else range(n)
        p = dist.attrs[fam]
        for i in objs:
            for v in range(schema.cardinality(fam)):
                if v != labels.attrs[fam][i]:
                    out.append(Correction(t, int(i), fam, v, float(-np.log(max(p[i, v], eps)))))
    elif spec.kind == "relate":
        r = schema.relations.index(arg)
        refs = sorted(inputs) if inputs is not None else range(n)
        for i in refs:
            for j in range(n):
                if i == j:
                    continue
                new = not labels.relations[i, j, r]
                pr = dist.relations[i, j, r]
                out.append(Correction(t, int(i), f"relation:{arg}", int(new),
                                      float(-np.log(max(pr if new else 1.0 - pr, eps))), target=int(j)))
    return out


def _step_inputs(program, labels: SceneLabels, catalog) -> list:
    """Object set consumed by every step under ``labels`` (None where unknown)."""
    from .symbolic import execute_steps

    out = []
    for t in range(len(program)):
        try:
            st = execute_steps(program[:t], labels, catalog, strict=False)
            top = st.stack[-1] if st.stack else None
            out.append(top[1] if top is not None and top[0] == "set" else None)
        except ExecutionFault:
            out.append(None)
    return out


def abduce(program, answer, dist: LabelDistribution, catalog, rng: np.random.Generator,
           budget: int = 32, eps: float = 1e-6):
    """Most likely correction of the argmax labels that yields ``answer``.

    Returns ``(labels, corrections, tier)`` with tier ``"none"`` (already
    correct), ``"greedy"`` (a single flip) or ``"sampled"``; or ``None`` when
    the fallback budget is exhausted.
    """
    labels = dist.argmax(rng)
    if _reward(program, labels, answer, catalog, strict=True) == 1.0:
        return labels, [], "none"
    inputs = _step_inputs(program, labels, catalog)
    for t, (name, arg) in enumerate(program):
        cands = _step_candidates(t, name, arg, inputs[t], dist, labels, catalog, eps)
        cands.sort(key=lambda c: (c.cost, c.obj, c.target, c.new_label))
        for c in cands:
            fixed = apply_corrections(labels, [c], catalog.schema)
            if _reward(program, fixed, answer, catalog, strict=True) == 1.0:
                return fixed, [c], "greedy"
    for _ in range(budget):
        lab = dist.sample(rng)
        if _reward(program, lab, answer, catalog, strict=True) == 1.0:
            return lab, [], "sampled"
    return None


def single_flip_fixes(program, answer, labels: SceneLabels, catalog) -> list:
    """Exhaustive enumeration of every single attribute or relation flip that makes
    strict execution correct, as (family, object, new label[, subject]) tuples."""
    schema = catalog.schema
    n = labels.n
    out = []
    for f in schema.family_names:
        for i in range(n):
            for v in range(schema.cardinality(f)):
                if v == labels.attrs[f][i]:
                    continue
                lab = labels.copy()
                lab.attrs[f][i] = v
                if _reward(program, lab, answer, catalog, strict=True) == 1.0:
                    out.append((f, i, v))
    for r, name in enumerate(schema.relations):
        for i, j in itertools.permutations(range(n), 2):
            lab = labels.copy()
            lab.relations[i, j, r] = not lab.relations[i, j, r]
            if _reward(program, lab, answer, catalog, strict=True) == 1.0:
                out.append((f"relation:{name}", i, int(lab.relations[i, j, r]), j))
    return out


def program_families(program, catalog) -> tuple:
    fams, rels = set(), set()
    for name, arg in program:
        spec = catalog[name]
        if spec.kind == "relate":
            rels.add(arg)
        elif spec.family is not None and spec.kind != "equal":
            fams.add(spec.family)
    return fams, rels


def pseudo_label_loss(perception, b: int, n: int, labels: SceneLabels, program, catalog, eps: float):
    """Cross-entropy toward abduced labels on the families and relations the program reads."""
    fams, rels = program_families(program, catalog)
    schema = catalog.schema
    rows = np.arange(n)
    terms, count = [], 0
    for f in sorted(fams):
        p = perception.attrs[f][b, :n]
        terms.append(-ad.sum(ad.log(ad.clamp(p[rows, labels.attrs[f]], eps, None))))
        count += n
    for name in sorted(rels):
        if n < 2:
            continue
        r = schema.relations.index(name)
        P = ad.clamp(perception.relations[b, :n, :n, r], eps, 1.0 - eps)
        y = labels.relations[:, :, r].astype(float)
        off = (~np.eye(n, dtype=bool)).astype(float)
        ll = ad.constant(y) * ad.log(P) + ad.constant(1.0 - y) * ad.log(1.0 - P)
        terms.append(-ad.sum(ll * ad.constant(off)))
        count += n * (n - 1)
    if not terms:
        return None, 0
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out, count


# ---------------------------------------------------------------------------
# trainers


def _symbolic_eval(model, dataset, eval_set):
    return evaluate_predictions(eval_set, lambda chunk: predict_symbolic(model, dataset, chunk))["accuracy"]


def _discrete_train(model: SoftVQAModel, dataset: Dataset, config: TrainConfig, method: str, step_fn,
                    log=None) -> RunMetrics:
    t0 = time.time()
    rng = np.random.default_rng(config.seed)
    metrics = RunMetrics(config.seed, method)
    names = model.vision.params(model.store)
    opt = Adam(model.store, config.lr, config.beta1, config.beta2, config.adam_eps, config.clip_norm)
    qa = BatchSampler(dataset.qa_train, rng)
    eval_set = _eval_subset(dataset, config.eval_samples, config.seed)
    samples, it = 0, 0
    last = {}

    def evaluate():
        acc = _symbolic_eval(model, dataset, eval_set)
        metrics.add(samples, acc, **last)
        if log:
            log(f"[{method}] samples={samples} acc={acc:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in last.items()))
        return acc

    evaluate()
    while samples < config.max_samples:
        items = qa.take(config.batch_size)
        model.store.zero_grad()
        loss, info = step_fn(items, rng)
        val = float(loss.data)
        if not np.isfinite(val):
            raise DivergenceError(f"{method}: non-finite loss after {samples} samples")
        if loss.requires_grad:
            loss.backward()
            opt.step(names)
        last = dict(info, loss=val)
        samples += len(items)
        it += 1
        if it % config.eval_interval == 0 or samples >= config.max_samples:
            acc = evaluate()
            if config.target_accuracy is not None and acc >= config.target_accuracy:
                break
    metrics.seconds = time.time() - t0
    return metrics


def train_reinforce(model: SoftVQAModel, dataset: Dataset, config: TrainConfig, decay: float = 0.99,
                    log=None) -> RunMetrics:
    state = ReinforceState(0.0, decay)

    def step(items, rng):
        loss, r = reinforce_step(model, dataset, items, state, rng)
        return loss, {"reward": r, "baseline": state.baseline}

    return _discrete_train(model, dataset, config, "reinforce", step, log)


def correction_loss(perception, b: int, corrections, schema: AttributeSchema, eps: float):
    """Cross-entropy toward the flipped labels only."""
    terms = []
    for c in corrections:
        if c.family.startswith("relation:"):
            r = schema.relations.index(c.family.split(":", 1)[1])
            P = ad.clamp(perception.relations[b, c.obj, c.target, r], eps, 1.0 - eps)
            terms.append(-ad.log(P if c.new_label else 1.0 - P))
        else:
            terms.append(-ad.log(ad.clamp(perception.attrs[c.family][b, c.obj, c.new_label], eps, None)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out, len(terms)


def abduction_step(model: SoftVQAModel, dataset: Dataset, samples, rng: np.random.Generator, budget: int = 32,
                   targets: str = "corrections"):
    batch = model.encode(dataset, samples)
    perception = model.perceive(batch)
    dists = label_distributions(perception, batch.scenes)
    eps = model.config.eps
    terms, count = [], 0
    tiers = {"none": 0, "greedy": 0, "sampled": 0, "failed": 0}
    for b, (q, d) in enumerate(zip(samples, dists)):
        res = abduce(q.program, q.answer, d, dataset.catalog, rng, budget, eps)
        if res is None:
            tiers["failed"] += 1
            continue
        labels, corr, tier = res
        tiers[tier] += 1
        if targets == "corrections" and tier == "none":
            continue
        if targets == "corrections" and tier == "greedy":
            t, c = correction_loss(perception, b, corr, model.schema, eps)
        else:
            t, c = pseudo_label_loss(perception, b, d.n, labels, q.program, dataset.catalog, eps)
        if t is not None:
            terms.append(t)
            count += c
    loss = ad.constant(0.0)
    for t in terms:
        loss = loss + t
    if count:
        loss = loss / float(count)
    k = float(len(samples))
    return loss, {f"frac_{n}": v / k for n, v in tiers.items()}


def train_abduction(model: SoftVQAModel, dataset: Dataset, config: TrainConfig, budget: int = 32,
                    targets: str = "corrections", log=None) -> RunMetrics:
    def step(items, rng):
        return abduction_step(model, dataset, items, rng, budget, targets)

    return _discrete_train(model, dataset, config, "abduction", step, log)
