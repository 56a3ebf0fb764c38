"""Shared builders for the gradient-check and abduction tests."""

import numpy as np

from softvqa import autodiff as ad
from softvqa import functions as F
from softvqa.functions import SoftParams

SP = SoftParams()

# criterion id -> one-line verdict, printed in the terminal summary
ACCEPTANCE = {}


def record(cid: str, ok: bool, detail: str) -> None:
    line = f"{cid} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[cid] = line
    print(line)


def smooth_function_cases(rng, B=2, A=4, K=3, R=2) -> dict:
    """Kind name -> builder; each call of a builder draws a fresh smooth random
    point and returns ``(f, tensors)`` for :func:`softvqa.autodiff.gradient_check`.

    Points keep min/max arguments apart so no check straddles a kink.
    """
    live = np.ones((B, A))
    weights = ad.constant(np.arange(1, B * A + 1, dtype=float).reshape(B, A) / (B * A))

    def u(*shape, lo=0.05, hi=0.95):
        return ad.tensor(rng.uniform(lo, hi, size=shape))

    def dist(*shape):
        return ad.tensor(rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]))

    def separated_pair():
        a = rng.uniform(0.05, 0.95, size=(B, A))
        b = np.clip(a + rng.uniform(0.1, 0.4, size=(B, A)) * rng.choice([-1, 1], size=(B, A)), 0.0, 1.0)
        return ad.tensor(a), ad.tensor(b)

    def unique():
        d = u(B, A)
        return lambda: ad.sum(F.unique(d, live, SP) * weights), [d]

    def intersect():
        a, b = separated_pair()
        return lambda: ad.sum(F.intersect(a, b) * weights), [a, b]

    def union():
        a, b = separated_pair()
        return lambda: ad.sum(F.union(a, b) * weights), [a, b]

    def count():
        d = u(B, A)
        return lambda: ad.sum(ad.square(F.count(d))), [d]

    def exist():
        d = rng.uniform(0.05, 0.6, size=(B, A))
        d[np.arange(B), rng.integers(0, A, size=B)] = rng.uniform(0.75, 0.95, size=B)
        d = ad.tensor(d)
        return lambda: ad.sum(ad.square(F.exist(d))), [d]

    def cmp(fn):
        def build():
            a = ad.tensor(rng.uniform(0, 4, size=B))
            b = ad.tensor(a.data + rng.uniform(0.3, 1.5, size=B) * rng.choice([-1, 1], size=B))
            return lambda: ad.sum(fn(a, b, SP)), [a, b]
        return build

    def relate():
        d, P, a = u(B, A), u(B, A, A, R), dist(B, R)
        return lambda: ad.sum(ad.square(F.relate(d, P, a, SP))), [d, P, a]

    def filt():
        # attention above every P . p_arg value, so the min always binds the second operand
        d, P, a = u(B, A, lo=0.7, hi=0.95), dist(B, A, K), dist(B, K)
        P.data = P.data * 0.6
        return lambda: ad.sum(ad.square(F.filter_attr(d, P, a))), [d, P, a]

    def query():
        d, P = u(B, A), dist(B, A, K)
        a = ad.tensor(np.full((B, K), 10.0))  # p_arg above P^T det: the min binds the second operand
        w = ad.constant(np.arange(1, B * K + 1, dtype=float).reshape(B, K))
        return lambda: ad.sum(F.query_attr(d, P, a, SP) * w), [d, P]

    def same():
        d, P = u(B, A), dist(B, A, K)
        return lambda: ad.sum(ad.square(F.same_attr(d, P, SP))), [d, P]

    def equal_attr():
        m1, m2 = dist(B, K), dist(B, K)
        return lambda: ad.sum(ad.square(F.equal_attr(m1, m2))), [m1, m2]

    def scene():
        d = u(B, A)
        return lambda: ad.sum(F.scene(live) * d), [d]

    return {
        "scene": scene, "unique": unique, "intersect": intersect, "union": union,
        "count": count, "exist": exist,
        "equal_integer": cmp(F.equal_integer), "greater_than": cmp(F.greater_than), "less_than": cmp(F.less_than),
        "relate": relate, "filter": filt, "query": query, "same": same, "equal_attr": equal_attr,
    }


def corrupted_instances(rng, count: int, catalog):
    """Questions whose argmax scene labels carry exactly one wrong label.

    Returns a list of ``(program, answer, truth, dist)``.  ``truth`` are the
    generator labels; ``dist`` is a :class:`LabelDistribution` whose argmax
    equals the truth except one attribute or relation bit, chosen so that the
    corrupted labels answer the question wrongly.  Probabilities are random
    but keep each argmax strictly on top.
    """
    from softvqa.baselines import LabelDistribution, _reward
    from softvqa.scene import TEMPLATE_FAMILIES, Resample, SceneConfig, generate_question, generate_scene

    schema = catalog.schema
    cfg = SceneConfig()
    out = []
    sid = 0
    while len(out) < count:
        scene = generate_scene(cfg, rng, sid)
        sid += 1
        tpl = TEMPLATE_FAMILIES[int(rng.integers(len(TEMPLATE_FAMILIES)))]
        try:
            q = generate_question(scene, tpl, rng, catalog)
        except Resample:
            continue
        truth = scene.labels()
        bad = truth.copy()
        n = truth.n
        if rng.random() < 0.75:
            f = schema.family_names[int(rng.integers(len(schema.family_names)))]
            i = int(rng.integers(n))
            choices = [v for v in range(schema.cardinality(f)) if v != truth.attrs[f][i]]
            bad.attrs[f][i] = int(rng.choice(choices))
        else:
            r = int(rng.integers(len(schema.relations)))
            i, j = rng.choice(n, size=2, replace=False)
            bad.relations[i, j, r] = not bad.relations[i, j, r]
        if _reward(q.program, bad, q.answer, catalog, strict=True) == 1.0:
            continue
        attrs = {}
        for f in schema.family_names:
            K = schema.cardinality(f)
            p = rng.dirichlet(np.ones(K), size=n) * 0.5
            p[np.arange(n), bad.attrs[f]] += 0.5 + 1e-3
            attrs[f] = p / p.sum(axis=1, keepdims=True)
        conf = rng.uniform(0.55, 0.99, size=bad.relations.shape)
        rel = np.where(bad.relations, conf, 1.0 - conf)
        rel[np.arange(n), np.arange(n)] = 0.0
        out.append((q.program, q.answer, truth, LabelDistribution(attrs, rel)))
    return out
