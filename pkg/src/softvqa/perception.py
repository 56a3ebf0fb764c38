"""Attribute and relation heads over simulated object features and boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, ParamStore
from .schema import AttributeSchema


@dataclass
class PerceptionOutput:
    attrs: dict  # family -> (B, A, K) row-stochastic over live objects, zero rows elsewhere
    relations: Tensor  # (B, A, A, R); zero on the diagonal and on absent objects


class PerceptionHeads:
    def __init__(self, store: ParamStore, schema: AttributeSchema, d_feat: int, rng: np.random.Generator,
                 hidden: int = 64, prefix: str = "vision"):
        self.schema = schema
        self.d_feat = d_feat
        self.prefix = prefix
        self.attr = {f: MLP(store, f"{prefix}.attr.{f}", d_feat, hidden, schema.cardinality(f), rng)
                     for f in schema.family_names}
        self.rel = MLP(store, f"{prefix}.rel", 8, hidden, len(schema.relations), rng)

    def predict_attributes(self, store: ParamStore, features: np.ndarray, live: np.ndarray) -> dict:
        B, A, d = features.shape
        if d != self.d_feat:
            raise ad.ShapeError("predict_attributes", features.shape, (B, A, self.d_feat))
        x = ad.constant(features)
        out = {}
        for f, mlp in self.attr.items():
            probs = ad.softmax(mlp(store, x), axis=-1)
            mask = np.broadcast_to(live[..., None], probs.shape).astype(float)
            out[f] = probs * ad.constant(mask)
        return out

    def predict_relations(self, store: ParamStore, locations: np.ndarray, live: np.ndarray) -> Tensor:
        """P[b, i, j, r] from the pairwise input concat(loc_i, loc_j).

        The first layer acting on the concatenation is evaluated as the sum of
        its two 4-column blocks, which is the same affine map.
        """
        B, A, _ = locations.shape
        hid = self.rel.hidden
        W = store[hid.w]
        H = W.shape[1]
        loc = ad.constant(locations)
        ref = ad.reshape(ad.reshape(loc, (B * A, 4)) @ W[:4], (B, A, 1, H))
        sub = ad.reshape(ad.reshape(loc, (B * A, 4)) @ W[4:], (B, 1, A, H))
        pre = (ad.broadcast_to(ref, (B, A, A, H)) + ad.broadcast_to(sub, (B, A, A, H))
               + ad.broadcast_to(store[hid.b], (B, A, A, H)))
        logits = self.rel.out(store, ad.tanh(pre))
        R = logits.shape[-1]
        mask = live[:, :, None] & live[:, None, :] & ~np.eye(A, dtype=bool)[None]
        return ad.sigmoid(logits) * ad.constant(np.broadcast_to(mask[..., None], (B, A, A, R)).astype(float))

    def __call__(self, store: ParamStore, features: np.ndarray, locations: np.ndarray,
                 live: np.ndarray) -> PerceptionOutput:
        return PerceptionOutput(self.predict_attributes(store, features, live),
                                self.predict_relations(store, locations, live))

    def params(self, store: ParamStore) -> list:
        return store.names(self.prefix + ".")


def oracle_perception(scenes, schema: AttributeSchema, max_objects: int) -> PerceptionOutput:
    """One-hot perception from ground-truth labels (padding rows zero)."""
    B, A = len(scenes), max_objects
    attrs = {f: np.zeros((B, A, schema.cardinality(f))) for f in schema.family_names}
    rel = np.zeros((B, A, A, len(schema.relations)))
    for b, s in enumerate(scenes):
        for k, o in enumerate(s.objects):
            for f in schema.family_names:
                attrs[f][b, k, o.attrs[f]] = 1.0
        rel[b, :s.n, :s.n] = s.relations
    return PerceptionOutput({f: ad.constant(v) for f, v in attrs.items()}, ad.constant(rel))
