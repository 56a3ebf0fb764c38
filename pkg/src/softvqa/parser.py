"""Question encoder and per-step soft program emitter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .catalog import FunctionCatalog
from .nn import LSTM, MLP, Linear, ParamStore, bidirectional


@dataclass
class Encoding:
    h: Tensor  # (B, S, 2 d_h)
    q_ave: Tensor  # (B, d_emb)
    h_final: Tensor  # (B, 2 d_h)
    mask: np.ndarray  # bool (B, S)


@dataclass
class ParserOutput:
    w: list  # per step: (B, |F|)
    args: list  # per step: {family: (B, K), "relation": (B, R)}
    qtype: Tensor  # (B, |families| + 2)
    contexts: list = field(default_factory=list)  # per step: (B, 2 d_h); c_prev of the following step

    @property
    def steps(self) -> int:
        return len(self.w)


class QuestionParser:
    def __init__(self, store: ParamStore, catalog: FunctionCatalog, vocab_size: int, t_steps: int,
                 rng: np.random.Generator, d_emb: int = 64, d_h: int = 64, hidden: int = 64,
                 prefix: str = "text"):
        self.catalog = catalog
        schema = catalog.schema
        self.t_steps, self.d_emb, self.d_h = t_steps, d_emb, d_h
        self.prefix = prefix
        d_u = 2 * d_h
        self.emb = f"{prefix}.embedding"
        store.add(self.emb, rng.normal(0.0, 0.1, size=(vocab_size, d_emb)))
        self.fwd = LSTM(store, f"{prefix}.lstm.fwd", d_emb, d_h, rng)
        self.bwd = LSTM(store, f"{prefix}.lstm.bwd", d_emb, d_h, rng)
        self.w1 = [Linear(store, f"{prefix}.w1.{i}", d_emb, d_u, rng, bias=False) for i in range(t_steps)]
        self.b1 = f"{prefix}.b1"
        store.add(self.b1, np.zeros(d_u))
        self.w2 = Linear(store, f"{prefix}.w2", 2 * d_u, d_u, rng)
        self.w3 = Linear(store, f"{prefix}.w3", d_u, 1, rng, bias=False)
        self.weight = MLP(store, f"{prefix}.weight", d_u, hidden, len(catalog), rng)
        self.arg = {f: MLP(store, f"{prefix}.arg.{f}", d_u, hidden, schema.cardinality(f), rng)
                    for f in schema.family_names}
        self.arg["relation"] = MLP(store, f"{prefix}.arg.relation", d_u, hidden, len(schema.relations), rng)
        self.qtype = MLP(store, f"{prefix}.qtype", d_u, hidden, len(schema.question_types), rng)
        self.d_u = d_u

    def params(self, store: ParamStore) -> list:
        return store.names(self.prefix + ".")

    # -- encoder ---------------------------------------------------------------

    def encode(self, store: ParamStore, tokens: np.ndarray, mask: np.ndarray) -> Encoding:
        B, S = tokens.shape
        lengths = mask.sum(axis=1)
        if S == 0 or np.any(lengths == 0):
            raise ValueError("encode: empty token sequence")
        e = ad.embedding(store[self.emb], tokens)  # (B, S, d_emb)
        m = mask.astype(float)
        e_masked = e * ad.constant(np.broadcast_to(m[..., None], e.shape))
        q_ave = ad.sum(e_masked, axis=1) / ad.constant(np.broadcast_to(lengths[:, None], (B, self.d_emb)).astype(float))

        # backward direction: run over each sequence reversed within its own length
        pos = np.arange(S)[None, :]
        rev = np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
        rows = np.arange(B)[:, None]
        hf, hb_rev = bidirectional(store, self.fwd, self.bwd, store[self.emb], tokens, tokens[rows, rev])
        hb = hb_rev[rows, rev]  # back to original positions
        h = ad.concat([hf, hb], axis=-1)
        last = lengths - 1
        h_final = ad.concat([hf[np.arange(B), last], hb[np.arange(B), np.zeros(B, dtype=int)]], axis=-1)
        return Encoding(h, q_ave, h_final, mask)

    # -- per-step emitter ---------------------------------------------------------

    def step(self, store: ParamStore, enc: Encoding, i: int, c_prev: Tensor) -> tuple:
        """One emitter step (``i`` counts from 0); returns (w, args, c_i)."""
        a = self.w1[i](store, enc.q_ave)
        u, c = self._attend(store, enc, a, c_prev)
        w = ad.softmax(self.weight(store, u), axis=-1)
        args = {k: ad.softmax(mlp(store, c), axis=-1) for k, mlp in self.arg.items()}
        return w, args, c

    def _attend(self, store: ParamStore, enc: Encoding, a: Tensor, c_prev: Tensor) -> tuple:
        B, S, H = enc.h.shape
        if H != self.d_u:
            raise ValueError(f"context width {H} differs from u width {self.d_u}")
        a = a + ad.broadcast_to(store[self.b1], (B, self.d_u))
        u = self.w2(store, ad.concat([a, c_prev], axis=-1))
        # W3 (u * h_s) for every word at once: h_s . (u * w3)
        uw = u * ad.broadcast_to(ad.reshape(store[self.w3.w], (1, H)), (B, H))
        cv = ad.sigmoid(ad.reshape(enc.h @ ad.reshape(uw, (B, H, 1)), (B, S)))
        cv = cv * ad.constant(enc.mask.astype(float))
        c = ad.reshape(ad.reshape(cv, (B, 1, S)) @ enc.h, (B, H))
        return u, c

    def __call__(self, store: ParamStore, tokens: np.ndarray, mask: np.ndarray) -> ParserOutput:
        """Run all steps.  Same values as chaining :meth:`step`, but the heads that
        do not feed back into the recurrence are evaluated once on all steps."""
        enc = self.encode(store, tokens, mask)
        B, T, H = tokens.shape[0], self.t_steps, self.d_u
        w1 = ad.concat([store[l.w] for l in self.w1], axis=1)  # (d_emb, T * d_u)
        a_all = enc.q_ave @ w1
        c = ad.constant(np.zeros((B, H)))
        us, cs = [], []
        for i in range(T):
            u, c = self._attend(store, enc, a_all[:, i * H:(i + 1) * H], c)
            us.append(u)
            cs.append(c)
        U = ad.concat(us, axis=0)  # (T * B, d_u), step-major
        C = ad.concat(cs, axis=0)
        W = ad.softmax(self.weight(store, U), axis=-1)
        heads = {k: ad.softmax(mlp(store, C), axis=-1) for k, mlp in self.arg.items()}
        ws = [W[i * B:(i + 1) * B] for i in range(T)]
        args = [{k: v[i * B:(i + 1) * B] for k, v in heads.items()} for i in range(T)]
        qtype = ad.softmax(self.qtype(store, enc.h_final), axis=-1)
        return ParserOutput(ws, args, qtype, cs)


def answer_type_of(program, catalog: FunctionCatalog) -> str:
    """Question type implied by a program's final function."""
    spec = catalog[program[-1][0]]
    if spec.writes.startswith("attr:"):
        return spec.family
    return "count" if spec.kind == "count" else "boolean"


def oracle_parser(programs, catalog: FunctionCatalog, t_steps: int) -> ParserOutput:
    """One-hot function attention and arguments for ground-truth programs.

    Programs are front-padded to ``t_steps``; heads a step does not use carry
    a uniform distribution.
    """
    from .data import pad_program

    schema = catalog.schema
    B, F = len(programs), len(catalog)
    sizes = {f: schema.cardinality(f) for f in schema.family_names}
    sizes["relation"] = len(schema.relations)
    ws = [np.zeros((B, F)) for _ in range(t_steps)]
    args = [{k: np.full((B, n), 1.0 / n) for k, n in sizes.items()} for _ in range(t_steps)]
    qt = np.zeros((B, len(schema.question_types)))
    for b, prog in enumerate(programs):
        for i, (name, arg) in enumerate(pad_program(prog, t_steps)):
            spec = catalog[name]
            ws[i][b, spec.id] = 1.0
            if arg is not None:
                if spec.argument == "relation":
                    head, idx = "relation", schema.relations.index(arg)
                else:
                    head, idx = spec.family, schema.value_index(spec.family, arg)
                args[i][head][b] = 0.0
                args[i][head][b, idx] = 1.0
        qt[b, schema.question_types.index(answer_type_of(prog, catalog))] = 1.0
    return ParserOutput([ad.constant(w) for w in ws],
                        [{k: ad.constant(v) for k, v in a.items()} for a in args],
                        ad.constant(qt))
