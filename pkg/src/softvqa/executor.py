"""VQR cells: expected execution of the whole catalog, fused by function attention.

Every function j runs on its own copy of the memory and returns
``(M_j, p_j)``; the cell then fuses::

    M_ave = sum_j w_j M_j
    p'    = softmax(sum_j w_j p_j / temperature)
    M'    = M * (1 - p') + M_ave * p'          (row-wise)

All functions with the same pop count move the pointer identically, and
``M_j = M * (1 - p_j) + p_j (x) row_j``, so the fusion is computed per arity
group without materialising one memory copy per function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import functions as fn
from .autodiff import Tensor
from .catalog import FunctionCatalog
from .functions import SoftParams
from .memory import DOWN, UP, MemoryLayout, _outer, _rowwise, init_memory, read
from .parser import ParserOutput
from .perception import PerceptionOutput
from .schema import BOOLEAN, COUNT
from .symbolic import Answer


@dataclass
class StepInputs:
    w: Tensor  # (B, |F|)
    args: dict  # head name -> (B, K)
    perception: PerceptionOutput
    live: np.ndarray  # bool (B, A)


@dataclass
class ExecutionTrace:
    steps: list = field(default_factory=list)  # dicts: w, p, optional rows and memory

    def __len__(self) -> int:
        return len(self.steps)


def _pointer_groups(p: Tensor) -> dict:
    """Pointer after each arity's pop(s) and the final push."""
    down1 = ad.conv1d(p, DOWN)
    return {0: ad.conv1d(p, UP),
            1: ad.conv1d(down1, UP),
            2: ad.conv1d(ad.conv1d(down1, DOWN), UP)}


def function_rows(catalog: FunctionCatalog, layout: MemoryLayout, top: Tensor, second: Tensor,
                  inputs: StepInputs, sp: SoftParams) -> dict:
    """The slice written by every catalog function: id -> (slice name, value)."""
    A = layout.max_objects
    span = layout.slices
    det1, det2 = top[:, :A], second[:, :A]
    num1, num2 = top[:, -1], second[:, -1]
    P = inputs.perception
    out = {}
    for s in catalog:
        k, fam = s.kind, s.family
        if k == "scene":
            v = fn.scene(inputs.live)
        elif k == "unique":
            v = fn.unique(det1, inputs.live, sp)
        elif k == "count":
            v = fn.count(det1)
        elif k == "exist":
            v = fn.exist(det1)
        elif k == "intersect":
            v = fn.intersect(det2, det1)
        elif k == "union":
            v = fn.union(det2, det1)
        elif k == "equal_integer":
            v = fn.equal_integer(num2, num1, sp)
        elif k == "greater_than":
            v = fn.greater_than(num2, num1, sp)
        elif k == "less_than":
            v = fn.less_than(num2, num1, sp)
        elif k == "relate":
            v = fn.relate(det1, P.relations, inputs.args["relation"], sp)
        elif k == "filter":
            v = fn.filter_attr(det1, P.attrs[fam], inputs.args[fam])
        elif k == "query":
            v = fn.query_attr(det1, P.attrs[fam], inputs.args[fam], sp)
        elif k == "same":
            v = fn.same_attr(det1, P.attrs[fam], sp)
        elif k == "equal":
            a, b = span[fam]
            v = fn.equal_attr(second[:, a:b], top[:, a:b])
        else:  # pragma: no cover
            raise ValueError(k)
        out[s.id] = (s.writes[5:] if s.writes.startswith("attr:") else s.writes, v)
    return out


def assemble_row(layout: MemoryLayout, parts: dict, batch: int) -> Tensor:
    """Concatenate named slices in layout order; unwritten slices are zero."""
    pieces = []
    for name, (a, b) in layout.slices.items():
        if name in parts:
            v = parts[name]
            pieces.append(ad.reshape(v, (batch, 1)) if v.ndim == 1 else v)
        else:
            pieces.append(ad.constant(np.zeros((batch, b - a))))
    return ad.concat(pieces, axis=-1)


def _weighted(w: Tensor, ids: list, values: list) -> Tensor:
    """sum_j w[:, j] * values_j for values of shape (B,) or (B, n)."""
    B = w.shape[0]
    wj = w[:, ids]
    if values[0].ndim == 1:
        return ad.sum(wj * ad.stack(values, axis=1), axis=-1)
    V = ad.stack(values, axis=1)  # (B, J, n)
    return ad.reshape(ad.reshape(wj, (B, 1, len(ids))) @ V, (B, V.shape[-1]))


class CellContext:
    """Per-forward constants shared by all cells: concatenated attribute
    probabilities, family block indicators and the catalog's index ranges."""

    def __init__(self, catalog: FunctionCatalog, layout: MemoryLayout, perception: PerceptionOutput,
                 live: np.ndarray):
        schema = catalog.schema
        self.catalog, self.layout, self.live = catalog, layout, live
        self.perception = perception
        fams = schema.family_names
        self.P = ad.concat([perception.attrs[f] for f in fams], axis=-1)  # (B, A, C)
        self.Pt = ad.transpose(self.P, (0, 2, 1))
        E = np.zeros((schema.num_categorical, len(fams)))
        for k, f in enumerate(fams):
            a = schema.offsets[f]
            E[a:a + schema.cardinality(f), k] = 1.0
        self.E = ad.constant(E)
        self.Et = ad.constant(E.T.copy())
        self.fams = fams
        B, A = live.shape
        self.live_t = ad.constant(live.astype(float))
        self.offdiag = ad.constant(np.broadcast_to(1.0 - np.eye(A), (B, A, A)))
        self.id = {s.name: s.id for s in catalog}
        self.block = {}
        for kind in ("filter", "query", "same", "equal"):
            ids = catalog.ids(kind)
            if ids != list(range(ids[0], ids[0] + len(ids))):
                raise ValueError(f"{kind} functions must have contiguous ids")
            if [catalog[j].family for j in ids] != list(fams):
                raise ValueError(f"{kind} functions must follow family order")
            self.block[kind] = (ids[0], ids[-1] + 1)
        expected = {"scene": 0, "unique": 1, "count": 1, "exist": 1, "relate": 1, "filter": 1, "query": 1,
                    "same": 1, "intersect": 2, "union": 2, "equal_integer": 2, "greater_than": 2,
                    "less_than": 2, "equal": 2}
        for spec in catalog:
            if expected.get(spec.kind) != spec.pops:
                raise ValueError(f"{spec.name}: unexpected arity for the fused cell")


def _rows_at(x: Tensor, E: Tensor) -> Tensor:
    """(B, n) @ (n, k) as B separate row products, so every row's value is
    independent of the batch it sits in (plain 2-D BLAS products may block
    rows differently for different B)."""
    B, n = x.shape
    k = E.shape[-1]
    return ad.reshape(ad.reshape(x, (B, 1, n)) @ ad.broadcast_to(ad.reshape(E, (1, n, k)), (B, n, k)), (B, k))


def _bcast_col(x: Tensor, shape: tuple) -> Tensor:
    """(B,) -> shape with B leading."""
    return ad.broadcast_to(ad.reshape(x, (x.shape[0],) + (1,) * (len(shape) - 1)), shape)


def fused_rows(ctx: CellContext, top: Tensor, second: Tensor, w: Tensor, args: dict, sp: SoftParams) -> dict:
    """Attention-weighted pushed row of every arity group: pops -> (B, W)."""
    layout = ctx.layout
    A = layout.max_objects
    C = layout.schema.num_categorical
    B = w.shape[0]
    det1, det2 = top[:, :A], second[:, :A]
    num1, num2 = top[:, -1], second[:, -1]
    att1, att2 = top[:, A:A + C], second[:, A:A + C]
    col = lambda name: w[:, ctx.id[name]]  # noqa: E731
    blk = lambda kind: w[:, ctx.block[kind][0]:ctx.block[kind][1]]  # noqa: E731
    fam_arg = ad.concat([args[f] for f in ctx.fams], axis=-1)  # (B, C)
    nf = len(ctx.fams)

    # arity 0: scene
    zeros_att = ad.constant(np.zeros((B, C)))
    zeros_num = ad.constant(np.zeros((B, 1)))
    row0 = ad.concat([_bcast_col(col("scene"), (B, A)) * ctx.live_t, zeros_att, zeros_num], axis=-1)

    # arity 1
    det = _bcast_col(col("unique"), (B, A)) * fn.unique(det1, ctx.live, sp)
    det = det + _bcast_col(col("relate"), (B, A)) * fn.relate(det1, ctx.perception.relations,
                                                                args["relation"], sp)
    arg_blocks = ad.broadcast_to(ad.reshape(fam_arg, (B, C, 1)), (B, C, nf)) * ad.broadcast_to(ctx.E, (B, C, nf))
    masks = ctx.P @ arg_blocks  # (B, A, nf): P_f p_arg_f
    filt = ad.minimum(ad.broadcast_to(ad.reshape(det1, (B, A, 1)), (B, A, nf)), masks)
    det = det + ad.reshape(filt @ ad.reshape(blk("filter"), (B, nf, 1)), (B, A))
    w_same = _rows_at(blk("same"), ctx.Et)  # (B, C)
    if sp.clamp_outputs:
        for k, f in enumerate(ctx.fams):
            v = fn.same_attr(det1, ctx.perception.attrs[f], sp)
            det = det + _bcast_col(blk("same")[:, k], (B, A)) * v
    else:
        gram = (ctx.P * ad.broadcast_to(ad.reshape(w_same, (B, 1, C)), ctx.P.shape)) @ ctx.Pt
        det = det + ad.reshape((gram * ctx.offdiag) @ ad.reshape(det1, (B, A, 1)), (B, A))
    # query: min(p_arg, P^T det) renormalised per family, weighted by its query attention
    v = ad.minimum(fam_arg, ad.reshape(ad.reshape(det1, (B, 1, A)) @ ctx.P, (B, C)))
    z = ad.maximum(_rows_at(v, ctx.E), ad.constant(np.full((B, nf), sp.eps)))
    att = v / _rows_at(z, ctx.Et) * _rows_at(blk("query"), ctx.Et)
    num = col("count") * fn.count(det1) + col("exist") * fn.exist(det1)
    row1 = ad.concat([det, att, ad.reshape(num, (B, 1))], axis=-1)

    # arity 2
    det = (_bcast_col(col("intersect"), (B, A)) * fn.intersect(det2, det1)
           + _bcast_col(col("union"), (B, A)) * fn.union(det2, det1))
    num = (col("equal_integer") * fn.equal_integer(num2, num1, sp)
           + col("greater_than") * fn.greater_than(num2, num1, sp)
           + col("less_than") * fn.less_than(num2, num1, sp))
    eq = _rows_at(att2 * att1, ctx.E)  # (B, nf): per-family dot products
    num = num + ad.sum(eq * blk("equal"), axis=-1)
    row2 = ad.concat([det, zeros_att, ad.reshape(num, (B, 1))], axis=-1)
    return {0: row0, 1: row1, 2: row2}


def vqr_cell(ctx: CellContext, M: Tensor, p: Tensor, w: Tensor, args: dict, sp: SoftParams,
             temperature: float = 0.1, trace: dict | None = None) -> tuple:
    B = M.shape[0]
    top = read(M, p)
    second = read(M, ad.conv1d(p, DOWN))
    rows = fused_rows(ctx, top, second, w, args, sp)
    groups = _pointer_groups(p)
    coef, ptr, mixed = None, None, None
    for g, pg in groups.items():
        members = [s.id for s in ctx.catalog if s.pops == g]
        Wg = ad.sum(w[:, members[0]:members[-1] + 1], axis=-1) if members == list(
            range(members[0], members[-1] + 1)) else ad.sum(w[:, members], axis=-1)
        Wg_rows = _bcast_col(Wg, pg.shape)
        c = Wg_rows * (1.0 - pg)
        q = Wg_rows * pg
        term = _outer(pg, rows[g])
        coef = c if coef is None else coef + c
        ptr = q if ptr is None else ptr + q
        mixed = term if mixed is None else mixed + term
    M_ave = M * _rowwise(coef, M) + mixed
    p_new = ad.softmax(ptr, axis=-1, temperature=temperature)
    pr = _rowwise(p_new, M)
    M_new = M * (1.0 - pr) + M_ave * pr
    if trace is not None:
        with ad.no_grad():
            per_fn = function_rows(ctx.catalog, ctx.layout, top, second,
                                   StepInputs(w, args, ctx.perception, ctx.live), sp)
        trace["p"] = p_new.data.copy()
        trace["w"] = w.data.copy()
        trace["rows"] = {ctx.catalog[j].name: v.data.copy() for j, (_, v) in per_fn.items()}
        trace["memory"] = M_new.data.copy()
    return M_new, p_new


@dataclass
class ExecutionResult:
    row: Tensor  # (B, W): pointer-weighted final row
    qtype: Tensor  # (B, n_types)
    memory: Tensor
    pointer: Tensor
    trace: ExecutionTrace | None = None


def execute(catalog: FunctionCatalog, layout: MemoryLayout, parsed: ParserOutput, perception: PerceptionOutput,
            live: np.ndarray, t_stack: int, sp: SoftParams, temperature: float = 0.1,
            trace: bool = False, init_rng: np.random.Generator | None = None) -> ExecutionResult:
    B = live.shape[0]
    M, p = init_memory(layout, t_stack, B, init_rng)
    tr = ExecutionTrace() if trace else None
    ctx = CellContext(catalog, layout, perception, live)
    for i in range(parsed.steps):
        rec = {} if trace else None
        M, p = vqr_cell(ctx, M, p, parsed.w[i], parsed.args[i], sp, temperature, rec)
        if trace:
            rec["step"] = i
            tr.steps.append(rec)
    return ExecutionResult(read(M, p), parsed.qtype, M, p, tr)


# ---------------------------------------------------------------------------
# answer readout


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def readout(row: np.ndarray, qtype: np.ndarray, layout: MemoryLayout) -> list:
    """Discrete answers from final rows and question-type distributions."""
    schema = layout.schema
    types = schema.question_types
    span = layout.slices
    out = []
    for r, q in zip(np.asarray(row), np.asarray(qtype)):
        t = types[int(np.argmax(q))]
        if t == COUNT:
            out.append(Answer(COUNT, round_half_up(float(r[-1]))))
        elif t == BOOLEAN:
            out.append(Answer(BOOLEAN, bool(r[-1] >= 0.5)))
        else:
            a, b = span[t]
            out.append(Answer(t, schema.values[t][int(np.argmax(r[a:b]))]))
    return out


def answers_match(pred: Answer | None, truth: Answer) -> bool:
    return pred is not None and pred.type == truth.type and pred.value == truth.value
