"""Small neural building blocks on top of :mod:`softvqa.autodiff`.

Parameters live in a flat :class:`ParamStore` keyed by dotted names, which is
also what gets checkpointed.  Layers hold the names of their parameters, not
the tensors, so a store can be swapped (e.g. after loading a checkpoint).
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamStore:
    """Ordered mapping name -> trainable Tensor."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_scalars(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict, strict: bool = True) -> None:
        for n, t in self._params.items():
            if n not in state:
                if strict:
                    raise KeyError(f"checkpoint missing parameter {n!r}")
                continue
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ad.ShapeError(f"load {n}", arr.shape, t.shape)
            t.data = arr.astype(ad.get_dtype())

    def cast(self) -> None:
        """Re-cast every tensor to the active precision mode."""
        for t in self._params.values():
            t.data = t.data.astype(ad.get_dtype())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, zero: bool = False, bias: bool = True):
        self.w = name + ".w"
        self.b = name + ".b" if bias else None
        store.add(self.w, np.zeros((d_in, d_out)) if zero else glorot(rng, d_in, d_out))
        if bias:
            store.add(self.b, np.zeros(d_out))
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeError(f"linear {self.w}", x.shape, (self.d_in, self.d_out))
        lead = x.shape[:-1]
        x2 = x if x.ndim == 2 else ad.reshape(x, (-1, self.d_in))
        y = x2 @ store[self.w]
        if self.b is not None:
            y = y + ad.broadcast_to(store[self.b], y.shape)
        return y if x.ndim == 2 else ad.reshape(y, lead + (self.d_out,))


class MLP:
    """One tanh hidden layer; the output layer is optionally zero-initialised."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, zero_last: bool = True):
        self.hidden = Linear(store, name + ".0", d_in, d_hidden, rng)
        self.out = Linear(store, name + ".1", d_hidden, d_out, rng, zero=zero_last)

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return self.out(store, ad.tanh(self.hidden(store, x)))


class LSTM:
    """Single-layer gated recurrent cell (input, forget, output gates)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        self.wx = name + ".wx"
        self.wh = name + ".wh"
        self.b = name + ".b"
        store.add(self.wx, glorot(rng, d_in, 4 * d_h))
        store.add(self.wh, glorot(rng, d_h, 4 * d_h))
        bias = np.zeros(4 * d_h)
        bias[d_h:2 * d_h] = 1.0  # forget gate
        store.add(self.b, bias)

    def run(self, store: ParamStore, xs: Tensor, mask: np.ndarray) -> list:
        """Unroll over ``xs`` (B, S, d_in); padded steps carry the state through.

        Returns the per-step hidden states as a list of (B, d_h) tensors.
        """
        B, S, _ = xs.shape
        d = self.d_h
        h = ad.constant(np.zeros((B, d)))
        c = ad.constant(np.zeros((B, d)))
        bias = ad.broadcast_to(store[self.b], (B * S, 4 * d))
        gx = ad.reshape(ad.reshape(xs, (B * S, self.d_in)) @ store[self.wx] + bias, (B, S, 4 * d))
        outs = []
        for t in range(S):
            z = gx[:, t, :] + h @ store[self.wh]
            i = ad.sigmoid(z[:, :d])
            f = ad.sigmoid(z[:, d:2 * d])
            g = ad.tanh(z[:, 2 * d:3 * d])
            o = ad.sigmoid(z[:, 3 * d:])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            m = mask[:, t]
            if m.all():
                c, h = c_new, h_new
            else:
                keep = ad.constant(np.broadcast_to(m[:, None], (B, d)).astype(float))
                drop = ad.constant(1.0 - keep.data)
                c = keep * c_new + drop * c
                h = keep * h_new + drop * h
            outs.append(h)
        return outs


def bidirectional(store: ParamStore, fwd: LSTM, bwd: LSTM, table: Tensor, tok_f: np.ndarray,
                  tok_b: np.ndarray) -> tuple:
    """Run two cells of equal shape side by side as one batched recurrence.

    ``tok_f`` and ``tok_b`` are (B, S) token indices into the embedding
    ``table`` for the two directions (the caller reverses ``tok_b``).  There is
    no state carry at padded steps: callers only read states up to each
    sequence's length, which later steps cannot affect.  Returns per-step
    hidden states as two (B, S, d_h) tensors.
    """
    B, S = tok_f.shape
    d = fwd.d_h
    # [x_t; h] @ [wx; wh] in a single product per step
    W = ad.stack([ad.concat([store[fwd.wx], store[fwd.wh]], axis=0),
                  ad.concat([store[bwd.wx], store[bwd.wh]], axis=0)])  # (2, d_in + d, 4d)
    bias = ad.broadcast_to(ad.reshape(ad.stack([store[fwd.b], store[bwd.b]]), (2, 1, 4 * d)), (2, B, 4 * d))
    h = ad.constant(np.zeros((2, B, d)))
    c = ad.constant(np.zeros((2, B, d)))
    outs = []
    for t in range(S):
        x = ad.embedding(table, np.stack([tok_f[:, t], tok_b[:, t]]))  # (2, B, d_in)
        z = ad.concat([x, h], axis=-1) @ W + bias
        s = ad.sigmoid(z)
        i, f, o = s[..., :d], s[..., d:2 * d], s[..., 3 * d:]
        g = ad.tanh(z[..., 2 * d:3 * d])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outs.append(h)
    H = ad.stack(outs, axis=2)  # (2, B, S, d)
    return H[0], H[1]


class Adam:
    """Adaptive first/second-moment optimiser over a ParamStore."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros(p.shape) for n, p in store.items()}
        self.v = {n: np.zeros(p.shape) for n, p in store.items()}

    def step(self, names=None) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        self.t += 1
        names = list(self.store) if names is None else names
        grads = {n: self.store[n].grad for n in names if self.store[n].grad is not None}
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))) if grads else 0.0
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for n, g in grads.items():
            g = g * scale
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            step = self.lr * (self.m[n] / b1t) / (np.sqrt(self.v[n] / b2t) + self.eps)
            p = self.store[n]
            p.data = (p.data - step).astype(p.data.dtype)
        return norm


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic  b"SVQT"           4 bytes
#   version                  uint32 (=1)
#   count                    uint32
#   per tensor, in store order:
#     name_len               uint32, then name as UTF-8
#     ndim                   uint32, then ndim x uint32 extents
#     values                 prod(extents) x float64, row-major
# all integers/floats little-endian

_MAGIC = b"SVQT"
_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    buf = bytearray(_MAGIC)
    buf += struct.pack("<II", _VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a named-tensor checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out
