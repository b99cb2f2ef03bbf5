"""Attention restricted to the directed edges of a sparse graph.

Edges are stored source-major: all edges leaving node 0 first, then node 1,
and so on, which makes every source's neighbourhood a contiguous segment.
Scores are evaluated only on those edges (a sampled dot product), softmax
is normalised per segment, and aggregation sums over the segment.  The
loops are compiled with numba; nothing here materialises an n x n array.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from .tensor import Tensor, _node


@dataclass(frozen=True)
class EdgeIndex:
    """Directed edge list sorted by source; ``offsets[i]:offsets[i+1]`` are i's edges."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency) -> "EdgeIndex":
        n = len(adjacency)
        src = np.repeat(np.arange(n), [len(nb) for nb in adjacency]).astype(np.int64)
        dst = np.array([v for nb in adjacency for v in nb], dtype=np.int64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(nb) for nb in adjacency])
        return cls(n, src, dst, offsets)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def by_dst(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge ids grouped by destination, and the segment offsets of that grouping."""
        order = np.argsort(self.dst, kind="stable").astype(np.int64)
        offsets = np.zeros(self.n + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(np.bincount(self.dst, minlength=self.n))
        return order, offsets


@numba.njit(cache=True, fastmath=True)
def _sddmm(q, k, src, dst, out):
    # q, k: (P, n, H, d); out: (P, H, E)
    for p in range(q.shape[0]):
        for e in range(src.shape[0]):
            i = src[e]
            v = dst[e]
            for h in range(q.shape[2]):
                acc = 0.0
                for c in range(q.shape[3]):
                    acc += q[p, i, h, c] * k[p, v, h, c]
                out[p, h, e] = acc


@numba.njit(cache=True, fastmath=True)
def _sddmm_grad(g, q, k, offsets, dst, src, in_order, in_offsets, gq, gk):
    # gradients accumulate per node, walking its outgoing (gq) or incoming (gk) edges
    for p in range(q.shape[0]):
        for i in range(offsets.shape[0] - 1):
            for h in range(q.shape[2]):
                for e in range(offsets[i], offsets[i + 1]):
                    ge = g[p, h, e]
                    v = dst[e]
                    for c in range(q.shape[3]):
                        gq[p, i, h, c] += ge * k[p, v, h, c]
                for pos in range(in_offsets[i], in_offsets[i + 1]):
                    e = in_order[pos]
                    ge = g[p, h, e]
                    u = src[e]
                    for c in range(q.shape[3]):
                        gk[p, i, h, c] += ge * q[p, u, h, c]


@numba.njit(cache=True, fastmath=True)
def _segment_softmax(s, offsets, out):
    for p in range(s.shape[0]):
        for h in range(s.shape[1]):
            for i in range(offsets.shape[0] - 1):
                lo, hi = offsets[i], offsets[i + 1]
                peak = s[p, h, lo]
                for e in range(lo + 1, hi):
                    peak = max(peak, s[p, h, e])
                total = 0.0
                for e in range(lo, hi):
                    out[p, h, e] = np.exp(s[p, h, e] - peak)
                    total += out[p, h, e]
                for e in range(lo, hi):
                    out[p, h, e] /= total


@numba.njit(cache=True, fastmath=True)
def _segment_softmax_grad(g, y, offsets, out):
    for p in range(y.shape[0]):
        for h in range(y.shape[1]):
            for i in range(offsets.shape[0] - 1):
                lo, hi = offsets[i], offsets[i + 1]
                dot = 0.0
                for e in range(lo, hi):
                    dot += g[p, h, e] * y[p, h, e]
                for e in range(lo, hi):
                    out[p, h, e] = y[p, h, e] * (g[p, h, e] - dot)


@numba.njit(cache=True, fastmath=True)
def _spmm(w, x, offsets, dst, out):
    # w: (P, H, E), x: (P, n, d), out: (P, n, H, d)
    for p in range(w.shape[0]):
        for i in range(offsets.shape[0] - 1):
            for e in range(offsets[i], offsets[i + 1]):
                v = dst[e]
                for h in range(w.shape[1]):
                    we = w[p, h, e]
                    for c in range(x.shape[2]):
                        out[p, i, h, c] += we * x[p, v, c]


@numba.njit(cache=True, fastmath=True)
def _spmm_grad(g, w, x, offsets, dst, src, in_order, in_offsets, gw, gx):
    for p in range(w.shape[0]):
        for i in range(offsets.shape[0] - 1):
            for e in range(offsets[i], offsets[i + 1]):
                v = dst[e]
                for h in range(w.shape[1]):
                    acc = 0.0
                    for c in range(x.shape[2]):
                        acc += g[p, i, h, c] * x[p, v, c]
                    gw[p, h, e] = acc
            # values of node i were read by every edge pointing at it
            for pos in range(in_offsets[i], in_offsets[i + 1]):
                e = in_order[pos]
                u = src[e]
                for h in range(w.shape[1]):
                    we = w[p, h, e]
                    for c in range(x.shape[2]):
                        gx[p, i, c] += we * g[p, u, h, c]


def _flat(a: np.ndarray, tail: int) -> np.ndarray:
    return np.ascontiguousarray(a.reshape((-1,) + a.shape[a.ndim - tail:]))


def edge_scores(q: Tensor, k: Tensor, index: EdgeIndex) -> Tensor:
    """Per-head dot products on edges only.

    ``q`` and ``k`` are (..., n, H, d); the result is (..., H, E) with
    ``out[..., h, e] = q[..., src[e], h, :] . k[..., dst[e], h, :]``.
    """
    if q.shape != k.shape or q.ndim < 3 or q.shape[-3] != index.n:
        raise ValueError(f"edge_scores: q {q.shape} and k {k.shape} must match with {index.n} nodes on axis -3")
    lead, heads = q.shape[:-3], q.shape[-2]
    qf, kf = _flat(q.data, 3), _flat(k.data, 3)
    out = np.zeros((qf.shape[0], heads, index.num_edges))
    _sddmm(qf, kf, index.src, index.dst, out)

    def backward(g):
        gq = np.zeros_like(qf)
        gk = np.zeros_like(kf)
        _sddmm_grad(_flat(g, 2), qf, kf, index.offsets, index.dst, index.src, *index.by_dst, gq, gk)
        return ((q, gq.reshape(q.shape)), (k, gk.reshape(k.shape)))

    return _node(out.reshape(lead + (heads, index.num_edges)), (q, k), "edge_scores", backward)


def edge_softmax(scores: Tensor, index: EdgeIndex) -> Tensor:
    """Softmax over each source's outgoing edges along the last axis."""
    if scores.shape[-1] != index.num_edges:
        raise ValueError(f"edge_softmax: last axis {scores.shape[-1]} != {index.num_edges} edges")
    deg = index.degrees()
    if np.any(deg == 0):
        raise ValueError("edge_softmax: every node needs at least one neighbour")
    flat = _flat(scores.data, 2)
    y = np.empty_like(flat)
    _segment_softmax(flat, index.offsets, y)

    def backward(g):
        grad = np.empty_like(y)
        _segment_softmax_grad(_flat(g, 2), y, index.offsets, grad)
        return ((scores, grad.reshape(scores.shape)),)

    y = y.reshape(scores.shape)
    return _node(y, (scores,), "edge_softmax", backward)


def edge_aggregate(weights: Tensor, values: Tensor, index: EdgeIndex) -> Tensor:
    """Weighted neighbourhood sums, one per head.

    ``weights`` is (..., H, E) and ``values`` (..., n, d) is shared by the
    heads; ``out[..., i, h, :] = sum_e weights[..., h, e] * values[..., dst[e], :]``
    over the edges e leaving i, giving (..., n, H, d).
    """
    if weights.ndim < 2 or weights.shape[-1] != index.num_edges:
        raise ValueError(f"edge_aggregate: weights {weights.shape} need {index.num_edges} edges on the last axis")
    if values.ndim != weights.ndim or values.shape[:-2] != weights.shape[:-2] or values.shape[-2] != index.n:
        raise ValueError(f"edge_aggregate: values {values.shape} do not fit weights {weights.shape}")
    lead = values.shape[:-2]
    heads = weights.shape[-2]
    wf = _flat(weights.data, 2)
    xf = _flat(values.data, 2)
    out = np.zeros((xf.shape[0], index.n, heads, xf.shape[2]))
    _spmm(wf, xf, index.offsets, index.dst, out)

    def backward(g):
        gw = np.zeros_like(wf)
        gx = np.zeros_like(xf)
        _spmm_grad(_flat(g, 3), wf, xf, index.offsets, index.dst, index.src, *index.by_dst, gw, gx)
        return ((weights, gw.reshape(weights.shape)), (values, gx.reshape(values.shape)))

    return _node(out.reshape(lead + (index.n, heads, xf.shape[2])), (weights, values), "edge_aggregate", backward)
