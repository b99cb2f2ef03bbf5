"""Independent reference implementations used as test oracles.

Each one is written in the most direct way available (enumeration, dense
matrices, explicit loops) and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def random_similarity(n: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.uniform(0.0, 1.0, (n, n))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


# DTW --------------------------------------------------------------------------------

def warping_paths(la: int, lb: int):
    """Every monotone, continuous alignment path from (0, 0) to (la-1, lb-1)."""
    def walk(i, j):
        if (i, j) == (la - 1, lb - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < la and nj < lb:
                for rest in walk(ni, nj):
                    yield [(i, j)] + rest
    yield from walk(0, 0)


def dtw_brute_force(a, b) -> float:
    return min(sum(abs(a[i] - b[j]) for i, j in path) for path in warping_paths(len(a), len(b)))


# dense attention layer ----------------------------------------------------------------

def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def dense_dli_layer(emb: np.ndarray, params: dict, mask: np.ndarray, layer: int) -> np.ndarray:
    """One graph-attention layer computed with full n x n score matrices and a -inf mask.

    ``emb`` is (N, n, d); ``mask[i, j]`` is True when j is a neighbour of i.
    """
    p = lambda name: params[f"dli.{layer}.{name}"]  # noqa: E731
    N, n, d = emb.shape
    heads = []
    for m in range(p("W_Q").shape[0]):
        q = emb @ p("W_Q")[m]
        k = emb @ p("W_K")[m]
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
        scores = np.where(mask, scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=-1, keepdims=True)
        heads.append(w @ emb)
    attended = np.concatenate(heads, axis=-1) @ p("W_O")
    h = _layer_norm(emb + attended, p("ln1.gain"), p("ln1.bias"))
    ff = np.maximum(h @ p("ffn.W1") + p("ffn.b1"), 0.0) @ p("ffn.W2") + p("ffn.b2")
    return _layer_norm(h + ff, p("ln2.gain"), p("ln2.bias"))


def adjacency_mask(adjacency) -> np.ndarray:
    n = len(adjacency)
    mask = np.zeros((n, n), dtype=bool)
    for i, nb in enumerate(adjacency):
        mask[i, list(nb)] = True
    return mask


# metrics -----------------------------------------------------------------------------

def direct_metrics(y_in, y_out, p_in, p_out, threshold=10.0):
    """RMSE and MAPE per channel by explicit summation over jointly included samples."""
    y_in, y_out = np.ravel(y_in), np.ravel(y_out)
    p_in, p_out = np.ravel(p_in), np.ravel(p_out)
    sq_in = sq_out = ape_in = ape_out = 0.0
    count = 0
    for k in range(y_in.size):
        if y_in[k] < threshold or y_out[k] < threshold:
            continue
        count += 1
        sq_in += (y_in[k] - p_in[k]) ** 2
        sq_out += (y_out[k] - p_out[k]) ** 2
        ape_in += abs(y_in[k] - p_in[k]) / y_in[k]
        ape_out += abs(y_out[k] - p_out[k]) / y_out[k]
    return {
        "rmse_in": math.sqrt(sq_in / count), "rmse_out": math.sqrt(sq_out / count),
        "mape_in": ape_in / count, "mape_out": ape_out / count, "n": count,
    }


def direct_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Per sample: root of the mean squared error over regions and both channels; then averaged."""
    total = 0.0
    for b in range(pred.shape[0]):
        sq = 0.0
        for i, c in itertools.product(range(pred.shape[1]), range(pred.shape[2])):
            sq += (pred[b, i, c] - truth[b, i, c]) ** 2
        total += math.sqrt(sq / (pred.shape[1] * pred.shape[2]))
    return total / pred.shape[0]


def dense_dlm(r_target: np.ndarray, r_context: np.ndarray, params: dict) -> tuple[np.ndarray, np.ndarray]:
    """Temporal attention with explicit loops; returns (output (B, n, d), weights (B, Z, n, Q))."""
    p = lambda name: params[f"dlm.{name}"]  # noqa: E731
    B, Q, n, d = r_context.shape
    Z = p("W_Q").shape[0]
    mixed = np.zeros((B, n, d))
    weights = np.zeros((B, Z, n, Q))
    for b in range(B):
        for i in range(n):
            heads = []
            for z in range(Z):
                query = r_target[b, i] @ p("W_Q")[z]
                scores = np.array([query @ (r_context[b, q, i] @ p("W_K")[z]) for q in range(Q)]) / math.sqrt(d)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                weights[b, z, i] = w
                heads.append(sum(w[q] * (r_context[b, q, i] @ p("W_V")) for q in range(Q)))
            mixed[b, i] = np.concatenate(heads) @ p("W_T")
    h = _layer_norm(r_target + mixed, p("ln1.gain"), p("ln1.bias"))
    ff = np.maximum(h @ p("ffn.W1") + p("ffn.b1"), 0.0) @ p("ffn.W2") + p("ffn.b2")
    return _layer_norm(h + ff, p("ln2.gain"), p("ln2.bias")), weights


def direct_embedding(in_w: np.ndarray, out_w: np.ndarray, slot_of_day: np.ndarray, params: dict) -> np.ndarray:
    """Region code + slot-of-day code + convolved flow windows, then a shared linear map."""
    p = lambda name: params[f"embed.{name}"]  # noqa: E731
    N, n, _ = in_w.shape
    d = p("W_L").shape[0]
    out = np.zeros((N, n, d))
    for a in range(N):
        for i in range(n):
            parts = []
            for x, ch in ((in_w[a, i], "in"), (out_w[a, i], "out")):
                kernel, bias = p(f"conv_{ch}.kernel"), p(f"conv_{ch}.bias")
                parts.append(np.concatenate([np.correlate(x, kernel[c], mode="valid") + bias[c]
                                             for c in range(kernel.shape[0])]))
            flow = np.concatenate(parts) @ p("W_F") + p("b_F")
            fused = p("W_S")[i] + p("b_S") + p("W_T")[slot_of_day[a]] + p("b_T") + flow
            out[a, i] = fused @ p("W_L") + p("b_L")
    return out
