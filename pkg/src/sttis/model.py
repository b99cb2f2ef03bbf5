"""The forecasting network.

Per time slot a region's embedding fuses a one-hot position code, a one-hot
slot-of-day code and a convolution over its last ``w`` inflow/outflow
values.  Sparse multi-head attention over the region graph (``alpha``
stacked layers) mixes regions within the slot; attention across the
historical context slots of each region then feeds a ReLU output layer
predicting next-slot inflow and outflow.

Shapes: ``N`` slot instances, ``B`` samples, ``n`` regions, ``d`` width,
``M``/``Z`` DLI/DLM heads, ``E`` directed graph edges, ``S = |Q| + 1``.
"""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkern as nk
from .errors import PreconditionError
from .graph import RegionGraph
from .numkern import EdgeIndex, ParameterStore, Tensor
from .numkern import checkpoint as ckpt


@dataclass(frozen=True)
class ModelConfig:
    n: int
    o: int = 48
    d: int = 8
    w: int = 6
    p: int = 3
    f: int = 4
    alpha: int = 3
    heads_dli: int = 6
    heads_dlm: int = 6
    dropout: float = 0.1
    q_recipe: tuple[int, int, int] = (6, 10, 0)  # recent slots, daily, weekly
    ffn_mult: int = 4
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "q_recipe", tuple(int(x) for x in self.q_recipe))
        counts = dict(n=self.n, o=self.o, d=self.d, w=self.w, p=self.p, f=self.f, alpha=self.alpha,
                      heads_dli=self.heads_dli, heads_dlm=self.heads_dlm, ffn_mult=self.ffn_mult)
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad:
            raise ValueError(f"ModelConfig counts must be >= 1: {bad}")
        if self.p > self.w:
            raise ValueError(f"kernel size p={self.p} exceeds window w={self.w}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if len(self.q_recipe) != 3 or min(self.q_recipe) < 0 or sum(self.q_recipe) < 1:
            raise ValueError(f"q_recipe {self.q_recipe} needs three non-negative counts, not all zero")
        if self.alpha < 2:
            warnings.warn("alpha < 2: attention cannot reach regions two hops apart", RuntimeWarning, stacklevel=3)

    @property
    def l(self) -> int:
        """Flattened width of both convolution outputs."""
        return 2 * self.f * (self.w - self.p + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_recipe"] = list(self.q_recipe)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TemporalContext:
    """Inputs for forecasting slot ``target``: context slots Q ascending, then the target."""

    target: int
    slots: np.ndarray  # (S,)
    inflow_windows: np.ndarray  # (S, n, w) values at slot-w .. slot-1
    outflow_windows: np.ndarray
    slot_of_day: np.ndarray  # (S,)
    truth: np.ndarray | None = None  # (n, 2) normalized inflow, outflow at target

    @property
    def context_slots(self) -> np.ndarray:
        return self.slots[:-1]


@dataclass(frozen=True)
class ContextBatch:
    targets: np.ndarray  # (B,)
    slots: np.ndarray  # (B, S)
    inflow_windows: np.ndarray  # (B, S, n, w)
    outflow_windows: np.ndarray
    slot_of_day: np.ndarray  # (B, S)
    truth: np.ndarray | None = None  # (B, n, 2)

    @classmethod
    def from_contexts(cls, contexts: list[TemporalContext]) -> "ContextBatch":
        truth = None if any(c.truth is None for c in contexts) else np.stack([c.truth for c in contexts])
        return cls(
            np.array([c.target for c in contexts]),
            np.stack([c.slots for c in contexts]),
            np.stack([c.inflow_windows for c in contexts]),
            np.stack([c.outflow_windows for c in contexts]),
            np.stack([c.slot_of_day for c in contexts]),
            truth,
        )

    def __len__(self) -> int:
        return int(self.targets.shape[0])


@dataclass
class ScoreCounter:
    """Attention dot products evaluated, per DLI layer.

    ``units`` counts (head, slot instance) pairs so ``per_unit`` is the number
    of scores one head evaluates for one slot.
    """

    evaluations: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    units: dict[int, int] = field(default_factory=lambda: defaultdict(int))

    def record(self, layer: int, evaluated: int, units: int) -> None:
        self.evaluations[layer] += int(evaluated)
        self.units[layer] += int(units)

    def per_unit(self, layer: int) -> float:
        return self.evaluations[layer] / self.units[layer]


# parameters -------------------------------------------------------------------

def _ffn_params(store: ParameterStore, prefix: str, cfg: ModelConfig, rng) -> None:
    hidden = cfg.ffn_mult * cfg.d
    store.uniform(f"{prefix}.ffn.W1", (cfg.d, hidden), cfg.d, rng)
    store.uniform(f"{prefix}.ffn.b1", (hidden,), cfg.d, rng)
    store.uniform(f"{prefix}.ffn.W2", (hidden, cfg.d), hidden, rng)
    store.uniform(f"{prefix}.ffn.b2", (cfg.d,), hidden, rng)
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.gain", np.ones(cfg.d))
        store.add(f"{prefix}.{ln}.bias", np.zeros(cfg.d))


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ParameterStore:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = ParameterStore()
    d = cfg.d
    s.uniform("embed.W_S", (cfg.n, d), cfg.n, rng)
    s.uniform("embed.b_S", (d,), cfg.n, rng)
    s.uniform("embed.W_T", (cfg.o, d), cfg.o, rng)
    s.uniform("embed.b_T", (d,), cfg.o, rng)
    for ch in ("in", "out"):
        s.uniform(f"embed.conv_{ch}.kernel", (cfg.f, cfg.p), cfg.p, rng)
        s.uniform(f"embed.conv_{ch}.bias", (cfg.f,), cfg.p, rng)
    s.uniform("embed.W_F", (cfg.l, d), cfg.l, rng)
    s.uniform("embed.b_F", (d,), cfg.l, rng)
    s.uniform("embed.W_L", (d, d), d, rng)
    s.uniform("embed.b_L", (d,), d, rng)
    for k in range(cfg.alpha):
        s.uniform(f"dli.{k}.W_Q", (cfg.heads_dli, d, d), d, rng)
        s.uniform(f"dli.{k}.W_K", (cfg.heads_dli, d, d), d, rng)
        s.uniform(f"dli.{k}.W_O", (cfg.heads_dli * d, d), cfg.heads_dli * d, rng)
        _ffn_params(s, f"dli.{k}", cfg, rng)
    s.uniform("dlm.W_Q", (cfg.heads_dlm, d, d), d, rng)
    s.uniform("dlm.W_K", (cfg.heads_dlm, d, d), d, rng)
    s.uniform("dlm.W_V", (d, d), d, rng)
    s.uniform("dlm.W_T", (cfg.heads_dlm * d, d), cfg.heads_dlm * d, rng)
    _ffn_params(s, "dlm", cfg, rng)
    s.uniform("pred.W_P", (d, 2), d, rng)
    s.uniform("pred.b_P", (2,), d, rng)
    return s


# building blocks -------------------------------------------------------------

def _norm(store: ParameterStore, cfg: ModelConfig, prefix: str, x: Tensor) -> Tensor:
    if not cfg.layer_norm:
        return x
    return nk.layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"])


def _ffn(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    hidden = nk.relu(x @ store[f"{prefix}.ffn.W1"] + store[f"{prefix}.ffn.b1"])
    return hidden @ store[f"{prefix}.ffn.W2"] + store[f"{prefix}.ffn.b2"]


def _stacked(w: Tensor) -> Tensor:
    """Per-head projections (H, d, d) -> one (d, H*d) matrix, heads side by side."""
    h, d_in, d_out = w.shape
    return nk.transpose(w, (1, 0, 2)).reshape(d_in, h * d_out)


def stf_embed(store: ParameterStore, cfg: ModelConfig, inflow_windows, outflow_windows, slot_of_day) -> Tensor:
    """Spatial-temporal-flow embedding, (N, n, w) windows -> (N, n, d)."""
    in_w = np.asarray(inflow_windows, dtype=np.float64)
    out_w = np.asarray(outflow_windows, dtype=np.float64)
    if in_w.shape != out_w.shape or in_w.ndim != 3 or in_w.shape[1:] != (cfg.n, cfg.w):
        raise PreconditionError(f"windows must be (N, {cfg.n}, {cfg.w}), got {in_w.shape} and {out_w.shape}")
    N = in_w.shape[0]
    spatial = nk.onehot(np.arange(cfg.n), cfg.n) @ store["embed.W_S"] + store["embed.b_S"]  # (n, d)
    temporal = nk.onehot(slot_of_day, cfg.o) @ store["embed.W_T"] + store["embed.b_T"]  # (N, d)
    t_out = cfg.w - cfg.p + 1
    conv_in = nk.conv1d(Tensor(in_w), store["embed.conv_in.kernel"], store["embed.conv_in.bias"])
    conv_out = nk.conv1d(Tensor(out_w), store["embed.conv_out.kernel"], store["embed.conv_out.bias"])
    flat = nk.concat([conv_in.reshape(N, cfg.n, cfg.f * t_out), conv_out.reshape(N, cfg.n, cfg.f * t_out)], axis=-1)
    flow = flat @ store["embed.W_F"] + store["embed.b_F"]  # (N, n, d)
    fused = flow + spatial + temporal.reshape(N, 1, cfg.d)
    return fused @ store["embed.W_L"] + store["embed.b_L"]


def dli_scores(store: ParameterStore, cfg: ModelConfig, emb: Tensor, edges: EdgeIndex, layer: int,
               counter: ScoreCounter | None = None) -> Tensor:
    """Scaled query/key products on graph edges only, (N, n, d) -> (N, M, E)."""
    N, M = emb.shape[0], cfg.heads_dli
    q = (emb @ _stacked(store[f"dli.{layer}.W_Q"])).reshape(N, cfg.n, M, cfg.d)
    k = (emb @ _stacked(store[f"dli.{layer}.W_K"])).reshape(N, cfg.n, M, cfg.d)
    scores = nk.edge_scores(q, k, edges)
    if counter is not None:
        counter.record(layer, scores.size, N * cfg.heads_dli)
    return nk.scale(scores, 1.0 / math.sqrt(cfg.d))


def dli_aggregate(emb: Tensor, scores: Tensor, edges: EdgeIndex, rate: float = 0.0, rng=None,
                  training: bool = False) -> tuple[Tensor, Tensor]:
    """Softmax over each region's neighbours, then sum their embeddings.

    Returns ``(heads, weights)`` with heads (N, n, M, d) and weights (N, M, E).
    """
    weights = nk.edge_softmax(scores, edges)
    used = nk.dropout(weights, rate, rng, training)
    return nk.edge_aggregate(used, emb, edges), weights


def dli_layer(store: ParameterStore, cfg: ModelConfig, emb: Tensor, edges: EdgeIndex, layer: int, *,
              training: bool = False, rng=None, counter: ScoreCounter | None = None, trace: dict | None = None) -> Tensor:
    scores = dli_scores(store, cfg, emb, edges, layer, counter)
    heads, weights = dli_aggregate(emb, scores, edges, cfg.dropout, rng, training)
    if trace is not None:
        trace.setdefault("dli", []).append(weights.data)
    N = emb.shape[0]
    attended = heads.reshape(N, cfg.n, cfg.heads_dli * cfg.d) @ store[f"dli.{layer}.W_O"]
    h = _norm(store, cfg, f"dli.{layer}.ln1", emb + attended)
    ff = nk.dropout(_ffn(store, f"dli.{layer}", h), cfg.dropout, rng, training)
    return _norm(store, cfg, f"dli.{layer}.ln2", h + ff)


def dli_stack(store: ParameterStore, cfg: ModelConfig, inflow_windows, outflow_windows, slot_of_day,
              edges: EdgeIndex, **kw) -> Tensor:
    x = stf_embed(store, cfg, inflow_windows, outflow_windows, slot_of_day)
    for k in range(cfg.alpha):
        x = dli_layer(store, cfg, x, edges, k, **kw)
    return x


def dlm(store: ParameterStore, cfg: ModelConfig, r_target: Tensor, r_context: Tensor, *,
        training: bool = False, rng=None, trace: dict | None = None) -> Tensor:
    """Attention of each region's target-slot embedding over its own context slots.

    ``r_target`` is (B, n, d) and ``r_context`` (B, Q, n, d); returns (B, n, d).
    """
    if r_context.ndim != 4 or r_context.shape[1] == 0:
        raise PreconditionError("dlm needs at least one context slot")
    B, Qn, n, d = r_context.shape
    Z = cfg.heads_dlm
    q = (r_target @ _stacked(store["dlm.W_Q"])).reshape(B, n, Z, d)
    # (R_t W_Q)(R_c W_K)^T == (R_t W_Q W_K^T) R_c^T; avoids projecting every context slot
    qk = nk.einsum("bnzc,zac->bnza", q, store["dlm.W_K"])
    e = nk.scale(nk.einsum("bnza,bqna->bnzq", qk, r_context), 1.0 / math.sqrt(d))
    beta = nk.softmax(e, axis=-1)  # (B, n, Z, Q)
    if trace is not None:
        trace["dlm"] = beta.data.transpose(0, 2, 1, 3)
    used = nk.dropout(beta, cfg.dropout, rng, training)
    pooled = nk.einsum("bnzq,bqna->bnza", used, r_context) @ store["dlm.W_V"]
    mixed = pooled.reshape(B, n, Z * d) @ store["dlm.W_T"]
    h = _norm(store, cfg, "dlm.ln1", r_target + mixed)
    ff = nk.dropout(_ffn(store, "dlm", h), cfg.dropout, rng, training)
    return _norm(store, cfg, "dlm.ln2", h + ff)


def predict_head(store: ParameterStore, omega: Tensor) -> Tensor:
    """Non-negative (inflow, outflow) per region: (..., n, d) -> (..., n, 2)."""
    return nk.relu(omega @ store["pred.W_P"] + store["pred.b_P"])


def loss(pred: Tensor, truth) -> Tensor:
    """Root of the mean squared error over both channels and all regions, averaged over samples."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"loss: prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim == 2:
        return nk.sqrt(nk.square(pred - truth).mean())
    per_sample = nk.sqrt(nk.square(pred - truth).mean(axis=(-2, -1)))
    return per_sample.mean()


# the network -------------------------------------------------------------------

class STTIS:
    """Network bound to a region graph.

    ``meta`` is free-form JSON-able data (e.g. the scaling used in training)
    stored alongside the weights in checkpoints.
    """

    def __init__(self, cfg: ModelConfig, graph: RegionGraph, store: ParameterStore | None = None, seed: int = 0,
                 meta: dict | None = None):
        if graph.n != cfg.n:
            raise PreconditionError(f"graph has {graph.n} regions, config {cfg.n}")
        self.cfg = cfg
        self.graph = graph
        self.edges = graph.edge_index()
        self.store = store if store is not None else init_params(cfg, seed)
        self.meta = dict(meta or {})

    def forward(self, batch: ContextBatch | TemporalContext, *, training: bool = False, rng=None,
                counter: ScoreCounter | None = None, trace: dict | None = None) -> Tensor:
        if isinstance(batch, TemporalContext):
            batch = ContextBatch.from_contexts([batch])
        cfg = self.cfg
        B, S = batch.slots.shape
        if S < 2:
            raise PreconditionError("a context needs at least one historical slot")
        N = B * S
        in_w = batch.inflow_windows.reshape(N, cfg.n, cfg.w)
        out_w = batch.outflow_windows.reshape(N, cfg.n, cfg.w)
        dli_trace = {} if trace is not None else None
        r = dli_stack(self.store, cfg, in_w, out_w, batch.slot_of_day.reshape(N), self.edges,
                      training=training, rng=rng, counter=counter, trace=dli_trace)
        r = r.reshape(B, S, cfg.n, cfg.d)
        if trace is not None:
            # keep only the target slot's weights: (layers, B, M, E)
            trace["dli"] = np.stack([w.reshape(B, S, cfg.heads_dli, -1)[:, -1] for w in dli_trace["dli"]])
        omega = dlm(self.store, cfg, r[:, -1], r[:, :-1], training=training, rng=rng, trace=trace)
        return predict_head(self.store, omega)

    def predict(self, batch, chunk: int = 64) -> np.ndarray:
        """Normalized predictions (B, n, 2) without dropout or gradient tracking."""
        if isinstance(batch, TemporalContext):
            batch = ContextBatch.from_contexts([batch])
        out = []
        for a in range(0, len(batch), chunk):
            sub = _slice_batch(batch, slice(a, a + chunk))
            out.append(self.forward(sub).data)
        return np.concatenate(out, axis=0)

    def _header(self) -> dict:
        return {"model": self.cfg.to_dict(), "meta": self.meta}

    def checkpoint_bytes(self) -> bytes:
        return ckpt.dumps(self._header(), self.store.snapshot())

    def save(self, path) -> None:
        ckpt.save(path, self._header(), self.store.snapshot())

    @classmethod
    def load(cls, path, graph: RegionGraph) -> "STTIS":
        header, params = ckpt.load(path)
        if "model" not in header:
            raise ckpt.CheckpointError(f"{path}: header lacks the model configuration")
        cfg = ModelConfig.from_dict(header["model"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            store = init_params(cfg, 0)
        store.load(params)
        return cls(cfg, graph, store, meta=header.get("meta"))


def _slice_batch(batch: ContextBatch, sl: slice) -> ContextBatch:
    return ContextBatch(
        batch.targets[sl], batch.slots[sl], batch.inflow_windows[sl], batch.outflow_windows[sl],
        batch.slot_of_day[sl], None if batch.truth is None else batch.truth[sl],
    )


def forward(ctx, graph: RegionGraph, store: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Functional form of :meth:`STTIS.forward` for a single context or a batch."""
    return STTIS(cfg, graph, store).forward(ctx)
