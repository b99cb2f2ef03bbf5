"""Sample assembly, training loop, evaluation metrics, HA baseline, synthetic data."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import numkern as nk
from .errors import DataError, PreconditionError
from .graph import RegionGraph
from .ingest import FlowSeries, ScaleParams, apply_scale, denormalize
from .model import STTIS, ContextBatch, ModelConfig, TemporalContext, init_params, loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleConfig:
    h: int = 6
    daily: int = 10
    weekly: int = 0
    w: int = 6
    o: int = 48

    def __post_init__(self):
        if min(self.h, self.daily, self.weekly) < 0 or self.h + self.daily + self.weekly < 1:
            raise ValueError(f"context recipe ({self.h}, {self.daily}, {self.weekly}) is empty")

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "SampleConfig":
        h, daily, weekly = cfg.q_recipe
        return cls(h=h, daily=daily, weekly=weekly, w=cfg.w, o=cfg.o)

    def offsets(self) -> np.ndarray:
        """Distinct lags of the context slots, largest first (so slots come out ascending)."""
        lags = set(range(1, self.h + 1))
        lags.update(j * self.o for j in range(1, self.daily + 1))
        lags.update(y * 7 * self.o for y in range(1, self.weekly + 1))
        return np.array(sorted(lags, reverse=True), dtype=np.int64)

    @property
    def earliest_target(self) -> int:
        return int(self.offsets()[0]) + self.w


@dataclass(frozen=True)
class Metrics:
    rmse_in: float
    rmse_out: float
    mape_in: float
    mape_out: float
    n_samples: int
    n_excluded: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


# samples ----------------------------------------------------------------------

def _windows(series: np.ndarray, slots: np.ndarray, w: int) -> np.ndarray:
    """series (T, n), slots (...) -> (..., n, w) with values at slot-w .. slot-1."""
    idx = slots[..., None] + np.arange(-w, 0)
    return np.moveaxis(series[idx], -1, -2)


def assemble_batch(flows: FlowSeries, targets, cfg: SampleConfig, with_truth: bool = True) -> ContextBatch:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    lags = cfg.offsets()
    first = int(targets.min()) - int(lags[0]) - cfg.w
    if first < 0:
        raise PreconditionError(
            f"target slot {int(targets.min())} needs history back to slot {first} but data starts at slot 0 "
            f"(first forecastable target is {cfg.earliest_target})"
        )
    limit = flows.num_slots if with_truth else flows.num_slots + 1
    if int(targets.max()) >= limit:
        raise PreconditionError(f"target slot {int(targets.max())} is beyond the {flows.num_slots} available slots")
    slots = np.concatenate([targets[:, None] - lags[None, :], targets[:, None]], axis=1)
    truth = None
    if with_truth:
        truth = np.stack([flows.inflow[targets], flows.outflow[targets]], axis=-1)
    return ContextBatch(
        targets=targets,
        slots=slots,
        inflow_windows=_windows(flows.inflow, slots, cfg.w),
        outflow_windows=_windows(flows.outflow, slots, cfg.w),
        slot_of_day=np.asarray(flows.slot_of_day(slots, cfg.o), dtype=np.int64),
        truth=truth,
    )


def assemble_sample(flows: FlowSeries, t: int, cfg: SampleConfig) -> TemporalContext:
    batch = assemble_batch(flows, [t], cfg, with_truth=t < flows.num_slots)
    return TemporalContext(
        target=int(t),
        slots=batch.slots[0],
        inflow_windows=batch.inflow_windows[0],
        outflow_windows=batch.outflow_windows[0],
        slot_of_day=batch.slot_of_day[0],
        truth=None if batch.truth is None else batch.truth[0],
    )


def valid_targets(slots: range, cfg: SampleConfig) -> np.ndarray:
    return np.arange(max(slots.start, cfg.earliest_target), slots.stop, dtype=np.int64)


# training ---------------------------------------------------------------------

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    model: STTIS  # carries the best-validation parameters
    log: list[EpochLog]
    best_epoch: int


def mean_loss(model: STTIS, flows: FlowSeries, targets: np.ndarray, cfg: SampleConfig, chunk: int = 64) -> float:
    """Average per-sample loss without dropout."""
    total = 0.0
    for a in range(0, targets.size, chunk):
        batch = assemble_batch(flows, targets[a:a + chunk], cfg)
        pred = model.forward(batch)
        total += float(loss(pred, batch.truth).data) * len(batch)
    return total / targets.size


def train(
    flows: FlowSeries,
    graph: RegionGraph,
    model_cfg: ModelConfig,
    train_slots: range,
    val_slots: range,
    epochs: int = 50,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> TrainResult:
    """Adam on shuffled mini-batches of target slots; keeps the best-validation parameters.

    ``flows`` must already be normalized.
    """
    sample_cfg = SampleConfig.from_model(model_cfg)
    train_t = valid_targets(train_slots, sample_cfg)
    val_t = valid_targets(val_slots, sample_cfg)
    if train_t.size == 0:
        raise PreconditionError(f"no training targets: first usable slot is {sample_cfg.earliest_target}")
    if val_t.size == 0:
        raise PreconditionError("no validation targets with full history")
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    model = STTIS(model_cfg, graph, init_params(model_cfg, np.random.default_rng(init_seq)))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)

    best_val, best_epoch, best = math.inf, 0, model.store.snapshot()
    history: list[EpochLog] = []
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(train_t)
        losses = []
        for a in range(0, order.size, batch_size):
            batch = assemble_batch(flows, order[a:a + batch_size], sample_cfg)
            value = loss(model.forward(batch, training=True, rng=drop_rng), batch.truth)
            value.backward()
            nk.adam_step(model.store, lr)
            losses.append(float(value.data))
        val_loss = mean_loss(model, flows, val_t, sample_cfg)
        if val_loss < best_val:
            best_val, best_epoch, best = val_loss, epoch, model.store.snapshot()
        entry = EpochLog(epoch, float(np.mean(losses)), val_loss, time.perf_counter() - started)
        history.append(entry)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, entry.train_loss, val_loss, entry.seconds)
    model.store.load(best)
    return TrainResult(model, history, best_epoch)


def write_epoch_log(path, history: list[EpochLog]) -> None:
    rows = ["epoch,train_loss,val_loss,seconds"]
    rows += [f"{e.epoch},{e.train_loss:.9g},{e.val_loss:.9g},{e.seconds:.3f}" for e in history]
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


# metrics ----------------------------------------------------------------------

def _rmse_mape(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, float]:
    err = y - y_hat
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err) / y))


def channel_metrics(y, y_hat, threshold: float = 10.0) -> tuple[float, float, int]:
    """RMSE, MAPE and sample count over entries whose truth is at least ``threshold``."""
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    keep = y >= threshold
    n = int(keep.sum())
    if n == 0:
        raise DataError(f"no samples with ground truth >= {threshold}")
    return (*_rmse_mape(y[keep], y_hat[keep]), n)


def compute_metrics(truth_in, truth_out, pred_in, pred_out, threshold: float = 10.0) -> Metrics:
    """Inflow and outflow metrics in original units.

    A (slot, region) sample is excluded when either its true inflow or its
    true outflow is below ``threshold``.
    """
    truth_in, truth_out = np.asarray(truth_in, float), np.asarray(truth_out, float)
    pred_in, pred_out = np.asarray(pred_in, float), np.asarray(pred_out, float)
    keep = (truth_in >= threshold) & (truth_out >= threshold)
    n = int(keep.sum())
    if n == 0:
        raise DataError(f"no samples left after excluding flows below {threshold}")
    r_in, m_in = _rmse_mape(truth_in[keep], pred_in[keep])
    r_out, m_out = _rmse_mape(truth_out[keep], pred_out[keep])
    return Metrics(r_in, r_out, m_in, m_out, n, int(keep.size - n))


def predict_range(model: STTIS, flows_norm: FlowSeries, targets: np.ndarray) -> np.ndarray:
    cfg = SampleConfig.from_model(model.cfg)
    return model.predict(assemble_batch(flows_norm, targets, cfg, with_truth=False))


def evaluate(model: STTIS, flows: FlowSeries, scale: ScaleParams, slots: range, threshold: float = 10.0) -> Metrics:
    """Metrics on raw ``flows`` for every target in ``slots``; predictions are denormalized first."""
    cfg = SampleConfig.from_model(model.cfg)
    targets = valid_targets(slots, cfg)
    if targets.size == 0 or targets[0] != slots.start:
        raise PreconditionError(f"evaluation range starts at {slots.start}, first target with history is {cfg.earliest_target}")
    pred = predict_range(model, apply_scale(flows, scale), targets)
    return compute_metrics(
        flows.inflow[targets], flows.outflow[targets],
        denormalize(pred[..., 0], scale, "in"), denormalize(pred[..., 1], scale, "out"),
        threshold,
    )


def ha_predictions(flows: FlowSeries, slots: range, o: int, history: range) -> tuple[np.ndarray, np.ndarray]:
    """Per-region mean over ``history`` at the same slot-of-day as each target slot."""
    if len(history) < o:
        raise DataError("historical average needs at least one full day of history")
    sod_hist = flows.slot_of_day(np.arange(history.start, history.stop), o)
    targets = np.arange(slots.start, slots.stop)
    sod = flows.slot_of_day(targets, o)
    preds = []
    for series in (flows.inflow, flows.outflow):
        sums = np.zeros((o, flows.n))
        np.add.at(sums, sod_hist, series[history.start:history.stop])
        counts = np.bincount(sod_hist, minlength=o)[:, None]
        if np.any(counts == 0):
            raise DataError("history does not cover every slot of the day")
        preds.append((sums / counts)[sod])
    return preds[0], preds[1]


def ha_baseline(flows: FlowSeries, slots: range, o: int, history: range | None = None, threshold: float = 10.0) -> Metrics:
    """Historical-average forecast scored like :func:`evaluate`.

    ``history`` defaults to every whole day before ``slots``.
    """
    if history is None:
        history = range(0, (slots.start // o) * o)
    p_in, p_out = ha_predictions(flows, slots, o, history)
    return compute_metrics(flows.inflow[slots.start:slots.stop], flows.outflow[slots.start:slots.stop], p_in, p_out, threshold)


# synthetic data -----------------------------------------------------------------

def synth_generate(n: int, days: int, o: int = 48, seed: int = 0) -> FlowSeries:
    """Seeded inflow/outflow with daily cycles, persistent noise and a cross-region lag.

    For region i at slot t (slot-of-day s, day k)::

        base_i(s)   = b_i * (1 + a_i * sin(2 pi s / o + phi_i))
        level_i(k)  = 1 + 0.15 * u_i(k),  u_i AR(1) over days, coefficient 0.7
        noise_i(t)  AR(1) over slots, coefficient 0.9, innovation sd 0.08 * b_i
        outflow_i(t) = max(0, base_i(s) * level_i(k) + noise_i(t))
        inflow_i(t)  = max(0, 0.6 * base_i(s + o/8) * level_i(k) + 0.4 * outflow_j(t - 2)
                              + noise'_i(t))          with partner j = pi(i)

    ``b_i ~ U(20, 80)``, ``a_i ~ U(0.3, 0.9)``, ``phi_i ~ U(0, 2 pi)`` and ``pi``
    is a random permutation without fixed points.  Values are rounded to 6
    decimals, the precision of the flows CSV.
    """
    if n < 4:
        raise ValueError("synthetic data needs n >= 4")
    rng = np.random.default_rng(seed)
    T = days * o
    b = rng.uniform(20.0, 80.0, n)
    a = rng.uniform(0.3, 0.9, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    partner = rng.permutation(n)
    while np.any(partner == np.arange(n)):
        partner = rng.permutation(n)

    s = np.arange(T) % o
    day = np.arange(T) // o

    def base(shift: int) -> np.ndarray:
        return b * (1.0 + a * np.sin(2 * np.pi * (s[:, None] + shift) / o + phi))

    def ar1(steps: int, coef: float, sd) -> np.ndarray:
        out = np.zeros((steps, n))
        eps = rng.normal(0.0, 1.0, (steps, n)) * sd
        out[0] = eps[0] / np.sqrt(1 - coef ** 2)
        for k in range(1, steps):
            out[k] = coef * out[k - 1] + eps[k]
        return out

    level = 1.0 + 0.15 * ar1(days, 0.7, np.sqrt(1 - 0.7 ** 2))[day]
    noise_out = ar1(T, 0.9, 0.08 * b)
    noise_in = ar1(T, 0.9, 0.08 * b)
    outflow = np.maximum(0.0, base(0) * level + noise_out)
    lagged = np.zeros_like(outflow)
    lagged[2:] = outflow[:-2, partner]
    lagged[:2] = outflow[:2, partner]
    inflow = np.maximum(0.0, 0.6 * base(o // 8) * level + 0.4 * lagged + noise_in)
    return FlowSeries(np.round(inflow, 6), np.round(outflow, 6), start_slot_of_day=0)


def autocorrelation(x: np.ndarray, lag: int) -> float:
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))
