"""Region similarity from dynamic time warping of average daily profiles."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import FlowSeries


@dataclass(frozen=True)
class DailyProfile:
    region: int
    values: np.ndarray  # length o


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (n, n)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _day_aligned(flows: FlowSeries, train_slots: range, o: int) -> np.ndarray:
    """Total flow over whole training days, shaped (days, o, n) and indexed by slot-of-day."""
    days = len(train_slots) // o
    if days < 1:
        raise DataError(f"daily profiles need at least one full day ({o} slots), got {len(train_slots)}")
    sl = slice(train_slots.start, train_slots.start + days * o)
    total = flows.inflow[sl] + flows.outflow[sl]
    # roll so that column s is slot-of-day s regardless of where the range starts
    first = int(flows.slot_of_day(train_slots.start, o))
    by_day = total.reshape(days, o, flows.n)
    return np.roll(by_day, first, axis=1)


def daily_profiles(flows: FlowSeries, train_slots: range, o: int) -> np.ndarray:
    """(n, o) mean inflow+outflow per slot-of-day over the training days."""
    return _day_aligned(flows, train_slots, o).mean(axis=0).T


def daily_profile(flows: FlowSeries, region: int, train_slots: range, o: int) -> DailyProfile:
    if not 0 <= region < flows.n:
        raise IndexError(f"region {region} out of range for {flows.n} regions")
    return DailyProfile(region, daily_profiles(flows, train_slots, o)[region])


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with absolute-difference cost."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance needs non-empty sequences")
    acc = np.full((a.size + 1, b.size + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, a.size + 1):
        for j in range(1, b.size + 1):
            cost = abs(a[i - 1] - b[j - 1])
            acc[i, j] = cost + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[-1, -1])


def pairwise_dtw(profiles: np.ndarray) -> np.ndarray:
    """Symmetric (n, n) DTW distances; the DP runs over all pairs i < j at once."""
    profiles = np.asarray(profiles, dtype=float)
    n, length = profiles.shape
    iu, ju = np.triu_indices(n, k=1)
    a, b = profiles[iu], profiles[ju]
    prev = np.full((iu.size, length + 1), np.inf)
    prev[:, 0] = 0.0
    for i in range(length):
        cur = np.full_like(prev, np.inf)
        cost = np.abs(a[:, i:i + 1] - b)
        for j in range(1, length + 1):
            cur[:, j] = cost[:, j - 1] + np.minimum(np.minimum(prev[:, j], cur[:, j - 1]), prev[:, j - 1])
        prev = cur
    dist = np.zeros((n, n))
    dist[iu, ju] = prev[:, -1]
    dist[ju, iu] = prev[:, -1]
    return dist


def similarity_from_distance(dist: np.ndarray) -> SimilarityMatrix:
    return SimilarityMatrix(1.0 / (1.0 + dist))


def similarity_matrix(flows: FlowSeries, train_slots: range, o: int) -> SimilarityMatrix:
    """``M[i, j] = 1 / (1 + dtw(profile_i, profile_j))`` on raw training flows."""
    if flows.n < 2:
        raise DataError("similarity needs at least two regions")
    return similarity_from_distance(pairwise_dtw(daily_profiles(flows, train_slots, o)))


def write_similarity(path, sim: SimilarityMatrix) -> None:
    rows = [",".join(f"{x:.9g}" for x in row) for row in sim.values]
    Path(path).write_text(f"# n={sim.n}\n" + "\n".join(rows) + "\n")


def read_matrix(path) -> np.ndarray:
    """Numeric CSV matrix; lines starting with '#' are ignored."""
    try:
        return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
