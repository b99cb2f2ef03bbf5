"""Trip records -> per-region inflow/outflow series, scaling and splits."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

TRIP_HEADER = ("origin_lat", "origin_lon", "dest_lat", "dest_lon", "depart", "arrive")
FLOWS_FILE = "flows.csv"
META_FILE = "meta.json"
MAX_MALFORMED_FRACTION = 0.01


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    bbox: tuple[float, float, float, float] | None = None  # lat_min, lat_max, lon_min, lon_max
    slot_minutes: int = 30

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError(f"grid {self.rows}x{self.cols} needs at least 2 regions")
        if self.slot_minutes <= 0 or 1440 % self.slot_minutes:
            raise ValueError(f"slot_minutes={self.slot_minutes} must divide 1440")
        if self.bbox is not None:
            lat_min, lat_max, lon_min, lon_max = self.bbox
            if not (lat_min < lat_max and lon_min < lon_max):
                raise ValueError(f"degenerate bbox {self.bbox}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.slot_minutes

    def region_of(self, lat, lon) -> np.ndarray:
        """Region ids (row * cols + col, row 0 at the southern edge); -1 outside the bbox.

        Min edges are inclusive and max edges exclusive.
        """
        if self.bbox is None:
            raise ValueError("grid has no bounding box")
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        lat_min, lat_max, lon_min, lon_max = self.bbox
        inside = (lat >= lat_min) & (lat < lat_max) & (lon >= lon_min) & (lon < lon_max)
        row = np.floor((lat - lat_min) / (lat_max - lat_min) * self.rows).astype(np.int64)
        col = np.floor((lon - lon_min) / (lon_max - lon_min) * self.cols).astype(np.int64)
        # float rounding right below a max edge can land on rows/cols
        row = np.clip(row, 0, self.rows - 1)
        col = np.clip(col, 0, self.cols - 1)
        return np.where(inside, row * self.cols + col, -1)


@dataclass(frozen=True)
class TripRecord:
    origin: tuple[float, float]
    destination: tuple[float, float]
    depart: float  # epoch seconds
    arrive: float

    def __post_init__(self):
        if self.arrive < self.depart:
            raise ValueError("arrival precedes departure")


@dataclass
class FlowSeries:
    inflow: np.ndarray  # (num_slots, n)
    outflow: np.ndarray
    start_slot_of_day: int = 0

    def __post_init__(self):
        self.inflow = np.asarray(self.inflow, dtype=np.float64)
        self.outflow = np.asarray(self.outflow, dtype=np.float64)
        if self.inflow.shape != self.outflow.shape or self.inflow.ndim != 2:
            raise ValueError(f"inflow {self.inflow.shape} and outflow {self.outflow.shape} must be equal 2-D shapes")

    @property
    def n(self) -> int:
        return self.inflow.shape[1]

    @property
    def num_slots(self) -> int:
        return self.inflow.shape[0]

    def slot_of_day(self, t, o: int):
        return (np.asarray(t) + self.start_slot_of_day) % o


@dataclass(frozen=True)
class ScaleParams:
    in_min: float
    in_max: float
    out_min: float
    out_max: float

    def channel(self, channel: str) -> tuple[float, float]:
        if channel == "in":
            return self.in_min, self.in_max
        if channel == "out":
            return self.out_min, self.out_max
        raise ValueError(f"channel must be 'in' or 'out', got {channel!r}")


@dataclass
class IngestReport:
    rows: int = 0
    parsed: int = 0
    out_of_bbox: int = 0
    malformed: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class SplitRanges:
    train: range
    val: range
    test: range


def parse_timestamp(text: str) -> float:
    """Epoch seconds from ISO-8601 (naive means UTC) or a plain number."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_trips(path) -> tuple[list[TripRecord], IngestReport]:
    """Parse the trips CSV, collecting per-row errors with their line numbers."""
    path = Path(path)
    report = IngestReport()
    trips: list[TripRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != TRIP_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRIP_HEADER)}, got {','.join(header)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            report.rows += 1
            try:
                if len(row) != len(TRIP_HEADER):
                    raise ValueError(f"expected {len(TRIP_HEADER)} fields, got {len(row)}")
                olat, olon, dlat, dlon = (float(v) for v in row[:4])
                if not all(math.isfinite(v) for v in (olat, olon, dlat, dlon)):
                    raise ValueError("non-finite coordinate")
                trips.append(TripRecord((olat, olon), (dlat, dlon), parse_timestamp(row[4]), parse_timestamp(row[5])))
            except ValueError as exc:
                report.malformed.append((line, str(exc)))
    if report.rows == 0:
        raise DataError(f"{path}: no trip records")
    if len(report.malformed) > MAX_MALFORMED_FRACTION * report.rows:
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in report.malformed[:5])
        raise DataError(
            f"{path}: {len(report.malformed)} of {report.rows} rows malformed (limit 1%): {shown}"
        )
    for ln, msg in report.malformed:
        log.warning("%s line %d skipped: %s", path, ln, msg)
    report.parsed = len(trips)
    return trips, report


def aggregate(
    trips: list[TripRecord],
    grid: GridSpec,
    origin: float | None = None,
    num_slots: int | None = None,
    report: IngestReport | None = None,
) -> FlowSeries:
    """Count departures per (slot, origin region) and arrivals per (slot, destination region).

    ``origin`` (epoch seconds) is slot 0; by default the midnight (UTC) before
    the earliest departure.  A trip with either end outside the bbox is
    dropped.
    """
    report = report or IngestReport()
    slot_sec = grid.slot_minutes * 60
    if not trips:
        raise DataError("no trips to aggregate")
    olat, olon, dlat, dlon, dep, arr = (np.array(v, dtype=float) for v in zip(
        *[(t.origin[0], t.origin[1], t.destination[0], t.destination[1], t.depart, t.arrive) for t in trips]
    ))
    src = grid.region_of(olat, olon)
    dst = grid.region_of(dlat, dlon)
    keep = (src >= 0) & (dst >= 0)
    report.out_of_bbox += int((~keep).sum())
    if origin is None:
        origin = math.floor(dep.min() / 86400.0) * 86400.0
    dep_slot = np.floor((dep - origin) / slot_sec).astype(np.int64)
    arr_slot = np.floor((arr - origin) / slot_sec).astype(np.int64)
    if num_slots is None:
        num_slots = int(max(dep_slot[keep].max(initial=-1), arr_slot[keep].max(initial=-1))) + 1
    if num_slots <= 0:
        raise DataError("no trips inside the bounding box")
    o = grid.slots_per_day
    outflow = np.zeros((num_slots, grid.n))
    inflow = np.zeros((num_slots, grid.n))
    d_ok = keep & (dep_slot >= 0) & (dep_slot < num_slots)
    a_ok = keep & (arr_slot >= 0) & (arr_slot < num_slots)
    np.add.at(outflow, (dep_slot[d_ok], src[d_ok]), 1.0)
    np.add.at(inflow, (arr_slot[a_ok], dst[a_ok]), 1.0)
    start = int(((origin // slot_sec) % o))
    return FlowSeries(inflow, outflow, start_slot_of_day=start)


def parse_trips(path, grid: GridSpec, origin: float | None = None, num_slots: int | None = None) -> tuple[FlowSeries, IngestReport]:
    trips, report = read_trips(path)
    flows = aggregate(trips, grid, origin=origin, num_slots=num_slots, report=report)
    if report.out_of_bbox:
        log.info("%d trips outside the bounding box dropped", report.out_of_bbox)
    return flows, report


def _channel_minmax(x: np.ndarray) -> tuple[float, float]:
    return float(x.min()), float(x.max())


def fit_scale(flows: FlowSeries, train_slots: range) -> ScaleParams:
    if len(train_slots) == 0:
        raise DataError("normalization needs a non-empty training range")
    sl = slice(train_slots.start, train_slots.stop)
    return ScaleParams(*_channel_minmax(flows.inflow[sl]), *_channel_minmax(flows.outflow[sl]))


def _forward(x: np.ndarray, lo: float, hi: float, name: str) -> np.ndarray:
    if hi == lo:
        warnings.warn(f"{name} channel is constant over the training range; mapped to zeros", RuntimeWarning, stacklevel=3)
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize(flows: FlowSeries, train_slots: range) -> tuple[FlowSeries, ScaleParams]:
    """Min-max scale each channel jointly over regions, using training slots only."""
    scale = fit_scale(flows, train_slots)
    return apply_scale(flows, scale), scale


def apply_scale(flows: FlowSeries, scale: ScaleParams) -> FlowSeries:
    return FlowSeries(
        _forward(flows.inflow, scale.in_min, scale.in_max, "inflow"),
        _forward(flows.outflow, scale.out_min, scale.out_max, "outflow"),
        flows.start_slot_of_day,
    )


def denormalize(values, scale: ScaleParams, channel: str) -> np.ndarray:
    lo, hi = scale.channel(channel)
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def split(flows: FlowSeries, train_days: int, test_days: int, val_fraction: float, o: int) -> SplitRanges:
    """Chronological train/validation/test slot ranges.

    The validation range is the trailing ``val_fraction`` of the training days.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    available = flows.num_slots // o
    if train_days + test_days > available:
        raise DataError(f"split needs {train_days + test_days} days ({train_days} train + {test_days} test), only {available} available")
    val_days = int(round(train_days * val_fraction))
    if val_days < 1 or val_days >= train_days:
        raise DataError(f"val_fraction {val_fraction} of {train_days} days leaves an empty train or validation part")
    fit = train_days - val_days
    return SplitRanges(
        train=range(0, fit * o),
        val=range(fit * o, train_days * o),
        test=range(train_days * o, (train_days + test_days) * o),
    )


# files ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("", "-0") else s


def write_flows(out_dir, flows: FlowSeries, meta: dict) -> None:
    """Write ``flows.csv`` (slot, region ascending) and the ``meta.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["slot,region,inflow,outflow"]
    for t in range(flows.num_slots):
        ins, outs = flows.inflow[t], flows.outflow[t]
        lines.extend(f"{t},{i},{_fmt(ins[i])},{_fmt(outs[i])}" for i in range(flows.n))
    (out / FLOWS_FILE).write_text("\n".join(lines) + "\n")
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def flow_metadata(flows: FlowSeries, rows: int, cols: int, slot_minutes: int, scale: ScaleParams | None) -> dict:
    if rows * cols != flows.n:
        raise ValueError(f"grid {rows}x{cols} does not match {flows.n} regions")
    return {
        "n": flows.n,
        "rows": rows,
        "cols": cols,
        "slot_minutes": slot_minutes,
        "slots_per_day": 1440 // slot_minutes,
        "num_slots": flows.num_slots,
        "start_slot_of_day": flows.start_slot_of_day,
        "scale": None if scale is None else asdict(scale),
    }


META_KEYS = {"n", "rows", "cols", "slot_minutes", "slots_per_day", "num_slots", "start_slot_of_day", "scale"}


def check_metadata(meta: dict) -> None:
    missing = META_KEYS - set(meta)
    if missing:
        raise DataError(f"metadata lacks {sorted(missing)}")
    if meta["rows"] * meta["cols"] != meta["n"]:
        raise DataError("metadata rows*cols != n")
    if meta["slots_per_day"] * meta["slot_minutes"] != 1440:
        raise DataError("metadata slots_per_day inconsistent with slot_minutes")
    if not 0 <= meta["start_slot_of_day"] < meta["slots_per_day"]:
        raise DataError("metadata start_slot_of_day out of range")


def read_flows(flow_dir) -> tuple[FlowSeries, dict]:
    d = Path(flow_dir)
    meta_path, csv_path = d / META_FILE, d / FLOWS_FILE
    for p in (meta_path, csv_path):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found")
    meta = json.loads(meta_path.read_text())
    check_metadata(meta)
    n, num_slots = meta["n"], meta["num_slots"]
    try:
        table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{csv_path}: {exc}") from None
    if table.shape != (n * num_slots, 4):
        raise DataError(f"{csv_path}: expected {n * num_slots} rows of 4 columns, got {table.shape}")
    slots = table[:, 0].astype(np.int64)
    regions = table[:, 1].astype(np.int64)
    if np.any(slots != np.repeat(np.arange(num_slots), n)) or np.any(regions != np.tile(np.arange(n), num_slots)):
        raise DataError(f"{csv_path}: rows must be ordered by slot then region")
    flows = FlowSeries(table[:, 2].reshape(num_slots, n), table[:, 3].reshape(num_slots, n), meta["start_slot_of_day"])
    return flows, meta
