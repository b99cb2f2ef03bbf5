"""Command-line interface: ``sttis <command> ...``.

Exit codes: 0 success, 2 usage or I/O problem, 3 invalid data,
4 model or pipeline precondition (e.g. not enough history for a slot).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DataError, PreconditionError, SttisError
from .graph import RegionGraph, build_graph, validate
from .ingest import (
    FlowSeries, ScaleParams, SplitRanges, apply_scale, denormalize, flow_metadata, normalize, parse_timestamp,
    parse_trips, read_flows, split, write_flows,
)
from .model import STTIS, ContextBatch
from .pipeline import (
    SampleConfig, assemble_batch, evaluate, ha_baseline, synth_generate, train, write_epoch_log,
)
from .similarity import read_matrix, similarity_matrix, write_similarity

log = logging.getLogger("sttis")

CHECKPOINT_FILE = "model.ckpt"
EPOCH_LOG_FILE = "epochs.csv"


# shared helpers -------------------------------------------------------------------

def _config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def _load_flows(flow_dir) -> tuple[FlowSeries, int]:
    flows, meta = read_flows(flow_dir)
    return flows, int(meta["slots_per_day"])


def _ranges(cfg: RunConfig, flows: FlowSeries, o: int) -> SplitRanges:
    s = cfg.split
    return split(flows, s.train_days, s.test_days, s.val_fraction, o)


def _load_model(args) -> STTIS:
    model = STTIS.load(args.model, RegionGraph.load(args.graph))
    if "scale" not in model.meta:
        raise DataError(f"{args.model}: checkpoint carries no scaling parameters")
    return model


def _context(model: STTIS, flows: FlowSeries, slot: int) -> ContextBatch:
    """Normalized inputs for one slot; errors if the slot or its history is missing."""
    if not 0 <= slot < flows.num_slots:
        raise PreconditionError(f"slot {slot} outside the data (0..{flows.num_slots - 1})")
    scale = ScaleParams(**model.meta["scale"])
    return assemble_batch(apply_scale(flows, scale), [slot], SampleConfig.from_model(model.cfg), with_truth=False)


def _grid_shape(n: int) -> tuple[int, int]:
    """Most square rows x cols factorisation of n with rows <= cols."""
    rows = max(r for r in range(1, math.isqrt(n) + 1) if n % r == 0)
    return rows, n // rows


def _write_csv(path, header: str, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        fh.writelines(line + "\n" for line in rows)


# commands -------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _config(args.config)
    grid = cfg.grid.spec()
    if grid.bbox is None:
        raise ConfigError("grid.bbox is required to map coordinates to regions")
    origin = cfg.grid.origin
    if isinstance(origin, str):
        origin = parse_timestamp(origin)
    if not Path(args.trips).is_file():
        raise FileNotFoundError(f"trip file {args.trips} not found")
    flows, report = parse_trips(args.trips, grid, origin=origin, num_slots=cfg.grid.num_slots)
    out = Path(args.out)
    write_flows(out, flows, flow_metadata(flows, grid.rows, grid.cols, grid.slot_minutes, None))
    summary = {"rows": report.rows, "parsed": report.parsed, "out_of_bbox": report.out_of_bbox,
               "malformed": [{"line": line, "error": msg} for line, msg in report.malformed]}
    (out / "ingest_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    cfg.echo(out)
    print(f"{report.parsed} trips -> {flows.num_slots} slots x {flows.n} regions in {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    slot_minutes = cfg.grid.slot_minutes
    o = 1440 // slot_minutes
    flows = synth_generate(args.n, args.days, o, args.seed)
    rows, cols = _grid_shape(args.n)
    out = Path(args.out)
    write_flows(out, flows, flow_metadata(flows, rows, cols, slot_minutes, None))
    cfg.with_overrides("grid", rows=rows, cols=cols).echo(out)
    print(f"{args.days} days x {o} slots x {args.n} regions ({rows}x{cols}) in {out}")
    return 0


def cmd_graph(args) -> int:
    cfg = _config(args.config).with_overrides("graph", seed=args.seed)
    flows, o = _load_flows(args.flows)
    ranges = _ranges(cfg, flows, o)
    sim = similarity_matrix(flows, ranges.train, o)
    graph = build_graph(sim, seed=cfg.graph.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    graph.save(out)
    if args.similarity:
        write_similarity(args.similarity, sim)
    cfg.echo(out.parent)
    print(f"graph: {graph.n} regions, {len(graph.hubs)} hubs, {graph.num_edges} edges -> {out}")
    if args.validate:
        report = validate(graph)
        print("\n".join(report.lines()))
        if not report.passed:
            raise DataError("graph validation failed")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config).with_overrides("train", epochs=args.epochs, seed=args.seed)
    flows, o = _load_flows(args.flows)
    graph = RegionGraph.load(args.graph)
    if graph.n != flows.n:
        raise DataError(f"graph has {graph.n} regions, flows {flows.n}")
    ranges = _ranges(cfg, flows, o)
    model_cfg = cfg.model_config(flows.n, o)
    flows_norm, scale = normalize(flows, ranges.train)
    t = cfg.train
    result = train(flows_norm, graph, model_cfg, ranges.train, ranges.val,
                   epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=t.seed)
    result.model.meta = {"scale": asdict(scale), "best_epoch": result.best_epoch}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.model.save(out / CHECKPOINT_FILE)
    write_epoch_log(out / EPOCH_LOG_FILE, result.log)
    cfg.echo(out)
    if result.log:
        best = result.log[result.best_epoch - 1]
        print(f"best epoch {result.best_epoch}: train {best.train_loss:.5f} val {best.val_loss:.5f} -> {out / CHECKPOINT_FILE}")
    else:
        print(f"no epochs run; initial parameters -> {out / CHECKPOINT_FILE}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args.config).with_overrides("evaluate", range=args.range, threshold=args.threshold)
    model = _load_model(args)
    flows, o = _load_flows(args.flows)
    slots = getattr(_ranges(cfg, flows, o), cfg.evaluate.range)
    scale = ScaleParams(**model.meta["scale"])
    metrics = evaluate(model, flows, scale, slots, cfg.evaluate.threshold)
    baseline = ha_baseline(flows, slots, o, threshold=cfg.evaluate.threshold)
    doc = {"range": cfg.evaluate.range, "slots": [slots.start, slots.stop],
           "model": asdict(metrics), "ha": asdict(baseline)}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
        cfg.echo(out)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args)
    flows, _ = _load_flows(args.flows)
    pred = model.predict(_context(model, flows, args.slot))[0]
    scale = ScaleParams(**model.meta["scale"])
    inflow = denormalize(pred[:, 0], scale, "in")
    outflow = denormalize(pred[:, 1], scale, "out")
    rows = [f"{i},{inflow[i]:.6f},{outflow[i]:.6f}" for i in range(model.cfg.n)]
    if args.out:
        _write_csv(args.out, "region,inflow_hat,outflow_hat", rows)
        _config(args.config).echo(Path(args.out).parent)
    else:
        sys.stdout.write("region,inflow_hat,outflow_hat\n" + "".join(r + "\n" for r in rows))
    return 0


def cmd_attention(args) -> int:
    model = _load_model(args)
    flows, _ = _load_flows(args.flows)
    n = model.cfg.n
    if args.region is not None and not 0 <= args.region < n:
        raise PreconditionError(f"region {args.region} out of range for {n} regions")
    batch = _context(model, flows, args.slot)
    trace: dict = {}
    model.forward(batch, trace=trace)
    edges = model.edges
    keep_edge = np.ones(edges.num_edges, dtype=bool)
    if args.region is not None:
        # in-influence (edges into the region) and out-influence (edges out of it)
        keep_edge = (edges.src == args.region) | (edges.dst == args.region)
    dli_rows = []
    for layer, weights in enumerate(trace["dli"]):  # weights: (B=1, M, E)
        for head in range(weights.shape[1]):
            for e in np.flatnonzero(keep_edge):
                dli_rows.append(f"{head},{layer},{edges.src[e]},{edges.dst[e]},{weights[0, head, e]:.9g}")
    beta = trace["dlm"][0]  # (Z, n, Q)
    context = batch.slots[0, :-1]
    regions = range(n) if args.region is None else [args.region]
    dlm_rows = [
        f"{head},{i},{context[q]},{beta[head, i, q]:.9g}"
        for head in range(beta.shape[0]) for i in regions for q in range(beta.shape[2])
    ]
    out = Path(args.out)
    _write_csv(out / "dli_attention.csv", "head,layer,src,dst,score", dli_rows)
    _write_csv(out / "dlm_attention.csv", "head,region,context_slot,weight", dlm_rows)
    _config(args.config).echo(out)
    print(f"{len(dli_rows)} DLI rows, {len(dlm_rows)} DLM rows -> {out}")
    return 0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise DataError(f"matrices differ in size: {a.size} vs {b.size}")
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DataError("Pearson correlation is undefined for zero-variance input")
    return float(np.corrcoef(a, b)[0, 1])


def cmd_correlate(args) -> int:
    a, b = read_matrix(args.a), read_matrix(args.b)
    if a.shape != b.shape:
        raise DataError(f"matrix shapes differ: {a.shape} vs {b.shape}")
    print(f"{pearson(a, b):.4f}")
    return 0


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="sttis", description="Sparse spatial-temporal traffic forecasting.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    def config_flag(p):
        p.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")

    def model_flags(p):
        p.add_argument("--model", required=True, help="checkpoint written by train")
        p.add_argument("--flows", required=True, help="flow directory (flows.csv + meta.json)")
        p.add_argument("--graph", required=True, help="graph.json used for training")

    p = command("ingest", cmd_ingest, "aggregate trip records into per-region inflow/outflow series")
    p.add_argument("--trips", required=True, help="trip CSV with origin/destination coordinates and times")
    p.add_argument("--config", required=True, help="run configuration JSON; grid.rows, grid.cols and grid.bbox are required")
    p.add_argument("--out", required=True, help="output flow directory")

    p = command("synth", cmd_synth, "write a synthetic flow directory")
    p.add_argument("--n", type=int, required=True, help="number of regions (>= 4)")
    p.add_argument("--days", type=int, required=True, help="number of days")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output flow directory")
    config_flag(p)

    p = command("graph", cmd_graph, "build the similarity-sampled region graph")
    p.add_argument("--flows", required=True, help="flow directory")
    p.add_argument("--seed", type=int, default=None, help="star-hub seed (overrides graph.seed)")
    p.add_argument("--out", required=True, help="graph JSON path")
    p.add_argument("--similarity", help="also write the similarity matrix CSV here")
    p.add_argument("--validate", action="store_true", help="print the invariant report; exit 3 if any fails")
    config_flag(p)

    p = command("train", cmd_train, "train a model and keep the best-validation checkpoint")
    p.add_argument("--flows", required=True, help="flow directory")
    p.add_argument("--graph", required=True, help="graph JSON")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and epochs.csv")
    p.add_argument("--epochs", type=int, default=None, help="overrides train.epochs")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    config_flag(p)

    p = command("evaluate", cmd_evaluate, "RMSE/MAPE of a checkpoint and of the historical average")
    model_flags(p)
    p.add_argument("--range", choices=("val", "test"), default=None, help="overrides evaluate.range")
    p.add_argument("--threshold", type=float, default=None, help="overrides evaluate.threshold")
    p.add_argument("--out", help="directory for metrics.json")
    config_flag(p)

    p = command("predict", cmd_predict, "forecast every region's inflow/outflow at one slot")
    model_flags(p)
    p.add_argument("--slot", type=int, required=True, help="target slot index")
    p.add_argument("--out", help="CSV path (standard output when omitted)")
    config_flag(p)

    p = command("attention", cmd_attention, "export DLI and DLM attention weights at one slot")
    model_flags(p)
    p.add_argument("--slot", type=int, required=True, help="target slot index")
    p.add_argument("--region", type=int, default=None, help="keep only rows involving this region")
    p.add_argument("--out", required=True, help="output directory")
    config_flag(p)

    p = command("correlate", cmd_correlate, "Pearson correlation of two equally shaped CSV matrices")
    p.add_argument("--a", required=True, help="first matrix CSV")
    p.add_argument("--b", required=True, help="second matrix CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (SttisError, OSError, ValueError) as exc:
        print(f"sttis {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, SttisError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 2
    return 3  # remaining ValueErrors (corrupt checkpoint, bad numbers) are data problems
