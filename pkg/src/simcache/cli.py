"""Command-line entry point.

Subcommands:

* ``simulate``      -- run policies over a workload, emit record CSVs
* ``offline``       -- clairvoyant optimal schedule for a request sequence
* ``bounds``        -- analytical bound / approximation report
* ``trace-analyze`` -- popularity ranking, drift, and grid mapping of a trace
* ``certify``       -- tessellation certificate for a cache configuration

Every output directory gets a JSON manifest (config hash, seed, versions)
next to the CSVs so results can be reproduced bit for bit.

Exit codes: 0 success, 2 malformed config, 3 scale-guard violation,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from simcache.bounds import (
    BallCostFn,
    approx_min_cost,
    certify_tessellation,
    lower_bound,
    tessellation_centers,
)
from simcache.costs import CostModel, expected_cost
from simcache.harness import (
    ConfigError,
    ExperimentConfig,
    build_space,
    build_workload,
    run_experiment,
    write_final_states_csv,
    write_manifest,
    write_records_csv,
)
from simcache.offline import InstanceTooLargeError, RequestSequence, dp_optimal
from simcache.workloads import (
    build_grid,
    grid_side,
    kendall_tau_b,
    load_trace_csv,
    map_trace,
    popularity_drift,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCALE = 3
EXIT_IO = 4


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(config: dict, overrides) -> dict:
    out = copy.deepcopy(config)
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {part!r} in override {text!r}")
        node[path[-1]] = value
    return out


def load_config(path: str, overrides=()) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    base = os.path.dirname(os.path.abspath(path))
    wl = raw.get("workload", {})
    if isinstance(wl, dict) and "path" in wl and not os.path.isabs(wl["path"]):
        wl["path"] = os.path.join(base, wl["path"])
    sp = raw.get("space", {})
    if isinstance(sp, dict) and "matrix_csv" in sp and not os.path.isabs(sp["matrix_csv"]):
        sp["matrix_csv"] = os.path.join(base, sp["matrix_csv"])
    return raw


def _stem(args) -> str:
    return os.path.splitext(os.path.basename(args.config))[0]


def cmd_simulate(args) -> int:
    raw = load_config(args.config, args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.replicas is not None:
        raw["replicas"] = args.replicas
    policies = raw.pop("policies", None)
    variants = {}
    if policies is not None:
        for spec in policies:
            if "name" not in spec:
                raise ConfigError("each entry in 'policies' needs a name")
            single = dict(raw)
            single["policy"] = spec
            variants[spec["name"]] = single
    elif "policy" in raw and "name" in raw["policy"]:
        variants[raw["policy"]["name"]] = raw
    else:
        raise ConfigError("config needs 'policy' (with a name) or 'policies'")

    os.makedirs(args.out, exist_ok=True)
    stem = _stem(args)
    for label, single in variants.items():
        cfg = ExperimentConfig.from_dict(single)
        results = run_experiment(cfg)
        space = build_workload(build_space(cfg.space), cfg.workload).space
        prefix = os.path.join(args.out, f"{stem}_{label}" if policies else stem)
        write_records_csv(prefix + "_records.csv", results)
        write_final_states_csv(prefix + "_final_state.csv", results, space)
        write_manifest(prefix + "_manifest.json", cfg)
        last = results[0].records[-1] if results[0].records else None
        if last is not None:
            print(f"{label}: t={last.t} inst_cost={last.inst_cost:.6g} "
                  f"acc_cost={last.acc_cost:.6g}")
    return EXIT_OK


def cmd_offline(args) -> int:
    raw = load_config(args.config, args.set)
    for key in ("space", "cost", "initial_state"):
        if key not in raw:
            raise ConfigError(f"offline config needs {key!r}")
    space = build_space(raw["space"])
    from simcache.harness import build_cost_model

    cm = build_cost_model(raw["cost"])
    if "sequence" in raw:
        seq = RequestSequence.of(raw["sequence"])
    elif "sequence_csv" in raw:
        seq = _read_sequence_csv(raw["sequence_csv"], args.config)
    else:
        raise ConfigError("offline config needs 'sequence' or 'sequence_csv'")
    sol = dp_optimal(seq, raw["initial_state"], space, cm)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, _stem(args) + "_schedule.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "request", "stored", "evicted", "charge", "state"])
        for i, d in enumerate(sol.decisions):
            w.writerow([
                i + 1, d.request, int(d.stored),
                "" if d.evicted is None else d.evicted,
                repr(d.charge), " ".join(map(str, sol.states[i + 1])),
            ])
    print(f"optimal total cost: {sol.total_cost!r}")
    print(f"optimal average cost: {sol.average_cost!r}")
    print(f"schedule: {path}")
    return EXIT_OK


def _read_sequence_csv(path: str, config_path: str) -> RequestSequence:
    if not os.path.isabs(path):
        path = os.path.join(os.path.dirname(os.path.abspath(config_path)), path)
    objs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "timestamp":
                continue
            objs.append(int(row[1]))
    return RequestSequence.of(objs)


def cmd_bounds(args) -> int:
    if not args.homogeneous:
        raise ConfigError("only --homogeneous bound reports are supported")
    grid = build_grid(args.rings, gamma=args.gamma)
    side = grid.side
    cm = CostModel(retrieval_cost=args.retrieval_cost)
    rates = np.full(grid.n, 1.0 / grid.n)
    density = 1.0 / grid.n  # total rate 1 spread over unit-area cells

    fn = BallCostFn(norm=1, dim=2, gamma=args.gamma, retrieval_cost=args.retrieval_cost)
    bound = lower_bound(fn, density, float(grid.n), args.k)
    field = np.full((side, side), density)
    uncapped = approx_min_cost(field, args.k, args.gamma)
    capped = approx_min_cost(field, args.k, args.gamma, retrieval_cost=args.retrieval_cost)

    rows = [
        ("grid_side", side),
        ("catalog", grid.n),
        ("k", args.k),
        ("gamma", args.gamma),
        ("retrieval_cost", args.retrieval_cost),
        ("ball_volume_bound", repr(bound)),
        ("lagrange_approx", repr(uncapped.value)),
        ("lagrange_approx_capped", repr(capped.value)),
    ]
    if args.k == side:
        centers = tessellation_centers(grid)
        cert = certify_tessellation(grid, centers)
        exact = expected_cost(grid, cm, rates, centers)
        rows += [
            ("tessellation_certified", int(bool(cert))),
            ("exact_tessellation_cost", repr(exact)),
        ]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bounds_report.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        w.writerows(rows)
    for name, value in rows:
        print(f"{name}: {value}")
    print(f"report: {path}")
    return EXIT_OK


def cmd_trace_analyze(args) -> int:
    trace = load_trace_csv(args.trace, min_count=args.min_count)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.trace))[0]

    order = trace.popularity_order()
    counts = {}
    for key in trace.keys:
        counts[key] = counts.get(key, 0) + 1
    with open(os.path.join(args.out, stem + "_popularity.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "key", "count"])
        for rank, key in enumerate(order, start=1):
            w.writerow([rank, key, counts[key]])

    drift = popularity_drift(trace)
    half = len(trace.keys) // 2
    with open(os.path.join(args.out, stem + "_drift.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        w.writerow(["records", len(trace)])
        w.writerow(["distinct_objects", len(order)])
        w.writerow(["half_size", half])
        w.writerow(["tau_b_first_vs_second_half", repr(drift)])
    print(f"popularity drift (tau-b between halves): {drift:.4f}")

    if args.grid_rings is not None:
        grid = build_grid(args.grid_rings)
        if len(order) > grid.n:
            raise InstanceTooLargeError(
                f"{len(order)} objects exceed the {grid.n}-point grid"
            )
        _, mapping = map_trace(trace, grid, args.mapping, args.map_seed)
        with open(os.path.join(args.out, stem + "_mapping.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "object_id", "row", "col"])
            for key, oid in mapping.items():
                r, c = grid.coords(oid)
                w.writerow([key, oid, r, c])
        print(f"mapped {len(mapping)} objects onto L={grid.side} grid ({args.mapping})")
    return EXIT_OK


def cmd_certify(args) -> int:
    grid = build_grid(args.rings, gamma=args.gamma)
    if args.centers_csv:
        centers = []
        with open(args.centers_csv, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "object_id":
                    continue
                centers.append(int(row[0]))
    elif args.pattern == "knight":
        centers = tessellation_centers(grid).tolist()
    else:
        raise ConfigError("certify needs --pattern knight or --centers-csv")
    cert = certify_tessellation(grid, centers)
    print(f"tessellation: {'true' if cert else 'false'}")
    print(f"radius: {cert.radius}  ball_points: {cert.ball_points}  "
          f"overcovered: {cert.overcovered}  uncovered: {cert.uncovered}")
    if cert:
        cm = CostModel(retrieval_cost=args.retrieval_cost)
        rates = np.full(grid.n, 1.0 / grid.n)
        cost = expected_cost(grid, cm, rates, centers)
        print(f"expected cost (homogeneous): {cost!r}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "certificate.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        w.writerow(["grid_side", grid.side])
        w.writerow(["is_tessellation", int(bool(cert))])
        w.writerow(["radius", cert.radius])
        w.writerow(["ball_points", cert.ball_points])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simcache",
        description="similarity-caching simulation and analysis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run policies over a workload")
    sim.add_argument("--config", required=True)
    sim.add_argument("--set", action="append", metavar="KEY=VALUE")
    sim.add_argument("--out", default=".")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replicas", type=int)
    sim.set_defaults(fn=cmd_simulate)

    off = sub.add_parser("offline", help="optimal schedule for a known sequence")
    off.add_argument("--config", required=True)
    off.add_argument("--set", action="append", metavar="KEY=VALUE")
    off.add_argument("--out", default=".")
    off.set_defaults(fn=cmd_offline)

    bnd = sub.add_parser("bounds", help="analytical bound/approximation report")
    bnd.add_argument("--homogeneous", action="store_true")
    bnd.add_argument("--rings", "--l", dest="rings", type=int, required=True)
    bnd.add_argument("--gamma", type=float, default=1.0)
    bnd.add_argument("--k", type=int, required=True)
    bnd.add_argument("--retrieval-cost", type=float, default=1000.0)
    bnd.add_argument("--out", default=".")
    bnd.set_defaults(fn=cmd_bounds)

    tra = sub.add_parser("trace-analyze", help="popularity, drift, grid mapping")
    tra.add_argument("--trace", required=True)
    tra.add_argument("--min-count", type=int, default=0)
    tra.add_argument("--grid-rings", "--grid-l", dest="grid_rings", type=int)
    tra.add_argument("--mapping", choices=["uniform", "spiral"], default="uniform")
    tra.add_argument("--map-seed", type=int, default=0)
    tra.add_argument("--out", default=".")
    tra.set_defaults(fn=cmd_trace_analyze)

    cer = sub.add_parser("certify", help="tessellation certificate")
    cer.add_argument("--rings", "--l", dest="rings", type=int, required=True)
    cer.add_argument("--gamma", type=float, default=1.0)
    cer.add_argument("--pattern", choices=["knight"])
    cer.add_argument("--centers-csv")
    cer.add_argument("--retrieval-cost", type=float, default=1000.0)
    cer.add_argument("--out", default=".")
    cer.set_defaults(fn=cmd_certify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InstanceTooLargeError as exc:
        print(f"scale guard: {exc}", file=sys.stderr)
        return EXIT_SCALE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
