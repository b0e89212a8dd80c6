"""Render simulation-result CSVs into the two standard figure styles.

* ``cost-curve``: one line per input records CSV (cost metric vs request
  count, log-x by default), with optional horizontal reference lines such
  as the optimal expected cost.
* ``grid-scatter``: the stored grid points of a final-state CSV, drawn on
  the torus so converged cache configurations can be inspected.

Rendering is deterministic: identical spec + inputs give byte-identical
SVG/PNG output (fixed hash salt, no timestamps embedded).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

RECORD_COLUMNS = {
    "t", "inst_cost", "acc_cost", "acc_approx_cost",
    "exact_hits", "approx_hits", "misses", "state_changes", "replica",
}
STATE_COLUMNS = {"replica", "object_id", "row", "col"}

# metric -> how to derive it from a records row
DERIVED_METRICS = {
    "acc_cost_per_request": lambda row: row["acc_cost"] / row["t"],
    "acc_approx_cost_per_request": lambda row: row["acc_approx_cost"] / row["t"],
}


class SpecError(ValueError):
    """Malformed plot spec or input schema mismatch."""


@dataclass
class PlotSpec:
    kind: str
    inputs: list
    metric: str = "inst_cost"
    log_x: bool = True
    log_y: bool = False
    reference_lines: list = field(default_factory=list)
    title: str = ""
    xlabel: str = "requests"
    ylabel: str = ""
    replica: int = 0
    grid_side: int | None = None

    @classmethod
    def load(cls, path: str) -> "PlotSpec":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec {path} is not valid JSON: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        if "kind" not in raw or "inputs" not in raw:
            raise SpecError("spec needs 'kind' and 'inputs'")
        spec = cls(**raw)
        if spec.kind not in ("cost-curve", "grid-scatter"):
            raise SpecError(f"unknown plot kind: {spec.kind}")
        base = os.path.dirname(os.path.abspath(path))
        for item in spec.inputs:
            if "csv" not in item:
                raise SpecError("every input needs a 'csv' path")
            if not os.path.isabs(item["csv"]):
                item["csv"] = os.path.join(base, item["csv"])
        return spec


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SpecError(f"{path} has no data rows")
    return rows


def _records_series(path: str, metric: str, replica: int):
    rows = _read_csv(path)
    cols = set(rows[0])
    if not RECORD_COLUMNS <= cols:
        raise SpecError(
            f"{path} lacks records columns {sorted(RECORD_COLUMNS - cols)}"
        )
    if metric not in rows[0] and metric not in DERIVED_METRICS:
        raise SpecError(f"unknown metric {metric!r}")
    ts, ys = [], []
    for raw in rows:
        if int(raw["replica"]) != replica:
            continue
        row = {k: float(raw[k]) for k in ("t", "inst_cost", "acc_cost", "acc_approx_cost")}
        ts.append(row["t"])
        ys.append(
            DERIVED_METRICS[metric](row) if metric in DERIVED_METRICS else float(raw[metric])
        )
    if not ts:
        raise SpecError(f"{path} has no rows for replica {replica}")
    return np.array(ts), np.array(ys)


def _state_points(path: str, replica: int):
    rows = _read_csv(path)
    cols = set(rows[0])
    if not STATE_COLUMNS <= cols:
        raise SpecError(f"{path} lacks final-state columns {sorted(STATE_COLUMNS - cols)}")
    pts = [
        (int(r["row"]), int(r["col"])) for r in rows if int(r["replica"]) == replica
    ]
    if not pts:
        raise SpecError(f"{path} has no rows for replica {replica}")
    return np.array(pts)


def _deterministic_rc():
    plt.rcdefaults()
    matplotlib.rcParams["svg.hashsalt"] = "simcache"
    matplotlib.rcParams["figure.figsize"] = (6.4, 4.2)
    matplotlib.rcParams["figure.dpi"] = 110
    matplotlib.rcParams["savefig.dpi"] = 110
    matplotlib.rcParams["font.size"] = 10


def render(spec: PlotSpec, out_path: str) -> str:
    """Draw the spec into ``out_path`` (.png or .svg); returns the path."""
    _deterministic_rc()
    fig, ax = plt.subplots()
    try:
        if spec.kind == "cost-curve":
            for item in spec.inputs:
                ts, ys = _records_series(item["csv"], spec.metric, spec.replica)
                ax.plot(ts, ys, label=item.get("label", os.path.basename(item["csv"])))
            for ref in spec.reference_lines:
                ax.axhline(
                    float(ref["value"]), color="black", linestyle="--", linewidth=1,
                    label=ref.get("label"),
                )
            if spec.log_x:
                ax.set_xscale("log")
            if spec.log_y:
                ax.set_yscale("log")
            ax.set_xlabel(spec.xlabel)
            ax.set_ylabel(spec.ylabel or spec.metric)
            ax.legend(loc="best")
        else:  # grid-scatter
            if len(spec.inputs) != 1:
                raise SpecError("grid-scatter takes exactly one final-state CSV")
            pts = _state_points(spec.inputs[0]["csv"], spec.replica)
            side = spec.grid_side or int(pts.max()) + 1
            ax.scatter(pts[:, 1], pts[:, 0], s=18, c="black", marker="o")
            ax.set_xlim(-0.5, side - 0.5)
            ax.set_ylim(-0.5, side - 0.5)
            ax.set_aspect("equal")
            ax.set_xlabel("col")
            ax.set_ylabel("row")
        if spec.title:
            ax.set_title(spec.title)
        fig.tight_layout()
        ext = os.path.splitext(out_path)[1].lower()
        if ext not in (".png", ".svg"):
            raise SpecError(f"output must be .png or .svg, got {ext!r}")
        metadata = {"Date": None} if ext == ".svg" else {"Software": None}
        fig.savefig(out_path, metadata=metadata)
    finally:
        plt.close(fig)
    return out_path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="render simcache result CSVs")
    ap.add_argument("--spec", required=True, help="plot spec JSON")
    ap.add_argument("--out", required=True, help="output .png or .svg")
    args = ap.parse_args(argv)
    try:
        spec = PlotSpec.load(args.spec)
        render(spec, args.out)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
