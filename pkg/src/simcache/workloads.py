"""Request-stream generation and trace ingestion.

Two families of workloads drive the simulator:

* IRM streams: Poisson arrivals of unit intensity, each request drawn
  i.i.d. from a fixed popularity field over a discrete space.
* Timestamped traces, optionally mapped onto a torus grid either by a
  seeded random permutation (``uniform``) or by assigning objects in
  popularity order along an expanding spiral from the grid center
  (``spiral``).  Traces whose records carry feature vectors skip grid
  mapping and become a :class:`~simcache.spaces.PointCatalog`.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from simcache.spaces import PointCatalog, TorusGrid

DEFAULT_BLOCK = 1 << 18


def grid_side(rings: int) -> int:
    """Side length L = 1 + 2*l*(l+1) that admits a perfect diamond tiling."""
    if rings < 1:
        raise ValueError("rings must be >= 1")
    return 1 + 2 * rings * (rings + 1)


def build_grid(rings: int, gamma: float = 1.0) -> TorusGrid:
    """Wrap-around grid sized so that k = L diamond balls tile it exactly."""
    return TorusGrid(grid_side(rings), gamma=gamma)


def homogeneous_rates(space) -> np.ndarray:
    return np.full(space.n, 1.0 / space.n)


def gaussian_rates(grid: TorusGrid, sigma: float) -> np.ndarray:
    """Rates proportional to exp(-d^2 / (2 sigma^2)), d = hops from center."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = grid.hops_from_center().astype(float)
    weights = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def empirical_rates(objects, n: int) -> np.ndarray:
    """Normalized request frequencies of an object-id sequence."""
    objects = np.asarray(objects, dtype=np.int64)
    if objects.size == 0:
        raise ValueError("empty request sequence")
    counts = np.bincount(objects, minlength=n).astype(float)
    return counts / counts.sum()


class IrmWorkload:
    """I.i.d. requests with Poisson(1) arrivals over a discrete space."""

    def __init__(self, space, rates):
        self.space = space
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.shape != (space.n,):
            raise ValueError("rates must have one entry per catalog object")
        if np.any(self.rates < 0):
            raise ValueError("rates must be non-negative")
        if abs(self.rates.sum() - 1.0) > 1e-12:
            raise ValueError("rates must sum to 1 (within 1e-12)")

    def blocks(self, horizon: int, rng, block: int = DEFAULT_BLOCK):
        """Yield (timestamps, objects) chunks totalling ``horizon`` requests."""
        now = 0.0
        remaining = int(horizon)
        while remaining > 0:
            m = min(block, remaining)
            gaps = rng.exponential(1.0, size=m)
            ts = now + np.cumsum(gaps)
            now = float(ts[-1])
            objs = rng.choice(self.space.n, size=m, p=self.rates)
            yield ts, objs.astype(np.int64)
            remaining -= m


class PhasedIrmWorkload:
    """IRM whose popularity field switches at given request indices."""

    def __init__(self, space, phase_rates, switch_at):
        self.space = space
        self.phases = [np.asarray(r, dtype=float) for r in phase_rates]
        self.switch_at = [int(s) for s in switch_at]
        if len(self.switch_at) != len(self.phases) - 1:
            raise ValueError("need one switch point between consecutive phases")
        # time-average popularity, used by rate-aware policies
        self.rates = np.mean(self.phases, axis=0)
        self.rates = self.rates / self.rates.sum()

    def blocks(self, horizon: int, rng, block: int = DEFAULT_BLOCK):
        bounds = self.switch_at + [int(horizon)]
        now = 0.0
        emitted = 0
        for phase, upto in zip(self.phases, bounds):
            while emitted < min(upto, horizon):
                m = min(block, min(upto, horizon) - emitted)
                gaps = rng.exponential(1.0, size=m)
                ts = now + np.cumsum(gaps)
                now = float(ts[-1])
                objs = rng.choice(self.space.n, size=m, p=phase)
                yield ts, objs.astype(np.int64)
                emitted += m


class SequenceWorkload:
    """Fixed request sequence replayed with its own timestamps."""

    def __init__(self, space, objects, timestamps=None, rates=None):
        self.space = space
        self.objects = np.asarray(objects, dtype=np.int64)
        if timestamps is None:
            timestamps = np.arange(1.0, self.objects.size + 1.0)
        self.timestamps = np.asarray(timestamps, dtype=float)
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        self.rates = (
            empirical_rates(self.objects, space.n) if rates is None else np.asarray(rates)
        )

    def __len__(self):
        return self.objects.size

    def blocks(self, horizon: int, rng=None, block: int = DEFAULT_BLOCK):
        horizon = min(int(horizon), self.objects.size)
        for start in range(0, horizon, block):
            end = min(start + block, horizon)
            yield self.timestamps[start:end], self.objects[start:end]


@dataclass
class Trace:
    """Timestamped request records, optionally with feature vectors."""

    timestamps: np.ndarray
    keys: list
    vectors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("trace timestamps must be non-decreasing")
        if len(self.keys) != self.timestamps.size:
            raise ValueError("one key per timestamp required")

    def __len__(self):
        return self.timestamps.size

    def distinct_keys(self) -> list:
        """Distinct keys in first-appearance order."""
        seen = {}
        for k in self.keys:
            if k not in seen:
                seen[k] = None
        return list(seen)

    def popularity_order(self) -> list:
        """Keys from most to least requested; ties by first appearance."""
        counts = Counter(self.keys)
        first = {}
        for i, k in enumerate(self.keys):
            first.setdefault(k, i)
        return sorted(counts, key=lambda k: (-counts[k], first[k]))


def load_trace_csv(path, min_count: int = 0) -> Trace:
    """Read ``timestamp,key[,v1..vp]`` records; drop keys seen < min_count times."""
    ts, keys, vecs = [], [], {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "timestamp":
                continue
            ts.append(float(row[0]))
            keys.append(row[1])
            if len(row) > 2:
                vecs.setdefault(row[1], np.array([float(v) for v in row[2:]]))
    if min_count > 1:
        counts = Counter(keys)
        keep = [i for i, k in enumerate(keys) if counts[k] >= min_count]
        ts = [ts[i] for i in keep]
        keys = [keys[i] for i in keep]
        vecs = {k: v for k, v in vecs.items() if counts.get(k, 0) >= min_count}
    return Trace(np.array(ts), keys, vecs)


def spiral_order(grid: TorusGrid) -> np.ndarray:
    """All grid ids ordered along an expanding norm-1 spiral from the center.

    Rings are visited by increasing radius; within a ring the walk starts
    at the point straight above the center and proceeds clockwise.  On the
    torus, far rings wrap onto points already visited; duplicates keep
    their first (closest-ring) position.
    """
    side = grid.side
    cr, cc = grid.coords(grid.center)
    order = [grid.center]
    seen = {grid.center}
    radius = 1
    while len(order) < grid.n:
        for x, y in _ring_offsets(radius):
            oid = ((cr - y) % side) * side + ((cc + x) % side)
            if oid not in seen:
                seen.add(oid)
                order.append(oid)
        radius += 1
    return np.array(order, dtype=np.int64)


def _ring_offsets(r: int):
    """Clockwise walk of the norm-1 ring of radius r, starting at (0, +r)."""
    pts = []
    pts += [(i, r - i) for i in range(r)]
    pts += [(r - i, -i) for i in range(r)]
    pts += [(-i, -(r - i)) for i in range(r)]
    pts += [(-(r - i), i) for i in range(r)]
    return pts


def map_trace(trace: Trace, grid: TorusGrid, mode: str, seed: int):
    """Map trace keys onto grid points; returns (object-id array, key->id map).

    ``uniform``: seeded random permutation of grid points.
    ``spiral``: most popular key at the center, then outward along the
    spiral, so nearby grid points get correlated popularity.
    """
    distinct = trace.distinct_keys()
    if len(distinct) > grid.n:
        raise ValueError(
            f"trace has {len(distinct)} objects, grid only fits {grid.n}"
        )
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        targets = rng.permutation(grid.n)[: len(distinct)]
        mapping = {k: int(t) for k, t in zip(distinct, targets)}
    elif mode == "spiral":
        order = spiral_order(grid)
        mapping = {k: int(order[i]) for i, k in enumerate(trace.popularity_order())}
    else:
        raise ValueError(f"unknown mapping mode: {mode}")
    objects = np.array([mapping[k] for k in trace.keys], dtype=np.int64)
    return objects, mapping


def trace_workload(trace: Trace, grid: TorusGrid, mode: str, seed: int) -> SequenceWorkload:
    objects, _ = map_trace(trace, grid, mode, seed)
    return SequenceWorkload(grid, objects, timestamps=trace.timestamps)


def vector_trace_workload(trace: Trace, norm: int = 2, gamma: float = 1.0) -> SequenceWorkload:
    """Feature-vector trace as a point catalog with metric approximation costs."""
    distinct = trace.distinct_keys()
    missing = [k for k in distinct if k not in trace.vectors]
    if missing:
        raise ValueError(f"{len(missing)} trace keys lack feature vectors")
    points = np.stack([trace.vectors[k] for k in distinct])
    catalog = PointCatalog(points, norm=norm, gamma=gamma)
    index = {k: i for i, k in enumerate(distinct)}
    objects = np.array([index[k] for k in trace.keys], dtype=np.int64)
    return SequenceWorkload(catalog, objects, timestamps=trace.timestamps)


def sample_irm(workload: IrmWorkload, horizon: int, rng):
    """Materialize one IRM stream as (timestamps, objects) arrays."""
    ts_parts, obj_parts = [], []
    for ts, objs in workload.blocks(horizon, rng):
        ts_parts.append(ts)
        obj_parts.append(objs)
    return np.concatenate(ts_parts), np.concatenate(obj_parts)


# -- rank correlation ------------------------------------------------------


def kendall_tau_b(a, b) -> float:
    """Kendall rank correlation with tie correction, in O(n log n).

    ``a`` and ``b`` are score sequences over the same items (higher score =
    more popular).  Returns a value in [-1, 1]; raises on empty input.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("need two equal-length non-empty score sequences")
    n = a.size
    order = np.lexsort((b, a))
    a_s, b_s = a[order], b[order]

    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(a_s)
    n2 = _tie_pairs(np.sort(b_s))
    n3 = _joint_tie_pairs(a_s, b_s)
    discordant = _inversions(b_s.copy())
    concordant = n0 - n1 - n2 + n3 - discordant

    denom = float(n0 - n1) * float(n0 - n2)
    if denom <= 0:
        return 0.0
    return float((concordant - discordant) / math.sqrt(denom))


def _tie_pairs(sorted_vals) -> int:
    total = 0
    run = 1
    for i in range(1, len(sorted_vals)):
        if sorted_vals[i] == sorted_vals[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def _joint_tie_pairs(a_s, b_s) -> int:
    total = 0
    run = 1
    for i in range(1, len(a_s)):
        if a_s[i] == a_s[i - 1] and b_s[i] == b_s[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def _inversions(values) -> int:
    """Merge-sort inversion count; pairs equal in value are not inversions."""
    n = len(values)
    if n < 2:
        return 0
    buf = np.empty_like(values)
    return _merge_count(values, buf, 0, n)


def _merge_count(v, buf, lo, hi) -> int:
    if hi - lo < 2:
        return 0
    mid = (lo + hi) // 2
    count = _merge_count(v, buf, lo, mid) + _merge_count(v, buf, mid, hi)
    i, j, k = lo, mid, lo
    while i < mid and j < hi:
        if v[j] < v[i]:  # strictly smaller: each remaining left item is inverted
            buf[k] = v[j]
            count += mid - i
            j += 1
        else:
            buf[k] = v[i]
            i += 1
        k += 1
    buf[k:hi] = v[j:hi] if i == mid else v[i:mid]
    v[lo:hi] = buf[lo:hi]
    return count


def popularity_drift(keys_or_trace) -> float:
    """Tau-b between first-half and second-half popularity rankings.

    Objects absent from a half count zero there (tied last).
    """
    keys = keys_or_trace.keys if isinstance(keys_or_trace, Trace) else list(keys_or_trace)
    if len(keys) < 2:
        raise ValueError("need at least two records")
    half = len(keys) // 2
    first = Counter(keys[:half])
    second = Counter(keys[half:])
    universe = sorted(set(first) | set(second), key=str)
    a = [first.get(k, 0) for k in universe]
    b = [second.get(k, 0) for k in universe]
    return kendall_tau_b(a, b)
