"""Object spaces: catalogs with an approximation-cost structure.

Three kinds are supported:

* ``FiniteSpace`` -- an explicit |X| x |X| matrix of approximation costs
  (``inf`` entries allowed).
* ``TorusGrid`` -- an L x L grid with wrap-around; the cost between two
  points is the minimum-hop (norm-1) distance raised to an exponent.
* ``ContinuousSpace`` -- points in R^p with cost ``||x-y||_q ** gamma``.

Objects in finite spaces and grids are integer ids (grid points are
numbered row-major); continuous objects are coordinate vectors.
"""

from __future__ import annotations

import csv
import math

import numpy as np

INF = math.inf


class FiniteSpace:
    """Catalog described by an explicit approximation-cost matrix."""

    kind = "finite"
    is_discrete = True

    def __init__(self, cost_matrix):
        m = np.asarray(cost_matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"cost matrix must be square, got shape {m.shape}")
        if np.any(np.diag(m) != 0.0):
            raise ValueError("cost matrix diagonal must be zero (C_a(x,x)=0)")
        if np.any(m < 0):
            raise ValueError("approximation costs must be non-negative")
        self.matrix = m
        self.n = m.shape[0]

    def __len__(self):
        return self.n

    def _check(self, x):
        x = int(x)
        if not 0 <= x < self.n:
            raise ValueError(f"object id {x} outside catalog [0, {self.n})")
        return x

    def cost(self, x, y) -> float:
        return float(self.matrix[self._check(x), self._check(y)])

    def costs_from(self, x) -> np.ndarray:
        """Costs C_a(z, x) for every catalog object z (column of the matrix)."""
        return self.matrix[:, self._check(x)]

    def costs_to(self, x, ids) -> np.ndarray:
        """Costs C_a(x, y) for each candidate approximator y in ``ids``."""
        return self.matrix[self._check(x), ids]

    @classmethod
    def from_csv(cls, path) -> "FiniteSpace":
        """Load a cost matrix from CSV; the token ``inf`` marks infinite cost."""
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                rows.append([float(v) for v in row])
        return cls(np.array(rows, dtype=float))


class TorusGrid:
    """L x L grid with wrap-around; cost = (min-hop distance) ** gamma.

    Grid points are objects 0..L*L-1 in row-major order; (row, col)
    tuples are accepted wherever an object id is expected.
    """

    kind = "torus-grid"
    is_discrete = True

    def __init__(self, side: int, gamma: float = 1.0):
        if side < 1:
            raise ValueError("grid side must be >= 1")
        if gamma < 0:
            raise ValueError("cost exponent must be >= 0")
        self.side = int(side)
        self.gamma = float(gamma)
        self.n = self.side * self.side
        rng_axis = np.arange(self.side)
        axis = np.minimum(rng_axis, self.side - rng_axis)  # wrap-around per axis
        d = axis[:, None] + axis[None, :]
        self._base_costs = self._power(d)
        self._axis_dist = axis.astype(np.int64)
        ids = np.arange(self.n, dtype=np.int64)
        self._row_of = ids // self.side
        self._col_of = ids % self.side

    def __len__(self):
        return self.n

    def _power(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if self.gamma == 1.0:
            return d.copy() if d.base is not None else d
        c = d ** self.gamma
        if self.gamma == 0.0:
            c = np.where(d > 0, c, 0.0)
        return c

    def object_id(self, point) -> int:
        if isinstance(point, (int, np.integer)):
            oid = int(point)
            if not 0 <= oid < self.n:
                raise ValueError(f"object id {oid} outside catalog [0, {self.n})")
            return oid
        r, c = point
        return (int(r) % self.side) * self.side + (int(c) % self.side)

    def coords(self, oid: int) -> tuple[int, int]:
        return divmod(int(oid), self.side)

    @property
    def center(self) -> int:
        mid = self.side // 2
        return mid * self.side + mid

    def hop_distance(self, x, y) -> int:
        rx, cx = self.coords(self.object_id(x))
        ry, cy = self.coords(self.object_id(y))
        dr = abs(rx - ry)
        dc = abs(cx - cy)
        return min(dr, self.side - dr) + min(dc, self.side - dc)

    def cost(self, x, y) -> float:
        return float(self._power(self.hop_distance(x, y)))

    def costs_from(self, x) -> np.ndarray:
        """Costs from every grid point to x, as a flat length-n vector.

        The cost field around x is the translated field around the origin,
        so this is two rolls of the precomputed base grid.
        """
        r, c = self.coords(self.object_id(x))
        return np.roll(np.roll(self._base_costs, r, axis=0), c, axis=1).ravel()

    def costs_to(self, x, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        r, c = self.coords(self.object_id(x))
        d = self._axis_dist[(self._row_of[ids] - r) % self.side]
        d = d + self._axis_dist[(self._col_of[ids] - c) % self.side]
        return self._power(d)

    def hops_from_center(self) -> np.ndarray:
        """Hop distance of every grid point from the central point."""
        mid = self.side // 2
        axis = np.abs(np.arange(self.side) - mid)
        axis = np.minimum(axis, self.side - axis)
        return (axis[:, None] + axis[None, :]).ravel()


class ContinuousSpace:
    """Points in R^p with cost h(||x-y||_q) for a power law h(d) = d**gamma."""

    kind = "continuous-metric"
    is_discrete = False

    def __init__(self, dim: int, norm: int = 2, gamma: float = 1.0):
        if norm not in (1, 2):
            raise ValueError("norm selector must be 1 or 2")
        if gamma < 0:
            raise ValueError("cost exponent must be >= 0")
        self.dim = int(dim)
        self.norm = int(norm)
        self.gamma = float(gamma)

    def _dist(self, delta) -> np.ndarray:
        delta = np.atleast_2d(np.asarray(delta, dtype=float))
        if self.norm == 1:
            return np.abs(delta).sum(axis=1)
        return np.sqrt((delta * delta).sum(axis=1))

    def cost(self, x, y) -> float:
        d = self._dist(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))[0]
        if self.gamma == 0.0:
            return 0.0 if d == 0 else 1.0
        return float(d ** self.gamma)

    def costs_to(self, x, points) -> np.ndarray:
        """Costs from x to each row of the (m, dim) matrix ``points``."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        d = self._dist(pts - np.asarray(x, dtype=float))
        c = d ** self.gamma
        if self.gamma == 0.0:
            c = np.where(d > 0, c, 0.0)
        return c


class PointCatalog:
    """Finite catalog of points in a continuous metric space.

    Used for feature-vector traces: the distinct trace vectors become
    objects 0..m-1 and the approximation cost is the metric cost between
    their coordinates.  Behaves like a discrete space but never builds
    the m x m cost matrix.
    """

    kind = "point-catalog"
    is_discrete = True

    def __init__(self, points, norm: int = 2, gamma: float = 1.0):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError("points must be an (m, p) array")
        self.metric = ContinuousSpace(self.points.shape[1], norm, gamma)
        self.n = self.points.shape[0]

    def __len__(self):
        return self.n

    def cost(self, x, y) -> float:
        return self.metric.cost(self.points[int(x)], self.points[int(y)])

    def costs_from(self, x) -> np.ndarray:
        return self.metric.costs_to(self.points[int(x)], self.points)

    def costs_to(self, x, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return self.metric.costs_to(self.points[int(x)], self.points[ids])


def load_rates_csv(path, n: int | None = None) -> np.ndarray:
    """Read an (object_id, rate) CSV into a dense rate vector."""
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "object_id":
                continue
            pairs.append((int(row[0]), float(row[1])))
    if not pairs:
        raise ValueError(f"no rates found in {path}")
    size = n if n is not None else max(i for i, _ in pairs) + 1
    rates = np.zeros(size)
    for i, r in pairs:
        rates[i] = r
    return rates
