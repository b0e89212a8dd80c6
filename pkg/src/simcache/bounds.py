"""Analytical machinery: ball costs, optimality certificates, stationary analysis.

The continuous-space story: serving a uniform request field from k cache
slots costs at least what k equal-volume balls would, because a ball is
the cheapest shape a single stored object can serve (``ball_cost_F``,
``lower_bound``).  Cache states whose equal balls tile the space exactly
are optimal (``certify_tessellation``), and a Lagrange allocation of
slots to demand gives a closed-form approximation of the minimum cost for
arbitrary smooth demand fields (``approx_min_cost``).

For queue caches with probabilistic insertion, ``cta_ea_solve`` models
the cache as a TTL system: a characteristic time is calibrated so the
stationary occupancy matches the capacity, and the induced Markov chain
over content sets tells which configurations survive as the insertion
probability vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.integrate
import scipy.linalg

from simcache.costs import INF, CostModel, ExpectedCostTracker
from simcache.offline import InstanceTooLargeError

_GAMMA_FN = math.gamma


def _unit_ball_volume(dim: int, norm: int) -> float:
    if norm == 1:
        return 2.0 ** dim / math.factorial(dim)
    return math.pi ** (dim / 2.0) / _GAMMA_FN(dim / 2.0 + 1.0)


@dataclass(frozen=True)
class BallCostFn:
    """Service cost integrated over a ball of given volume around its center.

    F(v) = integral over the norm ball B(0, v) of min(||z||^gamma, C_r).
    Non-negative, F(0) = 0, non-decreasing and convex in the volume.
    """

    norm: int = 1
    dim: int = 2
    gamma: float = 1.0
    retrieval_cost: float = INF
    mode: str = "auto"  # auto | closed-form | quadrature

    QUAD_REL_TOL = 1e-6

    def __post_init__(self):
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.mode not in ("auto", "closed-form", "quadrature"):
            raise ValueError(f"bad evaluation mode: {self.mode}")

    @property
    def ball_coefficient(self) -> float:
        return _unit_ball_volume(self.dim, self.norm)

    @property
    def cap_radius(self) -> float:
        """Distance at which approximating costs as much as retrieving."""
        if self.retrieval_cost == INF:
            return INF
        return self.retrieval_cost ** (1.0 / self.gamma)

    def radius(self, volume: float) -> float:
        return (volume / self.ball_coefficient) ** (1.0 / self.dim)

    def __call__(self, volume: float) -> float:
        if volume < 0:
            raise ValueError("volume must be >= 0")
        if volume == 0.0:
            return 0.0
        plane_diamond = self.dim == 2 and self.norm == 1
        if self.mode == "closed-form" and not plane_diamond:
            raise ValueError("closed form only covers dim=2, norm=1")
        if self.mode == "quadrature" or not plane_diamond:
            return self._quadrature(volume)
        return self._closed_form(volume)

    def _closed_form(self, volume: float) -> float:
        # plane + diamond balls: area 2 r^2, uncapped integral 4 r^(g+2)/(g+2)
        r = self.radius(volume)
        d_bar = self.cap_radius
        g = self.gamma
        if r <= d_bar:
            return 4.0 * r ** (g + 2.0) / (g + 2.0)
        inner = 4.0 * d_bar ** (g + 2.0) / (g + 2.0)
        return inner + self.retrieval_cost * (volume - 2.0 * d_bar ** 2)

    def _quadrature(self, volume: float) -> float:
        c, p, g = self.ball_coefficient, self.dim, self.gamma
        r = self.radius(volume)
        cap = self.retrieval_cost

        def shell(rho):
            return min(rho ** g, cap) * c * p * rho ** (p - 1.0)

        split = [self.cap_radius] if 0.0 < self.cap_radius < r else None
        value, _ = scipy.integrate.quad(
            shell, 0.0, r, points=split, epsrel=self.QUAD_REL_TOL, limit=200
        )
        return value


def ball_cost_F(fn: BallCostFn, volume: float) -> float:
    return fn(volume)


def lower_bound(fn: BallCostFn, rate_density: float, domain_volume: float, k: int) -> float:
    """Floor on the expected cost of any k-slot state under constant demand."""
    if k <= 0:
        raise ValueError("k must be >= 1")
    return rate_density * k * fn(domain_volume / k)


@dataclass(frozen=True)
class TessellationCertificate:
    is_tessellation: bool
    radius: int
    ball_points: int
    overcovered: int
    uncovered: int

    def __bool__(self):
        return self.is_tessellation


def certify_tessellation(grid, state) -> TessellationCertificate:
    """Check that equal hop-distance balls around the state tile the grid.

    The candidate radius is the covering radius of the state; the state
    tiles iff every grid point then lies in exactly one ball.  A positive
    certificate means the state is optimal under homogeneous demand.
    """
    centers = np.asarray(sorted({int(s) for s in state}), dtype=np.int64)
    if centers.size == 0:
        raise ValueError("state is empty")
    dists = np.stack([_hops_from(grid, int(c)) for c in centers])
    nearest = dists.min(axis=0)
    radius = int(nearest.max())
    counts = (dists <= radius).sum(axis=0)
    over = int((counts > 1).sum())
    under = int((counts == 0).sum())
    ok = over == 0 and under == 0
    per_ball = int((dists[0] <= radius).sum()) if ok else 0
    return TessellationCertificate(ok, radius, per_ball, over, under)


def _hops_from(grid, center: int) -> np.ndarray:
    r, c = grid.coords(center)
    side = grid.side
    dr = np.abs(np.arange(side) - r)
    dr = np.minimum(dr, side - dr)
    dc = np.abs(np.arange(side) - c)
    dc = np.minimum(dc, side - dc)
    return (dr[:, None] + dc[None, :]).ravel()


def tessellation_centers(grid) -> np.ndarray:
    """The lattice of L centers generated by (l, l+1) steps, which tiles
    any grid of side L = 1 + 2 l (l+1) with diamond balls of radius l."""
    side = grid.side
    l = int(round((math.sqrt(2 * side - 1) - 1) / 2))
    if 1 + 2 * l * (l + 1) != side:
        raise ValueError(f"side {side} is not of the form 1 + 2l(l+1)")
    pts = {((t * l) % side) * side + ((t * (l + 1)) % side) for t in range(side)}
    if len(pts) != side:
        raise ValueError("degenerate center lattice")
    return np.array(sorted(pts), dtype=np.int64)


def zeta_coefficient(gamma: float) -> float:
    """Constant in the per-cell cost of a diamond of area 1/k: zeta * k^-(g+2)/2."""
    return 2.0 ** ((2.0 - gamma) / 2.0) / (gamma + 2.0)


@dataclass(frozen=True)
class ApproxMinCost:
    value: float
    lambda_star: float | None   # demand threshold; None when nothing is truncated
    covered_fraction: float     # fraction of total demand in cached regions


def approx_min_cost(field, k: int, gamma: float, retrieval_cost: float = INF) -> ApproxMinCost:
    """Lagrange-allocation approximation of the minimum expected cost.

    ``field`` is a grid of per-unit-area request densities.  With
    unbounded retrieval cost, slots are spread proportionally to
    lambda^(2/(gamma+2)) and the cost has a closed form.  With finite
    retrieval cost, regions whose demand falls below a threshold
    lambda_star get no slots at all and simply pay the retrieval cost;
    the threshold is the fixed point of the slot-allocation constraint,
    found by bisection.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if k <= 0:
        raise ValueError("k must be >= 1")
    lam = np.asarray(field, dtype=float).ravel()
    if np.any(lam < 0):
        raise ValueError("densities must be non-negative")
    total = lam.sum()
    zeta = zeta_coefficient(gamma)
    expo = 2.0 / (gamma + 2.0)

    def eq11(mask) -> float:
        s = float((lam[mask] ** expo).sum())
        return zeta * k ** (-gamma / 2.0) * s ** ((gamma + 2.0) / 2.0)

    everything = np.ones(lam.size, dtype=bool)
    if retrieval_cost == INF:
        return ApproxMinCost(eq11(everything), None, 1.0)

    k_bar = 1.0 / (2.0 * retrieval_cost ** (2.0 / gamma))

    def imbalance(lam_star: float) -> float:
        # positive when every region above the threshold can get >= k_bar slots
        covered = lam > lam_star
        return k * lam_star ** expo - k_bar * float((lam[covered] ** expo).sum())

    positive = lam[lam > 0]
    if positive.size == 0:
        return ApproxMinCost(0.0, None, 1.0)
    lo = float(positive.min()) * (1.0 - 1e-6)
    hi = float(positive.max())
    if imbalance(lo) >= 0.0:
        # even the least popular region earns a full-size allocation
        return ApproxMinCost(eq11(everything), None, 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if imbalance(mid) >= 0.0:
            hi = mid
        else:
            lo = mid
    lam_star = 0.5 * (lo + hi)
    covered = lam > lam_star
    value = eq11(covered) + retrieval_cost * float(lam[~covered].sum())
    covered_fraction = float(lam[covered].sum() / total) if total > 0 else 1.0
    return ApproxMinCost(value, float(lam_star), covered_fraction)


# -- characteristic-time / exponentialization analysis ----------------------


def mean_sojourn_time(delta_cost: float, retrieval_cost: float, tc: float) -> float:
    """Expected unrefreshed residence time of an object worth ``delta_cost``.

    (exp(delta * T_c / C_r) - 1) / (delta / C_r); tends to T_c as the
    object's marginal value vanishes and grows exponentially with it.
    """
    if delta_cost < 0:
        raise ValueError("marginal cost reduction cannot be negative")
    arg = delta_cost * tc / retrieval_cost
    if arg == 0.0:
        return tc
    if arg > 700.0:
        return INF
    return math.expm1(arg) / (delta_cost / retrieval_cost)


@dataclass
class CtaEaModel:
    """TTL-approximation model of a probabilistic-insertion queue cache."""

    space: object
    cm: CostModel
    rates: np.ndarray
    k: int
    q: float
    slack: int = 3  # soft-capacity headroom above k in the state space

    MAX_CATALOG = 12

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if self.space.n > self.MAX_CATALOG:
            raise InstanceTooLargeError(
                f"exact subset enumeration needs |X| <= {self.MAX_CATALOG}"
            )
        if not 0 < self.q <= 1:
            raise ValueError("q must be in (0, 1]")
        if not 1 <= self.k <= self.space.n:
            raise ValueError("need 1 <= k <= |X|")


@dataclass
class CtaEaSolution:
    characteristic_time: float
    state_probs: dict
    content_probs: np.ndarray
    occupancy_residual: float


def _capped_service_matrix(space, cm) -> np.ndarray:
    cols = np.empty((space.n, space.n))
    for y in range(space.n):
        cols[:, y] = space.costs_from(y)
    return np.minimum(cols, cm.chi)


class _SubsetCosts:
    """Expected cost of arbitrary subsets, memoized (empty set allowed)."""

    def __init__(self, space, cm, rates):
        self.cols = _capped_service_matrix(space, cm)
        self.rates = np.asarray(rates, dtype=float)
        self.chi = cm.chi
        self._memo = {}

    def cost(self, state: frozenset) -> float:
        got = self._memo.get(state)
        if got is None:
            if state:
                svc = self.cols[:, sorted(state)].min(axis=1)
            else:
                svc = np.full(self.rates.size, self.chi)
            got = float(self.rates @ svc)
            self._memo[state] = got
        return got

    def service(self, x: int, state: frozenset) -> float:
        if not state:
            return self.chi
        return float(self.cols[x, sorted(state)].min())


def cta_ea_solve(model: CtaEaModel, occupancy_tol: float = 1e-8) -> CtaEaSolution:
    """Calibrate the characteristic time and return the stationary law.

    Bisects the characteristic time until the expected number of stored
    objects equals the capacity, solving the content-set Markov chain
    exactly at each step.  States are subsets with at most k + slack
    objects (the TTL view has a soft capacity).
    """
    n = model.space.n
    limit = min(n, model.k + model.slack)
    states = [frozenset()]
    for size in range(1, limit + 1):
        states.extend(frozenset(c) for c in combinations(range(n), size))
    index = {s: i for i, s in enumerate(states)}
    costs = _SubsetCosts(model.space, model.cm, model.rates)
    eff = model.cm.effective_retrieval

    insert_edges = []  # (i, j, rate) for S -> S + x
    evict_pairs = []   # (i, j, delta_cost) for S -> S - x
    for s, i in index.items():
        for x in range(n):
            if x in s:
                smaller = s - {x}
                delta = costs.cost(smaller) - costs.cost(s)
                evict_pairs.append((i, index[smaller], max(delta, 0.0)))
            elif len(s) < limit:
                rate = model.q * model.rates[x] * costs.service(x, s) / eff
                if rate > 0.0:
                    insert_edges.append((i, index[s | {x}], rate))

    sizes = np.array([len(s) for s in states], dtype=float)

    def stationary(tc: float) -> np.ndarray:
        m = len(states)
        gen = np.zeros((m, m))
        for i, j, rate in insert_edges:
            gen[i, j] += rate
        for i, j, delta in evict_pairs:
            sojourn = mean_sojourn_time(delta, eff, tc)
            if sojourn != INF:
                gen[i, j] += 1.0 / sojourn
        np.fill_diagonal(gen, 0.0)
        np.fill_diagonal(gen, -gen.sum(axis=1))
        a = gen.T.copy()
        a[-1, :] = 1.0
        b = np.zeros(m)
        b[-1] = 1.0
        return scipy.linalg.solve(a, b)

    def occupancy(tc: float):
        pi = stationary(tc)
        return float(sizes @ pi), pi

    lo, hi = 1e-9, 1.0
    occ_hi, pi = occupancy(hi)
    guard = 0
    while occ_hi < model.k - occupancy_tol:
        hi *= 4.0
        occ_hi, pi = occupancy(hi)
        guard += 1
        if guard > 200:
            raise RuntimeError(
                f"characteristic time not bracketed: occupancy {occ_hi} at T_c={hi}"
            )
    if occ_hi <= model.k:  # k == |X| corner: occupancy approaches k from below
        content = np.array([
            sum(p for s, p in zip(states, pi) if x in s) for x in range(n)
        ])
        return CtaEaSolution(
            hi, {s: float(p) for s, p in zip(states, pi)}, content,
            float(occ_hi - model.k),
        )
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        occ, pi = occupancy(mid)
        if abs(occ - model.k) <= occupancy_tol:
            lo = hi = mid
            break
        if occ < model.k:
            lo = mid
        else:
            hi = mid
    tc = 0.5 * (lo + hi)
    occ, pi = occupancy(tc)
    content = np.array([
        sum(p for s, p in zip(states, pi) if x in s) for x in range(n)
    ])
    return CtaEaSolution(
        tc, {s: float(p) for s, p in zip(states, pi)}, content, float(occ - model.k)
    )


def local_minima_states(space, cm: CostModel, rates, k: int) -> list[tuple]:
    """All k-subsets no single swap can improve."""
    minima = []
    for state in combinations(range(space.n), k):
        tracker = ExpectedCostTracker(space, cm, rates, state)
        good = True
        for x in range(space.n):
            if x in state:
                continue
            if tracker.delta_all(x).min() < -1e-15:
                good = False
                break
        if good:
            minima.append(state)
    return minima


def stochastic_stability(space, cm: CostModel, rates, k: int, q_values,
                         slack: int = 3) -> dict:
    """Stationary mass on swap-local-minimum states as q shrinks.

    Returns the per-q mass plus the states still carrying visible mass at
    the smallest q (the empirically stochastically-stable ones).
    """
    minima = {frozenset(s) for s in local_minima_states(space, cm, rates, k)}
    per_q = {}
    conditional = {}
    final_probs = None
    for q in sorted(q_values, reverse=True):
        sol = cta_ea_solve(CtaEaModel(space, cm, np.asarray(rates), k, q, slack))
        mass = sum(p for s, p in sol.state_probs.items() if s in minima)
        at_capacity = sum(p for s, p in sol.state_probs.items() if len(s) == k)
        per_q[q] = mass
        # the TTL view lets occupancy fluctuate around k; conditioning on
        # capacity-sized states measures which real configurations survive
        conditional[q] = mass / at_capacity if at_capacity > 0 else 0.0
        final_probs = sol.state_probs
    stable = sorted(
        (tuple(sorted(s)) for s, p in final_probs.items() if p > 1e-3),
        key=lambda s: (len(s), s),
    )
    return {"minima": sorted(tuple(sorted(s)) for s in minima),
            "mass_on_minima": per_q, "conditional_mass_on_minima": conditional,
            "stable_states": stable}


@dataclass(frozen=True)
class ConvexityReport:
    max_violation: float
    worst_pair: tuple
    checks: int

    @property
    def ok(self) -> bool:
        return self.max_violation <= 0.0


def convexity_probe(fn: BallCostFn, volumes, alphas=None,
                    tolerance: float = 1e-9) -> ConvexityReport:
    """Probe the convex-combination inequality of F over a volume grid.

    Reports the worst relative violation of
    alpha F(v1) + (1-alpha) F(v2) >= F(alpha v1 + (1-alpha) v2); anything
    below the tolerance counts as zero.
    """
    volumes = sorted(float(v) for v in volumes)
    if any(v < 0 for v in volumes):
        raise ValueError("volumes must be non-negative")
    if alphas is None:
        alphas = [x / 10.0 for x in range(1, 10)]
    tol = tolerance if fn.mode != "quadrature" else max(tolerance, fn.QUAD_REL_TOL)
    cache = {v: fn(v) for v in volumes}
    worst, worst_pair, checks = 0.0, (), 0
    for v1, v2 in combinations(volumes, 2):
        for a in alphas:
            va = a * v1 + (1 - a) * v2
            mix = a * cache[v1] + (1 - a) * cache[v2]
            fva = fn(va)
            scale = max(abs(fva), 1e-300)
            violation = (fva - mix) / scale - tol
            checks += 1
            if violation > worst:
                worst, worst_pair = violation, (v1, v2, a)
    return ConvexityReport(max(worst, 0.0), worst_pair, checks)
