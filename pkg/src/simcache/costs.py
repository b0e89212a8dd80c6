"""Cost model and expected-cost machinery for similarity caches.

A request for ``x`` served from cache state ``S`` pays the *service cost*
``min(C_a(x, S), chi)`` where ``C_a(x, S)`` is the best approximation cost
offered by the cached objects and ``chi`` caps what the system is ever
willing to pay (the retrieval cost in the basic model).  Changing the
cache state by one object costs the effective retrieval cost; changing
more than one object at once is not allowed.

``ExpectedCostTracker`` maintains, for every catalog object, its best and
second-best approximators inside the cache, which makes single-swap cost
deltas cheap.  That structure is what makes rate-aware policies and the
local-optimality scans affordable on grid catalogs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INF = math.inf

_EVAL_BLOCK = 8192  # rows per block in full best-cost evaluations


@dataclass(frozen=True)
class CostModel:
    """Retrieval-cost structure, with the optional user/network split.

    When ``user_cost``/``network_cost`` are given they replace
    ``retrieval_cost``; ``require_store`` makes storing the retrieved
    object mandatory, which removes the cap on the service cost.
    """

    retrieval_cost: float = 1.0
    user_cost: float | None = None
    network_cost: float | None = None
    require_store: bool = False

    def __post_init__(self):
        if self.extended:
            if self.user_cost is None or self.network_cost is None:
                raise ValueError("user_cost and network_cost must be set together")
            if self.user_cost < 0 or self.network_cost < 0:
                raise ValueError("split retrieval costs must be >= 0")
        elif not self.retrieval_cost > 0:
            raise ValueError("retrieval cost must be > 0")

    @property
    def extended(self) -> bool:
        return self.user_cost is not None or self.network_cost is not None

    @property
    def effective_retrieval(self) -> float:
        """Cost of one cache-state change (retrieval of one object)."""
        if self.extended:
            return self.user_cost + self.network_cost
        return self.retrieval_cost

    @property
    def chi(self) -> float:
        """Cap on the per-request service cost."""
        if self.require_store:
            return INF
        return self.effective_retrieval


@dataclass(frozen=True)
class CacheState:
    """A set of exactly k stored objects, optionally queue-ordered."""

    contents: tuple
    order: tuple | None = None

    def __post_init__(self):
        if len(set(self.contents)) != len(self.contents):
            raise ValueError("cache contents must be distinct")
        if self.order is not None and sorted(self.order) != sorted(self.contents):
            raise ValueError("order must be a permutation of contents")

    def __len__(self):
        return len(self.contents)


def members(state) -> list:
    """Normalize a CacheState / iterable of objects to a list."""
    if isinstance(state, CacheState):
        return list(state.contents)
    return list(state)


def approx_cost(space, x, y) -> float:
    """Cost of approximating ``x`` with ``y`` (0 for x == y, may be inf)."""
    return space.cost(x, y)


def min_approx_cost(space, x, state) -> float:
    """C_a(x, S): the best (uncapped) approximation cost over the state."""
    ids = members(state)
    if not ids:
        return INF
    if space.is_discrete:
        return float(np.min(space.costs_to(x, np.asarray(ids, dtype=np.int64))))
    return float(np.min(space.costs_to(x, np.asarray(ids, dtype=float))))


def service_cost(space, cm: CostModel, x, state) -> float:
    """min(C_a(x, S), chi): what serving request x from state S costs."""
    return min(min_approx_cost(space, x, state), cm.chi)


def excursion_cost(space, cm: CostModel, x, y) -> float:
    """Cost of serving x remotely with the object stored at y."""
    return min(space.cost(x, y), cm.chi)


def movement_cost(old_state, new_state, cm: CostModel) -> float:
    """Cost of moving the cache from one state to another.

    Free if nothing changed, one retrieval if exactly one object is new,
    infinite otherwise (multi-object updates cannot happen in one step).
    """
    old = frozenset(members(old_state))
    new = frozenset(members(new_state))
    if old == new:
        return 0.0
    if len(new - old) == 1:
        return cm.effective_retrieval
    return INF


def best_approximator(space, x, state):
    """Return (y, C_a(x, y)) minimizing the cost over the state.

    Ties are broken toward the smallest object id so replays are
    deterministic.  Continuous states break ties by position.
    """
    ids = members(state)
    if not ids:
        raise ValueError("cache state is empty")
    if space.is_discrete:
        arr = np.asarray(ids, dtype=np.int64)
        costs = space.costs_to(x, arr)
        best = costs.min()
        winners = arr[costs == best]
        return int(winners.min()), float(best)
    pts = np.asarray(ids, dtype=float)
    costs = space.costs_to(x, pts)
    pos = int(np.argmin(costs))
    return ids[pos], float(costs[pos])


def full_service_costs(space, cm: CostModel, state) -> np.ndarray:
    """Service cost of every catalog object against the state (blocked scan)."""
    ids = np.asarray(members(state), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cache state is empty")
    best = np.full(space.n, INF)
    for y in ids:
        np.minimum(best, space.costs_from(int(y)), out=best)
    return np.minimum(best, cm.chi)


def expected_cost(space, cm: CostModel, rates, state) -> float:
    """Expected per-request service cost of a state under rates ``rates``.

    Exact weighted sum over the catalog; only defined for discrete spaces
    (use :func:`expected_cost_mc` for continuous ones).
    """
    if not members(state):
        raise ValueError("cache state is empty")
    rates = np.asarray(rates, dtype=float)
    svc = full_service_costs(space, cm, state)
    with np.errstate(invalid="ignore"):
        prod = rates * svc
    prod[rates == 0.0] = 0.0  # zero-rate objects contribute nothing, even at inf cost
    return float(prod.sum())


def expected_cost_mc(space, cm: CostModel, sampler, state, samples: int = 100_000,
                     rng=None):
    """Monte Carlo expected service cost for a continuous space.

    ``sampler(rng, m)`` must return m request points distributed with the
    (normalized) request density.  Returns (estimate, standard_error).
    """
    if not members(state):
        raise ValueError("cache state is empty")
    rng = np.random.default_rng(rng)
    pts = np.asarray(members(state), dtype=float)
    draws = sampler(rng, samples)
    costs = np.empty(samples)
    for start in range(0, samples, _EVAL_BLOCK):
        chunk = draws[start:start + _EVAL_BLOCK]
        d = np.stack([space.costs_to(q, pts).min() for q in chunk])
        costs[start:start + _EVAL_BLOCK] = d
    np.minimum(costs, cm.chi, out=costs)
    est = float(costs.mean())
    se = float(costs.std(ddof=1) / math.sqrt(samples))
    return est, se


class ExpectedCostTracker:
    """Best/second-best approximator bookkeeping for one cache state.

    Costs are stored already capped at ``chi``; owners are cache *slots*
    (stable positions), so a swap keeps every other slot's bookkeeping
    valid.  ``delta_all(x)`` prices every single-object swap that inserts
    ``x`` in one vectorized pass.
    """

    # below this catalog size plain-Python loops beat numpy call overhead
    SMALL_N = 128
    # above this size, grid swaps are priced from a local window around the
    # inserted point instead of a full catalog pass
    LOCAL_N = 20_000

    def __init__(self, space, cm: CostModel, rates, state):
        self.space = space
        self.cm = cm
        self.rates = np.asarray(rates, dtype=float)
        self.cache = np.asarray(members(state), dtype=np.int64)
        if self.cache.size == 0:
            raise ValueError("cache state is empty")
        if len(set(self.cache.tolist())) != self.cache.size:
            raise ValueError("cache contents must be distinct")
        self.k = int(self.cache.size)
        self._pos = {int(o): i for i, o in enumerate(self.cache)}
        self._small = space.n <= self.SMALL_N
        self._local = (
            getattr(space, "kind", None) == "torus-grid" and space.n > self.LOCAL_N
        )
        self._windows: dict[int, tuple] = {}
        self._rebuild(np.arange(space.n))
        if self._small:
            self._columns = [
                np.minimum(space.costs_from(z), cm.chi).tolist() for z in range(space.n)
            ]
            self._lam = self.rates.tolist()
            self._refresh_mirrors()
        if self._local:
            self._refresh_local_summary()

    def _refresh_local_summary(self):
        """State-level aggregates that make local swap pricing exact.

        ``base_penalty[j]`` is the full cost increase of dropping slot j;
        a swap of x for slot j then costs gain(x) + base_penalty[j] -
        corr(x, j), where the correction involves only objects whose cost
        to x beats their current second-best, i.e. objects within
        ceil(max(best2)^(1/gamma)) hops of x.
        """
        self._base_penalty = self.removal_penalties()
        gamma = self.space.gamma
        if gamma <= 0 or not np.isfinite(self.best2).all():
            self._radius = self.space.side  # degenerate: fall back to full passes
            return
        m2 = float(self.best2.max())
        self._radius = int(math.ceil(m2 ** (1.0 / gamma)))

    def _window(self, radius: int):
        """Diamond window of the given hop radius: offsets and their costs."""
        got = self._windows.get(radius)
        if got is None:
            r = np.arange(-radius, radius + 1)
            dr, dc = np.meshgrid(r, r, indexing="ij")
            mask = np.abs(dr) + np.abs(dc) <= radius
            dr, dc = dr[mask].astype(np.int64), dc[mask].astype(np.int64)
            d = (np.abs(dr) + np.abs(dc)).astype(float)
            costs = d ** self.space.gamma if self.space.gamma != 1.0 else d
            got = (dr, dc, np.minimum(costs, self.cm.chi))
            self._windows[radius] = got
        return got

    def _local_parts(self, x: int):
        """(ids, capped costs to x) for every object the swap math can touch."""
        side = self.space.side
        if 2 * self._radius + 1 > side:
            return None  # window wraps onto itself: use the full pass
        dr, dc, costs = self._window(self._radius)
        r, c = divmod(int(x), side)
        ids = ((r + dr) % side) * side + ((c + dc) % side)
        return ids, costs

    def _refresh_mirrors(self):
        self._b1 = self.best1.tolist()
        self._b2 = self.best2.tolist()
        self._o1 = self.own1.tolist()

    # -- construction / maintenance -------------------------------------

    def _rebuild(self, rows: np.ndarray):
        chi = self.cm.chi
        n = self.space.n
        if not hasattr(self, "best1"):
            self.best1 = np.empty(n)
            self.best2 = np.empty(n)
            self.own1 = np.empty(n, dtype=np.int32)
            self.own2 = np.empty(n, dtype=np.int32)
        for start in range(0, rows.size, _EVAL_BLOCK):
            zs = rows[start:start + _EVAL_BLOCK]
            block = self._cost_block(zs)  # (len(zs), k)
            if self.k == 1:
                self.best1[zs] = np.minimum(block[:, 0], chi)
                self.best2[zs] = chi  # serving without the only object
                self.own1[zs] = 0
                self.own2[zs] = 0
                continue
            part = np.argpartition(block, 1, axis=1)
            i1 = part[:, 0]
            i2 = part[:, 1]
            r = np.arange(zs.size)
            c1 = block[r, i1]
            c2 = block[r, i2]
            swap = c2 < c1  # argpartition does not order the first two
            c1s = np.where(swap, c2, c1)
            c2s = np.where(swap, c1, c2)
            i1s = np.where(swap, i2, i1)
            i2s = np.where(swap, i1, i2)
            self.best1[zs] = np.minimum(c1s, chi)
            self.best2[zs] = np.minimum(c2s, chi)
            self.own1[zs] = i1s
            self.own2[zs] = i2s

    def _cost_block(self, zs: np.ndarray) -> np.ndarray:
        space = self.space
        if hasattr(space, "matrix"):
            return space.matrix[np.ix_(zs, self.cache)]
        return np.stack([space.costs_to(int(z), self.cache) for z in zs])

    def contents(self) -> list:
        return [int(o) for o in self.cache]

    def __contains__(self, x) -> bool:
        return int(x) in self._pos

    # -- queries ---------------------------------------------------------

    def expected_cost(self) -> float:
        with np.errstate(invalid="ignore"):
            prod = self.rates * self.best1
        prod[self.rates == 0.0] = 0.0
        return float(prod.sum())

    def service_cost(self, x) -> float:
        return float(self.best1[int(x)])

    def best_pair(self, x):
        """(best cached object, capped cost, capped cost without it)."""
        x = int(x)
        return int(self.cache[self.own1[x]]), float(self.best1[x]), float(self.best2[x])

    def delta_all(self, x) -> np.ndarray:
        """Expected-cost change of swapping in ``x`` for each cache slot.

        Entry j is cost(S + x - cache[j]) - cost(S); entry of x's own slot
        is 0 when x is already cached.
        """
        if self._small:
            return self._delta_all_py(int(x))
        if self._local:
            parts = self._local_parts(int(x))
            if parts is not None:
                return self._delta_all_windowed(*parts)
        cx = np.minimum(self._costs_from(x), self.cm.chi)
        lam = self.rates
        gain = np.zeros_like(cx)
        np.subtract(cx, self.best1, out=gain, where=cx < self.best1)
        m1 = np.minimum(self.best1, cx)
        m2 = np.minimum(self.best2, cx)
        t = np.zeros_like(cx)
        np.subtract(m2, m1, out=t, where=m2 > m1)  # avoids inf - inf
        penalty = np.bincount(self.own1, weights=lam * t, minlength=self.k)
        return float((lam * gain).sum()) + penalty

    def _delta_all_windowed(self, ids: np.ndarray, cx: np.ndarray) -> np.ndarray:
        """Swap pricing restricted to the window that can differ from the
        state-level aggregates; exact because outside it the inserted
        object beats nobody's second-best."""
        lam = self.rates[ids]
        b1 = self.best1[ids]
        b2 = self.best2[ids]
        gain = np.zeros_like(cx)
        np.subtract(cx, b1, out=gain, where=cx < b1)
        m1 = np.minimum(b1, cx)
        m2 = np.minimum(b2, cx)
        inner = np.zeros_like(cx)
        np.subtract(m2, m1, out=inner, where=m2 > m1)
        full = np.zeros_like(cx)
        np.subtract(b2, b1, out=full, where=b2 > b1)
        corr = np.bincount(self.own1[ids], weights=lam * (full - inner), minlength=self.k)
        return float((lam * gain).sum()) + self._base_penalty - corr

    def _delta_all_py(self, x) -> np.ndarray:
        col = self._columns[x]
        b1, b2, o1, lam = self._b1, self._b2, self._o1, self._lam
        gain = 0.0
        pen = [0.0] * self.k
        for z in range(len(col)):
            w = lam[z]
            if w == 0.0:
                continue
            cx = col[z]
            c1 = b1[z]
            if cx < c1:
                gain += w * (cx - c1)
                m1 = cx
            else:
                m1 = c1
            c2 = b2[z]
            m2 = c2 if c2 < cx else cx
            if m2 > m1:
                pen[o1[z]] += w * (m2 - m1)
        return np.array([gain + p for p in pen])

    def delta(self, x, evict) -> float:
        """Expected-cost change of replacing ``evict`` with ``x``."""
        slot = self._pos[int(evict)]
        if self._small:
            return self._delta_py(int(x), slot)
        if self._local:
            parts = self._local_parts(int(x))
            if parts is not None:
                return float(self._delta_all_windowed(*parts)[slot])
        cx = np.minimum(self._costs_from(x), self.cm.chi)
        lam = self.rates
        gain = np.zeros_like(cx)
        np.subtract(cx, self.best1, out=gain, where=cx < self.best1)
        owned = self.own1 == slot
        m1 = np.minimum(self.best1[owned], cx[owned])
        m2 = np.minimum(self.best2[owned], cx[owned])
        t = np.zeros_like(m1)
        np.subtract(m2, m1, out=t, where=m2 > m1)
        return float((lam * gain).sum() + (lam[owned] * t).sum())

    def _delta_py(self, x, slot) -> float:
        col = self._columns[x]
        b1, b2, o1, lam = self._b1, self._b2, self._o1, self._lam
        total = 0.0
        for z in range(len(col)):
            w = lam[z]
            if w == 0.0:
                continue
            cx = col[z]
            c1 = b1[z]
            if o1[z] == slot:
                c2 = b2[z]
                nb = c2 if c2 < cx else cx
                if nb != c1:
                    total += w * (nb - c1)
            elif cx < c1:
                total += w * (cx - c1)
        return total

    def removal_penalties(self) -> np.ndarray:
        """Expected-cost increase of dropping each cache slot's object."""
        lam = self.rates
        t = np.zeros_like(self.best1)
        np.subtract(self.best2, self.best1, out=t, where=self.best2 > self.best1)
        return np.bincount(self.own1, weights=lam * t, minlength=self.k)

    def _costs_from(self, x) -> np.ndarray:
        space = self.space
        if hasattr(space, "costs_from"):
            return space.costs_from(int(x))
        raise TypeError("tracker requires a discrete space")

    # -- updates ----------------------------------------------------------

    def apply_swap(self, insert, evict):
        """Replace ``evict`` with ``insert`` and repair the bookkeeping.

        Only objects whose top-two approximators involved the evicted slot
        are rescanned; everyone else just gets the inserted object merged
        into their (best, second-best) pair.
        """
        insert = int(insert)
        evict = int(evict)
        if insert in self._pos:
            raise ValueError(f"object {insert} already cached")
        slot = self._pos.pop(evict)
        self.cache[slot] = insert
        self._pos[insert] = slot

        chi = self.cm.chi
        cx = np.minimum(self._costs_from(insert), chi)
        stale = (self.own1 == slot) | (self.own2 == slot)
        fresh = ~stale

        # merge the inserted object into intact top-two pairs
        idx = np.flatnonzero(fresh)
        cxf = cx[idx]
        promote = cxf < self.best1[idx]
        demote = ~promote & (cxf < self.best2[idx])
        pi = idx[promote]
        self.best2[pi] = self.best1[pi]
        self.own2[pi] = self.own1[pi]
        self.best1[pi] = cx[pi]
        self.own1[pi] = slot
        di = idx[demote]
        self.best2[di] = cx[di]
        self.own2[di] = slot

        self._rebuild(np.flatnonzero(stale))
        if self._small:
            self._refresh_mirrors()
        if self._local:
            self._refresh_local_summary()


def delta_cost(space, cm: CostModel, rates, state, insert, evict) -> float:
    """Expected-cost change of one swap: cost(S + insert - evict) - cost(S).

    ``insert`` must not be cached and ``evict`` must be.  Uses the same
    best/second-best bookkeeping as the policies; by construction it
    matches the difference of two full :func:`expected_cost` evaluations.
    """
    ids = members(state)
    if insert in ids:
        raise ValueError(f"insert object {insert} already in state")
    if evict not in ids:
        raise ValueError(f"evict object {evict} not in state")
    tracker = ExpectedCostTracker(space, cm, rates, ids)
    return tracker.delta(insert, evict)
