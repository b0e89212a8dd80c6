"""Online caching policies behind a single per-request interface.

Every policy consumes one request at a time through ``on_request(x, now)``
and returns a :class:`PolicyDecision` describing what was served, whether
a remote retrieval happened, and any single-object state change.  Rate
awareness splits the roster:

* rate-aware: ``GreedyPolicy`` (steepest single-swap descent) and
  ``OsaPolicy`` (annealed acceptance of uphill swaps);
* rate-unaware: ``QlruDeltaCPolicy`` and ``RndLruPolicy`` (queue-based,
  probabilistic admission/refresh) and ``DuelPolicy`` (timed comparisons
  between a cached incumbent and a virtual challenger);
* exact-caching baselines: ``LruPolicy`` and ``RandomPolicy``, which treat
  anything but an exact hit as a miss with mandatory insertion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from simcache.costs import INF, CostModel, ExpectedCostTracker
from simcache.spaces import FiniteSpace


class PolicyDecision:
    """Outcome of serving one request.

    ``service_cost_paid`` is the service term of the per-request charge,
    evaluated against the post-decision state (0 whenever the request
    itself was inserted); ``served_object`` is what the user actually got.
    """

    __slots__ = (
        "served_object",
        "service_cost_paid",
        "retrieval_performed",
        "state_changed",
        "inserted",
        "evicted",
    )

    def __init__(self, served_object, service_cost_paid, retrieval_performed,
                 state_changed, inserted=None, evicted=None):
        self.served_object = served_object
        self.service_cost_paid = service_cost_paid
        self.retrieval_performed = retrieval_performed
        self.state_changed = state_changed
        self.inserted = inserted
        self.evicted = evicted

    def __repr__(self):
        return (
            f"PolicyDecision(served={self.served_object}, paid={self.service_cost_paid}, "
            f"retrieved={self.retrieval_performed}, changed={self.state_changed}, "
            f"in={self.inserted}, out={self.evicted})"
        )


@dataclass(frozen=True)
class PolicyParams:
    """Knobs shared by the parametric policies."""

    q: float = 1.0                    # insertion probability (qLRU-dC, RND-LRU)
    duel_delta: float | None = None   # counter separation ending a duel
    duel_tau: float | None = None     # duel timeout, in simulated time units
    beta: float = 0.75                # closest-match probability for challengers
    f: float | None = None            # single scaling knob for duel_delta/duel_tau

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError("q must be in (0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        for name in ("duel_delta", "duel_tau", "f"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0")


class _QueueState:
    """Cache membership plus queue order (front = most recently refreshed)."""

    def __init__(self, space, initial):
        ids = [int(o) for o in initial]
        if len(set(ids)) != len(ids):
            raise ValueError("initial cache contents must be distinct")
        self.space = space
        self.order = list(ids)  # front first
        self.arr = np.array(ids, dtype=np.int64)
        self._slot = {o: i for i, o in enumerate(ids)}

    def __contains__(self, x):
        return int(x) in self._slot

    def __len__(self):
        return len(self.order)

    def contents(self):
        return list(self.order)

    def costs(self, x) -> np.ndarray:
        """Approximation cost from x to every cached object (slot order)."""
        return self.space.costs_to(x, self.arr)

    def slot_of(self, y) -> int:
        return self._slot[int(y)]

    def object_at(self, slot) -> int:
        return int(self.arr[slot])

    def move_to_front(self, y):
        y = int(y)
        self.order.remove(y)
        self.order.insert(0, y)

    def replace(self, evict, insert, at_front: bool):
        evict, insert = int(evict), int(insert)
        slot = self._slot.pop(evict)
        self.arr[slot] = insert
        self._slot[insert] = slot
        self.order.remove(evict)
        if at_front:
            self.order.insert(0, insert)
        else:
            self.order.append(insert)

    def tail(self) -> int:
        return self.order[-1]


def _two_best(ids: np.ndarray, costs: np.ndarray):
    """(winner id, best cost, runner-up cost); ties go to the smallest id."""
    if costs.size == 1:
        return int(ids[0]), float(costs[0]), INF
    part = np.argpartition(costs, 1)
    i1, i2 = int(part[0]), int(part[1])
    c1, c2 = float(costs[i1]), float(costs[i2])
    if c2 < c1:
        i1, c1, c2 = i2, c2, c1
    if c1 < c2:  # unique minimum: fast path
        return int(ids[i1]), c1, c2
    winners = ids[costs == c1]
    return int(winners.min()), c1, c1


class _PolicyBase:
    """Shared serving logic for the queue-based and duel policies."""

    rate_aware = False

    def __init__(self, space, cm: CostModel, initial, rng):
        self.space = space
        self.cm = cm
        self.rng = rng
        self.state = _QueueState(space, initial)
        self.eff = cm.effective_retrieval
        self.chi = cm.chi

    def contents(self):
        return self.state.contents()

    def _serve_unchanged(self, x, z, c1) -> PolicyDecision:
        """Decision for a request that leaves the cache set untouched."""
        if c1 > self.eff:
            # too far to approximate: retrieve for the user, do not store
            return PolicyDecision(x, min(c1, self.chi), True, False)
        return PolicyDecision(z, c1, False, False)


class LruPolicy(_PolicyBase):
    """Exact caching: only identical objects count as hits."""

    name = "lru"

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        if x in self.state:
            self.state.move_to_front(x)
            return PolicyDecision(x, 0.0, False, False)
        victim = self.state.tail()
        self.state.replace(victim, x, at_front=True)
        return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)


class RandomPolicy(_PolicyBase):
    """Exact caching with uniform-random eviction and no recency bookkeeping."""

    name = "random"

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        if x in self.state:
            return PolicyDecision(x, 0.0, False, False)
        victim = self.state.object_at(int(self.rng.integers(len(self.state))))
        self.state.replace(victim, x, at_front=True)
        return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)


class QlruDeltaCPolicy(_PolicyBase):
    """Queue cache with cost-aware probabilistic refresh and insertion.

    On a miss the retrieved object enters the queue front with probability
    q.  On an approximate hit the serving object z is refreshed with
    probability (C(x, S-z) - C_a(x,z)) / C_r -- its cost saving for this
    request -- and x is additionally retrieved and inserted with
    probability q * C_a(x,z) / C_r; both can happen on the same request.
    """

    name = "qlru-dc"

    def __init__(self, space, cm, initial, rng, q: float):
        super().__init__(space, cm, initial, rng)
        if not 0.0 < q <= 1.0:
            raise ValueError("q must be in (0, 1]")
        self.q = q

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        costs = self.state.costs(x)
        z, c1, c2 = _two_best(self.state.arr, costs)
        if c1 > self.eff:  # miss
            if self.cm.require_store or self.rng.random() < self.q:
                victim = self.state.tail()
                self.state.replace(victim, x, at_front=True)
                return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
            return PolicyDecision(x, min(c1, self.chi), True, False)
        # approximate (or exact) hit
        refresh_p = (min(c2, self.chi) - c1) / self.eff
        if self.rng.random() < refresh_p:
            self.state.move_to_front(z)
        if c1 > 0.0 and self.rng.random() < self.q * c1 / self.eff:
            victim = self.state.tail()
            self.state.replace(victim, x, at_front=True)
            return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
        return PolicyDecision(z, c1, False, False)


class RndLruPolicy(_PolicyBase):
    """LRU whose miss probability grows with the approximation distance.

    A request is treated as a miss with probability q * C_a(x, S) / C_r
    (capped at 1, forced when no cached object is usable); otherwise the
    best approximator serves it and is refreshed.
    """

    name = "rnd-lru"

    def __init__(self, space, cm, initial, rng, q: float):
        super().__init__(space, cm, initial, rng)
        if not 0.0 < q <= 1.0:
            raise ValueError("q must be in (0, 1]")
        self.q = q

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        costs = self.state.costs(x)
        z, c1, _ = _two_best(self.state.arr, costs)
        if c1 > self.eff:
            miss_p = 1.0
        else:
            miss_p = min(1.0, self.q * c1 / self.eff)
        if miss_p > 0.0 and self.rng.random() < miss_p:
            victim = self.state.tail()
            self.state.replace(victim, x, at_front=True)
            return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
        self.state.move_to_front(z)
        return PolicyDecision(z, c1, False, False)


class GreedyPolicy:
    """Steepest-descent swaps using known request rates.

    Inserts the requested object when some single swap strictly lowers the
    expected cost, evicting the best such victim (smallest id on ties);
    otherwise the state is left alone and the request is served like any
    similarity cache would.
    """

    name = "greedy"
    rate_aware = True

    def __init__(self, space, cm: CostModel, rates, initial, rng=None):
        self.space = space
        self.cm = cm
        self.tracker = ExpectedCostTracker(space, cm, rates, initial)
        self.eff = cm.effective_retrieval
        self.chi = cm.chi
        self.swap_costs = [self.tracker.expected_cost()]  # cost after each change

    def contents(self):
        return self.tracker.contents()

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        if x in self.tracker:
            return PolicyDecision(x, 0.0, False, False)
        deltas = self.tracker.delta_all(x)
        best = deltas.min()
        if best < 0.0:
            winners = self.tracker.cache[np.flatnonzero(deltas == best)]
            victim = int(winners.min())
            self.tracker.apply_swap(x, victim)
            self.swap_costs.append(self.tracker.expected_cost())
            return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
        # tracker costs are capped at chi, so "cost == chi" means no cached
        # object approximates x for less than a retrieval: serve remotely.
        z, c1, _ = self.tracker.best_pair(x)
        if c1 >= self.chi:
            if self.cm.require_store:
                # storing is mandatory on retrieval; take the least bad swap
                winners = self.tracker.cache[np.flatnonzero(deltas == best)]
                victim = int(winners.min())
                self.tracker.apply_swap(x, victim)
                self.swap_costs.append(self.tracker.expected_cost())
                return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
            return PolicyDecision(x, self.chi, True, False)
        return PolicyDecision(z, c1, False, False)


def fixed_schedule(T: float):
    return lambda t: T


def power_schedule(c: float = 1.0, a: float = 0.5):
    """T(t) = c * t**-a; the toy-instance runs use c=1, a=1/2."""
    return lambda t: c * t ** (-a)


def theorem_schedule(delta_c_max: float, k: int):
    """T(t) = max-swap-gap * k / (1 + log t), the guaranteed-convergence rate."""
    scale = delta_c_max * k
    return lambda t: scale / (1.0 + math.log(t))


def estimate_delta_c_max(space, cm, rates, k: int, rng, samples: int = 10_000) -> float:
    """Upper-bound estimate of the largest single-swap cost change.

    Samples random states and prices all single swaps of random outside
    objects; the schedule only needs an upper bound, not the exact max.
    """
    best = 0.0
    seen = 0
    n = space.n
    while seen < samples:
        state = rng.choice(n, size=k, replace=False)
        tracker = ExpectedCostTracker(space, cm, rates, state)
        outside = np.setdiff1d(np.arange(n), state)
        for x in rng.choice(outside, size=min(outside.size, 32), replace=False):
            deltas = tracker.delta_all(int(x))
            finite = deltas[np.isfinite(deltas)]
            if finite.size:
                best = max(best, float(np.abs(finite).max()))
            seen += tracker.k
    return best


class OsaPolicy:
    """Annealed stochastic search over cache states.

    A request for an uncached object proposes one random eviction; the
    swap is accepted with probability min(1, exp(-cost_increase / T(t))),
    so early high temperatures explore and the cooling schedule freezes
    the state near a global optimum.
    """

    name = "osa"
    rate_aware = True

    def __init__(self, space, cm: CostModel, rates, initial, rng,
                 schedule, eviction_mode: str = "uniform", eps: float = 1e-9):
        if eviction_mode not in ("uniform", "weighted"):
            raise ValueError("eviction_mode must be 'uniform' or 'weighted'")
        self.space = space
        self.cm = cm
        self.rng = rng
        self.tracker = ExpectedCostTracker(space, cm, rates, initial)
        self.schedule = schedule
        self.eviction_mode = eviction_mode
        self.eps = eps
        self.eff = cm.effective_retrieval
        self.chi = cm.chi
        self.t = 0

    def contents(self):
        return self.tracker.contents()

    def _pick_eviction_slot(self) -> int:
        k = self.tracker.k
        if self.eviction_mode == "uniform":
            return int(self.rng.integers(k))
        # favour objects contributing little to the cost reduction
        weights = 1.0 / (self.eps + self.tracker.removal_penalties())
        weights /= weights.sum()
        return int(self.rng.choice(k, p=weights))

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        self.t += 1
        if x in self.tracker:
            return PolicyDecision(x, 0.0, False, False)
        slot = self._pick_eviction_slot()
        victim = int(self.tracker.cache[slot])
        diff = self.tracker.delta(x, victim)
        if diff > 0.0:
            temp = self.schedule(self.t)
            accept = temp > 0.0 and self.rng.random() < math.exp(-diff / temp)
        else:
            accept = True
        if accept:
            self.tracker.apply_swap(x, victim)
            return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
        z, c1, _ = self.tracker.best_pair(x)
        if c1 >= self.chi:
            if self.cm.require_store:
                # retrieval is unavoidable and must be stored: keep the swap
                self.tracker.apply_swap(x, victim)
                return PolicyDecision(x, 0.0, True, True, inserted=x, evicted=victim)
            return PolicyDecision(x, self.chi, True, False)
        return PolicyDecision(z, c1, False, False)


class DuelPolicy(_PolicyBase):
    """Replace-by-tournament: uncached objects challenge cached ones.

    A challenger is only a reference; it occupies no slot.  Each request
    credits a dueling object with the cost saving it would have produced,
    and the duel ends when the counters separate by more than
    ``duel_delta`` (leader wins) or after ``duel_tau`` time units
    (incumbent retained).  Challengers too close to an ongoing duel are
    refused so they cannot feed two counters at once.

    Ongoing duels live in parallel arrays, so counter feeding is one
    vectorized pass per request.
    """

    name = "duel"

    def __init__(self, space, cm, initial, rng, duel_delta: float, duel_tau: float,
                 beta: float = 0.75):
        super().__init__(space, cm, initial, rng)
        if duel_delta <= 0 or duel_tau <= 0:
            raise ValueError("duel_delta and duel_tau must be > 0")
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        self.delta = duel_delta
        self.tau = duel_tau
        self.beta = beta
        cap = len(self.state)
        self.inc = np.empty(cap, dtype=np.int64)
        self.cha = np.empty(cap, dtype=np.int64)
        self.s_inc = np.empty(cap)
        self.s_cha = np.empty(cap)
        self.t0 = np.empty(cap)
        self.reaches = np.empty(cap)
        self.n_duels = 0
        self.engaged: set[int] = set()      # incumbents currently dueling
        self.challengers: set[int] = set()
        # distance beyond which an object can never be the best approximator
        if getattr(space, "gamma", None) is not None and self.eff != INF:
            self.d_bar = self.eff ** (1.0 / space.gamma) if space.gamma > 0 else INF
        else:
            self.d_bar = INF

    # -- bookkeeping -------------------------------------------------------

    def ongoing(self) -> int:
        return self.n_duels

    @property
    def duels(self) -> dict:
        """Snapshot keyed by incumbent id (for tests and inspection)."""
        return {
            int(self.inc[i]): {
                "challenger": int(self.cha[i]),
                "score_inc": float(self.s_inc[i]),
                "score_cha": float(self.s_cha[i]),
                "start": float(self.t0[i]),
            }
            for i in range(self.n_duels)
        }

    def _metric_many(self, x, ids: np.ndarray) -> np.ndarray:
        costs = self.space.costs_to(x, ids)
        gamma = getattr(self.space, "gamma", 1.0) or 1.0
        return costs if gamma == 1.0 else costs ** (1.0 / gamma)

    def _both_ids(self, n: int) -> np.ndarray:
        both = np.empty(2 * n, dtype=np.int64)
        both[:n] = self.inc[:n]
        both[n:] = self.cha[:n]
        return both

    def _feed(self, x, z, c1, c2):
        n = self.n_duels
        if n == 0:
            return
        base = np.where(self.inc[:n] == z, min(c2, self.chi), min(c1, self.chi))
        costs = self.space.costs_to(x, self._both_ids(n))
        gain_inc = base - costs[:n]
        gain_cha = base - costs[n:]
        np.maximum(gain_inc, 0.0, out=gain_inc)
        np.maximum(gain_cha, 0.0, out=gain_cha)
        self.s_inc[:n] += gain_inc
        self.s_cha[:n] += gain_cha

    def _compress(self, keep: np.ndarray):
        m = int(keep.sum())
        n = self.n_duels
        for arr in (self.inc, self.cha, self.s_inc, self.s_cha, self.t0, self.reaches):
            arr[:m] = arr[:n][keep]
        self.n_duels = m

    def _resolve(self, now):
        """Finish separated or expired duels; at most one swap per request.

        The movement-cost model allows a single object change per step, so
        if several challengers cross the threshold on one request only the
        first (smallest incumbent id) swaps now; the rest stay pending.
        """
        n = self.n_duels
        if n == 0:
            return None
        gap = self.s_cha[:n] - self.s_inc[:n]
        wins = gap > self.delta
        swap = None
        chosen = -1
        if wins.any():
            idx = np.flatnonzero(wins)
            chosen = int(idx[np.argmin(self.inc[:n][idx])])
            swap = (int(self.inc[chosen]), int(self.cha[chosen]))
        # timeouts and clear incumbent leads end with the incumbent retained
        drop = (-gap > self.delta) | (now - self.t0[:n] > self.tau)
        if swap is not None:
            drop[chosen] = True
        if drop.any():
            for i in np.flatnonzero(drop):
                self.engaged.discard(int(self.inc[i]))
                self.challengers.discard(int(self.cha[i]))
            self._compress(~drop)
        if swap is not None:
            self.state.replace(swap[0], swap[1], at_front=True)
        return swap

    def _interferes(self, candidate, reach) -> bool:
        n = self.n_duels
        if n == 0:
            return False
        if isinstance(self.space, FiniteSpace):
            return self._interferes_exact(candidate)
        dists = self._metric_many(candidate, self._both_ids(n))
        limits = self.reaches[:n] + reach
        return bool((dists[:n] < limits).any() or (dists[n:] < limits).any())

    def _interferes_exact(self, candidate) -> bool:
        """Exact overlap test for matrix spaces: is there a request that
        could credit both the candidate and some current duellist?"""
        space = self.space
        cand_col = space.matrix[:, candidate]
        cache_costs = space.matrix[:, self.state.arr]
        for i in range(self.n_duels):
            slot = self.state.slot_of(int(self.inc[i]))
            if len(self.state) > 1:
                without = np.delete(cache_costs, slot, axis=1).min(axis=1)
            else:
                without = np.full(space.n, INF)
            base = np.minimum(without, self.chi)
            cand_feeds = cand_col < base
            for other in (int(self.inc[i]), int(self.cha[i])):
                if np.any(cand_feeds & (space.matrix[:, other] < base)):
                    return True
        return False

    def _admit(self, x, costs, c1, c2, now):
        if x in self.challengers or self.n_duels >= len(self.state):
            return
        unengaged = [
            i for i, o in enumerate(self.state.arr.tolist()) if o not in self.engaged
        ]
        if not unengaged:
            return
        # feeding reach of the newcomer: capped by the cost radius and by
        # where its nearest cached alternatives sit
        reach = min(self.d_bar, 2.0 * self._cost_to_distance(c2))
        if self._interferes(x, reach):
            return
        if self.rng.random() < self.beta:
            _, incumbent = min(
                (float(costs[i]), int(self.state.arr[i])) for i in unengaged
            )
        else:
            incumbent = int(self.state.arr[unengaged[int(self.rng.integers(len(unengaged)))]])
        j = self.n_duels
        self.inc[j] = incumbent
        self.cha[j] = x
        self.s_inc[j] = 0.0
        self.s_cha[j] = 0.0
        self.t0[j] = now
        self.reaches[j] = reach
        self.n_duels = j + 1
        self.engaged.add(incumbent)
        self.challengers.add(x)

    def _cost_to_distance(self, cost) -> float:
        gamma = getattr(self.space, "gamma", None)
        if gamma is None or not gamma or cost == INF:
            return INF
        return cost ** (1.0 / gamma)

    # -- request handling ----------------------------------------------------

    def on_request(self, x, now=0.0) -> PolicyDecision:
        x = int(x)
        costs = self.state.costs(x)
        z, c1, c2 = _two_best(self.state.arr, costs)

        self._feed(x, z, c1, c2)
        swap = self._resolve(now)
        if x not in self.state:
            self._admit(x, costs, c1, c2, now)

        if swap is not None:
            # per-step charge: one retrieval plus the service cost against
            # the post-change state
            svc = min(float(self.state.costs(x).min()), self.chi)
            return PolicyDecision(
                z if c1 <= self.eff else x,
                svc,
                True,
                True,
                inserted=swap[1],
                evicted=swap[0],
            )
        return self._serve_unchanged(x, z, c1)


def make_policy(name: str, space, cm: CostModel, rates, initial, rng,
                params: PolicyParams | None = None, schedule=None,
                eviction_mode: str = "uniform"):
    """Instantiate a policy by name with the knobs it needs."""
    params = params or PolicyParams()
    name = name.replace("_", "-").lower()
    if name == "greedy":
        return GreedyPolicy(space, cm, rates, initial)
    if name == "osa":
        if schedule is None:
            raise ValueError("osa needs a temperature schedule")
        return OsaPolicy(space, cm, rates, initial, rng, schedule, eviction_mode)
    if name in ("qlru-dc", "qlru-deltac", "qlru"):
        return QlruDeltaCPolicy(space, cm, initial, rng, q=params.q)
    if name == "rnd-lru":
        return RndLruPolicy(space, cm, initial, rng, q=params.q)
    if name == "duel":
        if params.duel_delta is None or params.duel_tau is None:
            raise ValueError("duel needs duel_delta and duel_tau (or f)")
        return DuelPolicy(
            space, cm, initial, rng,
            duel_delta=params.duel_delta, duel_tau=params.duel_tau, beta=params.beta,
        )
    if name == "lru":
        return LruPolicy(space, cm, initial, rng)
    if name == "random":
        return RandomPolicy(space, cm, initial, rng)
    raise ValueError(f"unknown policy: {name}")


POLICY_NAMES = ("greedy", "osa", "qlru-dc", "rnd-lru", "duel", "lru", "random")
