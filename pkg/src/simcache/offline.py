"""Offline optimization: clairvoyant dynamic schedule and static allocation.

``dp_optimal`` computes the cheapest way to serve a known request sequence
when the cache may change by one object per request, by dynamic
programming over reachable k-subsets.  ``static_brute_force`` enumerates
all k-subsets (the small-instance oracle for a problem that is hard in
general) and ``static_greedy`` is the usual marginal-gain heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, inf

import numpy as np

from simcache.costs import CostModel, expected_cost, members, service_cost

DP_GUARD_ENTRIES = 10 ** 8
BRUTE_FORCE_GUARD = 10 ** 7


class InstanceTooLargeError(RuntimeError):
    """Raised when an exact optimizer would exceed its table guard."""


@dataclass(frozen=True)
class RequestSequence:
    """A finite request sequence with its distinct-object count."""

    requests: tuple

    @classmethod
    def of(cls, items) -> "RequestSequence":
        return cls(tuple(int(x) for x in items))

    @property
    def distinct_count(self) -> int:
        return len(set(self.requests))

    def __len__(self):
        return len(self.requests)


@dataclass(frozen=True)
class StepDecision:
    request: int
    stored: bool
    evicted: int | None
    charge: float


@dataclass(frozen=True)
class OfflineSolution:
    """Optimal schedule: aggregate cost, states S_1..S_{T+1}, per-step moves."""

    total_cost: float
    states: tuple          # T+1 sorted tuples
    decisions: tuple       # T StepDecision records

    @property
    def average_cost(self) -> float:
        return self.total_cost / max(len(self.decisions), 1)


def replay_cost(space, cm: CostModel, seq: RequestSequence, states) -> float:
    """Re-account a schedule with the movement + service charge per step.

    Chronological accumulation, so a valid optimizer's total matches this
    replay exactly (same float operations in the same order).
    """
    eff = cm.effective_retrieval
    total = 0.0
    for t, x in enumerate(seq.requests):
        before, after = set(states[t]), set(states[t + 1])
        if after != before:
            extra = after - before
            if len(extra) != 1 or len(after) != len(before):
                raise ValueError(f"illegal transition at step {t}")
            if next(iter(extra)) != x:
                raise ValueError(f"step {t} inserts an object that was not requested")
            total += eff  # service cost of x against the new state is 0
        else:
            total += service_cost(space, cm, x, after)
    return total


def dp_optimal(seq, initial, space, cm: CostModel) -> OfflineSolution:
    """Cheapest schedule for a known sequence, one object change per step.

    States are k-subsets of the initial contents plus the requested
    objects; the table is guarded so pathological instances fail fast
    instead of exhausting memory.
    """
    if not isinstance(seq, RequestSequence):
        seq = RequestSequence.of(seq)
    start = tuple(sorted(int(o) for o in members(initial)))
    if len(set(start)) != len(start):
        raise ValueError("initial state must hold distinct objects")
    k = len(start)
    universe = set(start) | set(seq.requests)
    if comb(len(universe), k) * max(len(seq), 1) > DP_GUARD_ENTRIES:
        raise InstanceTooLargeError(
            f"state table of C({len(universe)},{k}) x {len(seq)} entries exceeds guard"
        )

    eff = cm.effective_retrieval
    layer: dict[tuple, float] = {start: 0.0}
    parents: list[dict] = []

    for x in seq.requests:
        new_layer: dict[tuple, float] = {}
        back: dict[tuple, tuple] = {}
        for state, cost in layer.items():
            stay = cost + (0.0 if x in state else service_cost(space, cm, x, state))
            if stay < new_layer.get(state, inf):
                new_layer[state] = stay
                back[state] = (state, None)
            if x not in state:
                moved = cost + eff
                for y in state:
                    nxt = tuple(sorted((set(state) - {y}) | {x}))
                    if moved < new_layer.get(nxt, inf):
                        new_layer[nxt] = moved
                        back[nxt] = (state, y)
        layer = new_layer
        parents.append(back)

    final_state = min(layer, key=lambda s: (layer[s], s))
    total = layer[final_state]

    # walk the backpointers to recover the state schedule
    chain = [final_state]
    for back in reversed(parents):
        prev, _ = back[chain[-1]]
        chain.append(prev)
    chain.reverse()

    decisions = []
    for t, x in enumerate(seq.requests):
        before, after = chain[t], chain[t + 1]
        if before != after:
            evicted = next(iter(set(before) - set(after)))
            decisions.append(StepDecision(x, True, evicted, eff))
        else:
            decisions.append(
                StepDecision(x, False, None, service_cost(space, cm, x, before))
            )
    return OfflineSolution(total, tuple(chain), tuple(decisions))


def _capped_columns(space, cm: CostModel) -> np.ndarray:
    """(n, n) matrix of capped costs: entry (z, y) = service of z by y alone."""
    cols = np.empty((space.n, space.n))
    for y in range(space.n):
        cols[:, y] = space.costs_from(y)
    return np.minimum(cols, cm.chi)


def _weights(space, load) -> np.ndarray:
    """Rates array, or per-object request counts for a sequence."""
    if isinstance(load, RequestSequence):
        return np.bincount(load.requests, minlength=space.n).astype(float)
    arr = np.asarray(load, dtype=float)
    if arr.shape != (space.n,):
        raise ValueError("load must be a rate field or a RequestSequence")
    return arr


def static_brute_force(space, cm: CostModel, load, k: int):
    """Exact best static k-subset; exponential, guarded to oracle scale."""
    from itertools import combinations

    n = space.n
    if comb(n, k) > BRUTE_FORCE_GUARD:
        raise InstanceTooLargeError(f"C({n},{k}) subsets exceed brute-force guard")
    weights = _weights(space, load)
    cols = _capped_columns(space, cm)
    active = np.flatnonzero(weights)
    w = weights[active]
    best_cost, best_state = inf, None
    for state in combinations(range(n), k):
        svc = cols[np.ix_(active, state)].min(axis=1)
        cost = float(w @ svc)
        if cost < best_cost:
            best_cost, best_state = cost, state
    return best_state, best_cost


def static_greedy(space, cm: CostModel, load, k: int):
    """Add the object with the largest marginal cost reduction, k times."""
    weights = _weights(space, load)
    active = np.flatnonzero(weights)
    w = weights[active]
    cols = _capped_columns(space, cm)[active]
    current = np.full(active.size, cm.chi)
    chosen: list[int] = []
    for _ in range(k):
        best_y, best_cost = None, inf
        for y in range(space.n):
            if y in chosen:
                continue
            cost = float(w @ np.minimum(current, cols[:, y]))
            if best_y is None or cost < best_cost:
                best_y, best_cost = y, cost
        chosen.append(best_y)
        current = np.minimum(current, cols[:, best_y])
    return tuple(sorted(chosen)), float(w @ current)
