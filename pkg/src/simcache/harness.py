"""Simulation harness: drives policies over workloads with audited accounting.

One run = one policy instance consuming one seeded request stream.  Every
request is charged movement + service against the post-decision state,
with an independent accountant recomputing both from the state pair (it
does not trust the policy's own numbers).  Records are emitted at
checkpoint request counts (geometric by default, 20 per decade) and
include the exact instantaneous expected cost of the current state.

Replicas fan out over a small process pool (capped by SIMCACHE_THREADS);
replica i runs with seed ``seed + i``, so results are bit-identical
whatever the pool size.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

import simcache
from simcache.costs import INF, CostModel, expected_cost
from simcache.policies import (
    PolicyParams,
    fixed_schedule,
    make_policy,
    power_schedule,
    theorem_schedule,
    estimate_delta_c_max,
)
from simcache.spaces import FiniteSpace, TorusGrid, load_rates_csv
from simcache.workloads import (
    IrmWorkload,
    PhasedIrmWorkload,
    SequenceWorkload,
    build_grid,
    gaussian_rates,
    homogeneous_rates,
    load_trace_csv,
    trace_workload,
    vector_trace_workload,
)

CSV_COLUMNS = (
    "t", "inst_cost", "acc_cost", "acc_approx_cost",
    "exact_hits", "approx_hits", "misses", "state_changes", "replica",
)


class ConfigError(ValueError):
    """Malformed experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class RunRecord:
    """Metrics snapshot after ``t`` requests of one replica.

    A request counts as exactly one of exact hit (it was cached), miss
    (a retrieval happened), or approximate hit (served from a similar
    object); ``acc_approx_cost`` accumulates the raw approximation cost
    of the pre-decision state, the metric used to compare against
    exact-caching baselines.
    """

    t: int
    inst_cost: float
    acc_cost: float
    acc_approx_cost: float
    exact_hits: int
    approx_hits: int
    misses: int
    state_changes: int
    replica: int

    def row(self):
        return [
            self.t, repr(self.inst_cost), repr(self.acc_cost),
            repr(self.acc_approx_cost), self.exact_hits, self.approx_hits,
            self.misses, self.state_changes, self.replica,
        ]


def geometric_checkpoints(horizon: int, per_decade: int = 20) -> list[int]:
    """Increasing request counts, ``per_decade`` per factor of ten."""
    if horizon < 1:
        return []
    pts = {horizon}
    i = 0
    while True:
        t = int(round(10 ** (i / per_decade)))
        if t > horizon:
            break
        pts.add(max(t, 1))
        i += 1
    return sorted(pts)


@dataclass
class ExperimentConfig:
    space: dict
    cost: dict
    workload: dict
    policy: dict
    horizon: int
    seed: int = 0
    replicas: int = 1
    checkpoints: dict | list = field(default_factory=lambda: {"kind": "geometric", "per_decade": 20})
    initial_state: list | None = None
    log_decisions: bool = False
    output: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        required = ("space", "cost", "workload", "policy", "horizon")
        missing = [key for key in required if key not in raw]
        if missing:
            raise ConfigError(f"config missing keys: {missing}")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        if cfg.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if cfg.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        out = {
            "space": self.space, "cost": self.cost, "workload": self.workload,
            "policy": self.policy, "horizon": self.horizon, "seed": self.seed,
            "replicas": self.replicas, "checkpoints": self.checkpoints,
        }
        if self.initial_state is not None:
            out["initial_state"] = self.initial_state
        if self.log_decisions:
            out["log_decisions"] = True
        if self.output is not None:
            out["output"] = self.output
        return out


def build_space(spec: dict):
    kind = spec.get("kind")
    if kind == "torus-grid":
        gamma = float(spec.get("gamma", 1.0))
        if "rings" in spec:
            return build_grid(int(spec["rings"]), gamma)
        if "side" in spec:
            return TorusGrid(int(spec["side"]), gamma)
        raise ConfigError("torus-grid space needs 'rings' or 'side'")
    if kind == "finite":
        if "matrix" in spec:
            return FiniteSpace(np.asarray(spec["matrix"], dtype=float))
        if "matrix_csv" in spec:
            return FiniteSpace.from_csv(spec["matrix_csv"])
        raise ConfigError("finite space needs 'matrix' or 'matrix_csv'")
    raise ConfigError(f"unknown space kind: {kind}")


def build_cost_model(spec: dict) -> CostModel:
    try:
        return CostModel(
            retrieval_cost=float(spec.get("retrieval_cost", 1.0)),
            user_cost=spec.get("user_cost"),
            network_cost=spec.get("network_cost"),
            require_store=bool(spec.get("require_store", False)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _rates_from_spec(space, spec):
    if isinstance(spec, str):
        if spec == "homogeneous":
            return homogeneous_rates(space)
        raise ConfigError(f"unknown rate field: {spec}")
    if isinstance(spec, dict):
        if "gaussian_sigma" in spec:
            return gaussian_rates(space, float(spec["gaussian_sigma"]))
        if "csv" in spec:
            rates = load_rates_csv(spec["csv"], n=space.n)
            return rates / rates.sum()
        raise ConfigError(f"unknown rate spec: {spec}")
    rates = np.asarray(spec, dtype=float)
    return rates


def build_workload(space, spec: dict):
    kind = spec.get("kind")
    if kind == "irm":
        return IrmWorkload(space, _rates_from_spec(space, spec.get("rates", "homogeneous")))
    if kind == "irm-phased":
        phases = [_rates_from_spec(space, p) for p in spec["phases"]]
        return PhasedIrmWorkload(space, phases, spec["switch_at"])
    if kind == "sequence":
        return SequenceWorkload(space, spec["objects"])
    if kind == "trace":
        trace = load_trace_csv(spec["path"], min_count=int(spec.get("min_count", 0)))
        mapping = spec.get("mapping", "uniform")
        if mapping == "vector":
            return vector_trace_workload(
                trace, norm=int(spec.get("norm", 2)), gamma=float(spec.get("gamma", 1.0))
            )
        if not isinstance(space, TorusGrid):
            raise ConfigError("mapped traces need a torus-grid space")
        return trace_workload(trace, space, mapping, int(spec.get("map_seed", 0)))
    raise ConfigError(f"unknown workload kind: {kind}")


def _duel_knobs(space, policy_spec: dict) -> tuple[float, float]:
    if "duel_delta" in policy_spec and "duel_tau" in policy_spec:
        return float(policy_spec["duel_delta"]), float(policy_spec["duel_tau"])
    f = policy_spec.get("f")
    if f is None:
        raise ConfigError("duel policy needs duel_delta+duel_tau or f")
    f = float(f)
    if isinstance(space, TorusGrid):
        min_cost = 1.0  # unit-step grid: nearest distinct pair is one hop
        scale = space.side
    else:
        m = space.matrix[space.matrix > 0]
        min_cost = float(m.min()) if m.size else 1.0
        scale = space.n
    return f * min_cost, f * scale


def build_policy(space, cm, rates, spec: dict, initial, rng):
    name = spec.get("name")
    if name is None:
        raise ConfigError("policy spec needs a name")
    try:
        params = PolicyParams(
            q=float(spec.get("q", 1.0)),
            duel_delta=None, duel_tau=None,
            beta=float(spec.get("beta", 0.75)),
        )
        if name == "duel":
            dd, dt = _duel_knobs(space, spec)
            params = PolicyParams(q=params.q, duel_delta=dd, duel_tau=dt, beta=params.beta)
        schedule = None
        if name == "osa":
            schedule = _schedule_from_spec(space, cm, rates, spec.get("schedule"), rng)
        return make_policy(
            name, space, cm, rates, initial, rng, params,
            schedule=schedule, eviction_mode=spec.get("eviction_mode", "uniform"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schedule_from_spec(space, cm, rates, spec, rng):
    if spec is None:
        raise ConfigError("osa policy needs a schedule")
    kind = spec.get("kind")
    if kind == "power":
        return power_schedule(float(spec.get("c", 1.0)), float(spec.get("a", 0.5)))
    if kind == "fixed":
        return fixed_schedule(float(spec["T"]))
    if kind == "theorem":
        k = int(spec["k"])
        dc_max = spec.get("delta_c_max")
        if dc_max is None:
            dc_max = estimate_delta_c_max(space, cm, rates, k, rng)
        return theorem_schedule(float(dc_max), k)
    raise ConfigError(f"unknown schedule kind: {kind}")


class _Accountant:
    """Independent cache mirror with its own cost scans.

    Holds the state set in both a membership set and a stable numpy array,
    so the uncapped best-approximation scan is one vectorized call; small
    catalogs use plain-Python columns instead (less call overhead).
    """

    def __init__(self, space, cm, initial):
        self.space = space
        self.chi = cm.chi
        self.members = set(initial)
        self.arr = np.array(sorted(self.members), dtype=np.int64)
        self._slot = {int(o): i for i, o in enumerate(self.arr)}
        self.small = space.is_discrete and space.n <= 128
        if self.small:
            everyone = np.arange(space.n, dtype=np.int64)
            # row z = cost of serving z with each candidate (matrices may be
            # asymmetric, so this is not the same as costs_from)
            self.rows = [space.costs_to(z, everyone).tolist() for z in range(space.n)]
            self.ids = self.arr.tolist()

    def __contains__(self, x):
        return x in self.members

    def swap(self, insert, evict):
        self.members.discard(evict)
        self.members.add(insert)
        slot = self._slot.pop(evict)
        self.arr[slot] = insert
        self._slot[insert] = slot
        if self.small:
            self.ids[slot] = insert

    def min_approx(self, x) -> float:
        """Uncapped best approximation cost of x over the mirrored state."""
        if self.small:
            row = self.rows[x]
            return min(row[y] for y in self.ids)
        return float(self.space.costs_to(x, self.arr).min())


@dataclass
class ReplicaResult:
    replica: int
    records: list
    final_state: list
    movement_total: float
    service_total: float
    decisions: list | None = None


class AccountingError(AssertionError):
    """The policy's reported decision disagrees with the recomputed charge."""


def run_replica(cfg: ExperimentConfig, replica: int) -> ReplicaResult:
    """Simulate one replica with full double-entry accounting."""
    space = build_space(cfg.space)
    cm = build_cost_model(cfg.cost)
    workload = build_workload(space, cfg.workload)
    space = workload.space  # vector traces derive their own catalog
    horizon = min(cfg.horizon, len(workload)) if hasattr(workload, "__len__") else cfg.horizon

    seed = cfg.seed + replica
    ss = np.random.SeedSequence(seed)
    wl_seed, pol_seed, init_seed = ss.spawn(3)
    pol_rng = np.random.default_rng(pol_seed)

    if cfg.initial_state is not None:
        initial = [int(o) for o in cfg.initial_state]
    else:
        k = int(cfg.policy.get("k", cfg.policy.get("cache_size", 0)))
        if k < 1:
            raise ConfigError("policy spec needs k (cache size) or an initial_state")
        initial = np.random.default_rng(init_seed).choice(
            space.n, size=k, replace=False
        ).tolist()
    k = len(initial)

    policy = build_policy(space, cm, workload.rates, cfg.policy, initial, pol_rng)
    accountant = _Accountant(space, cm, initial)
    eff = cm.effective_retrieval
    chi = cm.chi

    if isinstance(cfg.checkpoints, dict):
        marks = geometric_checkpoints(horizon, int(cfg.checkpoints.get("per_decade", 20)))
    else:
        marks = sorted({int(t) for t in cfg.checkpoints if 1 <= int(t) <= horizon})
    marks_iter = iter(marks)
    next_mark = next(marks_iter, None)

    t = 0
    acc_cost = 0.0
    acc_approx = 0.0
    movement_total = 0.0
    service_total = 0.0
    exact_hits = approx_hits = misses = state_changes = 0
    records: list[RunRecord] = []
    decision_log = [] if cfg.log_decisions else None

    def emit():
        inst = expected_cost(space, cm, workload.rates, policy.contents())
        records.append(RunRecord(
            t, inst, acc_cost, acc_approx, exact_hits, approx_hits, misses,
            state_changes, replica,
        ))
        contents = policy.contents()
        if len(contents) != k or set(contents) != accountant.members:
            raise AccountingError(f"cache mirror diverged at t={t}")

    for ts_block, obj_block in workload.blocks(horizon, np.random.default_rng(wl_seed)):
        for now, x in zip(ts_block.tolist(), obj_block.tolist()):
            was_member = x in accountant
            ca_before = 0.0 if was_member else accountant.min_approx(x)
            decision = policy.on_request(x, now)

            if decision.state_changed:
                if decision.inserted is None or decision.evicted is None:
                    raise AccountingError("state change without insert/evict detail")
                if not decision.retrieval_performed:
                    raise AccountingError("insertion requires a retrieval")
                if decision.evicted not in accountant or decision.inserted in accountant:
                    raise AccountingError(f"illegal swap at t={t + 1}")
                accountant.swap(decision.inserted, decision.evicted)
                movement = eff
                state_changes += 1
                if decision.inserted == x:
                    service = 0.0
                else:  # duel-style insertion of a different object
                    service = min(accountant.min_approx(x), chi)
            else:
                movement = 0.0
                service = 0.0 if was_member else min(ca_before, chi)
            if not math.isclose(service, decision.service_cost_paid, rel_tol=1e-9, abs_tol=1e-12):
                raise AccountingError(
                    f"service cost mismatch at t={t + 1}: "
                    f"policy={decision.service_cost_paid} accountant={service}"
                )

            acc_cost += movement + service
            movement_total += movement
            service_total += service
            acc_approx += ca_before
            if was_member:
                exact_hits += 1
            elif decision.retrieval_performed:
                misses += 1
            else:
                approx_hits += 1
            if decision_log is not None:
                decision_log.append((x, decision))

            t += 1
            if t == next_mark:
                emit()
                next_mark = next(marks_iter, None)

    return ReplicaResult(
        replica, records, sorted(policy.contents()), movement_total, service_total,
        decision_log,
    )


def _pool_size(replicas: int) -> int:
    cap = os.environ.get("SIMCACHE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, replicas))


def _worker(args):
    raw, replica = args
    return run_replica(ExperimentConfig.from_dict(raw), replica)


def run_experiment(cfg: ExperimentConfig | dict, parallel: bool = True) -> list[ReplicaResult]:
    """Run all replicas (seed + i); results ordered by replica index."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    replicas = list(range(cfg.replicas))
    workers = _pool_size(cfg.replicas) if parallel else 1
    if workers <= 1 or cfg.replicas == 1:
        return [run_replica(cfg, r) for r in replicas]
    import multiprocessing as mp

    raw = cfg.to_dict()
    with mp.get_context("fork").Pool(workers) as pool:
        results = pool.map(_worker, [(raw, r) for r in replicas])
    return sorted(results, key=lambda r: r.replica)


def compare(configs: dict, metric: str = "inst_cost", parallel: bool = True):
    """Aligned checkpoint table across experiments sharing a workload.

    ``configs`` maps column label -> config; returns (checkpoints, table)
    where table[label] is the per-checkpoint replica mean of ``metric``.
    """
    parsed = {
        label: cfg if isinstance(cfg, ExperimentConfig) else ExperimentConfig.from_dict(cfg)
        for label, cfg in configs.items()
    }
    base = None
    for label, cfg in parsed.items():
        key = (json.dumps(cfg.space, sort_keys=True), json.dumps(cfg.workload, sort_keys=True))
        if base is None:
            base = key
        elif key != base:
            raise ConfigError("compared configs must share space and workload")
    table, marks = {}, None
    for label, cfg in parsed.items():
        results = run_experiment(cfg, parallel=parallel)
        per_replica = []
        for res in results:
            per_replica.append({rec.t: getattr(rec, metric) for rec in res.records})
        ts = sorted(per_replica[0])
        if marks is None:
            marks = ts
        elif ts != marks:
            raise ConfigError("checkpoint schedules are misaligned across configs")
        table[label] = [
            float(np.mean([col[t] for col in per_replica])) for t in marks
        ]
    return marks, table


# -- artifact writers --------------------------------------------------------


def write_records_csv(path, results: list[ReplicaResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for res in results:
            for rec in res.records:
                w.writerow(rec.row())


def write_final_states_csv(path, results: list[ReplicaResult], space):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(space, TorusGrid):
            w.writerow(["replica", "object_id", "row", "col"])
            for res in results:
                for o in res.final_state:
                    r, c = space.coords(o)
                    w.writerow([res.replica, o, r, c])
        else:
            w.writerow(["replica", "object_id"])
            for res in results:
                for o in res.final_state:
                    w.writerow([res.replica, o])


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, cfg: ExperimentConfig):
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": config_digest(cfg),
        "seed": cfg.seed,
        "versions": {"simcache": simcache.__version__, "numpy": np.__version__},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
