"""Hybrid data + pipeline parallel planning.

The model's layers are cut into contiguous stages and the ordered device list
into contiguous groups; group ``i`` replicates stage ``i`` and splits every
micro-batch of size ``B`` evenly across its ``n`` members (``beta = B / n``).

``dp_partition`` fills, for every prefix of layers, prefix of devices and
stage count, the time of the slowest stage in the best balanced
sub-pipeline. The last stage of a sub-pipeline always takes a suffix of the
device prefix. ``select_plan`` then scores each stage count with the
beginning / execution / ending phase latency model and keeps the cheapest.

All times are integer microseconds carried in float64 arrays (exact below
2**53) so that equality against the brute-force oracle is exact.

Memory: a stage at pipeline position ``k`` keeps up to ``min(M, S - k)``
micro-batches of activations under 1F1B. ``S`` is not known while the table
is being filled, so feasibility is checked against the deepest pipeline the
instance allows, ``S = min(len(devices), num_layers)``. That bound never
under-estimates the real footprint.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model_cost
from .model_cost import ModelSpec
from .profile import (DeviceProfile, ProfileSet, TensorSizes, comm_us, ring_allreduce_us,
                      tensor_sizes)

PLAN_SCHEMA_VERSION = 1
ORACLE_MAX_LAYERS = 10
ORACLE_MAX_DEVICES = 5
INF = math.inf


class NoFeasiblePlanError(RuntimeError):
    pass


class OracleTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseLatencies:
    """Per-mini-batch phase times in microseconds plus the per-stage terms."""

    beginning: int
    execution: int
    ending: int
    fwd: tuple[int, ...]
    bwd: tuple[int, ...]
    send_fwd: tuple[int, ...]
    send_bwd: tuple[int, ...]
    allreduce: tuple[int, ...]

    @property
    def total(self) -> int:
        return self.beginning + self.execution + self.ending

    def to_dict(self) -> dict:
        ms = lambda v: v / 1000  # noqa: E731
        return {
            "beginning_ms": ms(self.beginning),
            "execution_ms": ms(self.execution),
            "ending_ms": ms(self.ending),
            "total_ms": ms(self.total),
            "stage_fwd_ms": [ms(v) for v in self.fwd],
            "stage_bwd_ms": [ms(v) for v in self.bwd],
            "send_fwd_ms": [ms(v) for v in self.send_fwd],
            "send_bwd_ms": [ms(v) for v in self.send_bwd],
            "allreduce_ms": [ms(v) for v in self.allreduce],
        }


@dataclass(frozen=True)
class PlanConfig:
    splits: tuple[tuple[int, int], ...]
    groups: tuple[tuple[int, ...], ...]
    micro_batch_size: int
    num_micro_batches: int
    slowest_stage_us: float = INF
    objective_us: float = INF
    phases: PhaseLatencies | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.splits) != len(self.groups) or not self.splits:
            raise ValueError("a plan needs one non-empty device group per stage")
        expect = 0
        for first, last in self.splits:
            if first != expect or last < first:
                raise ValueError(f"layer ranges are not contiguous: {self.splits}")
            expect = last + 1
        flat = [d for g in self.groups for d in g]
        if any(not g for g in self.groups) or flat != list(range(len(flat))):
            raise ValueError(f"device groups must be contiguous and disjoint: {self.groups}")

    @property
    def num_stages(self) -> int:
        return len(self.splits)

    @property
    def num_layers(self) -> int:
        return self.splits[-1][1] + 1

    @property
    def num_devices(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def objective_ms(self) -> float:
        return self.objective_us / 1000

    def beta(self, stage: int) -> int:
        return self.micro_batch_size // len(self.groups[stage])

    def stage_of_device(self, device: int) -> int:
        for i, g in enumerate(self.groups):
            if device in g:
                return i
        raise KeyError(device)


@dataclass
class DpTable:
    """``W[s, y, n]``: slowest-stage time of the best ``s``-stage pipeline over
    layers ``0..y`` on the first ``n`` devices; ``inf`` when infeasible.
    ``q[s, y, n]`` and ``m[s, y, n]`` record the last stage's split point and
    group size (``-1`` where undefined)."""

    W: np.ndarray
    q: np.ndarray
    m: np.ndarray
    micro_batch_size: int
    num_micro_batches: int

    @property
    def num_layers(self) -> int:
        return self.W.shape[1]

    @property
    def num_devices(self) -> int:
        return self.W.shape[2] - 1

    @property
    def max_stages(self) -> int:
        return self.W.shape[0] - 1

    def value(self, num_stages: int) -> float:
        return float(self.W[num_stages, self.num_layers - 1, self.num_devices])

    def reconstruct(self, num_stages: int) -> PlanConfig:
        y, n, s = self.num_layers - 1, self.num_devices, num_stages
        if not math.isfinite(self.W[s, y, n]):
            raise NoFeasiblePlanError(f"no feasible {s}-stage plan")
        splits, groups = [], []
        while s > 1:
            q, m = int(self.q[s, y, n]), int(self.m[s, y, n])
            splits.append((q + 1, y))
            groups.append(tuple(range(n - m, n)))
            y, n, s = q, n - m, s - 1
        splits.append((0, y))
        groups.append(tuple(range(n)))
        return PlanConfig(tuple(reversed(splits)), tuple(reversed(groups)),
                          self.micro_batch_size, self.num_micro_batches,
                          slowest_stage_us=self.value(num_stages))


def max_pipeline_depth(num_layers: int, num_devices: int) -> int:
    return min(num_layers, num_devices)


def in_flight_bound(stage_index: int, num_stages: int, num_micro_batches: int) -> int:
    """Micro-batches whose activations a 1F1B stage holds at peak."""
    return max(1, min(num_micro_batches, num_stages - stage_index))


def stage_time(first: int, last: int, group: Sequence[DeviceProfile], micro_batch_size: int,
               sizes: TensorSizes, in_flight: int = 1) -> float:
    """Data-parallel time of one stage on ``group``, or ``inf`` on OOM.

    Returns ``max_d sum_l (t_f + t_b)`` at ``beta = B / len(group)``. The
    stage is infeasible (``inf``) if ``B`` does not split evenly or any
    member's budget is below the stage's peak memory.
    """
    n = len(group)
    if not group or first > last:
        raise ValueError("stage_time needs a non-empty group and first <= last")
    if micro_batch_size % n:
        return INF
    beta = micro_batch_size // n
    need = sizes.stage_memory(first, last, beta, in_flight)
    if any(dev.memory_budget < need for dev in group):
        return INF
    worst = 0
    for dev in group:
        total = int(dev.forward_us(beta)[first:last + 1].sum()
                    + dev.backward_us(beta)[first:last + 1].sum())
        worst = max(worst, total)
    return float(worst)


def _group_time_tables(profiles: ProfileSet, B: int) -> np.ndarray:
    """``times[x, y, a, m]`` for group ``a..a+m-1``; memory not applied."""
    L, D = profiles.num_layers, len(profiles)
    times = np.full((L, L, D, D + 1), INF)
    upper = np.triu(np.ones((L, L), dtype=bool))
    cums = {}
    for m in range(1, D + 1):
        if B % m:
            continue
        beta = B // m
        for dev_idx, dev in enumerate(profiles.devices):
            per_layer = dev.forward_us(beta) + dev.backward_us(beta)
            cums[dev_idx, m] = np.concatenate(([0], np.cumsum(per_layer))).astype(np.float64)
    for m in range(1, D + 1):
        if B % m:
            continue
        for a in range(0, D - m + 1):
            span = np.stack([cums[a + j, m] for j in range(m)])  # (m, L+1)
            sums = span[:, None, 1:] - span[:, :-1, None]         # [dev, x, y]
            worst = sums.max(axis=0)
            times[:, :, a, m] = np.where(upper, worst, INF)
    return times


def _memory_tables(sizes: TensorSizes, L: int, D: int, B: int):
    spec = sizes.spec
    static = np.array([model_cost.stage_static_bytes(spec, l, l) for l in range(L)], dtype=np.float64)
    act = np.array([model_cost.stage_activation_bytes(spec, l, l, 1, sizes.seq_len)
                    for l in range(L)], dtype=np.float64)
    s_cum = np.concatenate(([0.0], np.cumsum(static)))
    a_cum = np.concatenate(([0.0], np.cumsum(act)))
    static_xy = s_cum[None, 1:] - s_cum[:-1, None]
    act_xy = a_cum[None, 1:] - a_cum[:-1, None]
    betas = np.array([B // m if m and B % m == 0 else 0 for m in range(D + 1)], dtype=np.float64)
    return static_xy, act_xy, betas


def _min_budgets(profiles: ProfileSet) -> np.ndarray:
    D = len(profiles)
    budgets = np.array([d.memory_budget for d in profiles.devices], dtype=np.float64)
    out = np.full((D, D + 1), -INF)
    for a in range(D):
        for m in range(1, D - a + 1):
            out[a, m] = budgets[a:a + m].min()
    return out


def dp_partition(spec: ModelSpec, profiles: ProfileSet, micro_batch_size: int,
                 num_micro_batches: int, sizes: TensorSizes | None = None) -> DpTable:
    """Fill the slowest-stage table for every layer prefix, device prefix and stage count.

    Ties go to the smaller split point, then the smaller last group.
    """
    L, D = profiles.num_layers, len(profiles)
    if L != spec.num_layers:
        raise ValueError(f"profiles cover {L} layers but the model has {spec.num_layers}")
    B, M = micro_batch_size, num_micro_batches
    if B < 1 or M < 1:
        raise ValueError("micro_batch_size and num_micro_batches must be >= 1")
    sizes = sizes or tensor_sizes(spec, profiles.seq_len)
    depth = max_pipeline_depth(L, D)

    times = _group_time_tables(profiles, B)
    static_xy, act_xy, betas = _memory_tables(sizes, L, D, B)
    budgets = _min_budgets(profiles)

    def stage_table(k: int) -> np.ndarray:
        flight = in_flight_bound(k, depth, M)
        need = static_xy[:, :, None] + flight * betas[None, None, :] * act_xy[:, :, None]
        ok = need[:, :, None, :] <= budgets[None, None, :, :]
        return np.where(ok, times, INF)

    W = np.full((depth + 1, L, D + 1), INF)
    qp = np.full((depth + 1, L, D + 1), -1, dtype=np.int64)
    mp = np.full((depth + 1, L, D + 1), -1, dtype=np.int64)

    first = stage_table(0)
    for n in range(1, D + 1):
        W[1, :, n] = first[0, :, 0, n]

    for s in range(2, depth + 1):
        T = stage_table(s - 1)
        prev = W[s - 1]
        for y in range(s - 1, L):
            qs = np.arange(s - 2, y)                       # prefix ends at q
            for n in range(s, D + 1):
                ms = np.arange(1, n - s + 2)               # n - m >= s - 1
                rest = n - ms
                head = prev[qs[:, None], rest[None, :]]
                tail = T[qs[:, None] + 1, y, rest[None, :], ms[None, :]]
                cand = np.maximum(head, tail)
                flat = int(np.argmin(cand))
                best = cand.flat[flat]
                if math.isfinite(best):
                    qi, mi = divmod(flat, len(ms))
                    W[s, y, n] = best
                    qp[s, y, n] = qs[qi]
                    mp[s, y, n] = ms[mi]
    return DpTable(W, qp, mp, B, M)


def phase_latencies(plan: PlanConfig, profiles: ProfileSet,
                    sizes: TensorSizes) -> PhaseLatencies:
    """Beginning, execution and ending phase times of one mini-batch.

    ``beginning`` sums forward compute and activation transfers of every
    stage but the last; ``execution`` is ``M`` forward/backward rounds of the
    last stage; ``ending`` is the longest gradient return path plus that
    stage's AllReduce.
    """
    link = profiles.link
    S, B, M = plan.num_stages, plan.micro_batch_size, plan.num_micro_batches
    fwd, bwd, cf, cb, ar = [], [], [], [], []
    for i, ((first, last), group) in enumerate(zip(plan.splits, plan.groups)):
        beta = plan.beta(i)
        devs = [profiles[d] for d in group]
        fwd.append(max(int(d.forward_us(beta)[first:last + 1].sum()) for d in devs))
        bwd.append(max(int(d.backward_us(beta)[first:last + 1].sum()) for d in devs))
        if i < S - 1:
            cf.append(comm_us(sizes.boundary_activation_bytes(last, B), link))
            cb.append(comm_us(sizes.boundary_gradient_bytes(last, B), link))
        ar.append(ring_allreduce_us(sizes.stage_trainable_bytes(first, last), len(group), link))
    beginning = sum(fwd[i] + cf[i] for i in range(S - 1))
    execution = M * (fwd[-1] + bwd[-1])
    ending = max(ar[i] + sum(bwd[j] + cb[j] for j in range(i, S - 1)) for i in range(S))
    return PhaseLatencies(beginning, execution, ending, tuple(fwd), tuple(bwd),
                          tuple(cf), tuple(cb), tuple(ar))


def _with_phases(plan: PlanConfig, profiles: ProfileSet, sizes: TensorSizes) -> PlanConfig:
    phases = phase_latencies(plan, profiles, sizes)
    return PlanConfig(plan.splits, plan.groups, plan.micro_batch_size, plan.num_micro_batches,
                      plan.slowest_stage_us, float(phases.total), phases)


def select_plan(spec: ModelSpec, profiles: ProfileSet, micro_batch_size: int,
                num_micro_batches: int, sizes: TensorSizes | None = None,
                table: DpTable | None = None, return_candidates: bool = False):
    """Pick the stage count whose balanced plan minimises total phase latency.

    Raises:
        NoFeasiblePlanError: if every stage count is out of memory.
    """
    sizes = sizes or tensor_sizes(spec, profiles.seq_len)
    table = table or dp_partition(spec, profiles, micro_batch_size, num_micro_batches, sizes)
    candidates = []
    for s in range(1, table.max_stages + 1):
        if math.isfinite(table.value(s)):
            candidates.append(_with_phases(table.reconstruct(s), profiles, sizes))
    if not candidates:
        raise NoFeasiblePlanError("no feasible plan")
    best = min(candidates, key=lambda p: (p.objective_us, p.num_stages))
    return (best, candidates) if return_candidates else best


def device_peak_memory(plan: PlanConfig, sizes: TensorSizes) -> list[int]:
    """Modeled peak bytes per device (device-index order) under 1F1B."""
    peaks = [0] * plan.num_devices
    for i, ((first, last), group) in enumerate(zip(plan.splits, plan.groups)):
        flight = in_flight_bound(i, plan.num_stages, plan.num_micro_batches)
        need = sizes.stage_memory(first, last, plan.beta(i), flight)
        for d in group:
            peaks[d] = need
    return peaks


# ---------------------------------------------------------------------------
# brute force

def _compositions(total: int, parts: int):
    """Cut points splitting ``range(total)`` into ``parts`` non-empty runs."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple((bounds[i], bounds[i + 1] - 1) for i in range(parts))


def enumerate_plans(num_layers: int, num_devices: int, num_stages: int | None = None):
    """Every (layer partition, contiguous device grouping) pair."""
    stage_counts = ([num_stages] if num_stages else
                    range(1, max_pipeline_depth(num_layers, num_devices) + 1))
    for s in stage_counts:
        for splits in _compositions(num_layers, s):
            for dev_runs in _compositions(num_devices, s):
                groups = tuple(tuple(range(a, b + 1)) for a, b in dev_runs)
                yield s, splits, groups


def brute_force_oracle(spec: ModelSpec, profiles: ProfileSet, micro_batch_size: int,
                       num_micro_batches: int, objective: str = "slowest_stage",
                       num_stages: int | None = None,
                       sizes: TensorSizes | None = None) -> PlanConfig | None:
    """Exhaustive reference for small instances.

    ``slowest_stage`` returns the balanced optimum (for ``num_stages`` if
    given, otherwise over all stage counts). Ties are resolved the same way
    as the table: compare the whole-pipeline maximum, then the last split
    point, then the last group size, then the same triple for the remaining
    prefix. ``phase_total`` takes that balanced optimum for every stage count and
    returns the one with the lowest total phase latency (ties to fewer
    stages). Returns ``None`` when nothing is feasible.
    """
    L, D = profiles.num_layers, len(profiles)
    if L > ORACLE_MAX_LAYERS or D > ORACLE_MAX_DEVICES:
        raise OracleTooLargeError(
            f"oracle limited to {ORACLE_MAX_LAYERS} layers and {ORACLE_MAX_DEVICES} devices")
    if objective not in ("slowest_stage", "phase_total"):
        raise ValueError(f"unknown objective {objective!r}")
    sizes = sizes or tensor_sizes(spec, profiles.seq_len)
    depth = max_pipeline_depth(L, D)
    B, M = micro_batch_size, num_micro_batches

    best_per_s: dict[int, tuple] = {}
    for s, splits, groups in enumerate_plans(L, D, num_stages):
        stage_vals = []
        for k, ((first, last), group) in enumerate(zip(splits, groups)):
            devs = [profiles[d] for d in group]
            stage_vals.append(stage_time(first, last, devs, B, sizes,
                                         in_flight_bound(k, depth, M)))
        key = []
        for k in range(s - 1, -1, -1):
            key.append(max(stage_vals[:k + 1]))
            if k:
                key.extend((splits[k][0] - 1, len(groups[k])))
        if not math.isfinite(key[0]):
            continue
        key = tuple(key)
        if s not in best_per_s or key < best_per_s[s][0]:
            best_per_s[s] = (key, splits, groups)

    plans = {s: PlanConfig(splits, groups, B, M, slowest_stage_us=key[0])
             for s, (key, splits, groups) in best_per_s.items()}
    if not plans:
        return None
    if objective == "slowest_stage":
        return min(plans.values(), key=lambda p: (p.slowest_stage_us, p.num_stages))
    scored = [_with_phases(p, profiles, sizes) for p in plans.values()]
    return min(scored, key=lambda p: (p.objective_us, p.num_stages))


# ---------------------------------------------------------------------------
# estimator front-end and file format

class HybridParallelPlanner(BaseEstimator):
    """Estimator-style wrapper: ``fit(profiles)`` learns ``plan_``.

    Parameters
    ----------
    spec : ModelSpec
    micro_batch_size : int
    num_micro_batches : int
    check_oracle : bool
        Cross-check against :func:`brute_force_oracle` when the instance is
        small enough; a mismatch raises ``AssertionError``.
    """

    def __init__(self, spec: ModelSpec | None = None, micro_batch_size: int = 4,
                 num_micro_batches: int = 4, check_oracle: bool = False):
        self.spec = spec
        self.micro_batch_size = micro_batch_size
        self.num_micro_batches = num_micro_batches
        self.check_oracle = check_oracle

    def fit(self, profiles: ProfileSet, y=None):
        if self.spec is None:
            raise ValueError("spec is required")
        self.sizes_ = tensor_sizes(self.spec, profiles.seq_len)
        self.table_ = dp_partition(self.spec, profiles, self.micro_batch_size,
                                   self.num_micro_batches, self.sizes_)
        self.plan_, self.candidates_ = select_plan(
            self.spec, profiles, self.micro_batch_size, self.num_micro_batches,
            self.sizes_, self.table_, return_candidates=True)
        if self.check_oracle and oracle_applicable(profiles):
            ref = brute_force_oracle(self.spec, profiles, self.micro_batch_size,
                                     self.num_micro_batches, "phase_total", sizes=self.sizes_)
            if ref is None or ref.objective_us != self.plan_.objective_us:
                raise AssertionError("planner and brute-force oracle disagree")
        return self

    def predict_latency_ms(self, profiles: ProfileSet | None = None) -> float:
        check_is_fitted(self, "plan_")
        return self.plan_.objective_ms


def oracle_applicable(profiles: ProfileSet) -> bool:
    return profiles.num_layers <= ORACLE_MAX_LAYERS and len(profiles) <= ORACLE_MAX_DEVICES


def plan_to_dict(plan: PlanConfig, spec: ModelSpec, profiles: ProfileSet,
                 candidates: Sequence[PlanConfig] = ()) -> dict:
    sizes = tensor_sizes(spec, profiles.seq_len)
    peaks = device_peak_memory(plan, sizes)
    return {
        "schema_version": PLAN_SCHEMA_VERSION,
        "model": spec.to_dict(),
        "seq_len": profiles.seq_len,
        "micro_batch_size": plan.micro_batch_size,
        "num_micro_batches": plan.num_micro_batches,
        "num_stages": plan.num_stages,
        "stages": [
            {"layers": [first, last],
             "device_indices": list(group),
             "devices": [profiles[d].device_id for d in group],
             "peak_memory_bytes": peaks[group[0]]}
            for (first, last), group in zip(plan.splits, plan.groups)
        ],
        "slowest_stage_ms": plan.slowest_stage_us / 1000,
        "objective_ms": plan.objective_ms,
        "phases": plan.phases.to_dict() if plan.phases else None,
        "candidates": [
            {"num_stages": c.num_stages, "group_sizes": list(c.group_sizes),
             "splits": [list(s) for s in c.splits],
             "slowest_stage_ms": c.slowest_stage_us / 1000, "objective_ms": c.objective_ms}
            for c in candidates
        ],
    }


def dumps_plan(plan: PlanConfig, spec: ModelSpec, profiles: ProfileSet,
               candidates: Sequence[PlanConfig] = ()) -> str:
    return json.dumps(plan_to_dict(plan, spec, profiles, candidates), indent=1) + "\n"


def load_plan(path: str | Path) -> tuple[PlanConfig, ModelSpec, int]:
    """Read ``plan.json``; returns the plan, its model spec and sequence length."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != PLAN_SCHEMA_VERSION:
        raise ValueError(f"unsupported plan schema_version {doc.get('schema_version')!r}")
    spec = ModelSpec.from_dict(doc["model"])
    plan = PlanConfig(
        splits=tuple(tuple(s["layers"]) for s in doc["stages"]),
        groups=tuple(tuple(s["device_indices"]) for s in doc["stages"]),
        micro_batch_size=int(doc["micro_batch_size"]),
        num_micro_batches=int(doc["num_micro_batches"]),
        slowest_stage_us=round(doc["slowest_stage_ms"] * 1000),
        objective_us=round(doc["objective_ms"] * 1000),
    )
    return plan, spec, int(doc["seq_len"])
