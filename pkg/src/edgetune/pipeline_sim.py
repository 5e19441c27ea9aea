"""Discrete-event simulation of hybrid-parallel fine-tuning.

Two schedules are modeled:

* ``simulate_1f1b``: one mini-batch of ``M`` micro-batches through a staged
  plan. Every replica of stage ``k`` receives its ``B / g`` slice of each
  micro-batch, runs ``min(S - k - 1, M)`` warm-up forwards and then strictly
  alternates one forward with one backward. A group forwards a micro-batch
  (activations or gradients) once all its replicas are done with it. Each
  group serialises its outgoing transfers on one lane per direction, and
  transfers overlap with compute. Groups with more than one replica run a
  ring AllReduce of their trainable parameters after their final backward.
* ``simulate_cached_epoch``: later epochs, where every device trains only
  the side network on cached backbone activations in plain data parallelism.

The clock is integer microseconds. Events carry a lane name so exporters can
draw compute, transfers, collectives and disk reads on separate rows.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from . import model_cost, svg
from .cache_store import CacheMissError, entry_payload_bytes
from .io_utils import atomic_write_text
from .model_cost import ModelSpec
from .planner import PlanConfig
from .profile import (LinkProfile, ProfileSet, TensorSizes, comm_time, comm_us,
                      ring_allgather_time, ring_allreduce_us, round_half_up)

TRACE_SCHEMA_VERSION = 1
DEFAULT_DISK_RATE = 100e6  # bytes/s, embedded flash

KINDS = ("RecvAct", "RecvGrad", "CacheLoad", "FwdCell", "BwdCell",
         "SendAct", "SendGrad", "AllReduce", "Redistribute")
KIND_ORDER = {k: i for i, k in enumerate(KINDS)}
LANES = ("compute", "recv", "xfer_fwd", "xfer_bwd", "collective", "io")
_LANE_OF = {"FwdCell": "compute", "BwdCell": "compute", "RecvAct": "recv", "RecvGrad": "recv",
            "SendAct": "xfer_fwd", "SendGrad": "xfer_bwd", "AllReduce": "collective",
            "Redistribute": "collective", "CacheLoad": "io"}


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimEvent:
    device_id: str
    kind: str
    micro_batch_id: int
    stage_id: int
    start_us: int
    end_us: int

    def __post_init__(self):
        if self.kind not in KIND_ORDER:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.end_us < self.start_us:
            raise ValueError("event ends before it starts")

    @property
    def lane(self) -> str:
        return _LANE_OF[self.kind]

    @property
    def start_ms(self) -> float:
        return self.start_us / 1000

    @property
    def end_ms(self) -> float:
        return self.end_us / 1000

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us


@dataclass(frozen=True)
class ScheduleTrace:
    events: tuple[SimEvent, ...]
    device_ids: tuple[str, ...]
    peak_memory: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)

    @property
    def makespan_us(self) -> int:
        return max((e.end_us for e in self.events), default=0)

    @property
    def makespan_ms(self) -> float:
        return self.makespan_us / 1000

    def for_device(self, device_id: str, kinds: Sequence[str] | None = None) -> list[SimEvent]:
        return [e for e in self.events
                if e.device_id == device_id and (kinds is None or e.kind in kinds)]

    def compute_sequence(self, device_id: str) -> list[str]:
        """``["F0", "F1", "B0", ...]`` for one device."""
        return [("F" if e.kind == "FwdCell" else "B") + str(e.micro_batch_id)
                for e in self.for_device(device_id, ("FwdCell", "BwdCell"))]


def _sorted_events(events, device_ids) -> tuple[SimEvent, ...]:
    rank = {d: i for i, d in enumerate(device_ids)}
    return tuple(sorted(events, key=lambda e: (e.start_us, rank[e.device_id],
                                               KIND_ORDER[e.kind], e.micro_batch_id,
                                               e.end_us)))


def one_f_one_b_order(stage: int, num_stages: int, num_micro_batches: int) -> list[tuple[str, int]]:
    """Compute-op order of a stage: warm-up forwards, F/B alternation, cool-down."""
    warmup = min(num_stages - stage - 1, num_micro_batches)
    ops = [("F", j) for j in range(warmup)]
    nxt_f, nxt_b = warmup, 0
    while nxt_f < num_micro_batches:
        ops.append(("F", nxt_f))
        ops.append(("B", nxt_b))
        nxt_f += 1
        nxt_b += 1
    ops.extend(("B", j) for j in range(nxt_b, num_micro_batches))
    return ops


@dataclass
class _Stage:
    first: int
    last: int
    devices: list[int]
    beta: int
    fwd: dict
    bwd: dict
    send_fwd: int
    send_bwd: int
    allreduce: int


def _stage_table(plan: PlanConfig, profiles: ProfileSet, sizes: TensorSizes) -> list[_Stage]:
    if plan.num_devices != len(profiles):
        raise SimulationError(
            f"plan uses {plan.num_devices} devices but the profile set has {len(profiles)}")
    if plan.num_layers != profiles.num_layers:
        raise SimulationError(
            f"plan covers {plan.num_layers} layers but profiles cover {profiles.num_layers}")
    stages = []
    S = plan.num_stages
    for k, ((first, last), group) in enumerate(zip(plan.splits, plan.groups)):
        if plan.micro_batch_size % len(group):
            raise SimulationError(
                f"micro-batch size {plan.micro_batch_size} does not split over {len(group)} devices")
        beta = plan.beta(k)
        fwd = {d: int(profiles[d].forward_us(beta)[first:last + 1].sum()) for d in group}
        bwd = {d: int(profiles[d].backward_us(beta)[first:last + 1].sum()) for d in group}
        B = plan.micro_batch_size
        stages.append(_Stage(
            first, last, list(group), beta, fwd, bwd,
            comm_us(sizes.boundary_activation_bytes(last, B), profiles.link) if k < S - 1 else 0,
            comm_us(sizes.boundary_gradient_bytes(last, B), profiles.link) if k < S - 1 else 0,
            ring_allreduce_us(sizes.stage_trainable_bytes(first, last), len(group), profiles.link),
        ))
    return stages


def simulate_1f1b(plan: PlanConfig, profiles: ProfileSet, sizes: TensorSizes,
                  spec: ModelSpec | None = None) -> ScheduleTrace:
    """Simulate one mini-batch of the plan under 1F1B.

    Raises:
        SimulationError: if the plan does not match the profile set.
        ProfileError: if a device lacks the micro-batch size the plan needs.
    """
    stages = _stage_table(plan, profiles, sizes)
    S, M = plan.num_stages, plan.num_micro_batches
    ids = [d.device_id for d in profiles.devices]
    stage_of = {d: k for k, st in enumerate(stages) for d in st.devices}
    ops = {d: one_f_one_b_order(stage_of[d], S, M) for d in stage_of}
    cursor = {d: 0 for d in stage_of}
    busy = {d: False for d in stage_of}
    act_ready = [[k == 0] * M for k in range(S)]
    grad_ready = [[k == S - 1] * M for k in range(S)]
    fwd_done = [[0] * M for _ in range(S)]
    bwd_done = [[0] * M for _ in range(S)]
    groups_finished = [0] * S
    lane_free = {("f", k): 0 for k in range(S)} | {("b", k): 0 for k in range(S)}
    live = {d: 0 for d in stage_of}
    peak_live = {d: 0 for d in stage_of}
    events: list[SimEvent] = []
    heap: list = []
    seq = 0

    def push(t, dev, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (t, dev, KIND_ORDER[kind], seq, kind, payload))
        seq += 1

    def try_start(d, now):
        if busy[d] or cursor[d] >= len(ops[d]):
            return
        k = stage_of[d]
        op, j = ops[d][cursor[d]]
        if op == "F" and not act_ready[k][j]:
            return
        if op == "B" and not grad_ready[k][j]:
            return
        st = stages[k]
        dur = st.fwd[d] if op == "F" else st.bwd[d]
        kind = "FwdCell" if op == "F" else "BwdCell"
        busy[d] = True
        if op == "F":
            live[d] += 1
            peak_live[d] = max(peak_live[d], live[d])
        events.append(SimEvent(ids[d], kind, j, k, now, now + dur))
        push(now + dur, d, kind, j)

    def transfer(direction, k, j, now):
        st = stages[k]
        # boundary k carries activations k -> k+1 and gradients k+1 -> k
        dur = st.send_fwd if direction == "f" else stages[k - 1].send_bwd
        start = max(now, lane_free[direction, k])
        lane_free[direction, k] = start + dur
        kind = "SendAct" if direction == "f" else "SendGrad"
        events.append(SimEvent(ids[st.devices[0]], kind, j, k, start, start + dur))
        target = k + 1 if direction == "f" else k - 1
        push(start + dur, stages[target].devices[0],
             "RecvAct" if direction == "f" else "RecvGrad", (target, j))

    for d in sorted(stage_of):
        try_start(d, 0)

    while heap:
        now, d, _, _, kind, payload = heapq.heappop(heap)
        if kind in ("FwdCell", "BwdCell"):
            j, k = payload, stage_of[d]
            st = stages[k]
            busy[d] = False
            cursor[d] += 1
            if kind == "FwdCell":
                fwd_done[k][j] += 1
                if fwd_done[k][j] == len(st.devices) and k < S - 1:
                    transfer("f", k, j, now)
            else:
                live[d] -= 1
                bwd_done[k][j] += 1
                if bwd_done[k][j] == len(st.devices):
                    if k > 0:
                        transfer("b", k, j, now)
                    groups_finished[k] += 1
                    if groups_finished[k] == M and len(st.devices) > 1:
                        for member in st.devices:
                            events.append(SimEvent(ids[member], "AllReduce", -1, k,
                                                   now, now + st.allreduce))
            try_start(d, now)
        else:
            k, j = payload
            ready = act_ready if kind == "RecvAct" else grad_ready
            ready[k][j] = True
            for member in stages[k].devices:
                events.append(SimEvent(ids[member], kind, j, k, now, now))
            for member in stages[k].devices:
                try_start(member, now)

    unfinished = [ids[d] for d in stage_of if cursor[d] < len(ops[d])]
    if unfinished:  # pragma: no cover - would indicate a scheduling bug
        raise SimulationError(f"schedule deadlocked on {unfinished}")

    peak = {}
    for d, k in stage_of.items():
        st = stages[k]
        peak[ids[d]] = sizes.stage_memory(st.first, st.last, st.beta, peak_live[d])
    last = [e for e in events if e.stage_id == S - 1 and e.kind in ("FwdCell", "BwdCell")]
    first_f = min(e.start_us for e in last if e.kind == "FwdCell")
    exec_end = max(e.end_us for e in last if e.kind == "BwdCell")
    makespan = max(e.end_us for e in events)
    phases = {"beginning": first_f, "execution": exec_end - first_f, "ending": makespan - exec_end}
    return ScheduleTrace(_sorted_events(events, ids), tuple(ids), peak, phases)


def phase1_epoch_us(plan: PlanConfig, profiles: ProfileSet, sizes: TensorSizes,
                    num_samples: int) -> int:
    """First-epoch time: mini-batches of ``B * M`` samples run back to back.

    A trailing partial mini-batch runs with fewer micro-batches.
    """
    per_batch = plan.micro_batch_size * plan.num_micro_batches
    full, rest = divmod(num_samples, per_batch)
    total = full * simulate_1f1b(plan, profiles, sizes).makespan_us if full else 0
    if rest:
        tail = PlanConfig(plan.splits, plan.groups, plan.micro_batch_size,
                          math.ceil(rest / plan.micro_batch_size))
        total += simulate_1f1b(tail, profiles, sizes).makespan_us
    return total


# ---------------------------------------------------------------------------
# cached epochs

class CacheIndex(Protocol):
    def sample_ids(self) -> list[str]: ...

    def payload_size(self, sample_id: str) -> int: ...


class ModeledCache:
    """Size-only stand-in for a populated cache of ``num_samples`` sequences.

    Entry sizes follow the on-disk layout of :mod:`edgetune.cache_store`.
    """

    def __init__(self, spec: ModelSpec, seq_len: int, num_samples: int,
                 num_tensors: int | None = None, bytes_per_scalar: int | None = None):
        self.num_tensors = spec.num_layers + 1 if num_tensors is None else num_tensors
        width = spec.bytes_per_scalar if bytes_per_scalar is None else bytes_per_scalar
        self._size = entry_payload_bytes(self.num_tensors, seq_len, spec.hidden_size, width)
        self._ids = [f"sample-{i}" for i in range(num_samples)]

    def sample_ids(self) -> list[str]:
        return list(self._ids)

    def payload_size(self, sample_id: str) -> int:
        return self._size


def cached_forward_ratio(spec: ModelSpec, layer: int, seq_len: int) -> float:
    """Share of a layer's forward FLOPs left once backbone outputs come from cache."""
    full = model_cost.layer_flops(spec, layer, 1, seq_len)
    cached = model_cost.layer_flops(spec, layer, 1, seq_len, cached=True)
    return cached.fwd_flops / full.fwd_flops


def simulate_cached_epoch(devices: Sequence[int], spec: ModelSpec, profiles: ProfileSet,
                          sizes: TensorSizes, num_samples: int, *, micro_batch_size: int,
                          num_micro_batches: int, cache: CacheIndex,
                          disk_rate: float = DEFAULT_DISK_RATE) -> ScheduleTrace:
    """One cached epoch: side-network-only training, data parallel on ``devices``.

    Samples are taken in cache order, ``micro_batch_size`` per micro-batch and
    dealt round-robin to the devices. Per micro-batch each device loads its
    entries from disk, runs the side network forward (profile forward time
    scaled by the cached/uncached FLOP ratio) and backward. After
    ``num_micro_batches`` micro-batches all devices meet for a ring AllReduce
    of the trainable parameters.

    Raises:
        CacheMissError: if the cache holds fewer than ``num_samples`` entries
            or an entry is absent.
    """
    if spec.technique != "ParallelAdapters":
        raise SimulationError("cached epochs require the ParallelAdapters technique")
    if not devices:
        raise SimulationError("no devices")
    if disk_rate <= 0:
        raise ValueError("disk_rate must be positive")
    B, M = micro_batch_size, num_micro_batches
    if B < 1 or M < 1:
        raise ValueError("micro_batch_size and num_micro_batches must be >= 1")
    sample_ids = cache.sample_ids()
    if len(sample_ids) < num_samples:
        raise CacheMissError(
            f"activation cache holds {len(sample_ids)} entries, epoch needs {num_samples}")
    sample_ids = sample_ids[:num_samples]
    D = len(devices)
    ids = [profiles[d].device_id for d in devices]
    seq_len = sizes.seq_len
    ratios = [cached_forward_ratio(spec, l, seq_len) for l in range(spec.num_layers)]
    allreduce = ring_allreduce_us(sizes.stage_trainable_bytes(0, spec.num_layers - 1), D,
                                  profiles.link)

    def side_forward_us(dev, beta):
        t = dev.forward_us(beta)
        return max(1, round_half_up(sum(float(t[l]) * ratios[l] for l in range(len(t)))))

    events = []
    clock = [0] * D
    micro = [sample_ids[i:i + B] for i in range(0, num_samples, B)]
    for mb_start in range(0, len(micro), M):
        for j in range(mb_start, min(mb_start + M, len(micro))):
            batch = micro[j]
            for r, d in enumerate(devices):
                mine = batch[r::D]
                if not mine:
                    continue
                dev = profiles[d]
                nbytes = sum(cache.payload_size(s) for s in mine)
                load = round_half_up(nbytes / disk_rate * 1e6)
                fwd = side_forward_us(dev, len(mine))
                bwd = int(dev.backward_us(len(mine)).sum())
                t = clock[r]
                events.append(SimEvent(ids[r], "CacheLoad", j, 0, t, t + load))
                t += load
                events.append(SimEvent(ids[r], "FwdCell", j, 0, t, t + fwd))
                t += fwd
                events.append(SimEvent(ids[r], "BwdCell", j, 0, t, t + bwd))
                clock[r] = t + bwd
        barrier = max(clock)
        if D > 1:
            for r in range(D):
                events.append(SimEvent(ids[r], "AllReduce", -1, 0, barrier, barrier + allreduce))
            barrier += allreduce
        clock = [barrier] * D
    trace_events = _sorted_events(events, ids)
    makespan = max((e.end_us for e in events), default=0)
    tail = allreduce if D > 1 and events else 0
    return ScheduleTrace(trace_events, tuple(ids), {},
                         {"beginning": 0, "execution": makespan - tail, "ending": tail})


# ---------------------------------------------------------------------------
# redistribution between the two phases

def cache_shard_bytes(plan: PlanConfig, sizes: TensorSizes, num_samples: int,
                      bytes_per_scalar: int | None = None) -> list[int]:
    """Cached bytes each device holds after the first epoch.

    Stage ``k`` caches the outputs of its own layers (stage 0 also the
    embedding output). Replica ``r`` of a ``g``-way group saw slice ``r`` of
    every micro-batch.
    """
    spec = sizes.spec
    width = spec.bytes_per_scalar if bytes_per_scalar is None else bytes_per_scalar
    tensor = sizes.seq_len * spec.hidden_size * width
    B = plan.micro_batch_size
    shards = [0] * plan.num_devices
    for k, ((first, last), group) in enumerate(zip(plan.splits, plan.groups)):
        tensors = last - first + 1 + (1 if k == 0 else 0)
        beta = plan.beta(k)
        for r, d in enumerate(group):
            seen = sum(1 for i in range(num_samples) if (i % B) // beta == r)
            shards[d] = seen * tensors * tensor
    return shards


def simulate_redistribution(plan: PlanConfig, sizes: TensorSizes, link: LinkProfile,
                            num_samples: int, bytes_per_scalar: int | None = None) -> float:
    """Milliseconds to give every device all cached activations and all
    side-network parameters: a ring all-gather of the cache shards followed
    by one broadcast of the trainable parameters."""
    if plan.num_devices == 1:
        return 0.0
    shards = cache_shard_bytes(plan, sizes, num_samples, bytes_per_scalar)
    params = sizes.stage_trainable_bytes(0, sizes.num_layers - 1)
    return ring_allgather_time(shards, link) + comm_time(params, link)


# ---------------------------------------------------------------------------
# export

def trace_to_dict(trace: ScheduleTrace) -> dict:
    rank = {d: i for i, d in enumerate(trace.device_ids)}
    meta = []
    for d, i in rank.items():
        meta.append({"ph": "M", "name": "process_name", "pid": i, "tid": 0,
                     "args": {"name": d}})
        for t, lane in enumerate(LANES):
            meta.append({"ph": "M", "name": "thread_name", "pid": i, "tid": t,
                         "args": {"name": lane}})
    body = []
    for e in trace.events:
        label = e.kind if e.micro_batch_id < 0 else f"{e.kind} {e.micro_batch_id}"
        body.append({
            "ph": "X", "name": label, "cat": e.lane,
            "ts": e.start_us, "dur": e.duration_us,
            "pid": rank[e.device_id], "tid": LANES.index(e.lane),
            "args": {"device_id": e.device_id, "kind": e.kind,
                     "micro_batch_id": e.micro_batch_id, "stage_id": e.stage_id},
        })
    return {
        "traceEvents": meta + body,
        "displayTimeUnit": "ms",
        "otherData": {
            "schema_version": TRACE_SCHEMA_VERSION,
            "device_ids": list(trace.device_ids),
            "makespan_us": trace.makespan_us,
            "peak_memory_bytes": {k: int(v) for k, v in trace.peak_memory.items()},
            "phases_us": {k: int(v) for k, v in trace.phases.items()},
        },
    }


def trace_from_dict(doc: dict) -> ScheduleTrace:
    other = doc.get("otherData", {})
    if other.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise ValueError(f"unsupported trace schema_version {other.get('schema_version')!r}")
    events = []
    for raw in doc["traceEvents"]:
        if raw.get("ph") != "X":
            continue
        a = raw["args"]
        events.append(SimEvent(a["device_id"], a["kind"], int(a["micro_batch_id"]),
                               int(a["stage_id"]), int(raw["ts"]), int(raw["ts"]) + int(raw["dur"])))
    return ScheduleTrace(tuple(events), tuple(other["device_ids"]),
                         dict(other.get("peak_memory_bytes", {})), dict(other.get("phases_us", {})))


def dumps_trace(trace: ScheduleTrace) -> str:
    return json.dumps(trace_to_dict(trace), indent=None, separators=(",", ":")) + "\n"


def import_trace(path: str | Path) -> ScheduleTrace:
    with open(path) as fh:
        return trace_from_dict(json.load(fh))


def trace_svg(trace: ScheduleTrace, title: str = "") -> str:
    """Gantt chart: one compute row per device plus a thin row for transfers,
    collectives and disk reads. Cells are labelled with micro-batch ids."""
    rows = []
    for d in trace.device_ids:
        compute = [e for e in trace.events if e.device_id == d and e.lane == "compute"]
        other = [e for e in trace.events
                 if e.device_id == d and e.lane not in ("compute", "recv") and e.duration_us]
        rows.append((d, compute, other))
    return svg.gantt(rows, trace.makespan_us, title=title)


def export_trace(trace: ScheduleTrace, path: str | Path, svg_path: str | Path | None = None) -> None:
    """Write the trace-event JSON (and optionally the SVG Gantt chart)."""
    atomic_write_text(path, dumps_trace(trace))
    if svg_path is not None:
        atomic_write_text(svg_path, trace_svg(trace))
