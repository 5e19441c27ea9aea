"""Device runtime profiles, link model and tensor sizes.

A profile records, per device and per micro-batch size ``beta``, the forward
and backward time of every layer. Times are held as integer microseconds;
files store milliseconds and are rounded half-up on load so that every
downstream sum is exact.

Profile file layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "model": "bart-large-like",
      "num_layers": 24,
      "seq_len": 128,
      "link": {"bandwidth_bytes_per_s": 125000000, "latency_ms": 0.5},
      "devices": [
        {"device_id": "nano0",
         "memory_budget_bytes": 4294967296,
         "compute_scale": 1.0,
         "timings": [{"batch_size": 1, "t_f_ms": [...], "t_b_ms": [...]}, ...]}
      ]
    }

Device order in the file is the device order the planner works with.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model_cost
from .io_utils import atomic_write_text
from .model_cost import GIB, ModelSpec

PROFILE_SCHEMA_VERSION = 1

#: effective FP32 training throughput of a Jetson-Nano-class board, FLOP/s
DEFAULT_DEVICE_FLOPS = 20e9
#: 1000 Mbps shared LAN
DEFAULT_BANDWIDTH = 125_000_000.0


class ProfileError(ValueError):
    """A profile file or table is malformed or does not cover a query."""


def round_half_up(value) -> int:
    """Round to the nearest integer, halves away from zero (values are >= 0)."""
    if isinstance(value, Decimal):
        return int(value.to_integral_value(rounding=ROUND_HALF_UP))
    return int(math.floor(value + 0.5))


def ms_to_us(ms) -> int:
    if not isinstance(ms, Decimal):
        ms = Decimal(str(ms))
    return round_half_up(ms * 1000)


@dataclass(frozen=True)
class LinkProfile:
    bandwidth: float = DEFAULT_BANDWIDTH  # bytes per second
    latency_ms: float = 0.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ProfileError("link bandwidth must be positive")
        if self.latency_ms < 0:
            raise ProfileError("link latency must be non-negative")

    @classmethod
    def from_mbps(cls, mbps: float, latency_ms: float = 0.0) -> "LinkProfile":
        return cls(bandwidth=mbps * 1e6 / 8, latency_ms=latency_ms)

    def to_dict(self) -> dict:
        return {"bandwidth_bytes_per_s": self.bandwidth, "latency_ms": self.latency_ms}


@dataclass(frozen=True, eq=False)
class DeviceProfile:
    """Per-layer timing tables of one device, keyed by micro-batch size."""

    device_id: str
    t_f: Mapping[int, np.ndarray]
    t_b: Mapping[int, np.ndarray]
    memory_budget: int
    compute_scale: float = 1.0

    def __post_init__(self):
        for table in (self.t_f, self.t_b):
            for arr in table.values():
                arr.setflags(write=False)

    @property
    def num_layers(self) -> int:
        return len(next(iter(self.t_f.values())))

    @property
    def batch_sizes(self) -> list[int]:
        return sorted(self.t_f)

    def forward_us(self, beta: int) -> np.ndarray:
        return self._lookup(self.t_f, beta)

    def backward_us(self, beta: int) -> np.ndarray:
        return self._lookup(self.t_b, beta)

    def has_batch(self, beta) -> bool:
        return beta in self.t_f

    def _lookup(self, table, beta):
        try:
            return table[beta]
        except KeyError:
            raise ProfileError(
                f"device {self.device_id!r} has no timing entry for micro-batch size {beta}"
            ) from None

    def __eq__(self, other):
        if not isinstance(other, DeviceProfile):
            return NotImplemented
        return (self.device_id == other.device_id
                and self.memory_budget == other.memory_budget
                and self.compute_scale == other.compute_scale
                and _tables_equal(self.t_f, other.t_f)
                and _tables_equal(self.t_b, other.t_b))

    __hash__ = None


def _tables_equal(a, b) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass(frozen=True)
class ProfileSet:
    """Ordered devices plus the shared link; the order defines the device list."""

    devices: tuple[DeviceProfile, ...]
    link: LinkProfile
    seq_len: int
    model: str = ""

    def __post_init__(self):
        if not self.devices:
            raise ProfileError("no devices")
        layers = {d.num_layers for d in self.devices}
        if len(layers) != 1:
            raise ProfileError(f"devices disagree on layer count: {sorted(layers)}")

    def __len__(self):
        return len(self.devices)

    def __iter__(self):
        return iter(self.devices)

    def __getitem__(self, idx):
        return self.devices[idx]

    @property
    def num_layers(self) -> int:
        return self.devices[0].num_layers

    def subset(self, n: int) -> "ProfileSet":
        """The first ``n`` devices."""
        return ProfileSet(self.devices[:n], self.link, self.seq_len, self.model)

    def to_dict(self) -> dict:
        return {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "model": self.model,
            "num_layers": self.num_layers,
            "seq_len": self.seq_len,
            "link": self.link.to_dict(),
            "devices": [_device_to_dict(d) for d in self.devices],
        }


def _us_list_to_ms(arr) -> list:
    return [int(v) / 1000 for v in arr]


def _device_to_dict(dev: DeviceProfile) -> dict:
    return {
        "device_id": dev.device_id,
        "memory_budget_bytes": int(dev.memory_budget),
        "compute_scale": dev.compute_scale,
        "timings": [
            {"batch_size": beta,
             "t_f_ms": _us_list_to_ms(dev.t_f[beta]),
             "t_b_ms": _us_list_to_ms(dev.t_b[beta])}
            for beta in dev.batch_sizes
        ],
    }


def dumps_profiles(profiles: ProfileSet) -> str:
    return json.dumps(profiles.to_dict(), indent=1) + "\n"


def save_profiles(profiles: ProfileSet, path: str | Path) -> None:
    atomic_write_text(path, dumps_profiles(profiles))


def load_profiles(path: str | Path) -> ProfileSet:
    """Read and validate a profile file.

    Raises:
        ProfileError: on parse failure, an empty device list, missing layer
            coverage or a non-positive time. Messages name the device,
            micro-batch size and layer at fault.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"cannot parse profile file {path}: {exc}") from exc
    return profiles_from_dict(doc)


def profiles_from_dict(doc: dict) -> ProfileSet:
    if doc.get("schema_version") != PROFILE_SCHEMA_VERSION:
        raise ProfileError(f"unsupported profile schema_version {doc.get('schema_version')!r}")
    raw_devices = doc.get("devices") or []
    if not raw_devices:
        raise ProfileError("no devices")
    num_layers = int(doc["num_layers"])
    link_doc = doc.get("link", {})
    link = LinkProfile(float(link_doc.get("bandwidth_bytes_per_s", DEFAULT_BANDWIDTH)),
                       float(link_doc.get("latency_ms", 0)))
    devices = []
    seen = set()
    for raw in raw_devices:
        dev_id = str(raw["device_id"])
        if dev_id in seen:
            raise ProfileError(f"duplicate device_id {dev_id!r}")
        seen.add(dev_id)
        t_f, t_b = {}, {}
        for entry in raw.get("timings", []):
            beta = int(entry["batch_size"])
            t_f[beta] = _parse_times(dev_id, beta, "t_f", entry["t_f_ms"], num_layers)
            t_b[beta] = _parse_times(dev_id, beta, "t_b", entry["t_b_ms"], num_layers)
        if not t_f:
            raise ProfileError(f"device {dev_id!r} has no timing tables")
        budget = int(raw["memory_budget_bytes"])
        if budget < 0:
            raise ProfileError(f"device {dev_id!r} has a negative memory budget")
        devices.append(DeviceProfile(dev_id, t_f, t_b, budget, float(raw.get("compute_scale", 1.0))))
    return ProfileSet(tuple(devices), link, int(doc["seq_len"]), str(doc.get("model", "")))


def _parse_times(dev_id, beta, name, values, num_layers) -> np.ndarray:
    if len(values) != num_layers:
        raise ProfileError(
            f"device {dev_id!r} {name} at batch size {beta} covers {len(values)} layers, "
            f"expected {num_layers}")
    out = np.empty(num_layers, dtype=np.int64)
    for layer, ms in enumerate(values):
        us = ms_to_us(ms)
        if us <= 0:
            raise ProfileError(
                f"device {dev_id!r} {name} at batch size {beta} is non-positive on layer {layer}")
        out[layer] = us
    return out


def synthesize_profiles(spec: ModelSpec, n_devices: int, heterogeneity: float = 0.0,
                        rng_seed: int = 0, *, seq_len: int = 128,
                        batch_sizes: Iterable[int] = range(1, 17),
                        memory_budget: int = 4 * GIB,
                        device_flops: float = DEFAULT_DEVICE_FLOPS,
                        link: LinkProfile | None = None) -> ProfileSet:
    """Deterministic stand-in for on-device calibration runs.

    Each device draws ``compute_scale`` uniformly from
    ``[1 - heterogeneity, 1 + heterogeneity]``. A layer's one-sample time is
    its FLOPs over ``device_flops * compute_scale`` rounded to a microsecond
    (minimum 1); larger micro-batches are exact multiples of it.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if not 0 <= heterogeneity < 1:
        raise ValueError("heterogeneity must lie in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    scales = 1.0 - heterogeneity + 2.0 * heterogeneity * rng.random(n_devices)
    per_layer = [model_cost.layer_flops(spec, l, 1, seq_len) for l in range(spec.num_layers)]
    batch_sizes = sorted(set(int(b) for b in batch_sizes))
    devices = []
    for idx, scale in enumerate(scales):
        rate = device_flops * float(scale)
        unit_f = np.array([max(1, round_half_up(f.fwd_flops / rate * 1e6)) for f in per_layer],
                          dtype=np.int64)
        unit_b = np.array([max(1, round_half_up(f.bwd_flops / rate * 1e6)) for f in per_layer],
                          dtype=np.int64)
        devices.append(DeviceProfile(
            device_id=f"dev{idx}",
            t_f={b: unit_f * b for b in batch_sizes},
            t_b={b: unit_b * b for b in batch_sizes},
            memory_budget=int(memory_budget),
            compute_scale=float(scale),
        ))
    link = link or LinkProfile(DEFAULT_BANDWIDTH, 0.5)
    return ProfileSet(tuple(devices), link, seq_len, spec.name)


# ---------------------------------------------------------------------------
# communication

def comm_time(nbytes: float, link: LinkProfile) -> float:
    """Point-to-point transfer time in milliseconds."""
    if nbytes < 0:
        raise ValueError("nbytes must be non-negative")
    return link.latency_ms + nbytes / link.bandwidth * 1000.0


def comm_us(nbytes: float, link: LinkProfile) -> int:
    return round_half_up(comm_time(nbytes, link) * 1000.0)


def ring_allreduce_time(nbytes: float, n: int, link: LinkProfile) -> float:
    """Ring AllReduce in milliseconds: reduce-scatter then all-gather."""
    if n <= 1:
        return 0.0
    return 2 * (n - 1) / n * nbytes / link.bandwidth * 1000.0 + 2 * (n - 1) * link.latency_ms


def ring_allreduce_us(nbytes: float, n: int, link: LinkProfile) -> int:
    return round_half_up(ring_allreduce_time(nbytes, n, link) * 1000.0)


def ring_allgather_time(shard_bytes: Sequence[float], link: LinkProfile) -> float:
    """Ring all-gather where device ``i`` starts with ``shard_bytes[i]``.

    Runs the ``n - 1`` ring steps explicitly. In each step every device
    forwards the shard it received last, so a step lasts as long as its
    largest transfer.
    """
    n = len(shard_bytes)
    holding = list(range(n))  # shard each device forwards next
    total = 0.0
    for _ in range(n - 1):
        total += max(comm_time(shard_bytes[s], link) for s in holding)
        holding = [holding[(i - 1) % n] for i in range(n)]
    return total


# ---------------------------------------------------------------------------
# tensor sizes

@dataclass(frozen=True)
class TensorSizes:
    """Per-sequence byte sizes of the tensors a stage produces and keeps.

    ``activation_bytes[l]`` is what layer ``l`` sends downstream,
    ``gradient_bytes[l]`` what flows back across that boundary. With Parallel
    Adapters only the side network's highway carries gradients, so the two
    differ for that technique.
    """

    spec: ModelSpec
    seq_len: int
    activation_bytes: tuple[int, ...] = field(repr=False)
    gradient_bytes: tuple[int, ...] = field(repr=False)
    trainable_bytes: tuple[int, ...] = field(repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.activation_bytes)

    def boundary_activation_bytes(self, layer: int, beta: int) -> int:
        return beta * self.activation_bytes[layer]

    def boundary_gradient_bytes(self, layer: int, beta: int) -> int:
        return beta * self.gradient_bytes[layer]

    def stage_trainable_bytes(self, first: int, last: int) -> int:
        return sum(self.trainable_bytes[first:last + 1])

    def stage_static_bytes(self, first: int, last: int, cache_mode: bool = False) -> int:
        return model_cost.stage_static_bytes(self.spec, first, last, cache_mode)

    def stage_activation_bytes(self, first: int, last: int, beta: int) -> int:
        return model_cost.stage_activation_bytes(self.spec, first, last, beta, self.seq_len)

    def stage_memory(self, first: int, last: int, beta: int, in_flight: int) -> int:
        return (self.stage_static_bytes(first, last)
                + in_flight * self.stage_activation_bytes(first, last, beta))


def tensor_sizes(spec: ModelSpec, seq_len: int) -> TensorSizes:
    b, n, d = spec.bytes_per_scalar, seq_len, spec.hidden_size
    if spec.technique == "ParallelAdapters":
        act = b * n * (d + spec.adapter_hidden)
        grad = b * n * spec.adapter_hidden
    else:
        act = grad = b * n * d
    layers = range(spec.num_layers)
    return TensorSizes(
        spec=spec,
        seq_len=seq_len,
        activation_bytes=tuple(act for _ in layers),
        gradient_bytes=tuple(grad for _ in layers),
        trainable_bytes=tuple(b * model_cost.technique_layer_params(spec, l) for l in layers),
    )
