"""Architecture descriptors and analytic cost models.

Everything here is a pure function of a :class:`ModelSpec`. The planner, the
simulator and the CLI reports all draw their byte and FLOP figures from this
module so that the numbers they print agree with each other.

Counting conventions
--------------------
Parameters
    Backbone layer ``l`` holds ``4 d^2`` attention weights, ``2 f d^2`` FFN
    weights (``f = ffn_mult``) and, for decoder layers, another ``4 d^2`` of
    cross-attention. Token embeddings add ``vocab_size * d``. Biases and layer
    norms are ignored. Encoder and decoder stacks are flattened into a single
    ordered list of ``num_layers`` layers, decoders last.

Trainable modules
    * ``Full``: every backbone parameter.
    * ``Adapters``: two bottleneck adapters per layer (after attention and
      after the FFN), each ``2 d m + d + m`` with ``m = d // adapter_reduction``.
    * ``LoRA``: rank-``lora_rank`` updates on the query and value projections
      of every attention block (self and cross), ``2 d rank`` each.
    * ``ParallelAdapters``: ``W_down`` (``d r``), per layer a projection
      ``D_i`` (``d r``) plus a two-layer MLP in dimension ``r`` (``2 r^2``),
      ``W_up`` (``r d``) and a classifier head (``d * num_labels``), with
      ``r = d // adapter_reduction``. No biases.

FLOPs
    A weight matmul costs ``2 * weights * tokens`` forward. Attention scores
    (``QK^T`` and ``AV``, ``4 n^2 d`` per block per sequence) are an optional
    term. Embedding lookups, norms, softmax and elementwise ops are excluded.
    Backward charges a weight-gradient matmul for every trainable weight and
    an input-gradient matmul wherever the gradient has to keep flowing. A
    frozen backbone that still has to be traversed therefore costs one
    forward's worth, a trainable one two, and Parallel Adapters skip the
    input gradient of the projections that read backbone activations.

Activations
    Per layer and token we count the tensors a backward pass must keep:

    * ``Full``: per attention block ``5d + heads*n``, FFN ``d + 2fd``, one
      ``d`` per layer-norm input.
    * frozen backbone with inserted trainables: per attention block
      ``3d + heads*n``, FFN ``fd``, norm inputs, plus ``d + 2 rank`` per
      block for LoRA or ``2(d + 2m)`` for Adapters.
    * ``ParallelAdapters``: the backbone outputs ``b_0..b_L`` (``d`` each),
      the MLP input and hidden state per adapter (``2r``), ``a_L`` (``r``),
      and per sequence the pooled head input and class probabilities.

Optimizer state is two moments per trainable parameter. It is kept in its own
field; :attr:`CostBreakdown.table_activations_bytes` folds it back into the
activation figure for tables that report them together. ``GIB`` is ``2**30``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

GIB = 2**30

TECHNIQUES = ("Full", "Adapters", "LoRA", "ParallelAdapters")

REFERENCE_SPECS = ("t5-base", "bart-large", "t5-large", "bart-large-like", "toy")


@dataclass(frozen=True)
class ModelSpec:
    """Transformer architecture plus the fine-tuning technique applied to it."""

    name: str
    num_layers: int
    hidden_size: int
    num_heads: int
    vocab_size: int
    ffn_mult: int = 4
    num_decoder_layers: int = 0
    bytes_per_scalar: int = 4
    technique: str = "ParallelAdapters"
    adapter_reduction: int = 8
    lora_rank: int = 8
    num_labels: int = 2

    def __post_init__(self):
        for field in ("num_layers", "hidden_size", "num_heads", "vocab_size",
                      "ffn_mult", "bytes_per_scalar", "adapter_reduction",
                      "lora_rank", "num_labels"):
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{field} must be a positive integer, got {value!r}")
        if not 0 <= self.num_decoder_layers <= self.num_layers:
            raise ValueError("num_decoder_layers must lie in [0, num_layers]")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.technique not in TECHNIQUES:
            raise ValueError(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if self.technique in ("ParallelAdapters", "Adapters"):
            if self.hidden_size % self.adapter_reduction:
                raise ValueError("hidden_size must be divisible by adapter_reduction")
            if self.adapter_reduction < 2:
                # r <= d/2 keeps the side network genuinely narrower than the backbone
                raise ValueError("adapter_reduction must be at least 2")

    @property
    def adapter_hidden(self) -> int:
        return self.hidden_size // self.adapter_reduction

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.hidden_size

    def is_decoder_layer(self, layer: int) -> bool:
        return layer >= self.num_layers - self.num_decoder_layers

    def attention_blocks(self, layer: int) -> int:
        return 2 if self.is_decoder_layer(layer) else 1

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def load_spec(source: str | Path) -> ModelSpec:
    """Read a spec from a JSON file, or a bundled one by name (``t5-large``)."""
    if isinstance(source, str) and source in REFERENCE_SPECS:
        return reference_spec(source)
    with open(source) as fh:
        return ModelSpec.from_dict(json.load(fh))


def reference_spec(name: str) -> ModelSpec:
    text = resources.files("edgetune.data.specs").joinpath(f"{name}.json").read_text()
    return ModelSpec.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# parameter accounting

def backbone_layer_params(spec: ModelSpec, layer: int) -> int:
    d = spec.hidden_size
    return 4 * d * d * spec.attention_blocks(layer) + 2 * spec.ffn_mult * d * d


def embedding_params(spec: ModelSpec) -> int:
    return spec.vocab_size * spec.hidden_size


def technique_layer_params(spec: ModelSpec, layer: int) -> int:
    """Trainable parameters attached to ``layer``, boundary modules included.

    ``W_down`` rides with layer 0; ``W_up`` and the head ride with the last
    layer. For ``Full`` the embeddings ride with layer 0.
    """
    d = spec.hidden_size
    if spec.technique == "Full":
        extra = embedding_params(spec) if layer == 0 else 0
        return backbone_layer_params(spec, layer) + extra
    if spec.technique == "Adapters":
        m = spec.adapter_hidden
        return 2 * (2 * d * m + d + m)
    if spec.technique == "LoRA":
        return spec.attention_blocks(layer) * 2 * (2 * d * spec.lora_rank)
    r = spec.adapter_hidden
    count = d * r + 2 * r * r
    if layer == 0:
        count += d * r
    if layer == spec.num_layers - 1:
        count += r * d + d * spec.num_labels
    return count


def param_count(spec: ModelSpec) -> dict:
    """Backbone and trainable parameter counts.

    >>> counts = param_count(reference_spec("t5-large"))
    >>> round(counts["backbone"] / 1e6)
    737
    """
    layers = range(spec.num_layers)
    backbone = embedding_params(spec) + sum(backbone_layer_params(spec, l) for l in layers)
    trainable = sum(technique_layer_params(spec, l) for l in layers)
    return {"backbone": backbone, "trainable": trainable}


def trainable_fraction(spec: ModelSpec) -> float:
    counts = param_count(spec)
    return counts["trainable"] / counts["backbone"]


def resident_layer_params(spec: ModelSpec, layer: int, cache_mode: bool = False) -> int:
    """Parameters a device must hold in memory to run ``layer``."""
    if spec.technique == "Full":
        return technique_layer_params(spec, layer)
    tech = technique_layer_params(spec, layer)
    if cache_mode and spec.technique == "ParallelAdapters":
        return tech
    emb = embedding_params(spec) if layer == 0 else 0
    return backbone_layer_params(spec, layer) + emb + tech


# ---------------------------------------------------------------------------
# FLOPs

class Flops(NamedTuple):
    fwd_flops: int
    bwd_flops: int

    @property
    def total(self) -> int:
        return self.fwd_flops + self.bwd_flops


def _attention_term(spec: ModelSpec, layer: int, batch: int, seq_len: int) -> int:
    return 4 * seq_len * seq_len * spec.hidden_size * batch * spec.attention_blocks(layer)


def backbone_layer_fwd_flops(spec: ModelSpec, layer: int, batch: int, seq_len: int,
                             include_attention: bool = False) -> int:
    flops = 2 * backbone_layer_params(spec, layer) * batch * seq_len
    if include_attention:
        flops += _attention_term(spec, layer, batch, seq_len)
    return flops


def _adapter_projection_fwd(spec: ModelSpec, layer: int, tokens: int) -> int:
    """Forward FLOPs of the side-network matmuls that read backbone outputs."""
    count = 2 * tokens * spec.hidden_size * spec.adapter_hidden
    return 2 * count if layer == 0 else count


def technique_layer_fwd_flops(spec: ModelSpec, layer: int, batch: int, seq_len: int) -> int:
    tokens = batch * seq_len
    d = spec.hidden_size
    if spec.technique == "Full":
        return 0
    if spec.technique == "Adapters":
        return 2 * tokens * 2 * (2 * d * spec.adapter_hidden)
    if spec.technique == "LoRA":
        return spec.attention_blocks(layer) * 2 * 2 * tokens * (2 * d * spec.lora_rank)
    r = spec.adapter_hidden
    flops = _adapter_projection_fwd(spec, layer, tokens) + 2 * tokens * 2 * r * r
    if layer == spec.num_layers - 1:
        flops += 2 * tokens * r * d + 2 * batch * d * spec.num_labels
    return flops


def layer_flops(spec: ModelSpec, layer: int, batch: int, seq_len: int,
                cached: bool = False, include_attention: bool = False) -> Flops:
    """Forward and backward FLOPs of one flattened layer and its trainables."""
    if cached and spec.technique != "ParallelAdapters":
        raise ValueError("activation caching requires the ParallelAdapters technique")
    backbone = backbone_layer_fwd_flops(spec, layer, batch, seq_len, include_attention)
    tech = technique_layer_fwd_flops(spec, layer, batch, seq_len)
    if spec.technique == "Full":
        return Flops(backbone, 2 * backbone)
    if spec.technique == "ParallelAdapters":
        fwd = tech if cached else backbone + tech
        bwd = 2 * tech - _adapter_projection_fwd(spec, layer, batch * seq_len)
        return Flops(fwd, bwd)
    # frozen backbone traversed for input gradients only; attention scores have
    # two operands needing gradients, so that term is charged twice
    attn = _attention_term(spec, layer, batch, seq_len) if include_attention else 0
    return Flops(backbone + tech, backbone + attn + 2 * tech)


def flops_estimate(spec: ModelSpec, batch: int, seq_len: int, cached: bool = False,
                   include_attention: bool = False) -> Flops:
    _check_batch(batch, seq_len)
    fwd = bwd = 0
    for layer in range(spec.num_layers):
        f = layer_flops(spec, layer, batch, seq_len, cached, include_attention)
        fwd += f.fwd_flops
        bwd += f.bwd_flops
    return Flops(fwd, bwd)


def backbone_fwd_flops(spec: ModelSpec, batch: int, seq_len: int,
                       include_attention: bool = False) -> int:
    return sum(backbone_layer_fwd_flops(spec, l, batch, seq_len, include_attention)
               for l in range(spec.num_layers))


# ---------------------------------------------------------------------------
# memory

def retained_layer_scalars(spec: ModelSpec, layer: int, seq_len: int) -> int:
    """Scalars per sequence that ``layer`` keeps alive for the backward pass."""
    d, n, h = spec.hidden_size, seq_len, spec.num_heads
    blocks = spec.attention_blocks(layer)
    norms = (blocks + 1) * d
    if spec.technique == "ParallelAdapters":
        r = spec.adapter_hidden
        per_token = d + 2 * r
        per_seq = 0
        if layer == 0:
            per_token += d
        if layer == spec.num_layers - 1:
            per_token += r
            per_seq += d + spec.num_labels
        return n * per_token + per_seq
    if spec.technique == "Full":
        per_token = blocks * (5 * d + h * n) + d + 2 * spec.ffn_hidden + norms
        return n * per_token
    per_token = blocks * (3 * d + h * n) + spec.ffn_hidden + norms
    if spec.technique == "LoRA":
        per_token += blocks * (d + 2 * spec.lora_rank)
    else:
        per_token += 2 * (d + 2 * spec.adapter_hidden)
    return n * per_token


@dataclass(frozen=True)
class CostBreakdown:
    weights_bytes: int
    gradients_bytes: int
    optimizer_bytes: int
    activations_bytes: int
    fwd_flops: int
    bwd_flops: int

    @property
    def total_bytes(self) -> int:
        return (self.weights_bytes + self.gradients_bytes
                + self.optimizer_bytes + self.activations_bytes)

    @property
    def table_activations_bytes(self) -> int:
        """Activations with optimizer state folded in, the way tables often report it."""
        return self.activations_bytes + self.optimizer_bytes

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["total_bytes"] = self.total_bytes
        return out


def memory_breakdown(spec: ModelSpec, batch: int, seq_len: int,
                     cache_mode: bool = False) -> CostBreakdown:
    """Peak training footprint of one device holding the whole model.

    With ``cache_mode`` (Parallel Adapters only) the backbone weights are not
    resident, since every backbone activation comes from the cache.
    """
    _check_batch(batch, seq_len)
    if cache_mode and spec.technique != "ParallelAdapters":
        raise ValueError("cache_mode requires the ParallelAdapters technique")
    b = spec.bytes_per_scalar
    layers = range(spec.num_layers)
    resident = sum(resident_layer_params(spec, l, cache_mode) for l in layers)
    trainable = param_count(spec)["trainable"]
    acts = batch * sum(retained_layer_scalars(spec, l, seq_len) for l in layers)
    flops = flops_estimate(spec, batch, seq_len, cached=cache_mode)
    return CostBreakdown(
        weights_bytes=resident * b,
        gradients_bytes=trainable * b,
        optimizer_bytes=2 * trainable * b,
        activations_bytes=acts * b,
        fwd_flops=flops.fwd_flops,
        bwd_flops=flops.bwd_flops,
    )


def stage_static_bytes(spec: ModelSpec, first: int, last: int, cache_mode: bool = False) -> int:
    """Weights, gradients and optimizer state for layers ``first..last``."""
    b = spec.bytes_per_scalar
    layers = range(first, last + 1)
    resident = sum(resident_layer_params(spec, l, cache_mode) for l in layers)
    trainable = sum(technique_layer_params(spec, l) for l in layers)
    return b * (resident + 3 * trainable)


def stage_activation_bytes(spec: ModelSpec, first: int, last: int, batch: int, seq_len: int) -> int:
    """Retained activations of one micro-batch of ``batch`` sequences."""
    scalars = sum(retained_layer_scalars(spec, l, seq_len) for l in range(first, last + 1))
    return spec.bytes_per_scalar * batch * scalars


def stage_memory_bytes(spec: ModelSpec, first: int, last: int, batch: int, seq_len: int,
                       in_flight: int = 1) -> int:
    """Peak memory of a device running layers ``first..last`` with ``in_flight``
    micro-batches of activations alive at once."""
    return (stage_static_bytes(spec, first, last)
            + in_flight * stage_activation_bytes(spec, first, last, batch, seq_len))


def cache_storage_bytes(spec: ModelSpec, num_samples: int, seq_len: int,
                        cached_layers: int | None = None,
                        bytes_per_scalar: int | None = None) -> int:
    """Disk footprint of cached backbone activations.

    ``cached_layers`` defaults to one tensor per adapter insertion point,
    i.e. ``num_layers``.
    """
    if num_samples < 0 or seq_len < 0:
        raise ValueError("counts must be non-negative")
    layers = spec.num_layers if cached_layers is None else cached_layers
    width = spec.bytes_per_scalar if bytes_per_scalar is None else bytes_per_scalar
    return num_samples * seq_len * spec.hidden_size * layers * width


def _check_batch(batch: int, seq_len: int) -> None:
    if batch < 1 or seq_len < 1:
        raise ValueError(f"batch and seq_len must be >= 1, got {batch}, {seq_len}")
