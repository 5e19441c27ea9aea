import math

import pytest
from hypothesis import given, strategies as st

from edgetune import model_cost
from edgetune.model_cost import GIB, ModelSpec, TECHNIQUES, reference_spec


def hand_backbone_params(L_enc, L_dec, d, vocab, f=4):
    # self-attention 4d^2, FFN 2fd^2, decoder cross-attention 4d^2
    return L_enc * (4 + 2 * f) * d * d + L_dec * (8 + 2 * f) * d * d + vocab * d


def test_t5_large_backbone_matches_hand_count():
    spec = reference_spec("t5-large")
    expected = hand_backbone_params(24, 24, 1024, 32128)
    assert expected == 737_542_144
    assert model_cost.param_count(spec)["backbone"] == expected


def test_adapters_and_lora_trainable_counts():
    spec = reference_spec("t5-large")
    ad = spec.replace(technique="Adapters", adapter_reduction=16)
    # two adapters per layer, each down (d*m + m) and up (m*d + d)
    assert model_cost.param_count(ad)["trainable"] == 48 * 2 * (2 * 1024 * 64 + 1024 + 64)
    lora = spec.replace(technique="LoRA", lora_rank=32)
    blocks = 24 * 1 + 24 * 2
    assert model_cost.param_count(lora)["trainable"] == blocks * 2 * 2 * 1024 * 32


def test_parallel_adapter_trainables_toy():
    spec = reference_spec("toy")  # d=16, r=4, L=2, 2 labels
    d, r = 16, 4
    expected = d * r + 2 * (d * r + 2 * r * r) + r * d + d * 2
    assert model_cost.param_count(spec)["trainable"] == expected


def test_full_weights_equal_gradients():
    spec = reference_spec("t5-large").replace(technique="Full")
    mem = model_cost.memory_breakdown(spec, 16, 128)
    assert mem.weights_bytes == mem.gradients_bytes == 737_542_144 * 4
    assert mem.optimizer_bytes == 2 * mem.weights_bytes


def test_full_flops_are_two_six_rule():
    spec = ModelSpec("x", 3, 32, 4, 10, technique="Full")
    f = model_cost.flops_estimate(spec, 2, 5)
    body = 3 * 12 * 32 * 32
    assert f.fwd_flops == 2 * body * 10
    assert f.bwd_flops == 2 * f.fwd_flops


def test_cached_forward_skips_backbone():
    spec = reference_spec("t5-base")
    full = model_cost.flops_estimate(spec, 4, 32)
    cached = model_cost.flops_estimate(spec, 4, 32, cached=True)
    assert cached.bwd_flops == full.bwd_flops
    assert full.fwd_flops - cached.fwd_flops == model_cost.backbone_fwd_flops(spec, 4, 32)


def test_cached_requires_parallel_adapters():
    spec = reference_spec("t5-base").replace(technique="LoRA")
    with pytest.raises(ValueError):
        model_cost.flops_estimate(spec, 1, 8, cached=True)
    with pytest.raises(ValueError):
        model_cost.memory_breakdown(spec, 1, 8, cache_mode=True)


def test_parallel_adapters_have_cheapest_backward():
    spec = reference_spec("t5-large")
    bwd = {t: model_cost.flops_estimate(spec.replace(technique=t), 16, 128).bwd_flops
           for t in TECHNIQUES}
    assert bwd["ParallelAdapters"] < min(bwd["Adapters"], bwd["LoRA"]) < bwd["Full"]


def test_cache_storage_t5_base():
    spec = reference_spec("t5-base")
    nbytes = model_cost.cache_storage_bytes(spec, 500, 30, cached_layers=12)
    assert nbytes == 500 * 30 * 768 * 12 * 4
    assert nbytes / GIB == pytest.approx(0.515, abs=1e-3)


def test_stage_memory_is_sum_of_parts():
    spec = reference_spec("bart-large")
    static = model_cost.stage_static_bytes(spec, 3, 7)
    act = model_cost.stage_activation_bytes(spec, 3, 7, 2, 64)
    assert model_cost.stage_memory_bytes(spec, 3, 7, 2, 64, in_flight=3) == static + 3 * act


def test_spec_roundtrip_and_validation(tmp_path):
    spec = reference_spec("bart-large")
    path = tmp_path / "s.json"
    path.write_text(__import__("json").dumps(spec.to_dict()))
    assert model_cost.load_spec(path) == spec
    with pytest.raises(ValueError):
        ModelSpec("bad", 2, 30, 4, 10)  # hidden not divisible by heads
    with pytest.raises(ValueError):
        ModelSpec("bad", 2, 32, 4, 10, technique="Prefix")


layer_specs = st.builds(
    ModelSpec, name=st.just("h"), num_layers=st.integers(1, 6),
    hidden_size=st.sampled_from([16, 32, 64]), num_heads=st.sampled_from([1, 2, 4]),
    vocab_size=st.integers(2, 50), technique=st.sampled_from(TECHNIQUES),
    adapter_reduction=st.sampled_from([2, 4, 8]), lora_rank=st.integers(1, 8))


@given(layer_specs, st.integers(1, 8), st.integers(1, 32))
def test_flops_linear_in_batch(spec, batch, seq):
    one = model_cost.flops_estimate(spec, 1, seq)
    many = model_cost.flops_estimate(spec, batch, seq)
    if spec.technique == "ParallelAdapters":
        # the per-sequence head term is also linear in batch
        assert many.fwd_flops == batch * one.fwd_flops
    assert many.bwd_flops == batch * one.bwd_flops


@given(layer_specs, st.integers(1, 8), st.integers(1, 16))
def test_memory_monotone_in_batch(spec, batch, seq):
    a = model_cost.memory_breakdown(spec, batch, seq)
    b = model_cost.memory_breakdown(spec, batch + 1, seq)
    assert b.activations_bytes > a.activations_bytes
    assert b.weights_bytes == a.weights_bytes


@given(layer_specs)
def test_trainable_never_exceeds_backbone_for_peft(spec):
    frac = model_cost.trainable_fraction(spec)
    if spec.technique == "Full":
        assert math.isclose(frac, 1.0)
    else:
        assert 0 < frac


@given(layer_specs)
def test_stage_sums_cover_model(spec):
    L = spec.num_layers
    whole = model_cost.stage_static_bytes(spec, 0, L - 1)
    if L > 1:
        cut = L // 2
        parts = (model_cost.stage_static_bytes(spec, 0, cut - 1)
                 + model_cost.stage_static_bytes(spec, cut, L - 1))
        assert parts == whole


def test_bad_batch_rejected():
    with pytest.raises(ValueError):
        model_cost.flops_estimate(reference_spec("toy"), 0, 4)
