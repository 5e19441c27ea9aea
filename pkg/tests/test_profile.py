import json
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgetune.model_cost import reference_spec
from edgetune.profile import (LinkProfile, ProfileError, comm_time, comm_us, dumps_profiles,
                              load_profiles, ms_to_us, profiles_from_dict, ring_allgather_time,
                              ring_allreduce_time, round_half_up, save_profiles,
                              synthesize_profiles, tensor_sizes)

GOLDEN = Path(__file__).parent / "golden"


def test_ms_rounding_half_up():
    assert ms_to_us(Decimal("0.0005")) == 1
    assert ms_to_us(Decimal("1.2345")) == 1235
    assert ms_to_us(Decimal("2.0004")) == 2000
    assert round_half_up(2.5) == 3


def test_synth_seed7_matches_golden():
    golden = json.loads((GOLDEN / "synth_t5-large_n8_het0.3_seed7.json").read_text())
    p = synthesize_profiles(reference_spec("t5-large"), 8, 0.3, 7)
    assert [d.compute_scale for d in p.devices] == golden["compute_scales"]
    assert [int(d.t_f[1][0]) for d in p.devices] == golden["t_f_us_batch1_layer0"]


def test_synth_layer_time_from_flops():
    # encoder layer 0 of t5-large with the side network's first projections:
    # backbone 2 * 12 d^2 * n, W_down and D_0 2 * 2 n d r, MLP 2 * 2 n r^2
    d, r, n = 1024, 128, 128
    flops = 2 * 12 * d * d * n + 2 * 2 * n * d * r + 2 * 2 * n * r * r
    p = synthesize_profiles(reference_spec("t5-large"), 1, 0.0, 0)
    assert int(p[0].t_f[1][0]) == round(flops / 20e9 * 1e6)
    assert int(p[0].t_f[4][0]) == 4 * int(p[0].t_f[1][0])


def test_roundtrip(tmp_path):
    p = synthesize_profiles(reference_spec("toy"), 3, 0.4, 2, seq_len=8, batch_sizes=[1, 2, 4])
    path = tmp_path / "p.json"
    save_profiles(p, path)
    q = load_profiles(path)
    assert q.devices == p.devices
    assert q.seq_len == 8 and q.link == p.link
    assert dumps_profiles(q) == dumps_profiles(p)


def test_bundled_fixture_loads():
    from importlib import resources
    path = resources.files("edgetune.data.profiles").joinpath("jetson-nano-x8.json")
    p = load_profiles(path)
    assert len(p) == 8 and p.model == "bart-large-like"
    assert len({tuple(d.t_f[4]) for d in p.devices}) == 1


def _doc():
    p = synthesize_profiles(reference_spec("toy"), 2, 0.0, 0, seq_len=8, batch_sizes=[1, 2])
    return json.loads(dumps_profiles(p))


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d.update(devices=[]), "no devices"),
    (lambda d: d["devices"][1]["timings"][0]["t_f_ms"].pop(), "dev1"),
    (lambda d: d["devices"][0]["timings"][1]["t_b_ms"].__setitem__(1, 0.0), "layer 1"),
    (lambda d: d["devices"][1].update(device_id="dev0"), "duplicate"),
    (lambda d: d.update(schema_version=9), "schema_version"),
])
def test_malformed_profiles_name_the_fault(mutate, needle):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ProfileError, match=needle):
        profiles_from_dict(doc)


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ProfileError):
        load_profiles(path)


def test_missing_batch_size_is_profile_error():
    p = synthesize_profiles(reference_spec("toy"), 1, 0.0, 0, seq_len=8, batch_sizes=[1, 2])
    with pytest.raises(ProfileError, match="micro-batch size 3"):
        p[0].forward_us(3)


def test_comm_is_affine():
    link = LinkProfile(1e6, 2.0)
    assert comm_time(0, link) == 2.0
    assert comm_time(1e6, link) == pytest.approx(1002.0)
    assert comm_us(500, link) == 2500


def test_ring_allreduce_closed_form():
    link = LinkProfile(1e6, 0.1)
    assert ring_allreduce_time(1e6, 1, link) == 0
    # 2(n-1)/n of the payload over the link plus 2(n-1) hops of latency
    assert ring_allreduce_time(1e6, 4, link) == pytest.approx(1500.0 + 0.6)


def test_ring_allgather_equal_shards():
    link = LinkProfile(1e6, 0.0)
    assert ring_allgather_time([1e3] * 5, link) == pytest.approx(4.0)


def test_tensor_sizes_parallel_adapters():
    spec = reference_spec("toy")  # d=16, r=4, 8-byte scalars
    sz = tensor_sizes(spec, 8)
    assert sz.boundary_activation_bytes(0, 3) == 3 * 8 * 8 * (16 + 4)
    assert sz.boundary_gradient_bytes(0, 3) == 3 * 8 * 8 * 4


@given(st.floats(0, 1e9), st.floats(0, 1e9))
def test_comm_monotone(a, b):
    link = LinkProfile(1e7, 0.3)
    lo, hi = sorted((a, b))
    assert comm_time(lo, link) <= comm_time(hi, link)


@given(st.lists(st.integers(0, 10**7), min_size=2, max_size=8))
def test_allgather_bounds(shards):
    link = LinkProfile(1e7, 0.0)
    t = ring_allgather_time(shards, link)
    n = len(shards)
    biggest = max(shards) / link.bandwidth * 1000
    assert t <= (n - 1) * biggest + 1e-9
    assert t >= (sum(shards) - min(shards)) / n / link.bandwidth * 1000 - 1e-9


@given(st.integers(1, 8), st.floats(0, 0.9), st.integers(0, 2**31))
def test_synth_scales_within_band(n, het, seed):
    p = synthesize_profiles(reference_spec("toy"), n, het, seed, seq_len=4, batch_sizes=[1])
    scales = np.array([d.compute_scale for d in p.devices])
    assert np.all(scales >= 1 - het - 1e-12) and np.all(scales <= 1 + het + 1e-12)
