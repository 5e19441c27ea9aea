import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from edgetune import planner
from edgetune.model_cost import ModelSpec, reference_spec
from edgetune.planner import HybridParallelPlanner, NoFeasiblePlanError, PlanConfig
from edgetune.profile import (DeviceProfile, LinkProfile, ProfileSet, synthesize_profiles,
                              tensor_sizes)

BIG = 1 << 40


def _hand_profiles(budget=BIG):
    """Two devices, two layers; device 1 is exactly twice as slow."""
    def dev(i, k):
        f1, b1 = np.array([5, 15]) * k, np.array([10, 30]) * k
        return DeviceProfile(f"d{i}", {1: f1, 2: 2 * f1}, {1: b1, 2: 2 * b1}, budget)
    return ProfileSet((dev(0, 1), dev(1, 2)), LinkProfile(1e15, 0.0), seq_len=4)


HAND_SPEC = ModelSpec("hand", 2, 16, 2, 10)


def test_hand_instance_values():
    table = planner.dp_partition(HAND_SPEC, _hand_profiles(), 2, 4)
    # one stage, both devices at beta 1: slowest device sums 10+30+20+60
    assert table.value(1) == 120
    # two stages at beta 2: layer 1 on the slow device, 2 * (30 + 60)
    assert table.value(2) == 180
    plan = planner.select_plan(HAND_SPEC, _hand_profiles(), 2, 4)
    assert plan.num_stages == 1 and plan.groups == ((0, 1),)
    # execution phase only: 4 rounds of the single stage
    assert plan.objective_us == 4 * 120


def test_hand_instance_phases_two_stages():
    plan = PlanConfig(((0, 0), (1, 1)), ((0,), (1,)), 2, 4)
    ph = planner.phase_latencies(plan, _hand_profiles(), tensor_sizes(HAND_SPEC, 4))
    assert (ph.fwd, ph.bwd) == ((10, 60), (20, 120))
    assert ph.beginning == 10
    assert ph.execution == 4 * (60 + 120)
    assert ph.ending == 20
    assert ph.total == 10 + 720 + 20


def test_out_of_memory_is_infeasible():
    with pytest.raises(NoFeasiblePlanError):
        planner.select_plan(HAND_SPEC, _hand_profiles(budget=10), 2, 4)


def test_indivisible_micro_batch_is_infeasible():
    t = {1: np.array([1, 1]), 2: np.array([2, 2])}
    devs = [DeviceProfile(f"d{i}", t, t, BIG) for i in range(3)]
    profiles = ProfileSet(tuple(devs), LinkProfile(1e9, 0), seq_len=4)
    # B=2 does not split over a 3-device group, but does over groups of 1 and 2
    table = planner.dp_partition(HAND_SPEC, profiles, 2, 1)
    assert math.isinf(table.value(1))
    assert table.value(2) == 4


def test_chosen_plan_fits_memory():
    spec = reference_spec("bart-large-like")
    p = synthesize_profiles(spec, 8, 0.0, 0, seq_len=128)
    plan = planner.select_plan(spec, p, 4, 4)
    peaks = planner.device_peak_memory(plan, tensor_sizes(spec, 128))
    assert all(peak <= d.memory_budget for peak, d in zip(peaks, p.devices))


def test_estimator_api():
    spec = reference_spec("toy")
    p = synthesize_profiles(spec, 3, 0.2, 0, seq_len=8)
    est = HybridParallelPlanner(spec, 4, 2)
    assert clone(est).get_params() == est.get_params()
    est.fit(p)
    assert est.plan_.objective_us == min(c.objective_us for c in est.candidates_)
    assert est.predict_latency_ms() == est.plan_.objective_ms
    HybridParallelPlanner(spec, 4, 2, check_oracle=True).fit(p)


def test_plan_json_roundtrip(tmp_path):
    spec = reference_spec("toy")
    p = synthesize_profiles(spec, 3, 0.2, 0, seq_len=8)
    plan, cands = planner.select_plan(spec, p, 4, 2, return_candidates=True)
    path = tmp_path / "plan.json"
    path.write_text(planner.dumps_plan(plan, spec, p, cands))
    back, spec2, seq = planner.load_plan(path)
    assert (back.splits, back.groups) == (plan.splits, plan.groups)
    assert spec2 == spec and seq == 8
    doc = json.loads(path.read_text())
    assert doc["objective_ms"] == plan.objective_ms


def test_oracle_size_limit():
    spec = reference_spec("t5-base")
    p = synthesize_profiles(spec, 2, 0.0, 0, seq_len=8, batch_sizes=[1, 2])
    with pytest.raises(planner.OracleTooLargeError):
        planner.brute_force_oracle(spec, p, 2, 1)


def test_enumerate_plans_count():
    # C(L-1, s-1) * C(D-1, s-1) summed over s
    plans = list(planner.enumerate_plans(5, 3))
    assert len(plans) == sum(math.comb(4, s - 1) * math.comb(2, s - 1) for s in (1, 2, 3))


instances = st.tuples(st.integers(1, 7), st.integers(1, 4), st.floats(0, 0.5),
                      st.integers(0, 10**6), st.sampled_from([2, 4, 6, 12]), st.integers(1, 4))


def _random_instance(L, D, het, seed, budget_scale=1.0):
    spec = ModelSpec("r", L, 32, 4, 50)
    p = synthesize_profiles(spec, D, het, seed, seq_len=8, batch_sizes=[1, 2, 3, 4, 6, 12],
                            link=LinkProfile(1e7, 0.05))
    if budget_scale != 1.0:
        sizes = tensor_sizes(spec, 8)
        whole = sizes.stage_memory(0, L - 1, 12, 1)
        p = ProfileSet(tuple(DeviceProfile(d.device_id, d.t_f, d.t_b,
                                           int(whole * budget_scale), d.compute_scale)
                             for d in p.devices), p.link, p.seq_len)
    return spec, p


@given(instances, st.sampled_from([1.0, 0.3, 0.6]))
@settings(max_examples=60)
def test_dp_matches_oracle_per_stage_count(inst, budget_scale):
    L, D, het, seed, B, M = inst
    spec, p = _random_instance(L, D, het, seed, budget_scale)
    table = planner.dp_partition(spec, p, B, M)
    for s in range(1, min(L, D) + 1):
        ref = planner.brute_force_oracle(spec, p, B, M, num_stages=s)
        if ref is None:
            assert math.isinf(table.value(s))
            continue
        got = table.reconstruct(s)
        assert got.slowest_stage_us == ref.slowest_stage_us
        assert (got.splits, got.groups) == (ref.splits, ref.groups)


@given(instances)
@settings(max_examples=40)
def test_select_plan_matches_oracle_objective(inst):
    L, D, het, seed, B, M = inst
    spec, p = _random_instance(L, D, het, seed)
    try:
        got = planner.select_plan(spec, p, B, M)
    except NoFeasiblePlanError:
        assert planner.brute_force_oracle(spec, p, B, M, "phase_total") is None
        return
    assert got.objective_us == planner.brute_force_oracle(spec, p, B, M, "phase_total").objective_us


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 1000))
@settings(max_examples=30)
def test_w_nonincreasing_in_devices_when_homogeneous(L, D, seed):
    # identical devices and B divisible by every group size up to D + 1
    spec, p = _random_instance(L, D + 1, 0.0, seed)
    big = planner.dp_partition(spec, p, 12, 2)
    small = planner.dp_partition(spec, p.subset(D), 12, 2)
    for s in range(1, min(L, D) + 1):
        assert big.W[s, L - 1, D + 1] <= small.W[s, L - 1, D]


@given(instances)
@settings(max_examples=30)
def test_objective_is_at_least_execution_of_slowest(inst):
    L, D, het, seed, B, M = inst
    spec, p = _random_instance(L, D, het, seed)
    try:
        plan = planner.select_plan(spec, p, B, M)
    except NoFeasiblePlanError:
        return
    ph = plan.phases
    assert plan.objective_us >= M * (ph.fwd[-1] + ph.bwd[-1])
    assert plan.slowest_stage_us >= ph.fwd[-1] + ph.bwd[-1]
