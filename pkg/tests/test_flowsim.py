import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from alignahead.distill import Strategy, TrainConfig, build_plan, train
from alignahead.flowsim import (
    NEVER,
    coverage_time,
    initial_state,
    layer_preserving,
    period,
    render_table,
    simulate,
    slot_text,
    staged_columns,
    step,
    tag_name,
    trajectory,
)
from alignahead.graph import DatasetBundle, generate_sbm
from alignahead.models import ModelConfig

SNAPSHOTS = Path(__file__).parent / "snapshots"

# Alternating schedule for two students with three layers: initial column,
# then per iteration the state after student 1 updates and after student 2.
ALTERNATING_M2_H3 = {
    (0, 0): ["l1^1", "l2^2", "l2^2", "l3^1", "l3^1", "l1^2", "l1^2", "l2^1", "l2^1", "l3^2", "l3^2", "l1^1", "l1^1"],
    (0, 1): ["l2^1", "l3^2", "l3^2", "l1^1", "l1^1", "l2^2", "l2^2", "l3^1", "l3^1", "l1^2", "l1^2", "l2^1", "l2^1"],
    (0, 2): ["l3^1", "l1^2", "l1^2", "l2^1", "l2^1", "l3^2", "l3^2", "l1^1", "l1^1", "l2^2", "l2^2", "l3^1", "l3^1"],
    (1, 0): ["l1^2", "l1^2", "l2^1", "l2^1", "l3^2", "l3^2", "l1^1", "l1^1", "l2^2", "l2^2", "l3^1", "l3^1", "l1^2"],
    (1, 1): ["l2^2", "l2^2", "l3^1", "l3^1", "l1^2", "l1^2", "l2^1", "l2^1", "l3^2", "l3^2", "l1^1", "l1^1", "l2^2"],
    (1, 2): ["l3^2", "l3^2", "l1^1", "l1^1", "l2^2", "l2^2", "l3^1", "l3^1", "l1^2", "l1^2", "l2^1", "l2^1", "l3^2"],
}


def names(state):
    return [[slot_text(tags) for tags in row] for row in state]


def test_tag_names_are_one_based():
    assert tag_name((0, 2)) == "l3^1"
    assert slot_text(frozenset({(1, 0), (0, 1), (0, 0)})) == "l1^1,l1^2,l2^1"


def test_first_step_two_students_three_layers():
    s = step(initial_state(2, 3), build_plan("alignahead", 2, 3))
    assert names(s) == [["l2^2", "l3^2", "l1^2"], ["l2^1", "l3^1", "l1^1"]]


def test_alternating_schedule_reproduced_for_six_iterations():
    cols = staged_columns(trajectory(build_plan("alignahead", 2, 3), 6))
    assert len(cols) == 13
    for (k, i), expected in ALTERNATING_M2_H3.items():
        assert [slot_text(state[k][i]) for _, state in cols] == expected, f"student {k + 1} layer {i + 1}"


def test_oc_step_swaps_students():
    s0 = initial_state(2, 4)
    s1 = step(s0, build_plan("oc", 2, 4))
    assert s1 == (s0[1], s0[0])


def brute_force(M, H, steps):
    """Set propagation by explicit index arithmetic, without the plan object."""
    slots = {(k, i): {(k, i)} for k in range(M) for i in range(H)}
    out = [dict(slots)]
    for _ in range(steps):
        nxt = {}
        for k, i in slots:
            acc = set()
            for p in range(M):
                if p != k:
                    acc |= slots[p, (i + 1) % H]
            nxt[k, i] = acc
        slots = nxt
        out.append(dict(slots))
    return out


@pytest.mark.parametrize("M, H", [(3, 2), (2, 5), (4, 3)])
def test_trajectory_matches_brute_force(M, H):
    ours = trajectory(build_plan("alignahead", M, H), 10)
    theirs = brute_force(M, H, 10)
    for s, b in zip(ours, theirs):
        assert all(set(s[k][i]) == b[k, i] for k, i in b)


def test_order_irrelevant_under_snapshot_semantics():
    plan = build_plan("alignahead", 3, 2)
    s0 = initial_state(3, 2)
    results = {step(s0, plan, order) for order in itertools.permutations(range(3))}
    assert len(results) == 1


def test_fresh_semantics_lets_later_students_see_updates():
    plan = build_plan("alignahead", 2, 3)
    fresh = step(initial_state(2, 3), plan, fresh=True)
    # student 2 layer 1 reads student 1 layer 2 after it already took l3^2
    assert slot_text(fresh[1][0]) == "l3^2"


def test_period_two_students_three_layers():
    assert period(build_plan("alignahead", 2, 3)) == 6


def test_period_single_layer():
    assert period(build_plan("alignahead", 2, 1)) == 2


@pytest.mark.parametrize("H", range(1, 9))
def test_period_equals_explicit_return_time(H):
    plan = build_plan("alignahead", 2, H)
    states = trajectory(plan, 4 * 2 * H)
    explicit = next(t for t in range(1, len(states)) if states[t] == states[0])
    assert period(plan) == explicit == math.lcm(2, H)


def test_period_four_layers_is_four():
    # the slot map (k, i) -> (1 - k, i + 1 mod 4) closes after lcm(2, 4) = 4 steps
    assert period(build_plan("alignahead", 2, 4)) == 4


def test_coverage_two_students_three_layers():
    assert coverage_time(build_plan("alignahead", 2, 3)) == 6


@pytest.mark.parametrize("H", range(1, 9))
def test_two_student_coverage_needs_odd_depth(H):
    cov = coverage_time(build_plan("alignahead", 2, H))
    assert cov == (2 * H if H % 2 else NEVER)


@pytest.mark.parametrize("M, H, expected", [(3, 2, 3), (3, 3, 4), (4, 3, 4)])
def test_coverage_many_students(M, H, expected):
    plan = build_plan("alignahead", M, H)
    assert coverage_time(plan) == expected
    assert period(plan) == expected


@pytest.mark.parametrize("M, H", [(2, 2), (2, 5), (3, 3)])
def test_oc_never_mixes_layers(M, H):
    plan = build_plan("oc", M, H)
    assert coverage_time(plan) == NEVER
    assert all(layer_preserving(s) for s in trajectory(plan, 20))


def test_sets_never_empty():
    for s in trajectory(build_plan("alignahead", 4, 3), 12):
        assert all(tags for row in s for tags in row)


def test_period_needs_two_students():
    with pytest.raises(ValueError):
        period(build_plan("self_only", 1, 3))


def test_state_shape_checked():
    with pytest.raises(ValueError):
        step(initial_state(2, 2), build_plan("alignahead", 2, 3))


@pytest.mark.parametrize("name, kind, M, H, steps, staged", [
    ("alignahead_m2_h3", "alignahead", 2, 3, 6, True),
    ("oc_m2_h2", "oc", 2, 2, 2, True),
    ("alignahead_m3_h2", "alignahead", 3, 2, 3, False),
])
def test_render_snapshots(name, kind, M, H, steps, staged):
    text = render_table(trajectory(build_plan(kind, M, H), steps), staged=staged)
    assert text == (SNAPSHOTS / f"{name}.txt").read_text()


def test_simulate_json():
    doc = simulate(2, 4, steps=2)
    json.dumps(doc)
    assert doc["period"] == 4 and doc["coverage_time"] is None
    assert doc["trajectory"][1]["slots"][0][0] == ["l2^2"]


def test_training_consumes_the_simulated_plan():
    g = generate_sbm(0, 30, 3, 0.3, 0.03, feature_dim=4)
    cfg = TrainConfig(ModelConfig("gcn", 4, 3, num_layers=2, hidden_dims=(4,)), Strategy("alignahead"),
                      num_students=3, epochs=1)
    report = train(DatasetBundle("transductive", [g]), cfg)
    assert report.realized_pairs == build_plan("alignahead", 3, 2).edges()
