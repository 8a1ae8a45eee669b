"""Symbolic simulation of how structure information moves between student layers.

A tag ``(k, i)`` stands for "structure originating at layer i of student k".
Each step replaces every slot's tag set by the union of its plan targets' tag
sets.  For two students the sets stay singletons and the dynamics is a
permutation of slots; for three or more the union models a layer that has
been influenced by several peers at once.

Students and layers are 0-based in the API and 1-based in rendered output.
"""

from __future__ import annotations

import json
import math
from typing import Sequence

from .distill import PairingPlan, build_plan

Tag = tuple[int, int]
TagState = tuple[tuple[frozenset, ...], ...]

NEVER = math.inf


def initial_state(num_students: int, num_layers: int) -> TagState:
    return tuple(tuple(frozenset({(k, i)}) for i in range(num_layers)) for k in range(num_students))


def _check_plan(plan: PairingPlan, state: TagState) -> None:
    if len(state) != plan.num_students or any(len(row) != plan.num_layers for row in state):
        raise ValueError("state shape does not match the pairing plan")


def step(state: TagState, plan: PairingPlan, order: Sequence[int] | None = None, *, fresh: bool = False) -> TagState:
    """Advance one alternating iteration.

    By default every student reads the iteration-start state, so ``order`` has
    no effect.  With ``fresh`` students update sequentially in ``order`` and
    later students see earlier students' new tags.
    """
    _check_plan(plan, state)
    order = list(range(plan.num_students)) if order is None else list(order)
    current = [list(row) for row in state]
    for k in order:
        source = current if fresh else state
        for i in range(plan.num_layers):
            targets = plan.targets[k, i]
            if targets:
                current[k][i] = frozenset().union(*(source[p][j] for p, j in targets))
    return tuple(tuple(row) for row in current)


def trajectory(plan: PairingPlan, steps: int, **kwargs) -> list[TagState]:
    states = [initial_state(plan.num_students, plan.num_layers)]
    for _ in range(steps):
        states.append(step(states[-1], plan, **kwargs))
    return states


def default_bound(num_students: int, num_layers: int) -> int:
    return 4 * num_students * num_layers


def coverage_time(plan: PairingPlan, bound: int | None = None) -> float:
    """Steps until every slot has held every tag at least once.

    Counts tags held after steps 1..t; the initial assignment is not a
    capture.  Returns :data:`NEVER` if the bound is reached first.
    """
    M, H = plan.num_students, plan.num_layers
    bound = default_bound(M, H) if bound is None else bound
    universe = frozenset((k, i) for k in range(M) for i in range(H))
    state = initial_state(M, H)
    seen = [[set() for _ in range(H)] for _ in range(M)]
    for t in range(1, bound + 1):
        state = step(state, plan)
        done = True
        for k in range(M):
            for i in range(H):
                seen[k][i] |= state[k][i]
                done = done and seen[k][i] == universe
        if done:
            return t
    return NEVER


def period(plan: PairingPlan, bound: int | None = None) -> int | float | None:
    """Smallest t with state(t) == state(0), or None if none within the bound.

    With three or more students the union dynamics never returns to the
    singleton start, so the first full-coverage time is reported instead.
    """
    M, H = plan.num_students, plan.num_layers
    if M < 2:
        raise ValueError("period needs at least two students")
    if M >= 3:
        return coverage_time(plan, bound)
    bound = default_bound(M, H) if bound is None else bound
    start = state = initial_state(M, H)
    for t in range(1, bound + 1):
        state = step(state, plan)
        if state == start:
            return t
    return None


def layer_preserving(state: TagState) -> bool:
    """True if every slot holds only tags of its own layer."""
    return all(tag[1] == i for row in state for i, tags in enumerate(row) for tag in tags)


# ---------------------------------------------------------------------------
# Rendering


def tag_name(tag: Tag) -> str:
    k, i = tag
    return f"l{i + 1}^{k + 1}"


def slot_text(tags: frozenset) -> str:
    return ",".join(tag_name(t) for t in sorted(tags, key=lambda t: (t[1], t[0])))


def staged_columns(states: Sequence[TagState]) -> list[tuple[str, TagState]]:
    """Expand iterations into per-student stages, as in an alternating schedule.

    Stage (t, S_k) shows students 1..k at state t and the rest still at t-1.
    """
    cols = [("0 init", states[0])]
    M = len(states[0])
    for t in range(1, len(states)):
        for k in range(M):
            mixed = tuple(states[t][s] if s <= k else states[t - 1][s] for s in range(M))
            cols.append((f"{t} S{k + 1}", mixed))
    return cols


def render_table(states: Sequence[TagState], staged: bool = True) -> str:
    """Slot-by-iteration text table."""
    cols = staged_columns(states) if staged else [(str(t), s) for t, s in enumerate(states)]
    M, H = len(states[0]), len(states[0][0])
    header = ["slot"] + [name for name, _ in cols]
    rows = [[f"S{k + 1} L{i + 1}"] + [slot_text(state[k][i]) for _, state in cols]
            for k in range(M) for i in range(H)]
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    fmt = lambda r: " | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    for k in range(M):
        lines.extend(fmt(r) for r in rows[k * H : (k + 1) * H])
    return "\n".join(lines) + "\n"


def trajectory_to_json(plan: PairingPlan, states: Sequence[TagState]) -> dict:
    return {
        "plan": plan.kind,
        "students": plan.num_students,
        "layers": plan.num_layers,
        "edges": [list(e) for e in plan.edges(one_based=True)],
        "trajectory": [
            {"step": t, "slots": [[[tag_name(tag) for tag in sorted(tags, key=lambda x: (x[1], x[0]))]
                                   for tags in row] for row in state]}
            for t, state in enumerate(states)
        ],
    }


def simulate(num_students: int, num_layers: int, kind: str = "alignahead", steps: int = 6) -> dict:
    """Trajectory plus period and coverage summary, JSON-ready."""
    plan = build_plan(kind, num_students, num_layers)
    states = trajectory(plan, steps)
    doc = trajectory_to_json(plan, states)
    cov = coverage_time(plan)
    per = period(plan)
    doc["coverage_time"] = None if cov == NEVER else cov
    doc["period"] = None if per in (None, NEVER) else per
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1)
