"""Acceptance criteria, one check per criterion.

Each check returns ``(passed, detail)`` and is timed against its runtime
budget.  Under pytest a PASS/FAIL line per criterion is printed in the
terminal summary; ``python tests/test_acceptance.py [N ...]`` runs the checks
directly.
"""

from __future__ import annotations

import contextlib
import csv
import io
import itertools
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alignahead import autodiff as ad  # noqa: E402
from alignahead.cli import main as cli_main  # noqa: E402
from alignahead.distill import Strategy, TrainConfig, build_plan, structure_loss, take_snapshot, train  # noqa: E402
from alignahead.flowsim import coverage_time, initial_state, layer_preserving, period, step, trajectory  # noqa: E402
from alignahead.gradcheck import max_relative_error  # noqa: E402
from alignahead.graph import DatasetBundle, generate_sbm  # noqa: E402
from alignahead.lsp import KERNELS, KernelConfig, local_structure, structure_kl  # noqa: E402
from alignahead.models import ARCHITECTURES, forward, init_parameters  # noqa: E402

from conftest import random_graph  # noqa: E402
from test_autodiff import OP_CASES, away_from_kinks  # noqa: E402
from test_distill import kl_oracle, small_config, softmax_structure  # noqa: E402
from test_flowsim import ALTERNATING_M2_H3  # noqa: E402
from test_models import config_for  # noqa: E402

SEEDS = "0,1,2,3,4"
# standard SBM task, GCN with three layers of width 32, transductive preset
STANDARD = ["--preset", "transductive", "--layers", "3", "--hidden", "32", "--no-figures"]

CRITERIA: dict[int, tuple[str, float, callable]] = {}
RESULTS: dict[int, str] = {}


def criterion(number: int, title: str, budget_s: float):
    def register(fn):
        CRITERIA[number] = (title, budget_s, fn)
        return fn
    return register


def cli(*argv) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = cli_main([str(a) for a in argv])
    return code, buf.getvalue()


# ---------------------------------------------------------------------------


@criterion(1, "two-student, three-layer alternating table reproduced exactly", 1.0)
def flow_table():
    code, out = cli("flow", "--students", 2, "--layers", 3, "--plan", "alignahead", "--steps", 6)
    rows = [line.split("|") for line in out.splitlines()[2:8]]
    got = {(k, i): [c.strip() for c in rows[k * 3 + i][1:]] for k in range(2) for i in range(3)}
    mismatches = [slot for slot, cells in ALTERNATING_M2_H3.items() if got.get(slot) != cells]
    states = trajectory(build_plan("alignahead", 2, 3), 6)
    returns = states[6] == states[0] and all(states[t] != states[0] for t in range(1, 6))
    ok = code == 0 and not mismatches and returns
    return ok, f"mismatched slots={mismatches}, returns to start first at step 6={returns}"


@criterion(2, "M=2 period is 2H and each slot visits all 2H tags once per period, H=1..8", 1.0)
def period_law():
    failures = []
    for H in range(1, 9):
        plan = build_plan("alignahead", 2, H)
        p = period(plan)
        states = trajectory(plan, 2 * H)
        universe = {(k, i) for k in range(2) for i in range(H)}
        bad_slots = 0
        for k in range(2):
            for i in range(H):
                visited = [tag for t in range(1, 2 * H + 1) for tag in states[t][k][i]]
                bad_slots += sorted(visited) != sorted(universe)
        if p != 2 * H or bad_slots:
            failures.append(f"H={H}: period={p}, slots missing tags={bad_slots}")
    return not failures, "; ".join(failures) or "all H satisfy the law"


@criterion(3, "oc never mixes layers, H=2..5", 1.0)
def oc_non_mixing():
    bad = []
    for H in range(2, 6):
        plan = build_plan("oc", 2, H)
        if coverage_time(plan) != math.inf or not all(layer_preserving(s) for s in trajectory(plan, 16 * H)):
            bad.append(H)
    return not bad, f"violations at H={bad}"


@criterion(4, "finite-difference gradients: ops, architectures, structure KL (rel. err. 1e-4)", 30.0)
def gradient_suite():
    tol = 1e-4
    worst = {}
    for name, (fn, shapes) in OP_CASES.items():
        rng = np.random.default_rng(len(name))
        err = 0.0
        for _ in range(10):
            inputs = [ad.parameter(away_from_kinks(rng, s)) for s in shapes]
            weights = ad.Tensor(rng.standard_normal(fn(*inputs).shape))
            err = max(err, max_relative_error(lambda: ad.reduce_sum(ad.hadamard(fn(*inputs), weights)), inputs))
        worst[f"op:{name}"] = err
    for arch in ARCHITECTURES:
        err = 0.0
        for seed in range(2):
            rng = np.random.default_rng(100 + seed)
            g = random_graph(rng, n=int(rng.integers(6, 11)), p=0.4, features=3)
            m = init_parameters(config_for(arch, d_in=3, hidden=(4, 3)), seed)
            for name, t in m.parameters.items():
                if "bias" in name:
                    t.values = t.values + rng.uniform(0.1, 0.3, size=t.shape)
            probe = ad.Tensor(rng.normal(size=(g.num_nodes, 3)))
            err = max(err, max_relative_error(lambda: ad.reduce_sum(ad.hadamard(forward(m, g)[1], probe)),
                                              list(m.parameters.values())))
        worst[f"arch:{arch}"] = err
    for kind in KERNELS:
        rng = np.random.default_rng(7)
        g = random_graph(rng, n=6, p=0.5)
        cfg = KernelConfig(kind, rbf_sigma=1.0)
        target = local_structure(ad.Tensor(rng.normal(size=(6, 3))), g, cfg).detach()
        z = ad.parameter(rng.normal(size=(6, 3)) * 0.5)
        worst[f"kl:{kind}"] = max_relative_error(lambda: structure_kl(target, local_structure(z, g, cfg)), [z])
    name, err = max(worst.items(), key=lambda kv: kv[1])
    return err < tol, f"{len(worst)} checks, worst {name} = {err:.2e}"


@criterion(5, "local structures normalised, KL non-negative and zero at equality", 5.0)
def distribution_properties():
    worst_sum, min_kl, max_self = 0.0, math.inf, 0.0
    for kind in KERNELS:
        cfg = KernelConfig(kind)
        rows, seed = 0, 0
        while rows < 1000:
            rng = np.random.default_rng(seed)
            seed += 1
            g = random_graph(rng, n=40, p=0.15)
            a = local_structure(ad.Tensor(rng.normal(size=(40, 5))), g, cfg)
            b = local_structure(ad.Tensor(rng.normal(size=(40, 5))), g, cfg)
            sums = np.bincount(a.src, weights=a.probs.values[:, 0], minlength=40)[np.unique(a.src)]
            worst_sum = max(worst_sum, float(np.abs(sums - 1).max()))
            rows += sums.size
            min_kl = min(min_kl, structure_kl(a, b).item())
            max_self = max(max_self, structure_kl(a, a).item())
    ok = worst_sum <= 1e-9 and min_kl >= -1e-9 and max_self <= 1e-9
    return ok, f"max |row sum - 1| = {worst_sum:.1e}, min KL = {min_kl:.3g}, max KL(P,P) = {max_self:.1e}"


@criterion(6, "peer averaging reduces to the two-student sum; M=3 matches a brute-force oracle", 5.0)
def multi_student_reduction():
    worst2 = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n=int(rng.integers(5, 12)), p=0.4)
        cfg = KernelConfig(KERNELS[seed % 4], rbf_sigma=1.0)
        models = [init_parameters(small_config(), 2 * seed + k) for k in range(2)]
        snap = take_snapshot(models, g, cfg)
        plan = build_plan("alignahead", 2, 3)
        for k in range(2):
            emb, _ = models[k].forward(g)
            got = structure_loss(k, emb, snap, plan, g, cfg).item()
            pair = sum(structure_kl(snap[1 - k][(i + 1) % 3], local_structure(emb[i], g, cfg)).item()
                       for i in range(3))
            worst2 = max(worst2, abs(got - pair))
    worst3 = 0.0
    for seed in range(5):
        rng = np.random.default_rng(50 + seed)
        g = random_graph(rng, n=5, p=0.6)
        cfg = KernelConfig(KERNELS[seed % 4], rbf_sigma=1.0)
        models = [init_parameters(small_config(layers=2), 10 * seed + k) for k in range(3)]
        snap = take_snapshot(models, g, cfg)
        plan = build_plan("alignahead", 3, 2)
        with ad.no_grad():
            embs = [[z.values for z in m.forward(g)[0]] for m in models]
        for k in range(3):
            got = structure_loss(k, models[k].forward(g)[0], snap, plan, g, cfg).item()
            expected = sum(
                sum(kl_oracle(softmax_structure(embs[p][(i + 1) % 2], g, cfg), softmax_structure(embs[k][i], g, cfg))
                    for p in range(3) if p != k) / 2
                for i in range(2))
            worst3 = max(worst3, abs(got - expected))
    return worst2 <= 1e-12 and worst3 <= 1e-10, f"M=2 max diff {worst2:.1e}, M=3 max diff {worst3:.1e}"


@criterion(7, "first-epoch losses independent of update order; realized pairs equal simulated plan", 5.0)
def snapshot_semantics():
    g = generate_sbm(0, 60, 3, 0.2, 0.02, feature_dim=4)
    bundle = DatasetBundle("transductive", [g])
    order_ok, pairs_ok = True, True
    for M in (2, 3):
        reports = []
        for order in itertools.permutations(range(M)):
            cfg = TrainConfig(small_config(), Strategy("alignahead"), num_students=M, epochs=1, update_order=order)
            reports.append(train(bundle, cfg))
        losses = [[(r.ce_loss, r.structure_loss) for r in rep.records] for rep in reports]
        order_ok &= all(x == losses[0] for x in losses)
        first = initial_state(M, 3)
        moved = step(first, build_plan("alignahead", M, 3))
        simulated = sorted((k, i, p, j) for k in range(M) for i in range(3) for p, j in moved[k][i])
        pairs_ok &= reports[0].realized_pairs == simulated
    return order_ok and pairs_ok, f"order invariant={order_ok}, pairs match simulation={pairs_ok}"


@criterion(8, "standard SBM task: alignahead >= self - 0.005 over 5 seeds; finite losses for GCN/SAGE", 300.0)
def directional_reproduction():
    with tempfile.TemporaryDirectory() as tmp:
        code, out = cli("compare", *STANDARD, "--archs", "gcn", "--strategies", "self,alignahead",
                        "--seeds", SEEDS, "--out", Path(tmp) / "compare")
        if code != 0:
            return False, f"compare exited {code}"
        per = json.loads(out)["mean_max_val_metric"]["gcn"]
        finite = {}
        for arch in ("gcn", "sage_mean", "sage_gcn", "sage_pool"):
            run_dir = Path(tmp) / arch
            code, _ = cli("train", *STANDARD, "--arch", arch, "--seed", 0, "--out", run_dir)
            recs = [json.loads(line) for line in (run_dir / "report.jsonl").read_text().splitlines()] if code == 0 else []
            finite[arch] = code == 0 and all(
                r[key] is not None and math.isfinite(r[key])
                for r in recs for key in ("ce_loss", "structure_loss", "total_loss"))
    gap = per["gap_alignahead_minus_self"]
    ok = gap >= -0.005 and all(finite.values())
    return ok, (f"self={per['self_only']:.4f} alignahead={per['alignahead']:.4f} gap={gap:+.4f}; "
                f"finite losses={finite}")


@criterion(9, "alpha sweep {0.1,0.5,1,1.5,10} completes with finite losses; spread reported", 600.0)
def alpha_robustness():
    with tempfile.TemporaryDirectory() as tmp:
        # a non-finite loss aborts training with a nonzero exit, so exit 0 certifies finite losses
        code, out = cli("sweep-alpha", *STANDARD, "--seeds", SEEDS, "--out", tmp)
        if code != 0:
            return False, f"sweep-alpha exited {code}"
        rows = list(csv.DictReader(open(Path(tmp) / "alpha_sweep.csv")))
    alphas = sorted({float(r["alpha"]) for r in rows})
    complete = alphas == [0.1, 0.5, 1.0, 1.5, 10.0] and len(rows) == 25 and all(r["max_test_metric"] for r in rows)
    summary = json.loads(out)
    means = {a: round(v, 4) for a, v in summary["test"]["per_alpha"].items()}
    return complete, (f"test accuracy per alpha={means}, spread={summary['test']['spread']:.4f} "
                      f"(val spread {summary['val']['spread']:.4f})")


@criterion(10, "train rerun with identical seed/config gives byte-identical JSONL", 60.0)
def determinism():
    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for d in ("a", "b"):
            cli("train", *STANDARD, "--seed", 3, "--no-timing", "--out", Path(tmp) / d)
            blobs.append((Path(tmp) / d / "report.jsonl").read_bytes())
    return blobs[0] == blobs[1] and len(blobs[0]) > 0, f"{len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}"


@criterion(11, "alignahead with M=2,3,4 students completes; per-M accuracy reported", 600.0)
def student_scaling():
    with tempfile.TemporaryDirectory() as tmp:
        code, out = cli("sweep-students", *STANDARD, "--student-counts", "2,3,4", "--seeds", SEEDS, "--out", tmp)
        if code != 0:
            return False, f"sweep-students exited {code}"
    per = {m: round(v, 4) for m, v in json.loads(out)["test"]["per_students"].items()}
    return set(per) == {"2", "3", "4"}, f"mean max test accuracy per M={per}"


# ---------------------------------------------------------------------------


def evaluate(number: int) -> tuple[bool, str]:
    title, budget, fn = CRITERIA[number]
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    within = elapsed < budget
    verdict = "PASS" if ok and within else "FAIL"
    line = f"[{verdict}] criterion {number:2d}: {title} -- {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
    RESULTS[number] = line
    return ok and within, line


@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda n: f"criterion{n:02d}-{CRITERIA[n][2].__name__}")
def test_acceptance(number):
    ok, line = evaluate(number)
    print(line)
    assert ok, line


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    results = [evaluate(n) for n in wanted]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
