"""Pairing strategies, losses and the alternating multi-student training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DatasetBundle, Graph
from .lsp import KernelConfig, LocalStructure, local_structure, structure_kl
from .models import ModelConfig, StudentModel, init_parameters

STRATEGIES = ("self_only", "oc", "alignahead", "offline_lsp")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, student: int, component: str, value: float):
        self.epoch, self.student, self.component, self.value = epoch, student, component, value
        super().__init__(f"non-finite {component} ({value}) at epoch {epoch}, student {student}")


@dataclass
class Strategy:
    kind: str = "alignahead"
    alpha: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    teacher: StudentModel | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if (self.teacher is not None) != (self.kind == "offline_lsp"):
            raise ValueError("a teacher model is required for offline_lsp and only for offline_lsp")

    @property
    def effective_kind(self) -> str:
        return "self_only" if self.alpha == 0 else self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "alpha": self.alpha, "kernel": asdict(self.kernel)}
        if self.teacher is not None:
            d["teacher"] = self.teacher.config.to_dict()
        return d


@dataclass(frozen=True)
class PairingPlan:
    """Distillation targets per (student, layer); layers are 0-based here.

    Peer index ``num_students`` denotes the frozen teacher in offline mode.
    """

    kind: str
    num_students: int
    num_layers: int
    targets: dict

    def edges(self, one_based: bool = False) -> list[tuple[int, int, int, int]]:
        """Sorted (student, layer, peer, peer_layer) tuples."""
        off = 1 if one_based else 0
        out = [(k + off, i + off, p + off, j + off) for (k, i), ts in self.targets.items() for p, j in ts]
        return sorted(out)


def build_plan(kind: str, num_students: int, num_layers: int, teacher_layers: int | None = None) -> PairingPlan:
    """Layer pairing for a strategy.

    alignahead: layer i targets layer i+1 of every peer, the last layer wraps
    to the first.  oc: layer i targets layer i of every peer.  offline_lsp:
    the last hidden layer targets the teacher's last hidden layer.
    """
    if kind not in STRATEGIES:
        raise ValueError(f"unknown strategy {kind!r}")
    if num_students < 1 or num_layers < 1:
        raise ValueError("need at least one student and one layer")
    targets = {(k, i): () for k in range(num_students) for i in range(num_layers)}
    if kind in ("oc", "alignahead"):
        for k, i in targets:
            j = (i + 1) % num_layers if kind == "alignahead" else i
            targets[k, i] = tuple((p, j) for p in range(num_students) if p != k)
    elif kind == "offline_lsp":
        if teacher_layers is None:
            raise ValueError("offline_lsp plan needs the teacher depth")
        src = max(num_layers - 2, 0)
        dst = max(teacher_layers - 2, 0)
        for k in range(num_students):
            targets[k, src] = ((num_students, dst),)
    return PairingPlan(kind, num_students, num_layers, targets)


@dataclass
class TrainConfig:
    model: ModelConfig
    strategy: Strategy = field(default_factory=Strategy)
    num_students: int = 2
    epochs: int = 200
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    fresh_targets: bool = False
    update_order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.num_students < 1:
            raise ValueError("num_students must be >= 1")
        if self.num_students < 2 and self.strategy.effective_kind in ("oc", "alignahead"):
            raise ValueError(f"strategy {self.strategy.kind!r} needs at least 2 students")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.update_order is not None and sorted(self.update_order) != list(range(self.num_students)):
            raise ValueError(f"update_order must be a permutation of 0..{self.num_students - 1}")

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["strategy"] = self.strategy.to_dict()
        d["betas"] = list(self.betas)
        d["update_order"] = list(self.update_order) if self.update_order else None
        return d


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.values if self.weight_decay else p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.values = p.values - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# ---------------------------------------------------------------------------
# Losses


Snapshot = list  # snapshot[p][layer] -> LocalStructure, gradient-stopped


def take_snapshot(models: Sequence[StudentModel], graph: Graph, kernel: KernelConfig) -> Snapshot:
    """Gradient-free local structures of every layer of every model."""
    out = []
    with ad.no_grad():
        for m in models:
            embeddings, _ = m.forward(graph)
            out.append([local_structure(z, graph, kernel).detach() for z in embeddings])
    return out


def cross_entropy(logits: Tensor, graph: Graph, nodes=None) -> Tensor:
    """Softmax CE (single-label) or mean per-class sigmoid CE (multi-label)."""
    idx = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cross_entropy: no labelled nodes selected")
    rows = ad.gather_rows(logits, idx)
    if graph.multi_label:
        if logits.shape[1] != graph.labels.shape[1]:
            raise ValueError(f"logits have {logits.shape[1]} columns for {graph.labels.shape[1]} labels")
        y = Tensor(graph.labels[idx].astype(np.float64))
        per = ad.sub(ad.softplus(rows), ad.hadamard(rows, y))
        return ad.reduce_mean(per)
    y = graph.labels[idx]
    if y.max() >= logits.shape[1]:
        raise ValueError(f"label {y.max()} out of range for {logits.shape[1]} logits")
    onehot = np.zeros(rows.shape)
    onehot[np.arange(len(idx)), y] = 1.0
    picked = ad.reduce_sum(ad.hadamard(ad.log_softmax(rows), Tensor(onehot)))
    return ad.scale(picked, -1.0 / len(idx))


def _check_task(model: StudentModel, graph: Graph) -> None:
    want = "multi_label" if graph.multi_label else "single_label"
    if model.config.task != want:
        raise ValueError(f"model task {model.config.task!r} does not match {want} labels")


def structure_loss(
    k: int,
    embeddings: Sequence[Tensor],
    snapshot: Snapshot,
    plan: PairingPlan,
    graph: Graph,
    kernel: KernelConfig,
    trace: list | None = None,
) -> Tensor:
    """Sum over layers of the peer-averaged KL against snapshot targets.

    Only ``embeddings`` (student ``k``'s live layer outputs) carry gradient.
    ``trace`` collects the (student, layer, peer, peer_layer) pairs consumed.
    """
    if len(embeddings) != plan.num_layers:
        raise ValueError(f"student has {len(embeddings)} layers, plan expects {plan.num_layers}")
    total = Tensor(0.0)
    for i, z in enumerate(embeddings):
        targets = plan.targets[k, i]
        if not targets:
            continue
        student = local_structure(z, graph, kernel)
        layer_sum = Tensor(0.0)
        for p, j in targets:
            target = snapshot[p][j]
            if target.num_nodes != graph.num_nodes:
                raise ValueError(f"snapshot of model {p} was taken on a different graph")
            layer_sum = ad.add(layer_sum, structure_kl(target, student))
            if trace is not None:
                trace.append((k, i, p, j))
        total = ad.add(total, ad.scale(layer_sum, 1.0 / len(targets)))
    return total


class LossTerms(NamedTuple):
    ce: Tensor
    structure: Tensor
    total: Tensor
    logits: Tensor


def loss_terms(
    k: int,
    model: StudentModel,
    graph: Graph,
    strategy: Strategy,
    plan: PairingPlan | None,
    snapshot: Snapshot | None,
    nodes=None,
    trace: list | None = None,
) -> LossTerms:
    _check_task(model, graph)
    embeddings, logits = model.forward(graph)
    ce = cross_entropy(logits, graph, nodes)
    if strategy.effective_kind == "self_only":
        structure = Tensor(0.0)
        return LossTerms(ce, structure, ce, logits)
    structure = structure_loss(k, embeddings, snapshot, plan, graph, strategy.kernel, trace)
    total = ad.add(ce, ad.scale(structure, strategy.alpha))
    return LossTerms(ce, structure, total, logits)


def total_loss(k, model, graph, strategy, plan=None, snapshot=None, nodes=None) -> Tensor:
    """Cross-entropy plus ``alpha`` times the structure loss for student ``k``."""
    return loss_terms(k, model, graph, strategy, plan, snapshot, nodes).total


# ---------------------------------------------------------------------------
# Metrics


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def micro_f1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Micro-averaged F1 at sigmoid threshold 0.5 (logit > 0)."""
    pred = logits > 0
    truth = labels.astype(bool)
    tp = np.sum(pred & truth)
    fp = np.sum(pred & ~truth)
    fn = np.sum(~pred & truth)
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def evaluate(model: StudentModel, graphs, split: str = "test") -> float:
    """Accuracy (single-label) or micro-F1 (multi-label).

    A single graph is scored on the nodes of ``split``; a list of graphs is
    scored on all of their nodes, pooled.
    """
    if isinstance(graphs, Graph):
        pairs = [(graphs, np.flatnonzero(graphs.mask(split)))]
    else:
        pairs = [(g, np.arange(g.num_nodes)) for g in graphs]
    if not pairs:
        return float("nan")
    logits, labels = [], []
    with ad.no_grad():
        for g, idx in pairs:
            _, out = model.forward(g)
            logits.append(out.values[idx])
            labels.append(g.labels[idx])
    stacked_logits = np.concatenate(logits)
    stacked_labels = np.concatenate(labels)
    if model.config.task == "multi_label":
        return micro_f1(stacked_logits, stacked_labels)
    return accuracy(stacked_logits, stacked_labels)


def _split_ce(model: StudentModel, graphs, split: str) -> float:
    with ad.no_grad():
        if isinstance(graphs, Graph):
            idx = np.flatnonzero(graphs.mask(split))
            if idx.size == 0:
                return float("nan")
            _, logits = model.forward(graphs)
            return cross_entropy(logits, graphs, idx).item()
        if not graphs:
            return float("nan")
        return float(np.mean([cross_entropy(model.forward(g)[1], g).item() for g in graphs]))


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochRecord:
    epoch: int
    student: int
    ce_loss: float
    structure_loss: float
    total_loss: float
    val_ce: float | None
    val_metric: float | None
    test_metric: float | None
    wall_ms: float


def _clean(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class TrainReport:
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    realized_pairs: list[tuple[int, int, int, int]] = field(default_factory=list)
    models: list[StudentModel] = field(default_factory=list, repr=False)

    @property
    def num_students(self) -> int:
        return self.config["num_students"]

    def to_jsonl(self, timing: bool = True) -> str:
        lines = []
        for r in self.records:
            d = asdict(r)
            if not timing:
                d["wall_ms"] = 0.0
            lines.append(json.dumps(d, sort_keys=False))
        return "\n".join(lines) + ("\n" if lines else "")

    def history(self, student: int, key: str) -> list:
        return [getattr(r, key) for r in self.records if r.student == student]

    def final(self, student: int) -> EpochRecord:
        return [r for r in self.records if r.student == student][-1]

    def best_student(self, key: str = "val_metric") -> int:
        scores = [self.final(k).__dict__[key] for k in range(self.num_students)]
        scores = [-math.inf if s is None else s for s in scores]
        return int(np.argmax(scores))

    def summary(self) -> dict:
        if not self.records:
            return {"students": [], "max_val_metric": None, "max_test_metric": None}
        finals = [self.final(k) for k in range(self.num_students)]
        vals = [f.val_metric for f in finals]
        tests = [f.test_metric for f in finals]
        return {
            "students": [{"student": f.student, "val_metric": f.val_metric, "test_metric": f.test_metric}
                         for f in finals],
            "max_val_metric": max((v for v in vals if v is not None), default=None),
            "max_test_metric": max((t for t in tests if t is not None), default=None),
            "best_student": self.best_student(),
        }


def student_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def _require_finite(value: float, epoch: int, student: int, component: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, student, component, value)


def train(
    bundle: DatasetBundle,
    config: TrainConfig,
    on_epoch: Callable[[list[EpochRecord]], None] | None = None,
) -> TrainReport:
    """Alternating training of ``config.num_students`` students.

    Each epoch (and, in inductive mode, each training graph) first snapshots
    every student's local structures, then updates the students one by one in
    ``update_order`` against that snapshot.  With ``fresh_targets`` the
    snapshot is retaken before every student update instead.
    """
    strategy = config.strategy
    kind = strategy.effective_kind
    M = config.num_students
    models = [init_parameters(config.model, s) for s in student_seeds(config.seed, M)]
    teacher = strategy.teacher if kind == "offline_lsp" else None
    if teacher is not None and teacher.config.input_dim != config.model.input_dim:
        raise ValueError("teacher and students must share the input width")
    plan = None if kind == "self_only" else build_plan(
        kind, M, config.model.num_layers, teacher.config.num_layers if teacher else None)
    optimizers = [Adam(m.parameters, config.learning_rate, config.weight_decay, config.betas, config.adam_eps)
                  for m in models]
    order = list(config.update_order) if config.update_order else list(range(M))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(M + 1)[-1])
    transductive = bundle.mode == "transductive"
    teacher_cache: dict[int, list[LocalStructure]] = {}

    def snapshot_for(graph: Graph) -> Snapshot:
        snap = take_snapshot(models, graph, strategy.kernel)
        if teacher is not None:
            key = id(graph)
            if key not in teacher_cache:
                teacher_cache[key] = take_snapshot([teacher], graph, strategy.kernel)[0]
            snap.append(teacher_cache[key])
        return snap

    report = TrainReport(config.to_dict(), models=models)
    for epoch in range(1, config.epochs + 1):
        if transductive:
            graphs = [bundle.graph]
        else:
            graphs = [bundle.train_graphs[i] for i in shuffle_rng.permutation(len(bundle.train_graphs))]
        sums = np.zeros((M, 3))
        wall = np.zeros(M)
        for gi, graph in enumerate(graphs):
            nodes = np.flatnonzero(graph.train_mask) if transductive else None
            snapshot = None if kind == "self_only" else snapshot_for(graph)
            for n_done, k in enumerate(order):
                start = time.perf_counter()
                if config.fresh_targets and kind != "self_only" and n_done > 0:
                    snapshot = snapshot_for(graph)
                trace = report.realized_pairs if (epoch == 1 and gi == 0) else None
                terms = loss_terms(k, models[k], graph, strategy, plan, snapshot, nodes, trace)
                ce, st, tot = terms.ce.item(), terms.structure.item(), terms.total.item()
                _require_finite(ce, epoch, k, "ce_loss")
                _require_finite(st, epoch, k, "structure_loss")
                _require_finite(tot, epoch, k, "total_loss")
                models[k].zero_grad()
                ad.backward(terms.total)
                optimizers[k].step()
                sums[k] += (ce, st, tot)
                wall[k] += (time.perf_counter() - start) * 1000.0
        sums /= len(graphs)
        records = []
        for k in range(M):
            if transductive:
                val = evaluate(models[k], bundle.graph, "val")
                test = evaluate(models[k], bundle.graph, "test")
                val_ce = _split_ce(models[k], bundle.graph, "val")
            else:
                val = evaluate(models[k], bundle.val_graphs)
                test = evaluate(models[k], bundle.test_graphs)
                val_ce = _split_ce(models[k], bundle.val_graphs, "val")
            records.append(EpochRecord(epoch, k, *map(float, sums[k]), _clean(val_ce), _clean(val), _clean(test),
                                       round(float(wall[k]), 3)))
        report.records.extend(records)
        if on_epoch is not None:
            on_epoch(records)
    report.realized_pairs.sort()
    return report
