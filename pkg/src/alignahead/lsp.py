"""Local structure preservation: neighbour kernels, neighbour distributions, KL loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph

KERNELS = ("euclidean", "linear", "poly", "rbf")
KL_EPS = 1e-12


@dataclass(frozen=True)
class KernelConfig:
    """Similarity used to build local structures.

    ``negate_euclidean`` flips the sign of the squared distance so that closer
    neighbours get more mass; off by default, which exponentiates the positive
    squared distance.
    """

    kind: str = "euclidean"
    poly_c: float = 1.0
    poly_d: float = 2.0
    rbf_sigma: float = 100.0
    negate_euclidean: bool = False

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if not self.rbf_sigma > 0:
            raise ValueError(f"rbf_sigma must be > 0, got {self.rbf_sigma}")
        if not self.poly_d > 0:
            raise ValueError(f"poly_d must be > 0, got {self.poly_d}")


def kernel(z_i, z_j, config: KernelConfig = KernelConfig()) -> float:
    """Kernel value between two embedding vectors."""
    a = np.asarray(z_i, dtype=np.float64).ravel()
    b = np.asarray(z_j, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"kernel: vector lengths differ ({a.size} vs {b.size})")
    if config.kind == "euclidean":
        d = float(np.sum((a - b) ** 2))
        return -d if config.negate_euclidean else d
    if config.kind == "linear":
        return float(a @ b)
    if config.kind == "poly":
        return float((a @ b + config.poly_c) ** config.poly_d)
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * config.rbf_sigma)))


def edge_kernel(z: Tensor, src: np.ndarray, dst: np.ndarray, config: KernelConfig) -> Tensor:
    """Kernel value for every directed edge, as an E x 1 tensor."""
    zi = ad.gather_rows(z, src)
    zj = ad.gather_rows(z, dst)
    if config.kind in ("euclidean", "rbf"):
        diff = zi - zj
        sq = ad.reduce_sum(ad.hadamard(diff, diff), axis=1)
        if config.kind == "rbf":
            return ad.exp(ad.scale(sq, -1.0 / (2.0 * config.rbf_sigma)))
        return ad.scale(sq, -1.0) if config.negate_euclidean else sq
    dot = ad.reduce_sum(ad.hadamard(zi, zj), axis=1)
    if config.kind == "linear":
        return dot
    return ad.power(ad.add(dot, Tensor(config.poly_c)), config.poly_d)


@dataclass(frozen=True, eq=False)
class LocalStructure:
    """Per-node distributions over graph neighbours, stored edge-aligned.

    ``probs[e]`` is the mass node ``src[e]`` puts on neighbour ``dst[e]``;
    edges follow CSR order so each node's support is its sorted neighbour
    list.  Isolated nodes own no edges and carry an empty distribution.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    probs: Tensor

    def distribution(self, node: int) -> tuple[list[int], np.ndarray]:
        rows = np.flatnonzero(self.src == node)
        return self.dst[rows].tolist(), self.probs.values[rows, 0].copy()

    @property
    def non_isolated(self) -> int:
        return int(np.unique(self.src).size)

    def detach(self) -> "LocalStructure":
        return LocalStructure(self.num_nodes, self.src, self.dst, self.probs.detach())


def local_structure(embeddings: Tensor, graph: Graph, config: KernelConfig = KernelConfig()) -> LocalStructure:
    if embeddings.shape[0] != graph.num_nodes:
        raise ValueError(f"embeddings have {embeddings.shape[0]} rows for a graph of {graph.num_nodes} nodes")
    src, dst = graph.edge_index
    scores = edge_kernel(embeddings, src, dst, config)
    probs = ad.segment_softmax(scores, src, graph.num_nodes)
    return LocalStructure(graph.num_nodes, src, dst, probs)


def structure_kl(target: LocalStructure, student: LocalStructure, eps: float = KL_EPS) -> Tensor:
    """Mean over non-isolated nodes of KL(target_i || student_i).

    The target is treated as a constant; only the student side carries
    gradient.  Returns 0 when every node is isolated.
    """
    same = target.num_nodes == student.num_nodes and np.array_equal(target.src, student.src) \
        and np.array_equal(target.dst, student.dst)
    if not same:
        raise ValueError("structure_kl: local structures have different supports (different graphs?)")
    count = student.non_isolated
    if count == 0:
        return Tensor(0.0)
    p = target.probs.values
    log_ratio = ad.sub(Tensor(np.log(p + eps)), ad.log(student.probs, eps))
    return ad.scale(ad.reduce_sum(ad.hadamard(Tensor(p), log_ratio)), 1.0 / count)
