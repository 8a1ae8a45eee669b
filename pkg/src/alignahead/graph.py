"""Graph storage, the graph JSON format, SBM generation and dataset bundles."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SPLIT_NAMES = ("train", "val", "test")


class GraphFormatError(ValueError):
    """A graph or bundle file could not be parsed."""


class GraphValidationError(ValueError):
    """A graph violates a structural invariant (e.g. overlapping masks)."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph in CSR form with node features, labels and split masks.

    Storage holds both directions of every edge, no duplicates and no
    self-loops.  ``labels`` is a length-N int vector (single-label) or an N x C
    0/1 matrix (multi-label).
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels, masks=None, *, warn_asymmetric=True) -> "Graph":
        n = int(num_nodes)
        if n < 0:
            raise ValueError(f"num_nodes must be >= 0, got {n}")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError(f"edge endpoint out of range for {n} nodes")
        e = e[e[:, 0] != e[:, 1]]
        directed = np.unique(e, axis=0)
        both = np.unique(np.concatenate([directed, directed[:, ::-1]]), axis=0)
        if warn_asymmetric and len(both) != len(directed):
            warnings.warn(
                f"edge list is not symmetric; added {len(both) - len(directed)} reverse edges",
                stacklevel=2,
            )
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(both[:, 0], minlength=n), out=offsets[1:])
        targets = both[:, 1].copy()

        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != n:
            raise ValueError(f"features must be an {n} x F matrix, got shape {x.shape}")
        y = np.asarray(labels)
        if y.shape[0] != n or y.ndim not in (1, 2):
            raise ValueError(f"labels must have {n} rows, got shape {y.shape}")
        y = y.astype(np.int64)
        if y.ndim == 2 and not np.isin(y, (0, 1)).all():
            raise ValueError("multi-label labels must be 0/1")

        masks = masks or {}
        arrays = []
        for name in SPLIT_NAMES:
            m = np.zeros(n, dtype=bool)
            ids = np.asarray(masks.get(name, []), dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise GraphValidationError(f"mask {name!r} has node ids out of range")
            m[ids] = True
            arrays.append(m)
        overlap = (arrays[0] & arrays[1]) | (arrays[0] & arrays[2]) | (arrays[1] & arrays[2])
        if overlap.any():
            raise GraphValidationError(f"masks overlap on nodes {np.flatnonzero(overlap)[:10].tolist()}")
        return cls(n, _frozen(offsets), _frozen(targets), _frozen(x), _frozen(y), *map(_frozen, arrays))

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.csr_targets) // 2

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    @property
    def num_classes(self) -> int:
        if self.multi_label:
            return self.labels.shape[1]
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @cached_property
    def degrees(self) -> np.ndarray:
        return _frozen(np.diff(self.csr_offsets))

    @cached_property
    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) arrays in CSR order: sorted by src, then dst."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees)
        return _frozen(src), self.csr_targets

    @cached_property
    def self_loop_edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.edge_index
        loops = np.arange(self.num_nodes)
        s = np.concatenate([src, loops])
        d = np.concatenate([dst, loops])
        order = np.lexsort((d, s))
        return _frozen(s[order]), _frozen(d[order])

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.csr_targets))
        return sp.csr_matrix((data, self.csr_targets, self.csr_offsets), shape=(self.num_nodes,) * 2)

    @cached_property
    def gcn_adjacency(self) -> sp.csr_matrix:
        """Symmetrically normalised adjacency with self-loops."""
        a = self.adjacency + sp.identity(self.num_nodes, format="csr")
        inv_sqrt = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
        d = sp.diags(inv_sqrt)
        return (d @ a @ d).tocsr()

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]

    def edges(self) -> np.ndarray:
        """Undirected edge list with u < v, lexicographically sorted."""
        src, dst = self.edge_index
        keep = src < dst
        return np.stack([src[keep], dst[keep]], axis=1)


def neighbor_slices(graph: Graph, node: int) -> list[int]:
    if not 0 <= node < graph.num_nodes:
        raise ValueError(f"node {node} out of range for {graph.num_nodes} nodes")
    lo, hi = graph.csr_offsets[node], graph.csr_offsets[node + 1]
    return graph.csr_targets[lo:hi].tolist()


# ---------------------------------------------------------------------------
# JSON format


def graph_to_dict(graph: Graph) -> dict:
    return {
        "num_nodes": graph.num_nodes,
        "edges": np.stack(graph.edge_index, axis=1).tolist(),
        "features": graph.features.tolist(),
        "labels": graph.labels.tolist(),
        "masks": {name: np.flatnonzero(graph.mask(name)).tolist() for name in SPLIT_NAMES},
    }


def save_graph(graph: Graph, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(graph_to_dict(graph), separators=(",", ":")) + "\n")
    return path


def _require(doc: dict, key: str, kind, path) -> object:
    if key not in doc:
        raise GraphFormatError(f"{path}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise GraphFormatError(f"{path}: field {key!r} has type {type(value).__name__}")
    return value


def graph_from_dict(doc: dict, source="<dict>") -> Graph:
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{source}: top level must be an object")
    n = _require(doc, "num_nodes", int, source)
    edges = _require(doc, "edges", list, source)
    features = _require(doc, "features", list, source)
    labels = _require(doc, "labels", list, source)
    masks = _require(doc, "masks", dict, source)
    for i, e in enumerate(edges):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise GraphFormatError(f"{source}: field 'edges' entry {i} is not an [int, int] pair: {e!r}")
    unknown = set(masks) - set(SPLIT_NAMES)
    if unknown:
        raise GraphFormatError(f"{source}: field 'masks' has unknown splits {sorted(unknown)}")
    try:
        feats = np.asarray(features, dtype=np.float64)
        labs = np.asarray(labels, dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise GraphFormatError(f"{source}: ragged or non-numeric 'features'/'labels': {exc}") from None
    if n > 0 and feats.ndim != 2:
        raise GraphFormatError(f"{source}: field 'features' must be a list of equal-length rows")
    if n == 0:
        feats = feats.reshape(0, 0)
    try:
        return Graph.from_edges(n, edges, feats, labs, masks)
    except GraphValidationError:
        raise
    except ValueError as exc:
        raise GraphFormatError(f"{source}: {exc}") from None


def load_graph(path) -> Graph:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(doc, path)


# ---------------------------------------------------------------------------
# Bundles


@dataclass
class DatasetBundle:
    mode: str
    train_graphs: list[Graph]
    val_graphs: list[Graph] = field(default_factory=list)
    test_graphs: list[Graph] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("transductive", "inductive"):
            raise ValueError(f"unknown bundle mode {self.mode!r}")
        if self.mode == "transductive":
            if len(self.train_graphs) != 1 or self.val_graphs or self.test_graphs:
                raise ValueError("a transductive bundle holds exactly one graph")
        elif not self.train_graphs:
            raise ValueError("an inductive bundle needs at least one training graph")

    @classmethod
    def transductive(cls, graph: Graph) -> "DatasetBundle":
        return cls("transductive", [graph])

    @property
    def graph(self) -> Graph:
        return self.train_graphs[0]

    @property
    def all_graphs(self) -> list[Graph]:
        return self.train_graphs + self.val_graphs + self.test_graphs


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write member graphs plus a ``bundle.json`` manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"mode": bundle.mode}
    for split, graphs in zip(SPLIT_NAMES, (bundle.train_graphs, bundle.val_graphs, bundle.test_graphs)):
        names = []
        for i, g in enumerate(graphs):
            name = f"{split}_{i:03d}.json"
            save_graph(g, directory / name)
            names.append(name)
        manifest[split] = names
    out = directory / "bundle.json"
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_bundle(path) -> DatasetBundle:
    """Load a bundle manifest, or wrap a single graph file as a transductive bundle."""
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if isinstance(doc, dict) and "num_nodes" in doc:
        return DatasetBundle.transductive(graph_from_dict(doc, path))
    if not isinstance(doc, dict) or "mode" not in doc:
        raise GraphFormatError(f"{path}: neither a graph file nor a bundle manifest")
    lists = {}
    for split in SPLIT_NAMES:
        names = doc.get(split, [])
        if not isinstance(names, list):
            raise GraphFormatError(f"{path}: field {split!r} must be a list of file names")
        lists[split] = [load_graph(path.parent / name) for name in names]
    mode = doc["mode"]
    if mode == "transductive":
        graphs = lists["train"] + lists["val"] + lists["test"]
        if len(graphs) != 1:
            raise GraphFormatError(f"{path}: transductive bundle must list exactly one graph")
        return DatasetBundle.transductive(graphs[0])
    try:
        return DatasetBundle(mode, lists["train"], lists["val"], lists["test"])
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Stochastic block model


def class_means(rng: np.random.Generator, num_classes: int, feature_dim: int, shift: float) -> np.ndarray:
    """Random directions of norm ``shift``, one per class."""
    raw = rng.standard_normal((num_classes, feature_dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.where(norms > 0, norms, 1.0) * shift


def stratified_masks(rng: np.random.Generator, classes: np.ndarray, fractions=(0.6, 0.2)) -> dict:
    masks = {name: [] for name in SPLIT_NAMES}
    for c in np.unique(classes):
        members = rng.permutation(np.flatnonzero(classes == c))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        masks["train"].extend(members[:n_train].tolist())
        masks["val"].extend(members[n_train : n_train + n_val].tolist())
        masks["test"].extend(members[n_train + n_val :].tolist())
    return {k: sorted(v) for k, v in masks.items()}


def generate_sbm(
    seed: int,
    num_nodes: int,
    num_classes: int,
    p_in: float,
    p_out: float,
    feature_dim: int = 16,
    feature_shift: float = 1.0,
    *,
    multi_label: bool = False,
    extra_label_rate: float = 0.1,
    means: np.ndarray | None = None,
) -> Graph:
    """Sample a planted-partition graph with Gaussian class-shifted features.

    Nodes are assigned to classes in contiguous, evenly sized blocks.  With
    ``multi_label`` each node carries its block label plus every other label
    independently with probability ``extra_label_rate``.  ``means`` pins the
    per-class feature means, so several graphs can share one feature model.
    """
    if not 0 <= p_out <= p_in <= 1:
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if num_nodes < num_classes:
        raise ValueError(f"num_nodes ({num_nodes}) must be >= num_classes ({num_classes})")
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    rng = np.random.default_rng(seed)
    classes = np.arange(num_nodes) * num_classes // num_nodes

    same = classes[:, None] == classes[None, :]
    prob = np.where(same, p_in, p_out)
    draws = rng.random((num_nodes, num_nodes))
    upper = np.triu(draws < prob, k=1)
    edges = np.argwhere(upper)

    if means is None:
        means = class_means(rng, num_classes, feature_dim, feature_shift)
    elif means.shape != (num_classes, feature_dim):
        raise ValueError(f"means must have shape {(num_classes, feature_dim)}, got {means.shape}")
    features = rng.standard_normal((num_nodes, feature_dim)) + means[classes]

    if multi_label:
        labels = (rng.random((num_nodes, num_classes)) < extra_label_rate).astype(np.int64)
        labels[np.arange(num_nodes), classes] = 1
    else:
        labels = classes
    masks = stratified_masks(rng, classes)
    return Graph.from_edges(num_nodes, edges, features, labels, masks, warn_asymmetric=False)


def generate_sbm_bundle(
    seed: int,
    num_graphs: tuple[int, int, int],
    num_nodes: int,
    num_classes: int,
    p_in: float,
    p_out: float,
    feature_dim: int = 16,
    feature_shift: float = 1.0,
    *,
    multi_label: bool = False,
) -> DatasetBundle:
    """Inductive bundle of independent SBM graphs sharing class feature means.

    Member graphs carry empty masks; every node of a graph belongs to the
    graph's split.
    """
    rng = np.random.default_rng(seed)
    means = class_means(rng, num_classes, feature_dim, feature_shift)
    child_seeds = rng.integers(0, 2**31 - 1, size=sum(num_graphs))
    graphs = []
    for s in child_seeds:
        g = generate_sbm(int(s), num_nodes, num_classes, p_in, p_out, feature_dim, feature_shift,
                         multi_label=multi_label, means=means)
        graphs.append(Graph.from_edges(g.num_nodes, g.edges(), g.features, g.labels, warn_asymmetric=False))
    a, b, _ = num_graphs
    return DatasetBundle("inductive", graphs[:a], graphs[a : a + b], graphs[a + b :])
