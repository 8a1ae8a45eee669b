"""Student GNN architectures exposing per-layer node embeddings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph

ARCHITECTURES = ("gcn", "sage_mean", "sage_gcn", "sage_pool", "gat")
CHECKPOINT_FORMAT = "alignahead-checkpoint/1"
GAT_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``num_layers`` counts every layer including the output layer, so
    ``hidden_dims`` has ``num_layers - 1`` entries.  For GAT the hidden widths
    are per head and hidden heads are concatenated.  ``activation`` defaults to
    relu, or elu for GAT.
    """

    arch: str
    input_dim: int
    output_dim: int
    num_layers: int = 3
    hidden_dims: tuple[int, ...] = (128, 128)
    gat_heads: tuple[int, ...] | None = None
    activation: str | None = None
    task: str = "single_label"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.gat_heads is not None:
            object.__setattr__(self, "gat_heads", tuple(int(h) for h in self.gat_heads))
        if self.activation is None:
            object.__setattr__(self, "activation", "elu" if self.arch == "gat" else "relu")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if len(self.hidden_dims) != self.num_layers - 1:
            raise ValueError(f"hidden_dims needs {self.num_layers - 1} entries, got {len(self.hidden_dims)}")
        if (self.gat_heads is not None) != (self.arch == "gat"):
            raise ValueError("gat_heads must be given exactly when arch is 'gat'")
        if self.gat_heads is not None and len(self.gat_heads) != self.num_layers:
            raise ValueError(f"gat_heads needs {self.num_layers} entries, got {len(self.gat_heads)}")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.task not in ("single_label", "multi_label"):
            raise ValueError(f"unknown task {self.task!r}")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer widths must be >= 1")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(input width, output width) per layer, after head concatenation."""
        widths = [self.input_dim]
        for i, h in enumerate(self.hidden_dims):
            widths.append(h * (self.gat_heads[i] if self.gat_heads else 1))
        widths.append(self.output_dim)
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["gat_heads"] = list(self.gat_heads) if self.gat_heads else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", ()))
        if d.get("gat_heads") is not None:
            d["gat_heads"] = tuple(d["gat_heads"])
        return cls(**d)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int], tuple[int, int]]]:
    """(name, shape, glorot fans) for every parameter, in creation order."""
    specs = []
    for layer, (d_in, d_out) in enumerate(config.layer_dims):
        p = f"layer{layer}."
        if config.arch in ("gcn", "sage_gcn"):
            specs.append((p + "weight", (d_in, d_out), (d_in, d_out)))
        elif config.arch == "sage_mean":
            specs.append((p + "weight", (2 * d_in, d_out), (2 * d_in, d_out)))
        elif config.arch == "sage_pool":
            specs.append((p + "pool_weight", (d_in, d_in), (d_in, d_in)))
            specs.append((p + "pool_bias", (1, d_in), None))
            specs.append((p + "weight", (2 * d_in, d_out), (2 * d_in, d_out)))
        else:
            heads = config.gat_heads[layer]
            last = layer == config.num_layers - 1
            per_head = d_out if last else d_out // heads
            for h in range(heads):
                q = f"{p}head{h}."
                specs.append((q + "weight", (d_in, per_head), (d_in, per_head)))
                specs.append((q + "att_src", (per_head, 1), (per_head, 1)))
                specs.append((q + "att_dst", (per_head, 1), (per_head, 1)))
        specs.append((p + "bias", (1, d_out), None))
    return specs


@dataclass(eq=False)
class StudentModel:
    config: ModelConfig
    parameters: dict[str, Tensor]
    embeddings: list[Tensor] = field(default_factory=list)
    attention: list[list[np.ndarray]] = field(default_factory=list)

    def forward(self, graph: Graph) -> tuple[list[Tensor], Tensor]:
        return forward(self, graph)

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.parameters.items()}

    def frozen_copy(self) -> "StudentModel":
        params = {k: Tensor(v.values.copy()) for k, v in self.parameters.items()}
        return StudentModel(self.config, params)


def init_parameters(config: ModelConfig, seed) -> StudentModel:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fans in _param_shapes(config):
        values = np.zeros(shape) if fans is None else glorot(rng, *fans, shape=shape)
        params[name] = ad.parameter(values)
    return StudentModel(config, params)


def _activate(x: Tensor, kind: str) -> Tensor:
    return ad.relu(x) if kind == "relu" else ad.elu(x)


def _gat_layer(model: StudentModel, layer: int, h: Tensor, graph: Graph, last: bool) -> Tensor:
    src, dst = graph.self_loop_edge_index
    n = graph.num_nodes
    heads = model.config.gat_heads[layer]
    outs, coeffs = [], []
    for k in range(heads):
        q = f"layer{layer}.head{k}."
        wh = ad.matmul(h, model.parameters[q + "weight"])
        score_src = ad.matmul(wh, model.parameters[q + "att_src"])
        score_dst = ad.matmul(wh, model.parameters[q + "att_dst"])
        logits = ad.leaky_relu(ad.add(ad.gather_rows(score_src, src), ad.gather_rows(score_dst, dst)), GAT_SLOPE)
        alpha = ad.segment_softmax(logits, src, n)
        coeffs.append(alpha.values[:, 0].copy())
        outs.append(ad.segment_sum(ad.hadamard(ad.gather_rows(wh, dst), alpha), src, n))
    model.attention.append(coeffs)
    if last:
        merged = outs[0]
        for o in outs[1:]:
            merged = ad.add(merged, o)
        merged = ad.scale(merged, 1.0 / heads)
    else:
        merged = ad.concat_cols(*outs)
    return ad.add(merged, model.parameters[f"layer{layer}.bias"])


def _layer(model: StudentModel, layer: int, h: Tensor, graph: Graph, last: bool) -> Tensor:
    arch = model.config.arch
    p = model.parameters
    name = f"layer{layer}."
    if arch == "gat":
        return _gat_layer(model, layer, h, graph, last)
    if arch == "gcn":
        out = ad.sparse_matmul(graph.gcn_adjacency, ad.matmul(h, p[name + "weight"]))
    elif arch == "sage_mean":
        neigh = ad.segment_aggregate(h, graph.edge_index, "mean")
        out = ad.matmul(ad.concat_cols(h, neigh), p[name + "weight"])
    elif arch == "sage_gcn":
        total = ad.add(ad.segment_aggregate(h, graph.edge_index, "sum"), h)
        inv = Tensor(1.0 / (graph.degrees + 1.0)[:, None])
        out = ad.matmul(ad.hadamard(total, inv), p[name + "weight"])
    else:
        pooled = ad.relu(ad.add(ad.matmul(h, p[name + "pool_weight"]), p[name + "pool_bias"]))
        neigh = ad.segment_aggregate(pooled, graph.edge_index, "max")
        out = ad.matmul(ad.concat_cols(h, neigh), p[name + "weight"])
    return ad.add(out, p[name + "bias"])


def forward(model: StudentModel, graph: Graph) -> tuple[list[Tensor], Tensor]:
    """Run the model; returns (per-layer embeddings, logits).

    Hidden-layer embeddings are post-activation.  The output layer has no
    activation, so the last embedding is the logits tensor itself.
    """
    cfg = model.config
    if graph.num_features != cfg.input_dim:
        raise ValueError(f"graph has {graph.num_features} features, model expects {cfg.input_dim}")
    model.attention = []
    h = Tensor(graph.features)
    embeddings = []
    for layer in range(cfg.num_layers):
        last = layer == cfg.num_layers - 1
        h = _layer(model, layer, h, graph, last)
        if not last:
            h = _activate(h, cfg.activation)
        embeddings.append(h)
    model.embeddings = embeddings
    return embeddings, h


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: StudentModel, path) -> Path:
    """JSON checkpoint: format tag, config dict and named parameter arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "parameters": {k: v.values.tolist() for k, v in model.parameters.items()},
    }
    path.write_text(json.dumps(doc) + "\n")
    return path


def load_checkpoint(path, *, trainable: bool = False) -> StudentModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    config = ModelConfig.from_dict(doc["config"])
    expected = {name: shape for name, shape, _ in _param_shapes(config)}
    params = {}
    for name, shape in expected.items():
        if name not in doc["parameters"]:
            raise ValueError(f"{path}: missing parameter {name!r}")
        values = np.asarray(doc["parameters"][name], dtype=np.float64)
        if values.shape != shape:
            raise ValueError(f"{path}: parameter {name!r} has shape {values.shape}, config implies {shape}")
        params[name] = Tensor(values, requires_grad=trainable)
    return StudentModel(config, params)
