"""Per-image tile graphs: kNN construction, GAT classifier, graph augmentation.

Nodes are tiles (features = CNN embeddings, coords = tile centroids); edges
connect each tile to its k nearest centroids, symmetrized. Attention in the
GAT includes an implicit self-loop per node, so nodes never lose their own
features even if augmentation isolates them.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cnn import kaiming_std
from .errors import ConfigError, FormatError, ShapeError

GRAPH_VERSION = 1

MASK_TRAIN, MASK_VAL, MASK_TEST = 0, 1, 2


@dataclass
class TileGraph:
    """One image's tile graph; arrays are aligned on the node axis."""

    features: np.ndarray  # (N, F) float32
    edges: np.ndarray  # (E, 2) int64, each row (i, j) with i < j
    coords: np.ndarray  # (N, 2) float64 tile centroids
    labels: np.ndarray  # (N,) int64 class ids
    weights: np.ndarray  # (N,) float64 per-node loss weights
    mask: np.ndarray  # (N,) int8 split membership

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        n = self.n_nodes
        for name in ("coords", "labels", "weights", "mask"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ShapeError(f"{name} has {arr.shape[0]} rows for {n} nodes")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ShapeError(f"coords must be (N, 2), got {self.coords.shape}")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ShapeError("edge endpoint out of range")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ShapeError("edges must be stored as (i, j) with i < j")

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg


def build_knn_graph(coords: np.ndarray, k: int = 2) -> np.ndarray:
    """Undirected kNN edges over centroids: (E, 2) rows with i < j.

    Each node selects its k nearest neighbors by Euclidean distance (ties
    broken toward the lower node id); an edge is kept if either endpoint
    selected the other, so every degree is at least k.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n <= k:
        raise ConfigError(f"kNN graph needs more than k={k} nodes, got {n}")
    if not np.all(np.isfinite(coords)):
        raise ConfigError("coords must be finite")
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    ids = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((ids, dist), axis=1)  # distance first, then lower id
    neighbors = order[:, :k]
    src = np.repeat(np.arange(n), k)
    dst = neighbors.ravel()
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    pairs = np.unique(pairs, axis=0)
    return pairs.astype(np.int64)


# ---------------------------------------------------------------------------
# GAT model


@dataclass(frozen=True)
class GatConfig:
    input_dim: int = 48
    hidden_channels: int = 64
    num_layers: int = 3
    heads: int = 3
    num_classes: int = 3
    dropout: float = 0.3
    attn_slope: float = 0.2

    def __post_init__(self):
        if self.num_layers < 2:
            raise ConfigError("GAT needs at least an input and an output layer")

    def layer_dims(self) -> list:
        """(in, out, concat?) per layer; hidden layers concat heads."""
        dims = []
        in_dim = self.input_dim
        for _ in range(self.num_layers - 1):
            dims.append((in_dim, self.hidden_channels, True))
            in_dim = self.hidden_channels * self.heads
        dims.append((in_dim, self.num_classes, False))
        return dims


class GatModel:
    """Multi-head graph attention stack over a TileGraph."""

    def __init__(self, cfg: GatConfig = GatConfig(), seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for i, (in_dim, out_dim, concat) in enumerate(cfg.layer_dims(), start=1):
            std = kaiming_std(in_dim, cfg.attn_slope)
            self.params[f"gat.layer{i}.weight"] = Tensor(
                rng.normal(0.0, std, size=(in_dim, cfg.heads * out_dim)).astype(np.float32),
                requires_grad=True,
            )
            att_std = kaiming_std(out_dim, cfg.attn_slope)
            for side in ("src", "dst"):
                self.params[f"gat.layer{i}.att_{side}"] = Tensor(
                    rng.normal(0.0, att_std, size=(cfg.heads, out_dim)).astype(np.float32),
                    requires_grad=True,
                )
            bias_dim = cfg.heads * out_dim if concat else out_dim
            self.params[f"gat.layer{i}.bias"] = Tensor(
                np.zeros(bias_dim, dtype=np.float32), requires_grad=True
            )

    def _attention_layer(self, h: Tensor, src: np.ndarray, dst: np.ndarray, n: int,
                         layer: int, out_dim: int, concat: bool, collect=None) -> Tensor:
        cfg = self.cfg
        hw = ad.matmul(h, self.params[f"gat.layer{layer}.weight"])  # (N, heads*out)
        att_src = self.params[f"gat.layer{layer}.att_src"]
        att_dst = self.params[f"gat.layer{layer}.att_dst"]
        head_outputs = []
        for head in range(cfg.heads):
            hh = ad.slice_axis(hw, 1, head * out_dim, (head + 1) * out_dim)  # (N, out)
            a_src = ad.reshape(ad.slice_axis(att_src, 0, head, head + 1), (out_dim, 1))
            a_dst = ad.reshape(ad.slice_axis(att_dst, 0, head, head + 1), (out_dim, 1))
            s_src = ad.reshape(ad.matmul(hh, a_src), (n,))
            s_dst = ad.reshape(ad.matmul(hh, a_dst), (n,))
            scores = ad.add(ad.gather_rows(s_src, src), ad.gather_rows(s_dst, dst))
            scores = ad.leaky_relu(scores, cfg.attn_slope)
            alpha = ad.segment_softmax(scores, dst, n)
            if collect is not None:
                collect.append(alpha.values.copy())
            messages = ad.mul(ad.reshape(alpha, (-1, 1)), ad.gather_rows(hh, src))
            head_outputs.append(ad.segment_sum(messages, dst, n))
        if concat:
            out = ad.concat(head_outputs, axis=1)
        else:
            out = head_outputs[0]
            for extra in head_outputs[1:]:
                out = ad.add(out, extra)
            out = ad.mul(out, 1.0 / cfg.heads)
        return ad.add(out, self.params[f"gat.layer{layer}.bias"])

    def forward(self, features, edges: np.ndarray, train: bool = False,
                dropout_seed: int = 0, return_attention: bool = False):
        """Node logits (N, C) from features (N, F) and undirected edges.

        ``features`` may be a Tensor (joint training) or a plain array.
        With ``return_attention``, also returns a list of per-layer dicts
        ``{"src", "dst", "alpha": (heads, M)}`` covering both edge
        directions plus the implicit self-loops.
        """
        cfg = self.cfg
        h = features if isinstance(features, Tensor) else Tensor(
            np.asarray(features, dtype=np.float32)
        )
        if h.values.ndim != 2 or h.shape[1] != cfg.input_dim:
            raise ShapeError(f"expected features (N, {cfg.input_dim}), got {h.shape}")
        n = h.shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        loops = np.arange(n, dtype=np.int64)
        src = np.concatenate([edges[:, 0], edges[:, 1], loops])
        dst = np.concatenate([edges[:, 1], edges[:, 0], loops])

        attention = []
        dims = cfg.layer_dims()
        for i, (in_dim, out_dim, concat) in enumerate(dims, start=1):
            if i == len(dims):
                h = ad.dropout(h, cfg.dropout, train=train, seed=dropout_seed)
            collect = [] if return_attention else None
            h = self._attention_layer(h, src, dst, n, i, out_dim, concat, collect)
            if concat:
                h = ad.relu(h)
            if return_attention:
                attention.append({"src": src, "dst": dst, "alpha": np.stack(collect)})
        if return_attention:
            return h, attention
        return h

    def forward_graph(self, graph: TileGraph, **kwargs):
        return self.forward(graph.features, graph.edges, **kwargs)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict:
        return {name: p.values for name, p in self.params.items()}

    def load_state(self, tensors: dict):
        for name, p in self.params.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.values.shape:
                raise ConfigError(
                    f"checkpoint shape {tensors[name].shape} does not match "
                    f"{name!r} {p.values.shape}"
                )
            p.values = tensors[name].astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class GraphAugmentConfig:
    jitter_fraction: float = 0.5  # of the tiling grid step, per axis
    max_drop_fraction: float = 0.3
    k: int = 2
    enabled: bool = True


def augment_graph(graph: TileGraph, seed: int, grid_step: float,
                  cfg: GraphAugmentConfig = GraphAugmentConfig()) -> TileGraph:
    """Jitter centroids (rebuilding kNN edges) and drop a random node subset.

    Jitter is uniform in ±jitter_fraction*grid_step per axis. The drop
    fraction is uniform in [0, max_drop_fraction]; dropping is skipped when
    fewer than k+1 nodes would remain. Labels, weights and masks follow
    their nodes.
    """
    if not cfg.enabled:
        return graph
    rng = np.random.default_rng(seed)
    n = graph.n_nodes
    half = cfg.jitter_fraction * grid_step
    coords = graph.coords + rng.uniform(-half, half, size=(n, 2))
    edges = build_knn_graph(coords, k=cfg.k)

    fraction = rng.uniform(0.0, cfg.max_drop_fraction)
    n_drop = int(round(fraction * n))
    if n_drop and n - n_drop >= cfg.k + 1:
        dropped = rng.choice(n, size=n_drop, replace=False)
        keep = np.setdiff1d(np.arange(n), dropped)
        remap = np.full(n, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        alive = np.all(np.isin(edges, keep), axis=1)
        edges = remap[edges[alive]]
        return TileGraph(
            features=graph.features[keep],
            edges=edges,
            coords=coords[keep],
            labels=graph.labels[keep],
            weights=graph.weights[keep],
            mask=graph.mask[keep],
        )
    return replace(graph, coords=coords, edges=edges)


# ---------------------------------------------------------------------------
# serialization


def save_graph(path, graph: TileGraph) -> None:
    """Write ``<path>.json`` (nodes + edges) and ``<path>.bin`` (features)."""
    path = Path(path)
    nodes = [
        {
            "id": i,
            "coords": [float(graph.coords[i, 0]), float(graph.coords[i, 1])],
            "label": int(graph.labels[i]),
            "weight": float(graph.weights[i]),
            "mask": int(graph.mask[i]),
        }
        for i in range(graph.n_nodes)
    ]
    doc = {
        "version": GRAPH_VERSION,
        "n_nodes": graph.n_nodes,
        "feature_dim": int(graph.features.shape[1]),
        "nodes": nodes,
        "edges": graph.edges.tolist(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True))
    path.with_suffix(".bin").write_bytes(
        np.ascontiguousarray(graph.features, dtype="<f4").tobytes()
    )


def load_graph(path) -> TileGraph:
    path = Path(path)
    try:
        doc = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise FormatError(f"graph file not found: {path.with_suffix('.json')}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"graph JSON is invalid: {exc}") from exc
    if doc.get("version") != GRAPH_VERSION:
        raise FormatError(f"unsupported graph version {doc.get('version')!r}")
    n, dim = doc["n_nodes"], doc["feature_dim"]
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != 4 * n * dim:
        raise FormatError(
            f"feature blob is {len(blob)} bytes, expected {4 * n * dim}"
        )
    features = np.frombuffer(blob, dtype="<f4").reshape(n, dim).astype(np.float32)
    nodes = sorted(doc["nodes"], key=lambda d: d["id"])
    return TileGraph(
        features=features,
        edges=np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2),
        coords=np.asarray([d["coords"] for d in nodes], dtype=np.float64),
        labels=np.asarray([d["label"] for d in nodes], dtype=np.int64),
        weights=np.asarray([d["weight"] for d in nodes], dtype=np.float64),
        mask=np.asarray([d["mask"] for d in nodes], dtype=np.int8),
    )
