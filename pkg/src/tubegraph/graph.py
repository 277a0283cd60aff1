"""Per-snippet spatiotemporal scene graphs.

Nodes are action tubes.  Three edge sets connect them: appearance order
(a directed chain), k-nearest neighbours in feature space under cosine
distance, and cliques of tubes sharing an action label.  The merged graph is
their undirected union without self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import ActionTube
from .tensor import Tensor, linear, reshape

# reserved label of the whole-frame placeholder node; never forms label edges
BACKGROUND_NODE_LABEL = -1

Edge = tuple[int, int]


def canonical_order(tubes: Sequence[ActionTube]) -> list[int]:
    """Indices of ``tubes`` sorted by (first appearance, left edge centre, tube id)."""

    def key(i: int):
        t = tubes[i]
        first = t.appearance_frame - t.start_frame
        first = min(max(first, 0), len(t.boxes) - 1)
        return (t.appearance_frame, t.boxes[first].center[0], t.tube_id, i)

    return sorted(range(len(tubes)), key=key)


def project_node_features(pooled: Tensor, w_proj: Tensor, b_proj: Optional[Tensor] = None) -> Tensor:
    """Flatten pooled tube features (``(C, L, k, k)`` or batched) and project linearly."""
    single = pooled.ndim == 4
    n = 1 if single else pooled.shape[0]
    flat = reshape(pooled, (n, -1))
    out = linear(flat, w_proj, b_proj)
    return reshape(out, (out.shape[1],)) if single else out


def build_order_edges(tubes: Sequence[ActionTube]) -> list[Edge]:
    """Directed chain over tubes in canonical order, as (from, to) index pairs."""
    order = canonical_order(tubes)
    return [(order[i], order[i + 1]) for i in range(len(order) - 1)]


def build_similarity_edges(features: np.ndarray, kappa: int = 2) -> list[Edge]:
    """Undirected union of each node's ``kappa`` nearest neighbours (cosine distance)."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n <= 1:
        return []
    norms = np.linalg.norm(x, axis=1)
    ok = norms > 0
    unit = np.zeros_like(x)
    unit[ok] = x[ok] / norms[ok, None]
    dist = 1.0 - unit @ unit.T
    dist[~ok, :] = 1.0
    dist[:, ~ok] = 1.0
    np.fill_diagonal(dist, np.inf)
    edges = set()
    for i in range(n):
        # stable sort keeps lower ids first among equal distances
        for j in np.argsort(dist[i], kind="stable")[:min(kappa, n - 1)]:
            edges.add((min(i, int(j)), max(i, int(j))))
    return sorted(edges)


def build_label_edges(tubes: Sequence[ActionTube]) -> list[Edge]:
    labels = [t.action_label for t in tubes]
    return [(i, j) for i in range(len(labels)) for j in range(i + 1, len(labels))
            if labels[i] == labels[j] and labels[i] != BACKGROUND_NODE_LABEL]


def merge_graphs(n_nodes: int, order: Sequence[Edge], similarity: Sequence[Edge],
                 label: Sequence[Edge]) -> np.ndarray:
    adj = np.zeros((n_nodes, n_nodes))
    for i, j in [*order, *similarity, *label]:
        if i != j:
            adj[i, j] = adj[j, i] = 1.0
    return adj


@dataclass
class SceneGraph:
    tube_ids: list[int]
    labels: list[int]
    features: Tensor
    order_edges: list[Edge] = field(default_factory=list)
    similarity_edges: list[Edge] = field(default_factory=list)
    label_edges: list[Edge] = field(default_factory=list)
    adjacency: Optional[np.ndarray] = None

    @property
    def n_nodes(self) -> int:
        return len(self.tube_ids)

    def to_dict(self) -> dict:
        return {
            "tube_ids": list(self.tube_ids),
            "labels": list(self.labels),
            "order_edges": [list(e) for e in self.order_edges],
            "similarity_edges": [list(e) for e in self.similarity_edges],
            "label_edges": [list(e) for e in self.label_edges],
            "adjacency": self.adjacency.astype(int).tolist(),
        }


def build_scene_graph(tubes: Sequence[ActionTube], features: Tensor, kappa: int = 2) -> SceneGraph:
    """Assemble the merged graph; ``tubes`` must already be in canonical order.

    ``features`` is ``(K, d)``; similarity edges use its current values but
    the graph structure itself carries no gradient.
    """
    if not tubes:
        raise ValueError("a scene graph needs at least one node")
    order = build_order_edges(tubes)
    sim = build_similarity_edges(features.data, kappa)
    lab = build_label_edges(tubes)
    adj = merge_graphs(len(tubes), order, sim, lab)
    return SceneGraph([t.tube_id for t in tubes], [t.action_label for t in tubes], features,
                      order, sim, lab, adj)
