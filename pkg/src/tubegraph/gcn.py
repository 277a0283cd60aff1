"""Three-layer graph convolution, mean readout and the snippet classifier."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from .tensor import Tensor, as_tensor, concat, linear, matmul, parameter, relu, softmax


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with D the degree matrix of ``A + I``."""
    a = np.asarray(adj, dtype=np.float64) + np.eye(len(adj))
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_layer_forward(h: Tensor, a_hat, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    return relu(linear(matmul(as_tensor(a_hat), h), w, b))


def readout_matrix(sizes: Sequence[int]) -> np.ndarray:
    """Row g averages the nodes of graph g in a stacked batch."""
    out = np.zeros((len(sizes), int(sum(sizes))))
    start = 0
    for g, n in enumerate(sizes):
        out[g, start:start + n] = 1.0 / n
        start += n
    return out


def graph_readout(layer_outputs: Sequence[Tensor], mode: str = "final",
                  sizes: Optional[Sequence[int]] = None) -> Tensor:
    """Mean over nodes of the last layer (``final``) or of every layer, concatenated.

    With ``sizes`` the node rows belong to several stacked graphs and one
    row per graph is returned; otherwise a single vector.
    """
    single = sizes is None
    n = layer_outputs[-1].shape[0]
    pool = Tensor(readout_matrix([n] if single else sizes))
    if mode == "final":
        out = matmul(pool, layer_outputs[-1])
    elif mode == "concat":
        out = concat([matmul(pool, h) for h in layer_outputs], axis=1)
    else:
        raise ValueError(f"readout must be 'final' or 'concat', got {mode!r}")
    return out.reshape(out.shape[1]) if single else out


def classify_snippet(x_g: Tensor, w_cls: Tensor, b_cls: Optional[Tensor] = None):
    """Softmax probabilities and argmax label (lowest index on ties)."""
    x = as_tensor(x_g)
    logits = linear(x.reshape(1, -1), w_cls, b_cls).data[0]
    probs = softmax(logits)
    return probs, int(np.argmax(probs))


class GCN:
    """Parameters and batched forward pass of the graph network + classifier."""

    def __init__(self, d_node: int, d_h: int, d_out: int, n_classes: int,
                 readout: str = "final", rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.readout = readout
        dims = [d_node, d_h, d_h, d_out]
        self.weights = [parameter(_glorot(rng, dims[i], dims[i + 1])) for i in range(3)]
        self.biases = [parameter(np.zeros(dims[i + 1])) for i in range(3)]
        d_read = d_out if readout == "final" else 2 * d_h + d_out
        self.w_cls = parameter(_glorot(rng, d_read, n_classes))
        self.b_cls = parameter(np.zeros(n_classes))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out += [(f"gcn.w{i}", w), (f"gcn.b{i}", b)]
        return out + [("cls.w", self.w_cls), ("cls.b", self.b_cls)]

    def embed(self, h: Tensor, adjacencies: Sequence[np.ndarray]) -> Tensor:
        """Stacked node features of several graphs -> one readout row per graph."""
        a_hat = block_diag(*[normalize_adjacency(a) for a in adjacencies])
        layers = []
        for w, b in zip(self.weights, self.biases):
            h = gcn_layer_forward(h, a_hat, w, b)
            layers.append(h)
        return graph_readout(layers, self.readout, [len(a) for a in adjacencies])

    def logits(self, x_g: Tensor) -> Tensor:
        return linear(x_g, self.w_cls, self.b_cls)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
