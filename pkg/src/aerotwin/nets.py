"""Self-contained sequence/graph learning kernels in double precision.

Provides an LSTM stack with a linear readout, optionally preceded by graph
convolution layers over the room grid, together with exact analytic gradients
(backprop through time).  Gate packing along the 4H axis is [input, forget,
candidate, output]; hidden and cell states start at zero.  GCN layers compute
relu(A_hat @ H @ W + b) with A_hat the symmetrically normalized adjacency
with self-loops.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .domain import GridLayout

__all__ = [
    "ModelWeights",
    "NetConfig",
    "NetError",
    "backward",
    "forward",
    "gcn_forward",
    "init_weights",
    "load_weights",
    "loss_and_grads",
    "lstm_forward",
    "normalized_adjacency",
    "save_weights",
    "sgd_step",
]


class NetError(ValueError):
    """Shape mismatch or non-finite values in a network computation."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture sizes.  ``gcn_sizes`` empty selects the flat path
    (inputs [B, T, input_size]); otherwise inputs are per-node features
    [B, T, n_nodes, input_size], the GCN layers embed them, and the
    flattened node embeddings feed the LSTM."""

    input_size: int
    hidden_size: int = 32
    num_layers: int = 1
    n_outputs: int = 9
    gcn_sizes: tuple[int, ...] = ()
    n_nodes: int = 0

    def __post_init__(self) -> None:
        if self.input_size < 1 or self.hidden_size < 1 or self.num_layers < 1 or self.n_outputs < 1:
            raise NetError("sizes must be positive")
        if self.gcn_sizes and self.n_nodes < 1:
            raise NetError("graph path requires n_nodes")

    @property
    def lstm_input_size(self) -> int:
        if self.gcn_sizes:
            return self.n_nodes * self.gcn_sizes[-1]
        return self.input_size


@dataclass(frozen=True)
class ModelWeights:
    """Named parameter tensors plus the architecture they belong to."""

    config: NetConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def allclose(self, other: "ModelWeights", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.allclose(self.tensors[k], other.tensors[k], rtol=rtol, atol=atol) for k in self.tensors
        )


def _tensor_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter tensor, in creation order."""
    shapes: list[tuple[str, tuple[int, ...], int]] = []
    fan = config.input_size
    for k, width in enumerate(config.gcn_sizes):
        shapes.append((f"gcn{k}.w", (fan, width), fan))
        shapes.append((f"gcn{k}.b", (width,), fan))
        fan = width
    d = config.lstm_input_size
    h = config.hidden_size
    for layer in range(config.num_layers):
        shapes.append((f"lstm{layer}.wx", (d, 4 * h), d))
        shapes.append((f"lstm{layer}.wh", (h, 4 * h), h))
        shapes.append((f"lstm{layer}.b", (4 * h,), h))
        d = h
    shapes.append(("head.w", (h, config.n_outputs), h))
    shapes.append(("head.b", (config.n_outputs,), h))
    return shapes


def init_weights(config: NetConfig, seed: int = 0) -> ModelWeights:
    """Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _tensor_shapes(config):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(config=config, tensors=tensors)


def zero_weights(config: NetConfig) -> ModelWeights:
    tensors = {name: np.zeros(shape) for name, shape, _ in _tensor_shapes(config)}
    return ModelWeights(config=config, tensors=tensors)


def sgd_step(weights: ModelWeights, grads: dict[str, np.ndarray], lr: float) -> ModelWeights:
    """Plain gradient step, w <- w - lr * g, elementwise on every tensor."""
    tensors = {name: value - lr * grads[name] for name, value in weights.tensors.items()}
    return ModelWeights(config=weights.config, tensors=tensors)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe: exponent argument is always <= 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@lru_cache(maxsize=8)
def normalized_adjacency(grid: GridLayout) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} over the grid's 4-neighbor adjacency."""
    n = grid.n_cells
    a = np.eye(n)
    for i, j in grid.adjacency:
        a[i, j] = 1.0
        a[j, i] = 1.0
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def _gcn_stack_forward(weights: ModelWeights, node_inputs: np.ndarray, adj: np.ndarray):
    """All GCN layers over [..., n_nodes, features] inputs."""
    cfg = weights.config
    h = node_inputs
    cache = []
    for k in range(len(cfg.gcn_sizes)):
        mixed = _mix_nodes(adj, h)
        z = mixed @ weights.tensors[f"gcn{k}.w"] + weights.tensors[f"gcn{k}.b"]
        out = np.maximum(z, 0.0)
        cache.append((mixed, z))
        h = out
    return h, cache


def _mix_nodes(adj: np.ndarray, h: np.ndarray) -> np.ndarray:
    """adj @ h along the node axis of [..., n, f] (broadcast batched matmul)."""
    return np.matmul(adj, h)


def _gcn_stack_backward(weights: ModelWeights, cache, d_out: np.ndarray, adj: np.ndarray, grads):
    cfg = weights.config
    d_h = d_out
    for k in reversed(range(len(cfg.gcn_sizes))):
        mixed, z = cache[k]
        d_z = d_h * (z > 0)
        grads[f"gcn{k}.w"] = mixed.reshape(-1, mixed.shape[-1]).T @ d_z.reshape(-1, d_z.shape[-1])
        grads[f"gcn{k}.b"] = d_z.reshape(-1, d_z.shape[-1]).sum(axis=0)
        d_mixed = d_z @ weights.tensors[f"gcn{k}.w"].T
        d_h = _mix_nodes(adj, d_mixed)  # adj is symmetric
    return d_h


def gcn_forward(weights: ModelWeights, node_features, grid: GridLayout) -> np.ndarray:
    """Per-cell embeddings after the full GCN stack; ``node_features`` is
    [..., n_cells, input_size]."""
    cfg = weights.config
    if not cfg.gcn_sizes:
        raise NetError("weights have no GCN layers")
    x = np.asarray(node_features, dtype=float)
    if x.shape[-2] != cfg.n_nodes or x.shape[-1] != cfg.input_size:
        raise NetError(f"node features {x.shape} do not match ({cfg.n_nodes}, {cfg.input_size})")
    out, _ = _gcn_stack_forward(weights, x, normalized_adjacency(grid))
    return out


def _lstm_stack_forward(weights: ModelWeights, xs: np.ndarray):
    """LSTM layers over [B, T, D] inputs; returns top hidden states and cache.

    The cached ``gates`` array holds post-activation values packed [i, f, o, g]
    along the last axis (sigmoid on the first 3H columns, tanh on the rest).
    """
    cfg = weights.config
    hdim = cfg.hidden_size
    b, t = xs.shape[0], xs.shape[1]
    layer_caches = []
    inputs = xs
    for layer in range(cfg.num_layers):
        wx = weights.tensors[f"lstm{layer}.wx"]
        wh = weights.tensors[f"lstm{layer}.wh"]
        pre_x = inputs @ wx + weights.tensors[f"lstm{layer}.b"]  # [B, T, 4H]
        gates = np.empty((b, t, 4 * hdim))
        cells = np.empty((b, t, hdim))
        tanh_c = np.empty((b, t, hdim))
        hidden = np.empty((b, t, hdim))
        h = np.zeros((b, hdim))
        c_prev = np.zeros((b, hdim))
        with np.errstate(over="ignore"):  # saturated sigmoids are exact 0/1
            for step in range(t):
                a = gates[:, step]
                np.matmul(h, wh, out=a)
                a += pre_x[:, step]
                sig = a[:, : 3 * hdim]
                np.negative(sig, out=sig)
                np.exp(sig, out=sig)
                sig += 1.0
                np.reciprocal(sig, out=sig)
                np.tanh(a[:, 3 * hdim :], out=a[:, 3 * hdim :])
                c = cells[:, step]
                np.multiply(a[:, hdim : 2 * hdim], c_prev, out=c)
                c += a[:, :hdim] * a[:, 3 * hdim :]
                tc = np.tanh(c, out=tanh_c[:, step])
                np.multiply(a[:, 2 * hdim : 3 * hdim], tc, out=hidden[:, step])
                h = hidden[:, step]
                c_prev = c
        layer_caches.append({"inputs": inputs, "gates": gates, "c": cells, "tc": tanh_c, "h": hidden})
        inputs = hidden
    return inputs, layer_caches


def _lstm_stack_backward(weights: ModelWeights, layer_caches, d_top: np.ndarray, grads):
    cfg = weights.config
    hdim = cfg.hidden_size
    d_hidden = d_top
    for layer in reversed(range(cfg.num_layers)):
        cache = layer_caches[layer]
        inputs = cache["inputs"]
        gates = cache["gates"]
        b, t = inputs.shape[0], inputs.shape[1]
        wx = weights.tensors[f"lstm{layer}.wx"]
        wh = weights.tensors[f"lstm{layer}.wh"]
        wh_t = wh.T.copy()
        d_a = np.empty((b, t, 4 * hdim))
        dh_next = np.zeros((b, hdim))
        dc_next = np.zeros((b, hdim))
        zeros = np.zeros((b, hdim))
        for step in reversed(range(t)):
            a = gates[:, step]
            gi = a[:, :hdim]
            gf = a[:, hdim : 2 * hdim]
            go = a[:, 2 * hdim : 3 * hdim]
            gg = a[:, 3 * hdim :]
            tc = cache["tc"][:, step]
            c_prev = cache["c"][:, step - 1] if step > 0 else zeros
            dh = d_hidden[:, step] + dh_next
            dc = dc_next + dh * go * (1.0 - tc * tc)
            slab = d_a[:, step]
            np.multiply(dc * gg, gi * (1.0 - gi), out=slab[:, :hdim])
            np.multiply(dc * c_prev, gf * (1.0 - gf), out=slab[:, hdim : 2 * hdim])
            np.multiply(dh * tc, go * (1.0 - go), out=slab[:, 2 * hdim : 3 * hdim])
            np.multiply(dc * gi, 1.0 - gg * gg, out=slab[:, 3 * hdim :])
            dc_next = dc * gf
            dh_next = slab @ wh_t
        h_prev = np.concatenate([np.zeros((b, 1, hdim)), cache["h"][:, :-1]], axis=1)
        d_a_flat = d_a.reshape(-1, 4 * hdim)
        grads[f"lstm{layer}.wx"] = inputs.reshape(-1, inputs.shape[-1]).T @ d_a_flat
        grads[f"lstm{layer}.wh"] = h_prev.reshape(-1, hdim).T @ d_a_flat
        grads[f"lstm{layer}.b"] = d_a_flat.sum(axis=0)
        d_hidden = d_a @ wx.T
    return d_hidden


def forward(weights: ModelWeights, inputs, adj: np.ndarray | None = None):
    """Full forward pass.

    Flat path: ``inputs`` [B, T, D] (or [T, D]).  Graph path: ``inputs``
    [B, T, n_nodes, F] (or [T, n_nodes, F]) with ``adj`` the normalized
    adjacency.  Returns (predictions [B, T, n_outputs], cache).
    """
    cfg = weights.config
    x = np.asarray(inputs, dtype=float)
    expect = 4 if cfg.gcn_sizes else 3
    squeezed = False
    if x.ndim == expect - 1:
        x = x[None]
        squeezed = True
    if x.ndim != expect:
        raise NetError(f"inputs have {x.ndim} dims, expected {expect}")
    cache: dict = {"squeezed": squeezed}
    if cfg.gcn_sizes:
        if adj is None:
            raise NetError("graph path requires the normalized adjacency")
        if x.shape[-2] != cfg.n_nodes or x.shape[-1] != cfg.input_size:
            raise NetError(f"node features {x.shape} do not match ({cfg.n_nodes}, {cfg.input_size})")
        embedded, gcn_cache = _gcn_stack_forward(weights, x, adj)
        cache["gcn"] = gcn_cache
        cache["adj"] = adj
        lstm_in = embedded.reshape(x.shape[0], x.shape[1], -1)
    else:
        if x.shape[-1] != cfg.input_size:
            raise NetError(f"inputs have {x.shape[-1]} features, expected {cfg.input_size}")
        lstm_in = x
    top, lstm_cache = _lstm_stack_forward(weights, lstm_in)
    cache["lstm"] = lstm_cache
    ys = top @ weights.tensors["head.w"] + weights.tensors["head.b"]
    cache["top"] = top
    if not np.isfinite(ys).all():
        raise NetError("non-finite activations in forward pass")
    return (ys[0] if squeezed else ys), cache


def backward(weights: ModelWeights, cache, d_ys) -> dict[str, np.ndarray]:
    """Gradients of every parameter tensor given d(loss)/d(predictions)."""
    cfg = weights.config
    d_ys = np.asarray(d_ys, dtype=float)
    if cache["squeezed"]:
        d_ys = d_ys[None]
    grads: dict[str, np.ndarray] = {}
    top = cache["top"]
    grads["head.w"] = top.reshape(-1, top.shape[-1]).T @ d_ys.reshape(-1, d_ys.shape[-1])
    grads["head.b"] = d_ys.sum(axis=(0, 1))
    d_top = d_ys @ weights.tensors["head.w"].T
    d_lstm_in = _lstm_stack_backward(weights, cache["lstm"], d_top, grads)
    if cfg.gcn_sizes:
        b, t = d_lstm_in.shape[0], d_lstm_in.shape[1]
        d_embedded = d_lstm_in.reshape(b, t, cfg.n_nodes, cfg.gcn_sizes[-1])
        _gcn_stack_backward(weights, cache["gcn"], d_embedded, cache["adj"], grads)
    return grads


def loss_and_grads(weights: ModelWeights, inputs, targets, adj: np.ndarray | None = None):
    """Mean-squared-error loss over all batch/time/output entries and its
    exact gradients for every parameter tensor."""
    ys, cache = forward(weights, inputs, adj=adj)
    t = np.asarray(targets, dtype=float)
    if t.shape != ys.shape:
        raise NetError(f"targets {t.shape} do not match predictions {ys.shape}")
    diff = ys - t
    loss = float((diff * diff).mean())
    d_ys = (2.0 / diff.size) * diff
    return loss, backward(weights, cache, d_ys)


def lstm_forward(weights: ModelWeights, xs):
    """Flat-path forward returning (hidden states, per-step predictions)."""
    if weights.config.gcn_sizes:
        raise NetError("lstm_forward expects flat-path weights")
    ys, cache = forward(weights, xs)
    top = cache["top"]
    hs = top[0] if cache["squeezed"] else top
    return hs, ys


# ---------------------------------------------------------------------------
# Checkpoints: named tensors plus a JSON dims header, exact round-trip.


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    header = json.dumps(
        {
            "input_size": cfg.input_size,
            "hidden_size": cfg.hidden_size,
            "num_layers": cfg.num_layers,
            "n_outputs": cfg.n_outputs,
            "gcn_sizes": list(cfg.gcn_sizes),
            "n_nodes": cfg.n_nodes,
        }
    )
    np.savez(path, __config__=np.frombuffer(header.encode(), dtype=np.uint8), **weights.tensors)


def load_weights(path) -> ModelWeights:
    with np.load(path) as data:
        header = json.loads(bytes(data["__config__"]).decode())
        tensors = {k: data[k].copy() for k in data.files if k != "__config__"}
    config = NetConfig(
        input_size=header["input_size"],
        hidden_size=header["hidden_size"],
        num_layers=header["num_layers"],
        n_outputs=header["n_outputs"],
        gcn_sizes=tuple(header["gcn_sizes"]),
        n_nodes=header["n_nodes"],
    )
    return ModelWeights(config=config, tensors=tensors)


def weights_to_bytes(weights: ModelWeights) -> bytes:
    buf = io.BytesIO()
    save_weights(weights, buf)
    return buf.getvalue()
