"""Deformable attention graph over a bag of patches.

Pipeline for one bag of N patches with D-dimensional features:

1. head/tail projections ``H = X W_h + b_h``, ``T = X W_t + b_t``;
2. an offset MLP maps each head row to K 2-d offsets in (-1, 1), scaled to
   pixels by ``stride * sqrt(N) * sigmoid(alpha)``;
3. queries ``coord_i + offset_ik`` snap to the nearest real patch, whose
   tail row becomes neighbour ``n_ik``;
4. edge weights ``softmax_k cos(H_i W_e, n_ik)``, gates
   ``u_ik = tanh(h_i + a_ik n_ik)`` and a second softmax over
   ``<u_ik, n_ik> / sqrt(D)`` combine the neighbours into ``e_i``;
5. ``H'_i = lrelu(W_1 (h_i + e_i)) + lrelu(W_2 (h_i * e_i))``, pooled by the
   readout and classified by one linear layer.

Snapping to the nearest patch is a hard selection; no gradient flows from
the loss back to the offsets through it.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nncore as nn
from .exceptions import ConfigError, DimensionError, StateError
from .spatial import PointIndex

READOUTS = ("mean", "max", "attention")


@dataclass
class DagConfig:
    dim: int = 64
    n_classes: int = 3
    k: int = 8
    stride: float = 256.0
    readout: str = "mean"
    hidden: int | None = None
    offset_on: bool = True
    weight_on: bool = True
    coords_on: bool = True
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = max(8, self.dim // 4)

    def validate(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be at least 2, got {self.dim}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not self.stride > 0:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be positive, got {self.hidden}")
        return self

    def to_dict(self):
        return asdict(self)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DagModel:
    """All learnable tensors of the network, held in a :class:`ParamStore`."""

    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c = self.config
        d, h, k = c.dim, c.hidden, c.k
        store = nn.ParamStore()

        def dense(name, d_in, d_out, bias=True, trainable=True):
            store.add(f"{name}.weight", _uniform(rng, d_in, (d_in, d_out)), trainable)
            if bias:
                store.add(f"{name}.bias", np.zeros(d_out), trainable)

        dense("head", d, d)
        dense("tail", d, d)
        if c.offset_on:
            # the hard nearest-patch snap cuts every gradient path to these
            dense("offset.hidden", d, h, trainable=False)
            dense("offset.out", h, 2 * k, trainable=False)
            store.add("offset.alpha", np.zeros(1), trainable=False)
        if c.weight_on:
            dense("edge", d, d, bias=False)
        dense("fuse1", d, d)
        dense("fuse2", d, d)
        if c.readout == "attention":
            dense("readout", d, 1, bias=False)
        dense("classifier", d, c.n_classes)
        return store

    def __getitem__(self, name):
        return self.params[name]

    def n_parameters(self):
        return self.params.n_parameters()

    def astype(self, dtype):
        clone = DagModel.__new__(DagModel)
        clone.config = self.config
        clone.seed = self.seed
        clone.params = self.params.astype(dtype)
        return clone

    def forward(self, bag, neighbors=None):
        return forward_bag(bag, self, neighbors=neighbors)


# ---------------------------------------------------------------------------
# containers for intermediate results
# ---------------------------------------------------------------------------


@dataclass
class NeighborSet:
    """K sampled tail nodes per head node.

    ``queries`` is None when the offset module is disabled and neighbours
    come from the static coordinate graph.
    """

    indices: np.ndarray
    queries: np.ndarray | None = None
    tails: nn.Tensor | None = field(default=None, repr=False)

    @property
    def k(self):
        return self.indices.shape[1]


@dataclass
class EdgeAttention:
    alpha: np.ndarray
    beta: np.ndarray
    similarity: np.ndarray | None = None
    gates: np.ndarray | None = None
    aggregate: nn.Tensor | None = field(default=None, repr=False)


@dataclass
class ForwardResult:
    logits: nn.Tensor
    embedding: nn.Tensor
    neighbors: NeighborSet
    attention: EdgeAttention
    node_scores: np.ndarray | None = None

    def probabilities(self):
        z = self.logits.data.reshape(-1).astype(np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def project_head_tail(features, model):
    x = nn.as_tensor(features)
    d = model.config.dim
    if x.ndim != 2 or x.shape[1] != d:
        raise ConfigError(f"features have shape {list(x.shape)}; model expects [N, {d}]")
    p = model.params
    head = nn.linear(x, p["head.weight"], p["head.bias"])
    tail = nn.linear(x, p["tail.weight"], p["tail.bias"])
    return head, tail


def predict_offsets(head, model):
    """Raw offsets in (-1, 1), shape [N, K, 2]."""
    if not model.config.offset_on:
        raise StateError("offset module disabled; use static_neighbors instead")
    p = model.params
    z = nn.leaky_relu(
        nn.linear(head, p["offset.hidden.weight"], p["offset.hidden.bias"]),
        model.config.leaky_slope,
    )
    raw = nn.tanh(nn.linear(z, p["offset.out.weight"], p["offset.out.bias"]))
    return nn.reshape(raw, (head.shape[0], model.config.k, 2))


def offset_scale(stride, n, alpha):
    """The pixel multiplier ``stride * sqrt(n) * sigmoid(alpha)`` as a tensor."""
    return nn.scale(nn.sigmoid(alpha), stride * math.sqrt(n))


def scale_offsets(raw, stride, n, alpha):
    if not stride > 0 or n < 1:
        raise ConfigError(f"need stride > 0 and n >= 1, got stride={stride}, n={n}")
    return nn.mul(raw, offset_scale(stride, n, alpha))


def form_queries(anchors, offsets):
    """``anchor_i + offset_ik`` as a float64 [N, K, 2] array."""
    anchors = np.asarray(anchors, dtype=np.float64)
    off = offsets.data if isinstance(offsets, nn.Tensor) else np.asarray(offsets)
    return anchors[:, None, :] + off.astype(np.float64)


def raster_anchors(n):
    """Row-major positions of ``n`` items on a unit-pitch square grid."""
    side = math.ceil(math.sqrt(n))
    i = np.arange(n)
    return np.stack([i % side, i // side], axis=1).astype(np.float64)


def anchors_for(bag, config):
    return bag.coords.astype(np.float64) if config.coords_on else raster_anchors(bag.n_patches)


def index_for(bag, config):
    """kd-tree over the bag's anchor positions, cached on the bag."""
    key = ("index", config.coords_on)
    idx = bag._cache.get(key)
    if idx is None:
        idx = PointIndex(anchors_for(bag, config))
        bag._cache[key] = idx
    return idx


def sample_neighbors(queries, index, tail):
    """Snap every query to its nearest patch and gather those tail rows."""
    n, k, _ = queries.shape
    indices = index.query(queries.reshape(-1, 2)).reshape(n, k)
    tails = nn.take_rows(tail, indices) if tail is not None else None
    return NeighborSet(indices=indices, queries=queries, tails=tails)


def static_neighbors(anchors, k):
    """K nearest distinct patches by anchor distance; self excluded when N > K.

    With N <= K every patch (self included, nearest first) is used and the
    list is cycled to length K.
    """
    pts = np.asarray(anchors, dtype=np.float64)
    n = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = (diff * diff).sum(axis=2)
    cols = np.broadcast_to(np.arange(n), (n, n))
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((cols[i], dist[i]))
        if n > k:
            order = order[order != i][:k]
        else:
            order = np.concatenate([[i], order[order != i]])
            order = np.resize(order, k)
        out[i] = order
    return out


def edge_attention(head, tails, model):
    """Cosine similarities of ``H W_e`` with each neighbour, softmaxed over K."""
    expanded = nn.linear(head, model.params["edge.weight"])
    sim = nn.cosine_similarity(expanded, tails)
    return sim, nn.softmax_rows(sim)


def gated_aggregate(head, tails, alpha):
    """Gate neighbours and combine them with a second softmax over K.

    Returns ``(e, gates, beta)``; ``alpha`` is the [N, K] edge weight tensor.
    """
    n, k, d = tails.shape
    h = nn.reshape(head, (n, 1, d))
    a = nn.reshape(nn.as_tensor(alpha), (n, k, 1))
    gates = nn.tanh(nn.add(h, nn.mul(a, tails)))
    score = nn.scale(nn.sum_axis(nn.mul(gates, tails), axis=2), 1.0 / math.sqrt(d))
    beta = nn.softmax_rows(score)
    e = nn.sum_axis(nn.mul(nn.reshape(beta, (n, k, 1)), tails), axis=1)
    return e, gates, beta


def residual_fuse(head, e, model):
    if head.shape != e.shape:
        raise DimensionError(f"residual_fuse: head{list(head.shape)} vs e{list(e.shape)}")
    p = model.params
    slope = model.config.leaky_slope
    additive = nn.leaky_relu(nn.linear(nn.add(head, e), p["fuse1.weight"], p["fuse1.bias"]), slope)
    product = nn.leaky_relu(nn.linear(nn.mul(head, e), p["fuse2.weight"], p["fuse2.bias"]), slope)
    return nn.add(additive, product)


def readout(nodes, kind, model=None):
    """Pool [N, D] node states to [1, D]; attention also returns node weights."""
    n, d = nodes.shape
    if kind == "mean":
        return nn.reshape(nn.mean_axis(nodes, 0), (1, d)), None
    if kind == "max":
        return nn.reshape(nn.max_axis(nodes, 0), (1, d)), None
    if kind == "attention":
        if model is None:
            raise ConfigError("attention readout needs the model's readout vector")
        scores = nn.reshape(nn.linear(nodes, model.params["readout.weight"]), (1, n))
        weights = nn.softmax_rows(scores)
        return nn.linear(weights, nodes), weights.data.reshape(-1)
    raise ConfigError(f"unknown readout {kind!r}; expected one of {READOUTS}")


def _uniform_weights(n, k, dtype):
    return np.full((n, k), 1.0 / k, dtype=dtype)


def forward_bag(bag, model, neighbors=None):
    """Run the full network on one bag.

    ``neighbors`` may carry a precomputed ``[N, K]`` index array (or a
    :class:`NeighborSet`) to reuse a neighbour selection; the offset branch
    is still evaluated so its parameters stay in the graph.
    """
    cfg = model.config
    feats = nn.Tensor(bag.features)
    if bag.dim != cfg.dim:
        raise ConfigError(f"bag {bag.id!r} has D={bag.dim}; model expects {cfg.dim}")
    n = bag.n_patches
    head, tail = project_head_tail(feats, model)

    fixed = neighbors.indices if isinstance(neighbors, NeighborSet) else neighbors
    queries = None
    if cfg.offset_on:
        raw = predict_offsets(head, model)
        offsets = scale_offsets(raw, cfg.stride, n, model.params["offset.alpha"])
        queries = form_queries(anchors_for(bag, cfg), offsets)
        if fixed is None:
            fixed = index_for(bag, cfg).query(queries.reshape(-1, 2)).reshape(n, cfg.k)
    elif fixed is None:
        key = ("static", cfg.k, cfg.coords_on)
        fixed = bag._cache.get(key)
        if fixed is None:
            fixed = static_neighbors(anchors_for(bag, cfg), cfg.k)
            bag._cache[key] = fixed
    fixed = np.asarray(fixed, dtype=np.int64)
    if fixed.shape != (n, cfg.k):
        raise DimensionError(f"neighbour indices {list(fixed.shape)} != [{n}, {cfg.k}]")
    tails = nn.take_rows(tail, fixed)
    nbrs = NeighborSet(indices=fixed, queries=queries, tails=tails)

    dtype = head.data.dtype
    if cfg.weight_on:
        sim, alpha = edge_attention(head, tails, model)
        e, gates, beta = gated_aggregate(head, tails, alpha)
        att = EdgeAttention(alpha=alpha.data, beta=beta.data, similarity=sim.data,
                            gates=gates.data, aggregate=e)
    else:
        uniform = _uniform_weights(n, cfg.k, dtype)
        e = nn.mean_axis(tails, 1)
        att = EdgeAttention(alpha=uniform, beta=uniform.copy(), aggregate=e)

    fused = residual_fuse(head, e, model)
    emb, scores = readout(fused, cfg.readout, model)
    p = model.params
    logits = nn.linear(emb, p["classifier.weight"], p["classifier.bias"])
    return ForwardResult(logits=logits, embedding=emb, neighbors=nbrs,
                         attention=att, node_scores=scores)


def bag_loss(bag, model, neighbors=None):
    out = forward_bag(bag, model, neighbors=neighbors)
    return nn.cross_entropy(out.logits, bag.label), out


def edge_mass(result, n):
    """Incoming ``alpha * beta`` mass per patch."""
    w = (result.attention.alpha * result.attention.beta).astype(np.float64)
    return np.bincount(result.neighbors.indices.reshape(-1), weights=w.reshape(-1), minlength=n)


def attention_heatmap(bag, model):
    """Per-patch relevance in [0, 1] (max-normalised) as an [N, 3] array x, y, score."""
    out = forward_bag(bag, model)
    if out.node_scores is not None:
        raw = out.node_scores.astype(np.float64)
    else:
        raw = edge_mass(out, bag.n_patches)
    top = raw.max()
    score = raw / top if top > 0 else np.ones_like(raw)
    return np.column_stack([bag.coords.astype(np.float64), np.clip(score, 0.0, 1.0)])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_to_dict(model):
    params = {}
    for name, t in model.params.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        params[name] = {"shape": list(arr.shape),
                        "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    return {"format": "dagmodel", "version": 1, "config": model.config.to_dict(),
            "seed": model.seed, "params": params}


def model_from_dict(data):
    if data.get("format") != "dagmodel":
        raise ConfigError("not a dagmodel file")
    model = DagModel(DagConfig(**data["config"]), seed=data.get("seed", 0))
    state = {}
    for name, entry in data["params"].items():
        raw = base64.b64decode(entry["data"])
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    model.params.load_state_dict(state)
    return model


def save_model(model, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
