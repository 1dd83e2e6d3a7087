"""Graph attention encoder and the two task-specific heads.

All layer math is expressed through the autodiff primitives so one backward
pass reaches every parameter. Node order is canonicalized internally (sorted
by global id) before any arithmetic, which makes encode outputs exactly
invariant to how the caller happened to label the subgraph locally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ScatterPlan, Tensor
from .errors import ShapeError, ValidationError


@dataclass
class GATLayerParams:
    """One attention layer: a projection and the two attention vectors."""

    W: Tensor
    att_src: Tensor
    att_dst: Tensor
    leaky_slope: float = 0.2


@dataclass
class EncoderParams:
    """Backbone layers plus both task heads.

    The projection head is Linear-ReLU-Linear; the reconstruction head is a
    single linear map back to feature space followed by one mean-aggregation
    graph convolution with weight `mae_decoder`.
    """

    layers: list
    cca_w1: Tensor
    cca_w2: Tensor
    mae_head: Tensor
    mae_decoder: Tensor

    def named_parameters(self) -> dict:
        named = {}
        for i, layer in enumerate(self.layers):
            named[f"layer{i}.W"] = layer.W
            named[f"layer{i}.att_src"] = layer.att_src
            named[f"layer{i}.att_dst"] = layer.att_dst
        named["cca_head.W1"] = self.cca_w1
        named["cca_head.W2"] = self.cca_w2
        named["mae.head"] = self.mae_head
        named["mae.decoder"] = self.mae_decoder
        return named

    @property
    def feature_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].W.shape[1]


def init_params(dims, head_dims, rng_seed, leaky_slope: float = 0.2) -> EncoderParams:
    """Glorot-uniform initialization of all weights.

    `dims` lists the layer widths feature-dim first; `head_dims` gives the
    (hidden, output) widths of the projection head. The reconstruction head
    maps back to `dims[0]`.
    """
    if len(dims) < 2:
        raise ValidationError("init: need at least one layer (two dims)")
    if any(d < 1 for d in dims) or any(d < 1 for d in head_dims):
        raise ValidationError("init: dimensions must be positive")
    if len(head_dims) != 2:
        raise ValidationError("init: head_dims must be (hidden, output)")
    rng = np.random.default_rng(rng_seed)

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)

    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append(
            GATLayerParams(
                W=glorot(d_in, d_out),
                att_src=glorot(d_out, 1),
                att_dst=glorot(d_out, 1),
                leaky_slope=leaky_slope,
            )
        )
    emb = dims[-1]
    return EncoderParams(
        layers=layers,
        cca_w1=glorot(emb, head_dims[0]),
        cca_w2=glorot(head_dims[0], head_dims[1]),
        mae_head=glorot(emb, dims[0]),
        mae_decoder=glorot(dims[0], dims[0]),
    )


class _GraphPlan:
    """Canonically ordered edge arrays with reusable scatter plans.

    Edges carry one appended self-loop per node and are sorted by
    (destination, source), so per-destination groups are contiguous and every
    segment reduction runs in one fixed order regardless of input labeling.
    """

    __slots__ = (
        "order", "inv", "src", "dst", "group_starts",
        "dst_plan", "src_plan", "unsort_plan", "num_nodes",
    )

    def __init__(self, graph_like):
        m = graph_like.num_nodes
        order = graph_like.canonical_order()
        inv = np.empty(m, dtype=np.int64)
        inv[order] = np.arange(m)
        edges = graph_like.local_edges
        loops = np.arange(m, dtype=np.int64)
        src = np.concatenate([inv[edges[:, 0]], loops])
        dst = np.concatenate([inv[edges[:, 1]], loops])
        perm = np.lexsort((src, dst))
        self.src = src[perm]
        self.dst = dst[perm]
        # every node has its self-loop, so all m destination groups exist
        self.group_starts = np.searchsorted(self.dst, loops, side="left")
        self.dst_plan = ScatterPlan(self.dst, m)
        self.src_plan = ScatterPlan(self.src, m)
        self.unsort_plan = ScatterPlan(inv, m)
        self.order = order
        self.inv = inv
        self.num_nodes = m


def _attention(layer: GATLayerParams, plan: _GraphPlan, h: Tensor):
    """Per-edge softmax-normalized coefficients and the projected features."""
    if h.shape[0] != plan.num_nodes:
        raise ShapeError(f"attention: {h.shape} vs {plan.num_nodes} nodes")
    Wh = ad.matmul(h, layer.W)
    attend = ad.matmul(Wh, layer.att_src)
    neighbor = ad.matmul(Wh, layer.att_dst)
    scores = ad.leaky_relu(
        ad.add(
            ad.gather_rows(attend, plan.dst, plan.dst_plan),
            ad.gather_rows(neighbor, plan.src, plan.src_plan),
        ),
        layer.leaky_slope,
    )
    # constant per-group max shift: softmax is invariant and exp stays bounded
    shift = np.maximum.reduceat(scores.data[:, 0], plan.group_starts)[plan.dst]
    weights = ad.exp(ad.sub(scores, Tensor(shift.reshape(-1, 1))))
    denom = ad.scatter_add_rows(weights, plan.dst, plan.num_nodes, plan.dst_plan)
    inv_denom = ad.gather_rows(ad.power(denom, -1.0), plan.dst, plan.dst_plan)
    return ad.hadamard(weights, inv_denom), Wh


def _layer_forward(layer, plan, h, final: bool) -> Tensor:
    alpha, Wh = _attention(layer, plan, h)
    messages = ad.hadamard(alpha, ad.gather_rows(Wh, plan.src, plan.src_plan))
    agg = ad.scatter_add_rows(messages, plan.dst, plan.num_nodes, plan.dst_plan)
    return agg if final else ad.relu(agg)


def gat_attention(layer: GATLayerParams, h, edges):
    """Attention coefficients for the given edges plus one self-loop per node.

    Returns (edges_with_loops, alpha) aligned row for row, in the caller's
    edge order with the self-loops appended at the end.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = h.shape[0]
    if edges.size and (edges.min() < 0 or edges.max() >= m):
        raise ValidationError("attention: edge endpoint out of range")
    plan = _GraphPlan(_RawGraph(h.shape, edges, m))
    alpha, _ = _attention(layer, plan, h)
    # undo the internal (dst, src) sort to line up with the input rows
    loops = np.arange(m, dtype=np.int64)
    full = np.column_stack(
        [np.concatenate([edges[:, 0], loops]), np.concatenate([edges[:, 1], loops])]
    )
    perm = np.lexsort((full[:, 0], full[:, 1]))
    unsort = np.empty(len(perm), dtype=np.int64)
    unsort[perm] = np.arange(len(perm))
    return full, ad.gather_rows(alpha, unsort)


class _RawGraph:
    """Adapter letting plan construction run on bare edge arrays."""

    def __init__(self, shape, edges, m):
        self.local_edges = edges
        self.num_nodes = m

    def canonical_order(self):
        return np.arange(self.num_nodes, dtype=np.int64)


def gat_layer_forward(layer: GATLayerParams, sub, h, final: bool = False) -> Tensor:
    """One attention layer over a subgraph; ReLU unless it is the final layer."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    plan = _GraphPlan(sub)
    hc = ad.gather_rows(h, plan.order)
    out = _layer_forward(layer, plan, hc, final)
    return ad.gather_rows(out, plan.inv, plan.unsort_plan)


def encode(params: EncoderParams, sub) -> Tensor:
    """Run all layers over a subgraph; rows stay aligned with local ids."""
    if sub.local_features.shape[1] != params.feature_dim:
        raise ShapeError(
            f"encode: features {sub.local_features.shape} vs "
            f"layer input {params.feature_dim}"
        )
    plan = _GraphPlan(sub)
    h = Tensor(sub.local_features[plan.order])
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = _layer_forward(layer, plan, h, final=(i == last))
    return ad.gather_rows(h, plan.inv, plan.unsort_plan)


def cca_head(params: EncoderParams, Z) -> Tensor:
    """Linear-ReLU-Linear projection of node embeddings."""
    return ad.matmul(ad.relu(ad.matmul(Z, params.cca_w1)), params.cca_w2)


def mae_reconstruct(params: EncoderParams, sub_masked, Z, mask_value: float = 0.0) -> Tensor:
    """Decode masked-node features from embeddings of the masked subgraph.

    The single-layer head maps embeddings back to feature space, query rows
    are re-masked to the mask token, and one mean-aggregation convolution
    over N(i) and i itself mixes in the neighborhood before the decoder
    weight produces the reconstruction.
    """
    m = sub_masked.num_nodes
    if Z.shape[0] != m:
        raise ShapeError(f"reconstruct: {Z.shape} vs {m} nodes")
    decoded = ad.matmul(Z, params.mae_head)

    keep = np.ones((m, 1))
    keep[sub_masked.query_locals] = 0.0
    remasked = ad.hadamard(decoded, Tensor(keep))
    if mask_value != 0.0:
        token = np.zeros((m, decoded.shape[1]))
        token[sub_masked.query_locals] = float(mask_value)
        remasked = ad.add(remasked, Tensor(token))

    edges = sub_masked.local_edges
    loops = np.arange(m, dtype=np.int64)
    src = np.concatenate([edges[:, 0], loops])
    dst = np.concatenate([edges[:, 1], loops])
    dst_plan = ScatterPlan(dst, m)
    sums = ad.scatter_add_rows(
        ad.gather_rows(remasked, src, ScatterPlan(src, m)), dst, m, dst_plan
    )
    counts = np.bincount(dst, minlength=m).astype(np.float64).reshape(-1, 1)
    mean = ad.hadamard(sums, Tensor(1.0 / counts))
    return ad.matmul(mean, params.mae_decoder)
