"""K-hop subgraph sampling, retrieval example construction, and the
stochastic augmentations used by the auxiliary training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SkipExample, ValidationError
from .graph import GraphStore


@dataclass(frozen=True)
class Subgraph:
    """A sampled neighborhood with local node re-indexing.

    `local_edges` materializes both directions of every undirected edge.
    `hop_of[i]` is the hop distance of local node i from the root whose
    context brought it in; roots used as retrieval or masking targets are
    listed in `query_locals`.
    """

    local_features: np.ndarray
    local_edges: np.ndarray
    global_ids: np.ndarray
    query_locals: np.ndarray
    hop_of: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "local_features", np.asarray(self.local_features, dtype=np.float64))
        object.__setattr__(self, "local_edges", np.asarray(self.local_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "global_ids", np.asarray(self.global_ids, dtype=np.int64))
        object.__setattr__(self, "query_locals", np.asarray(self.query_locals, dtype=np.int64))
        object.__setattr__(self, "hop_of", np.asarray(self.hop_of, dtype=np.int64))
        m = len(self.global_ids)
        if self.local_features.shape[0] != m or len(self.hop_of) != m:
            raise ValidationError("subgraph: per-node arrays disagree on node count")
        if len(np.unique(self.global_ids)) != m:
            raise ValidationError("subgraph: global_ids must be injective")
        if self.local_edges.size and (
            self.local_edges.min() < 0 or self.local_edges.max() >= m
        ):
            raise ValidationError("subgraph: edge endpoint out of range")
        if np.any(self.hop_of[self.query_locals] != 0):
            raise ValidationError("subgraph: query nodes must sit at hop 0")

    @property
    def num_nodes(self) -> int:
        return len(self.global_ids)

    def canonical_order(self) -> np.ndarray:
        """Permutation placing locals in ascending global-id order."""
        return np.argsort(self.global_ids)


@dataclass(frozen=True)
class BatchGraph:
    """Disjoint union of several example subgraphs for one training step.

    Nodes are deliberately not deduplicated across examples, so per-example
    edge removals cannot leak between examples; `example_of` records each
    node's source example.
    """

    local_features: np.ndarray
    local_edges: np.ndarray
    global_ids: np.ndarray
    query_locals: np.ndarray
    hop_of: np.ndarray
    example_of: np.ndarray
    query_rows: np.ndarray
    candidate_rows: np.ndarray
    labels: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.global_ids)

    def canonical_order(self) -> np.ndarray:
        return np.lexsort((self.global_ids, self.example_of))


@dataclass(frozen=True)
class RetrievalExample:
    """One query with M candidates, exactly one of which is a held neighbor."""

    subgraph: Subgraph
    query_local: int
    candidate_locals: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "candidate_locals", np.asarray(self.candidate_locals, dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        if self.labels.shape != self.candidate_locals.shape:
            raise ValidationError("retrieval example: labels misaligned with candidates")
        positives = np.flatnonzero(self.labels == 1.0)
        if len(positives) != 1 or not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValidationError("retrieval example: labels must be one-hot")


@dataclass(frozen=True)
class AugmentationConfig:
    """Stochastic view parameters for the two auxiliary objectives."""

    edge_drop_prob: float = 0.2
    feature_drop_prob: float = 0.2
    mask_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("edge_drop_prob", "feature_drop_prob"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValidationError(f"augmentation: {name} must lie in [0, 1)")
        if not np.isfinite(self.mask_value):
            raise ValidationError("augmentation: mask_value must be finite")


def khop_subgraph(graph: GraphStore, query: int, k: int, fanout, rng_seed) -> Subgraph:
    """Sample the fanout-capped k-hop neighborhood around a query node.

    Per hop, each frontier node contributes at most `fanout` of its
    neighbors, drawn uniformly without replacement; `fanout=None` keeps all
    of them, which reproduces the exact breadth-first k-hop closure.
    """
    query = int(query)
    if not 0 <= query < graph.num_nodes:
        raise ValidationError(f"khop: query id {query} out of range")
    if k < 1:
        raise ValidationError("khop: k must be at least 1")
    if fanout is not None and fanout < 1:
        raise ValidationError("khop: fanout must be at least 1")
    rng = np.random.default_rng(rng_seed)

    hop = {query: 0}
    order = [query]
    pairs = []
    frontier = [query]
    for h in range(1, k + 1):
        nxt = []
        for u in frontier:
            nbrs = graph.neighbors(u)
            if fanout is not None and len(nbrs) > fanout:
                nbrs = rng.choice(nbrs, size=fanout, replace=False)
            for v in nbrs:
                v = int(v)
                pairs.append((min(u, v), max(u, v)))
                if v not in hop:
                    hop[v] = h
                    order.append(v)
                    nxt.append(v)
        frontier = nxt

    global_ids = np.asarray(order, dtype=np.int64)
    local_of = {g: i for i, g in enumerate(order)}
    if pairs:
        uniq = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
        la = np.array([local_of[int(g)] for g in uniq[:, 0]], dtype=np.int64)
        lb = np.array([local_of[int(g)] for g in uniq[:, 1]], dtype=np.int64)
        local_edges = np.column_stack(
            [np.concatenate([la, lb]), np.concatenate([lb, la])]
        )
    else:
        local_edges = np.zeros((0, 2), dtype=np.int64)

    return Subgraph(
        local_features=graph.features[global_ids],
        local_edges=local_edges,
        global_ids=global_ids,
        query_locals=np.array([0], dtype=np.int64),
        hop_of=np.array([hop[g] for g in order], dtype=np.int64),
    )


def whole_graph_subgraph(graph: GraphStore) -> Subgraph:
    """Wrap the entire graph as one subgraph with identity local ids.

    Every node sits at hop 0 and counts as a query, which makes the full
    graph usable wherever a sampled context is expected, e.g. whole-graph
    encoding or augmentation studies.
    """
    n = graph.num_nodes
    if n == 0:
        raise ValidationError("whole graph: graph has no nodes")
    pairs = graph.undirected_edges()
    if pairs.size:
        local_edges = np.concatenate([pairs, pairs[:, ::-1]])
    else:
        local_edges = np.zeros((0, 2), dtype=np.int64)
    ids = np.arange(n, dtype=np.int64)
    return Subgraph(
        local_features=graph.features.copy(),
        local_edges=local_edges,
        global_ids=ids,
        query_locals=ids,
        hop_of=np.zeros(n, dtype=np.int64),
    )


def sample_retrieval_example(
    graph: GraphStore,
    query: int,
    num_negatives: int,
    k: int,
    fanout,
    rng_seed,
) -> RetrievalExample:
    """Build one training example: a positive neighbor, uniform non-neighbor
    negatives, and a merged subgraph giving every candidate its own k-hop
    context, with the positive edge withheld from the edge set."""
    query = int(query)
    if not 0 <= query < graph.num_nodes:
        raise ValidationError(f"retrieval example: query id {query} out of range")
    if num_negatives < 0:
        raise ValidationError("retrieval example: num_negatives must be >= 0")
    nbrs = graph.neighbors(query)
    if len(nbrs) == 0:
        raise SkipExample(f"query {query} has no neighbors")

    if isinstance(rng_seed, np.random.SeedSequence):
        seeds = rng_seed.spawn(3)
    else:
        seeds = np.random.SeedSequence(rng_seed).spawn(3)
    rng = np.random.default_rng(seeds[0])
    positive = int(rng.choice(nbrs))
    complement = np.setdiff1d(
        np.arange(graph.num_nodes), np.append(nbrs, query), assume_unique=False
    )
    if len(complement) < num_negatives:
        raise ValidationError(
            f"retrieval example: only {len(complement)} non-neighbors available"
        )
    negatives = (
        rng.choice(complement, size=num_negatives, replace=False)
        if num_negatives
        else np.zeros(0, dtype=np.int64)
    )
    candidates = np.concatenate([[positive], negatives]).astype(np.int64)

    context_seeds = seeds[1].spawn(1 + len(candidates))
    contexts = [khop_subgraph(graph, query, k, fanout, context_seeds[0])]
    for i, cand in enumerate(candidates):
        contexts.append(khop_subgraph(graph, int(cand), k, fanout, context_seeds[1 + i]))

    merged = _union_contexts(graph, contexts, withheld=(query, positive))
    local_of = {int(g): i for i, g in enumerate(merged.global_ids)}
    labels = np.zeros(len(candidates))
    labels[0] = 1.0
    return RetrievalExample(
        subgraph=merged,
        query_local=local_of[query],
        candidate_locals=np.array([local_of[int(c)] for c in candidates]),
        labels=labels,
    )


def _union_contexts(graph, contexts, withheld) -> Subgraph:
    """Union sampled contexts by global id, dropping the withheld edge."""
    order = []
    hop = {}
    for sub in contexts:
        for g, h in zip(sub.global_ids, sub.hop_of):
            g = int(g)
            if g not in hop:
                hop[g] = int(h)
                order.append(g)
    local_of = {g: i for i, g in enumerate(order)}
    gpairs = []
    for sub in contexts:
        if sub.local_edges.size:
            ge = sub.global_ids[sub.local_edges]
            gpairs.append(np.sort(ge, axis=1))
    if gpairs:
        pairs = np.unique(np.concatenate(gpairs), axis=0)
        banned = (min(withheld), max(withheld))
        keep = ~((pairs[:, 0] == banned[0]) & (pairs[:, 1] == banned[1]))
        pairs = pairs[keep]
        la = np.array([local_of[int(g)] for g in pairs[:, 0]], dtype=np.int64)
        lb = np.array([local_of[int(g)] for g in pairs[:, 1]], dtype=np.int64)
        local_edges = np.column_stack(
            [np.concatenate([la, lb]), np.concatenate([lb, la])]
        )
    else:
        local_edges = np.zeros((0, 2), dtype=np.int64)
    global_ids = np.asarray(order, dtype=np.int64)
    return Subgraph(
        local_features=graph.features[global_ids],
        local_edges=local_edges,
        global_ids=global_ids,
        query_locals=np.array([0], dtype=np.int64),
        hop_of=np.array([hop[g] for g in order], dtype=np.int64),
    )


def augment_edge_drop(sub, p: float, rng_seed):
    """Independently remove each undirected edge with probability p."""
    if not 0.0 <= p < 1.0:
        raise ValidationError("edge drop: p must lie in [0, 1)")
    if p == 0.0 or sub.local_edges.size == 0:
        return sub
    rng = np.random.default_rng(rng_seed)
    pairs = np.unique(np.sort(sub.local_edges, axis=1), axis=0)
    kept = pairs[rng.random(len(pairs)) >= p]
    edges = np.concatenate([kept, kept[:, ::-1]]) if kept.size else np.zeros((0, 2), dtype=np.int64)
    return replace(sub, local_edges=edges)


def augment_feature_drop(sub, p: float, rng_seed):
    """Zero whole feature columns, each with probability p."""
    if not 0.0 <= p < 1.0:
        raise ValidationError("feature drop: p must lie in [0, 1)")
    if p == 0.0:
        return sub
    rng = np.random.default_rng(rng_seed)
    keep = (rng.random(sub.local_features.shape[1]) >= p).astype(np.float64)
    return replace(sub, local_features=sub.local_features * keep)


def mask_query_features(sub, mask_value: float):
    """Overwrite query rows with the mask token; returns (masked, originals)."""
    if len(sub.query_locals) == 0:
        raise ValidationError("mask: subgraph has no query nodes")
    originals = sub.local_features[sub.query_locals].copy()
    masked = sub.local_features.copy()
    masked[sub.query_locals] = float(mask_value)
    return replace(sub, local_features=masked), originals


def merge_examples(examples) -> BatchGraph:
    """Disjoint union of retrieval examples with batch-level bookkeeping."""
    if not examples:
        raise ValidationError("merge: need at least one example")
    widths = {len(ex.candidate_locals) for ex in examples}
    if len(widths) != 1:
        raise ValidationError("merge: examples disagree on candidate count")
    feats, edges, gids, hops, exof, qlocals = [], [], [], [], [], []
    qrows, crows, labels = [], [], []
    offset = 0
    for i, ex in enumerate(examples):
        sub = ex.subgraph
        m = sub.num_nodes
        feats.append(sub.local_features)
        if sub.local_edges.size:
            edges.append(sub.local_edges + offset)
        gids.append(sub.global_ids)
        hops.append(sub.hop_of)
        exof.append(np.full(m, i, dtype=np.int64))
        qlocals.append(sub.query_locals + offset)
        qrows.append(ex.query_local + offset)
        crows.append(ex.candidate_locals + offset)
        labels.append(ex.labels)
        offset += m
    return BatchGraph(
        local_features=np.concatenate(feats),
        local_edges=np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64),
        global_ids=np.concatenate(gids),
        query_locals=np.concatenate(qlocals),
        hop_of=np.concatenate(hops),
        example_of=np.concatenate(exof),
        query_rows=np.asarray(qrows, dtype=np.int64),
        candidate_rows=np.vstack(crows),
        labels=np.vstack(labels),
    )
