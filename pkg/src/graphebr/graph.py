"""Immutable undirected graph storage, text I/O, and synthetic benchmarks."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import GraphParseError, ValidationError


class GraphStore:
    """An undirected graph with per-node features, stored as CSR adjacency.

    Construction deduplicates and symmetrizes the given edge pairs and drops
    self-loops. Instances are treated as immutable after construction and are
    safe for concurrent reads.
    """

    def __init__(self, features, edges):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ValidationError("graph: features must be a 2-D matrix")
        if not np.isfinite(features).all():
            raise ValidationError("graph: features must be finite")
        n = features.shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError("graph: edge endpoint out of range")
        pairs = np.sort(edges, axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        if pairs.size:
            pairs = np.unique(pairs, axis=0)
        else:
            pairs = pairs.reshape(0, 2)

        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((dst, src))
        self._indices = dst[order]
        self._indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=self._indptr[1:])
        self._pairs = pairs
        self.features = features
        self.num_nodes = n
        self.feature_dim = features.shape[1]
        self.degrees = np.diff(self._indptr)

    @property
    def num_edges(self) -> int:
        return len(self._pairs)

    def neighbors(self, u: int) -> np.ndarray:
        """Sorted neighbor ids of node u."""
        return self._indices[self._indptr[u] : self._indptr[u + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.neighbors(u)
        pos = np.searchsorted(nbrs, v)
        return pos < len(nbrs) and nbrs[pos] == v

    def undirected_edges(self) -> np.ndarray:
        """All edges as (u, v) pairs with u < v, sorted."""
        return self._pairs.copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self._pairs).tobytes())
        return h.hexdigest()


def load_graph(edge_list_path, features_path) -> GraphStore:
    """Read a graph from an edge-list file and a node-feature file.

    The edge file holds one whitespace-separated `u v` pair per line; the
    feature file holds one row of decimal reals per node. Lines that are
    blank or start with `#` are skipped in both files.
    """
    features = _read_features(features_path)
    n = features.shape[0]
    edges = []
    with open(edge_list_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tokens = text.split()
            if len(tokens) != 2:
                raise GraphParseError(
                    edge_list_path, lineno, f"expected 2 tokens, got {len(tokens)}"
                )
            try:
                u, v = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise GraphParseError(
                    edge_list_path, lineno, f"non-integer node id in {text!r}"
                ) from None
            if not (0 <= u < n and 0 <= v < n):
                raise ValidationError(
                    f"{edge_list_path}:{lineno}: node id out of range [0, {n})"
                )
            edges.append((u, v))
    return GraphStore(features, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def _read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            tokens = text.split()
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise GraphParseError(
                    path, lineno, f"expected {width} values, got {len(tokens)}"
                )
            try:
                row = [float(t) for t in tokens]
            except ValueError:
                raise GraphParseError(path, lineno, "non-numeric feature value") from None
            if not all(np.isfinite(row)):
                raise ValidationError(f"{path}:{lineno}: non-finite feature value")
            rows.append(row)
    if not rows:
        raise ValidationError(f"{path}: feature file is empty")
    return np.asarray(rows, dtype=np.float64)


def save_graph(graph: GraphStore, edge_list_path, features_path) -> None:
    """Write a graph in the format accepted by load_graph."""
    with open(edge_list_path, "w", encoding="utf-8") as fh:
        for u, v in graph.undirected_edges():
            fh.write(f"{u} {v}\n")
    with open(features_path, "w", encoding="utf-8") as fh:
        for row in graph.features:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def generate_synthetic_graph(
    num_nodes: int,
    num_communities: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    cold_start_fraction: float,
    rng_seed: int,
) -> GraphStore:
    """Sample a stochastic-block-model graph with planted communities.

    Communities are contiguous, near-equal blocks. Node features are a noisy
    community indicator in the first `num_communities` columns plus standard
    normal coordinates in the rest. A `cold_start_fraction` of nodes keeps at
    most 2 of their incident edges, modeling low-degree users.
    """
    if num_nodes < 2:
        raise ValidationError("synthetic graph: num_nodes must be at least 2")
    if num_communities < 1 or num_communities > num_nodes:
        raise ValidationError("synthetic graph: invalid community count")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValidationError("synthetic graph: requires 0 <= p_out < p_in <= 1")
    if not 0.0 <= cold_start_fraction <= 0.5:
        raise ValidationError("synthetic graph: cold_start_fraction outside [0, 0.5]")
    if feature_dim < num_communities:
        raise ValidationError("synthetic graph: feature_dim below community count")

    rng = np.random.default_rng(rng_seed)
    sizes = np.full(num_communities, num_nodes // num_communities, dtype=np.int64)
    sizes[: num_nodes % num_communities] += 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    community = np.repeat(np.arange(num_communities), sizes)

    chunks = []
    for b in range(num_communities):
        iu, ju = np.triu_indices(sizes[b], k=1)
        mask = rng.random(iu.size) < p_in
        chunks.append(
            np.column_stack([iu[mask] + offsets[b], ju[mask] + offsets[b]])
        )
        for c in range(b + 1, num_communities):
            hits = rng.random((sizes[b], sizes[c])) < p_out
            rows, cols = np.nonzero(hits)
            chunks.append(np.column_stack([rows + offsets[b], cols + offsets[c]]))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)

    features = np.zeros((num_nodes, feature_dim))
    features[np.arange(num_nodes), community] = 1.0
    features[:, :num_communities] += rng.normal(0.0, 0.3, (num_nodes, num_communities))
    if feature_dim > num_communities:
        features[:, num_communities:] = rng.normal(
            size=(num_nodes, feature_dim - num_communities)
        )

    num_cold = int(cold_start_fraction * num_nodes)
    if num_cold:
        adjacency = {u: set() for u in range(num_nodes)}
        for u, v in edges:
            adjacency[int(u)].add(int(v))
            adjacency[int(v)].add(int(u))
        cold = rng.choice(num_nodes, size=num_cold, replace=False)
        for u in cold:
            u = int(u)
            nbrs = np.array(sorted(adjacency[u]))
            if len(nbrs) <= 2:
                continue
            keep = set(rng.choice(nbrs, size=2, replace=False).tolist())
            for v in nbrs:
                v = int(v)
                if v not in keep:
                    adjacency[u].discard(v)
                    adjacency[v].discard(u)
        edges = np.array(
            [(u, v) for u in range(num_nodes) for v in sorted(adjacency[u]) if u < v],
            dtype=np.int64,
        ).reshape(-1, 2)

    return GraphStore(features, edges)
