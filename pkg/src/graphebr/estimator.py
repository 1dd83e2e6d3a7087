"""Estimator-style wrapper over the trainer, exporter, and retrievers.

`GraphEmbeddingRetriever` follows the scikit-learn protocol: constructor
arguments are stored verbatim, `get_params`/`set_params` expose them for
cloning and grid search, `fit` trains on a graph, `transform` produces
embedding matrices, and `kneighbors`/`predict` answer retrieval queries.
Fitted state lives in trailing-underscore attributes, and the underlying
train result, table, and index stay reachable for direct use.
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import ValidationError
from .graph import GraphStore
from .index import ann_topk, build_ann_index, exact_topk, export_embeddings
from .losses import LossWeights
from .training import TrainConfig, train


class GraphEmbeddingRetriever:
    """Graph encoder with nearest-neighbor retrieval over its embeddings.

    The flat constructor arguments cover the common knobs; pass a full
    `TrainConfig` as `train_config` to control everything else, in which
    case the flat training arguments are ignored.
    """

    def __init__(
        self,
        steps=200,
        batch_size=32,
        learning_rate=1e-3,
        embedding_dim=64,
        hidden_dims=(64,),
        projection_dim=64,
        k=2,
        fanout=10,
        num_negatives=15,
        enabled_tasks=("retrieval", "cca", "mae"),
        retrieval_weight=1.0,
        cca_weight=1e-3,
        mae_weight=1e-3,
        seed=0,
        index="exact",
        m_conn=16,
        ef_construction=100,
        ef_search=64,
        train_config=None,
    ):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.projection_dim = projection_dim
        self.k = k
        self.fanout = fanout
        self.num_negatives = num_negatives
        self.enabled_tasks = enabled_tasks
        self.retrieval_weight = retrieval_weight
        self.cca_weight = cca_weight
        self.mae_weight = mae_weight
        self.seed = seed
        self.index = index
        self.m_conn = m_conn
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.train_config = train_config

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValidationError(f"estimator: unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _resolve_config(self) -> TrainConfig:
        if self.train_config is not None:
            if not isinstance(self.train_config, TrainConfig):
                raise ValidationError("estimator: train_config must be a TrainConfig")
            return self.train_config
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weights=LossWeights(
                alpha=self.retrieval_weight,
                beta=self.cca_weight,
                gamma=self.mae_weight,
            ),
            k=self.k,
            fanout=self.fanout,
            num_negatives=self.num_negatives,
            seed=self.seed,
            enabled_tasks=tuple(self.enabled_tasks),
            hidden_dims=tuple(self.hidden_dims),
            embedding_dim=self.embedding_dim,
            projection_dim=self.projection_dim,
        )

    def _require_fitted(self):
        if not hasattr(self, "result_"):
            raise ValidationError("estimator: call fit before using the model")

    def fit(self, graph: GraphStore, y=None):
        """Train on the graph, export its embedding table, and index it."""
        if self.index not in ("exact", "hnsw"):
            raise ValidationError("estimator: index must be 'exact' or 'hnsw'")
        cfg = self._resolve_config()
        self.result_ = train(graph, cfg)
        self.config_ = cfg
        self.graph_ = graph
        self.table_ = export_embeddings(self.result_, graph, k=cfg.k, fanout=cfg.fanout)
        self.index_ = (
            build_ann_index(
                self.table_,
                m_conn=self.m_conn,
                ef_construction=self.ef_construction,
                rng_seed=cfg.seed,
            )
            if self.index == "hnsw"
            else None
        )
        return self

    def transform(self, graph: GraphStore = None) -> np.ndarray:
        """Embedding matrix of the fitted graph, or of a new graph with the
        same feature dimensionality (the encoder is inductive)."""
        self._require_fitted()
        if graph is None:
            return self.table_.vectors.copy()
        cfg = self.config_
        return export_embeddings(self.result_, graph, k=cfg.k, fanout=cfg.fanout).vectors

    def fit_transform(self, graph: GraphStore, y=None) -> np.ndarray:
        return self.fit(graph, y).transform()

    def kneighbors(self, node_ids=None, n_neighbors=10, exclude_training_neighbors=True):
        """Retrieve the best-scoring candidates for each query node.

        Returns (scores, ids), each of shape (num_queries, n_neighbors),
        rows ordered like node_ids (all nodes when None). The query node
        itself is always excluded; its training neighbors are excluded
        unless exclude_training_neighbors is False.
        """
        self._require_fitted()
        if n_neighbors < 1:
            raise ValidationError("estimator: n_neighbors must be >= 1")
        if node_ids is None:
            ids = np.arange(self.graph_.num_nodes, dtype=np.int64)
        else:
            ids = np.asarray(node_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.graph_.num_nodes):
            raise ValidationError("estimator: node id out of range")
        scores, found = [], []
        for u in ids:
            u = int(u)
            exclude = {u}
            if exclude_training_neighbors:
                exclude |= set(self.graph_.neighbors(u).tolist())
            q = self.table_.vectors[u]
            if self.index_ is not None:
                result = ann_topk(
                    self.index_, q, k=n_neighbors,
                    ef_search=max(self.ef_search, n_neighbors), exclude=exclude,
                )
            else:
                result = exact_topk(self.table_, q, k=n_neighbors, exclude=exclude)
            if result.truncated:
                raise ValidationError(
                    f"estimator: query {u} produced {len(result.ids)} of "
                    f"{n_neighbors} requested neighbors"
                )
            scores.append(result.scores)
            found.append(result.ids)
        return np.vstack(scores), np.vstack(found)

    def predict(self, node_ids=None) -> np.ndarray:
        """Best retrieval candidate per query node."""
        _, ids = self.kneighbors(node_ids, n_neighbors=1)
        return ids[:, 0]
