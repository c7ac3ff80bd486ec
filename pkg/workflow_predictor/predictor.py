"""Graph-network predictor of workflow success on (workflow, task) pairs.

The model has three stages:

1. workflow encoding: node prompt features pass through ``layers`` rounds of
   message passing (GCN, GAT, or the message-free ``mlp`` baseline) and are
   mean-pooled into a graph embedding ``g``;
2. task encoding: the instruction feature goes through a linear layer + ReLU;
3. the concatenation ``[g, t]`` feeds a one-hidden-layer MLP producing one
   logit; ``p = sigmoid(logit)``.

Messages flow along edge direction. Every node also aggregates its own
embedding, so source nodes never see an empty neighbourhood.
"""

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse

from workflow_predictor.dataset_pipeline import LabeledSample
from workflow_predictor.errors import ConfigError, EmptySplit, ShapeMismatch
from workflow_predictor.graph_core import TaskInstance, WorkflowGraph, ensure_valid
from workflow_predictor.nn_core import (
    AdamState,
    LinearLayer,
    Params,
    adam_step,
    bce_loss_batch,
    check_finite,
    leaky_relu,
    leaky_relu_backward,
    linear_backward,
    linear_forward,
    load_checkpoint,
    masked_softmax,
    masked_softmax_backward,
    relu,
    relu_backward,
    save_checkpoint,
    sigmoid,
)
from workflow_predictor.text_encode import EmbeddingConfig, TextEncoder, get_encoder

logger = logging.getLogger(__name__)

Arch = Literal["gcn", "gat", "mlp"]


class PredictorConfig(BaseModel):
    """Architecture and training settings."""

    model_config = ConfigDict(frozen=True)

    arch: Arch = "gcn"
    layers: int = Field(default=2, ge=1)
    hidden: int = Field(default=512, ge=1)
    input_dim: int = Field(default=384, ge=1)
    pool: Literal["mean"] = "mean"
    normalization: Literal["mean", "symmetric"] = "mean"
    bidirectional: bool = False
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    lr: float = Field(default=1e-4, ge=0.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    coupled_weight_decay: bool = False
    seed: int = Field(default=0, ge=0)
    log_every: int = Field(default=10, ge=1)


class Prediction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    probability: float
    label: int
    graph_embedding: Optional[np.ndarray] = None
    task_embedding: Optional[np.ndarray] = None


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    val_accuracy: float


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: "PredictorModel"
    history: List[EpochRecord]
    best_epoch: int
    best_val_accuracy: float
    seconds: float


def parameter_count(config: PredictorConfig) -> int:
    """Number of scalar parameters a model built from ``config`` holds."""
    h, total = config.hidden, 0
    for layer in range(config.layers):
        fan_in = config.input_dim if layer == 0 else h
        total += h * fan_in + h
        if config.arch == "gat":
            total += 2 * h
    total += h * config.input_dim + h
    total += h * 2 * h + h + h + 1
    return total


def neighbourhood_mask(graph: WorkflowGraph, arch: Arch, bidirectional: bool) -> np.ndarray:
    """``mask[i, j]`` is true when node ``j`` sends a message to node ``i``."""
    n = graph.num_nodes
    mask = np.eye(n, dtype=bool)
    if arch == "mlp":
        return mask
    index = graph.index_of()
    for src, dst in graph.edges:
        mask[index[dst], index[src]] = True
        if bidirectional:
            mask[index[src], index[dst]] = True
    return mask


def aggregation_matrix(mask: np.ndarray, normalization: str) -> np.ndarray:
    degree = mask.sum(axis=1).astype(np.float64)
    if normalization == "symmetric":
        scale = 1.0 / np.sqrt(degree)
        return mask * scale[:, None] * scale[None, :]
    return mask / degree[:, None]


def _weight_grad(upstream: np.ndarray, H) -> np.ndarray:
    """``upstream.T @ H`` for a dense or sparse ``H``."""
    if sparse.issparse(H):
        return np.asarray((H.T @ upstream).T)
    return upstream.T @ H


class GraphBatch:
    """Several graphs packed block-diagonally.

    Attributes:
        X: Stacked node features as a sparse matrix, one block of rows per graph
        agg: Sparse block-diagonal aggregation weights (GCN)
        pool: Sparse ``num_graphs x num_nodes`` mean-pooling matrix
    """

    def __init__(self, features: Sequence[np.ndarray], masks: Sequence[np.ndarray], aggs: Sequence[np.ndarray]):
        sizes = np.array([m.shape[0] for m in masks], dtype=np.int64)
        if np.any(sizes == 0):
            raise ShapeMismatch("cannot pool a graph with no nodes")
        self.num_graphs = len(sizes)
        self._masks = list(masks)
        self._mask: Optional[np.ndarray] = None
        if not self.num_graphs:
            self.X = sparse.csr_matrix((0, 0))
            self.agg = sparse.csr_matrix((0, 0))
            self.pool = sparse.csr_matrix((0, 0))
            return
        total = int(sizes.sum())
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        rows, cols, weights = [], [], []
        for offset, agg in zip(offsets, aggs):
            r, c = np.nonzero(agg)
            rows.append(r + offset)
            cols.append(c + offset)
            weights.append(agg[r, c])
        self.X = sparse.csr_matrix(np.vstack(features))
        self.agg = sparse.csr_matrix(
            (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(total, total)
        )
        self.pool = sparse.csr_matrix(
            (np.repeat(1.0 / sizes, sizes), (np.repeat(np.arange(self.num_graphs), sizes), np.arange(total))),
            shape=(self.num_graphs, total),
        )

    @property
    def mask(self) -> np.ndarray:
        """Dense block-diagonal neighbourhood mask, built on first use (GAT only)."""
        if self._mask is None:
            total = sum(m.shape[0] for m in self._masks)
            self._mask = np.zeros((total, total), dtype=bool)
            offset = 0
            for mask in self._masks:
                block = slice(offset, offset + mask.shape[0])
                self._mask[block, block] = mask
                offset += mask.shape[0]
        return self._mask


class PredictorModel:
    """All learnable parameters plus the forward and backward passes."""

    def __init__(self, config: PredictorConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        if rng is None:
            rng = np.random.default_rng(config.seed)
        h = config.hidden
        self.gnn: List[LinearLayer] = []
        self.att: List[Optional[np.ndarray]] = []
        self.att_grad: List[Optional[np.ndarray]] = []
        for layer in range(config.layers):
            fan_in = config.input_dim if layer == 0 else h
            self.gnn.append(LinearLayer(fan_in, h, rng))
            if config.arch == "gat":
                limit = np.sqrt(6.0 / (2 * h + 1))
                self.att.append(rng.uniform(-limit, limit, size=2 * h))
                self.att_grad.append(np.zeros(2 * h))
            else:
                self.att.append(None)
                self.att_grad.append(None)
        self.proj = LinearLayer(config.input_dim, h, rng)
        self.head_hidden = LinearLayer(2 * h, h, rng)
        self.head_out = LinearLayer(h, 1, rng)

    def _linears(self) -> Dict[str, LinearLayer]:
        layers = {f"gnn.{i}": layer for i, layer in enumerate(self.gnn)}
        layers.update({"proj": self.proj, "head.0": self.head_hidden, "head.1": self.head_out})
        return layers

    @property
    def params(self) -> Params:
        params: Params = {}
        for name, layer in self._linears().items():
            params[f"{name}.W"] = layer.W
            params[f"{name}.b"] = layer.b
        for i, att in enumerate(self.att):
            if att is not None:
                params[f"gnn.{i}.att"] = att
        return params

    @property
    def grads(self) -> Params:
        grads: Params = {}
        for name, layer in self._linears().items():
            grads[f"{name}.W"] = layer.gradW
            grads[f"{name}.b"] = layer.gradb
        for i, grad in enumerate(self.att_grad):
            if grad is not None:
                grads[f"gnn.{i}.att"] = grad
        return grads

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def load_params(self, values: Mapping[str, np.ndarray]) -> None:
        """Copy parameter values in place; names and shapes must match exactly."""
        params = self.params
        if set(values) != set(params):
            missing = sorted(set(params) ^ set(values))
            raise ConfigError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for name, target in params.items():
            if values[name].shape != target.shape:
                raise ConfigError(f"parameter {name!r} has shape {values[name].shape}, model expects {target.shape}")
            np.copyto(target, values[name])

    def snapshot(self) -> Params:
        return {name: value.copy() for name, value in self.params.items()}

    def clone(self) -> "PredictorModel":
        return copy.deepcopy(self)

    # -- stage 1 -----------------------------------------------------------

    def layer_forward(self, layer_index: int, batch: GraphBatch, H: np.ndarray) -> Tuple[np.ndarray, tuple]:
        layer = self.gnn[layer_index]
        if H.shape[1] != layer.in_features:
            raise ShapeMismatch(f"layer {layer_index} expects width {layer.in_features}, got {H.shape[1]}")
        P = np.asarray(H @ layer.W.T)
        if self.config.arch == "gat":
            out = layer.out_features
            att = self.att[layer_index]
            E = (P @ att[:out])[:, None] + (P @ att[out:])[None, :]
            alpha = masked_softmax(leaky_relu(E), batch.mask)
            Z = alpha @ P + layer.b
            return relu(Z), (H, P, E, alpha, Z)
        # agg (H W^T) == (agg H) W^T
        Z = (P if self.config.arch == "mlp" else batch.agg @ P) + layer.b
        return relu(Z), (H, Z)

    def layer_backward(self, layer_index: int, batch: GraphBatch, cache: tuple, dH_out: np.ndarray,
                       need_input_grad: bool = True) -> Optional[np.ndarray]:
        layer = self.gnn[layer_index]
        if self.config.arch == "gat":
            H, P, E, alpha, Z = cache
            out = layer.out_features
            att = self.att[layer_index]
            dZ = relu_backward(Z, dH_out)
            layer.gradb += dZ.sum(axis=0)
            dP = alpha.T @ dZ
            dE = leaky_relu_backward(E, masked_softmax_backward(alpha, dZ @ P.T))
            d_dst, d_src = dE.sum(axis=1), dE.sum(axis=0)
            self.att_grad[layer_index][:out] += P.T @ d_dst
            self.att_grad[layer_index][out:] += P.T @ d_src
            dP += np.outer(d_dst, att[:out]) + np.outer(d_src, att[out:])
        else:
            H, Z = cache
            dZ = relu_backward(Z, dH_out)
            layer.gradb += dZ.sum(axis=0)
            dP = dZ if self.config.arch == "mlp" else np.asarray(batch.agg.T @ dZ)
        layer.gradW += _weight_grad(dP, H)
        return dP @ layer.W if need_input_grad else None

    def encode_graphs(self, batch: GraphBatch) -> Tuple[np.ndarray, list]:
        H, caches = batch.X, []
        for layer_index in range(len(self.gnn)):
            H, cache = self.layer_forward(layer_index, batch, H)
            caches.append(cache)
        return np.asarray(batch.pool @ H), caches

    # -- stages 2 and 3 ----------------------------------------------------

    def forward(self, batch: GraphBatch, task_features: np.ndarray, graph_index: np.ndarray) -> Tuple[np.ndarray, dict]:
        """Compute one logit per (graph, task) row.

        Args:
            batch: The distinct graphs of the minibatch
            task_features: ``B x input_dim`` task instruction features
            graph_index: For each of the ``B`` rows, which graph of ``batch`` it pairs with

        Returns:
            ``(logits, cache)`` where the cache feeds ``backward``
        """
        G, gnn_caches = self.encode_graphs(batch)
        Zt = linear_forward(self.proj, task_features)
        T = relu(Zt)
        O = np.hstack([G[graph_index], T])
        Z1 = linear_forward(self.head_hidden, O)
        A1 = relu(Z1)
        logits = linear_forward(self.head_out, A1)[:, 0]
        cache = {
            "batch": batch, "gnn": gnn_caches, "G": G, "index": graph_index,
            "task_features": task_features, "Zt": Zt, "T": T, "O": O, "Z1": Z1, "A1": A1,
        }
        return logits, cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream ``dloss/dlogits``."""
        h = self.config.hidden
        dA1 = linear_backward(self.head_out, cache["A1"], dlogits[:, None])
        dO = linear_backward(self.head_hidden, cache["O"], relu_backward(cache["Z1"], dA1))
        linear_backward(self.proj, cache["task_features"], relu_backward(cache["Zt"], dO[:, h:]))
        dG = np.zeros_like(cache["G"])
        np.add.at(dG, cache["index"], dO[:, :h])
        batch = cache["batch"]
        dH = np.asarray(batch.pool.T @ dG)
        for layer_index in reversed(range(len(self.gnn))):
            dH = self.layer_backward(layer_index, batch, cache["gnn"][layer_index], dH,
                                     need_input_grad=layer_index > 0)

    def save(self, path: str, embedding: EmbeddingConfig, extra: Optional[dict] = None) -> None:
        meta = {"predictor": self.config.model_dump(), "embedding": embedding.model_dump()}
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str) -> Tuple["PredictorModel", EmbeddingConfig, dict]:
        values, meta = load_checkpoint(path)
        try:
            config = PredictorConfig.model_validate(meta["predictor"])
            embedding = EmbeddingConfig.model_validate(meta["embedding"])
        except (KeyError, ValueError) as e:
            raise ConfigError(f"checkpoint {path} has an unusable header: {e}") from e
        model = cls(config)
        model.load_params(values)
        return model, embedding, meta


TrainResult.model_rebuild()


class FeatureStore:
    """Caches node features, task features and graph structure by id."""

    def __init__(self, config: PredictorConfig, embedding: EmbeddingConfig,
                 graphs: Mapping[str, WorkflowGraph], tasks: Mapping[str, TaskInstance]):
        if embedding.dim != config.input_dim:
            raise ConfigError(f"embedding dimension {embedding.dim} does not match predictor input_dim {config.input_dim}")
        self.config = config
        self.encoder: TextEncoder = get_encoder(embedding)
        self.graphs = graphs
        self.tasks = tasks
        self._graph_cache: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def graph_parts(self, graph: WorkflowGraph) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = graph.id
        parts = self._graph_cache.get(key) if key else None
        if parts is None:
            mask = neighbourhood_mask(graph, self.config.arch, self.config.bidirectional)
            parts = (self.encoder.encode_nodes(graph), mask, aggregation_matrix(mask, self.config.normalization))
            if key and key in self.graphs:
                self._graph_cache[key] = parts
        return parts

    def graph_batch(self, graphs: Sequence[WorkflowGraph]) -> GraphBatch:
        parts = [self.graph_parts(g) for g in graphs]
        return GraphBatch([p[0] for p in parts], [p[1] for p in parts], [p[2] for p in parts])

    def task_features(self, tasks: Sequence[TaskInstance]) -> np.ndarray:
        return np.vstack([self.encoder.encode(t.text) for t in tasks])

    def sample_batch(self, samples: Sequence[LabeledSample]) -> Tuple[GraphBatch, np.ndarray, np.ndarray, np.ndarray]:
        order: Dict[str, int] = {}
        for sample in samples:
            order.setdefault(sample.workflow_id, len(order))
        batch = self.graph_batch([self.graphs[wid] for wid in order])
        index = np.array([order[s.workflow_id] for s in samples], dtype=np.int64)
        tasks = self.task_features([self.tasks[s.task_id] for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.float64)
        return batch, tasks, index, labels


def single_graph_batch(model: PredictorModel, embedding: EmbeddingConfig, graph: WorkflowGraph) -> GraphBatch:
    ensure_valid(graph)
    X = get_encoder(embedding).encode_nodes(graph)
    mask = neighbourhood_mask(graph, model.config.arch, model.config.bidirectional)
    return GraphBatch([X], [mask], [aggregation_matrix(mask, model.config.normalization)])


def gnn_layer_forward(model: PredictorModel, layer_index: int, graph: WorkflowGraph, H_in: np.ndarray) -> np.ndarray:
    """Run one message-passing layer of ``model`` over a single graph.

    Raises:
        ShapeMismatch: If ``H_in`` does not have one row per node and the layer's input width
    """
    if H_in.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"{H_in.shape[0]} feature rows for {graph.num_nodes} nodes")
    mask = neighbourhood_mask(graph, model.config.arch, model.config.bidirectional)
    batch = GraphBatch([H_in], [mask], [aggregation_matrix(mask, model.config.normalization)])
    return model.layer_forward(layer_index, batch, H_in)[0]


def encode_workflow(model: PredictorModel, graph: WorkflowGraph, X: np.ndarray) -> np.ndarray:
    """Graph embedding: ``layers`` rounds of message passing, then mean pooling."""
    if X.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"{X.shape[0]} feature rows for {graph.num_nodes} nodes")
    mask = neighbourhood_mask(graph, model.config.arch, model.config.bidirectional)
    batch = GraphBatch([X], [mask], [aggregation_matrix(mask, model.config.normalization)])
    return model.encode_graphs(batch)[0][0]


def encode_task(model: PredictorModel, embedding: EmbeddingConfig, task: TaskInstance) -> np.ndarray:
    x = get_encoder(embedding).encode(task.text)[None, :]
    return relu(linear_forward(model.proj, x))[0]


def predict(model: PredictorModel, embedding: EmbeddingConfig, graph: WorkflowGraph, task: TaskInstance) -> Prediction:
    """Predict the success probability of running ``graph`` on ``task``."""
    batch = single_graph_batch(model, embedding, graph)
    task_features = get_encoder(embedding).encode(task.text)[None, :]
    logits, cache = model.forward(batch, task_features, np.zeros(1, dtype=np.int64))
    probability = float(sigmoid(logits[0]))
    return Prediction(
        probability=probability,
        label=int(probability >= model.config.threshold),
        graph_embedding=cache["G"][0],
        task_embedding=cache["T"][0],
    )


def predict_graph_on_tasks(model: PredictorModel, embedding: EmbeddingConfig, graph: WorkflowGraph,
                           tasks: Sequence[TaskInstance]) -> np.ndarray:
    """Success probabilities of one graph against many tasks in one pass."""
    batch = single_graph_batch(model, embedding, graph)
    encoder = get_encoder(embedding)
    task_features = np.vstack([encoder.encode(t.text) for t in tasks])
    logits, _ = model.forward(batch, task_features, np.zeros(len(tasks), dtype=np.int64))
    return sigmoid(logits)


def predict_samples(model: PredictorModel, store: FeatureStore, samples: Sequence[LabeledSample],
                    batch_size: int = 256, threads: int = 1) -> np.ndarray:
    """Probabilities for every sample, in sample order."""
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(chunk: Sequence[LabeledSample]) -> np.ndarray:
        batch, tasks, index, _ = store.sample_batch(chunk)
        logits, _ = model.forward(batch, tasks, index)
        return sigmoid(logits)

    if not chunks:
        return np.zeros(0)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    return np.concatenate(parts)


def labels_from_probabilities(probabilities: np.ndarray, threshold: float) -> List[int]:
    return [int(p >= threshold) for p in probabilities]


def _accuracy(predicted: Sequence[int], samples: Sequence[LabeledSample]) -> float:
    return sum(int(p == s.label) for p, s in zip(predicted, samples)) / len(samples)


def train(config: PredictorConfig, model: PredictorModel, train_set: Sequence[LabeledSample],
          val_set: Sequence[LabeledSample], store: FeatureStore) -> TrainResult:
    """Fit ``model`` with minibatch BCE and Adam, keeping the best validation checkpoint.

    Args:
        config: Training settings (epochs, batch size, optimizer)
        model: Model to train; it ends up holding the best checkpoint's parameters
        train_set: Training samples
        val_set: Validation samples used to select the checkpoint
        store: Feature source resolving sample ids to graphs and tasks

    Returns:
        The trained model, per-epoch history and the selected epoch

    Raises:
        EmptySplit: If either split is empty
        NumericError: If a parameter becomes non-finite
    """
    if not train_set:
        raise EmptySplit("training split is empty")
    if not val_set:
        raise EmptySplit("validation split is empty")
    started = time.time()
    state = AdamState(
        lr=config.lr, weight_decay=config.weight_decay, coupled_weight_decay=config.coupled_weight_decay
    )
    shuffle_rng = np.random.default_rng([config.seed, 1])
    history: List[EpochRecord] = []
    best_params, best_epoch, best_accuracy = model.snapshot(), 0, -1.0
    n = len(train_set)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            batch, tasks, index, labels = store.sample_batch(chunk)
            model.zero_grad()
            logits, cache = model.forward(batch, tasks, index)
            loss, dlogits = bce_loss_batch(logits, labels)
            model.backward(cache, dlogits)
            adam_step(state, model.params, model.grads)
            total_loss += loss * len(chunk)
        check_finite(model.params, f"epoch {epoch}")

        predicted = labels_from_probabilities(predict_samples(model, store, val_set), config.threshold)
        val_accuracy = _accuracy(predicted, val_set)
        history.append(EpochRecord(epoch=epoch, loss=total_loss / n, val_accuracy=val_accuracy))
        if val_accuracy > best_accuracy:
            best_params, best_epoch, best_accuracy = model.snapshot(), epoch, val_accuracy
        if epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info(f"Epoch {epoch}/{config.epochs} loss={total_loss / n:.4f} val_accuracy={val_accuracy:.4f}")

    model.load_params(best_params)
    logger.info(f"Selected epoch {best_epoch} with val_accuracy={best_accuracy:.4f}")
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch,
        best_val_accuracy=best_accuracy, seconds=time.time() - started,
    )
