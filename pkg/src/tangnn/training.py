"""Loss, initialization, Adam, the minibatch loop, and evaluation.

Batches and neighbor samples are redrawn every epoch from streams keyed
by (seed, epoch), so a run replays bit-identically under the same seed
while the sampled neighborhoods still vary across epochs.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tasks as tk
from .errors import ConfigError, InputError, NonFiniteError, TrainingAbort
from .graph import Graph, SplitSpec, build_csr
from .layers import (LayerNormParams, LayerParams, Mlp, ModelDims,
                     ModelParams, NeighAggrParams, TopmAggrParams, VARIANTS,
                     forward)
from .topm import init_auxiliary


@dataclass
class TrainConfig:
    variant: str = "tangnn"
    task: str = "node"
    layers: int = 2
    m: int = 30
    fanouts: tuple = (20, 10)
    learning_rate: float = 1e-3
    batch_size: int = 128
    l2_weight: float = 5e-4
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    hidden_dim: int = 64
    d_k: int | None = None
    num_heads: int = 1
    pool: str = "batch"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.task not in tk.TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if len(self.fanouts) != self.layers:
            raise ConfigError(f"need {self.layers} fanouts, got {list(self.fanouts)}")
        if any(f < 1 for f in self.fanouts):
            raise ConfigError("fanouts must be positive")
        if self.m < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("m, batch_size, and max_epochs must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.l2_weight < 0:
            raise ConfigError("l2_weight must be >= 0")
        if self.pool not in ("batch", "full"):
            raise ConfigError(f"pool must be 'batch' or 'full', got {self.pool!r}")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[ad.Tensor]) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.values) for p in params],
                   v=[np.zeros_like(p.values) for p in params])


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> ad.Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def _zeros(cols: int) -> ad.Tensor:
    return ad.parameter(np.zeros((1, cols)))


def _ones(cols: int) -> ad.Tensor:
    return ad.parameter(np.ones((1, cols)))


def _init_mlp(rng, d_in: int, d_hidden: int, d_out: int) -> Mlp:
    return Mlp(w1=_xavier(rng, d_in, d_hidden), b1=_zeros(d_hidden),
               w2=_xavier(rng, d_hidden, d_out), b2=_zeros(d_out))


def init_params(dims: ModelDims, variant: str, seed: int,
                task: str = "node", n_classes: int = 0) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit LayerNorm gains, random unit
    auxiliary vectors; deterministic in the seed."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    d_out = dims.d_out
    d_k = dims.key_dim()
    layers: list[LayerParams] = []
    for i in range(dims.layers):
        d_in = dims.d_in if i == 0 else d_out
        neigh = NeighAggrParams(w=_xavier(rng, 2 * d_in, d_out))
        topm = TopmAggrParams(
            w_q=_xavier(rng, d_in, d_k),
            w_k=_xavier(rng, d_in, d_k),
            w_v=_xavier(rng, d_in, d_k),
            w_o=_xavier(rng, d_k, d_out),
            ffn=_init_mlp(rng, d_out, 4 * d_out, d_out),
            ln1=LayerNormParams(gain=_ones(d_out), bias=_zeros(d_out)),
            ln2=LayerNormParams(gain=_ones(d_out), bias=_zeros(d_out)),
            resid_proj=_xavier(rng, d_in, d_out) if d_in != d_out else None,
            num_heads=dims.num_heads,
        )
        fusion = _init_mlp(rng, 2 * d_out, d_out, d_out)
        mix = None
        if variant in ("nai", "tai") and i >= 1:
            mix = _xavier(rng, 2 * d_out, d_out)
        aux = init_auxiliary(d_in, rng)
        layers.append(LayerParams(neigh=neigh, topm=topm, fusion=fusion,
                                  aux=aux, mix=mix))
    lc_mlp = _init_mlp(rng, dims.layers * d_out, d_out, d_out) if variant == "lc" else None
    head = tk.init_head(task, d_out, n_classes, rng)
    return ModelParams(variant=variant, layers=layers, lc_mlp=lc_mlp,
                       head=head, dims=dims)


def parameter_manifest(params: ModelParams) -> list[tuple[str, ad.Tensor, str]]:
    """All trainable tensors in declaration order, tagged weight/bias/gain."""
    out: list[tuple[str, ad.Tensor, str]] = []
    for i, layer in enumerate(params.layers):
        pre = f"layer{i}"
        out.append((f"{pre}.neigh.w", layer.neigh.w, "weight"))
        t = layer.topm
        out.append((f"{pre}.topm.w_q", t.w_q, "weight"))
        out.append((f"{pre}.topm.w_k", t.w_k, "weight"))
        out.append((f"{pre}.topm.w_v", t.w_v, "weight"))
        out.append((f"{pre}.topm.w_o", t.w_o, "weight"))
        if t.resid_proj is not None:
            out.append((f"{pre}.topm.resid_proj", t.resid_proj, "weight"))
        out.append((f"{pre}.topm.ffn.w1", t.ffn.w1, "weight"))
        out.append((f"{pre}.topm.ffn.b1", t.ffn.b1, "bias"))
        out.append((f"{pre}.topm.ffn.w2", t.ffn.w2, "weight"))
        out.append((f"{pre}.topm.ffn.b2", t.ffn.b2, "bias"))
        out.append((f"{pre}.topm.ln1.gain", t.ln1.gain, "gain"))
        out.append((f"{pre}.topm.ln1.bias", t.ln1.bias, "bias"))
        out.append((f"{pre}.topm.ln2.gain", t.ln2.gain, "gain"))
        out.append((f"{pre}.topm.ln2.bias", t.ln2.bias, "bias"))
        out.append((f"{pre}.fusion.w1", layer.fusion.w1, "weight"))
        out.append((f"{pre}.fusion.b1", layer.fusion.b1, "bias"))
        out.append((f"{pre}.fusion.w2", layer.fusion.w2, "weight"))
        out.append((f"{pre}.fusion.b2", layer.fusion.b2, "bias"))
        if layer.mix is not None:
            out.append((f"{pre}.mix", layer.mix, "weight"))
    if params.lc_mlp is not None:
        out.append(("lc_mlp.w1", params.lc_mlp.w1, "weight"))
        out.append(("lc_mlp.b1", params.lc_mlp.b1, "bias"))
        out.append(("lc_mlp.w2", params.lc_mlp.w2, "weight"))
        out.append(("lc_mlp.b2", params.lc_mlp.b2, "bias"))
    out.extend(tk.head_parameters(params.head))
    return out


def trainable_tensors(params: ModelParams) -> list[ad.Tensor]:
    return [t for _, t, _ in parameter_manifest(params)]


# ---------------------------------------------------------------------------
# losses


def _validate_one_hot(q: np.ndarray) -> None:
    if q.ndim != 2:
        raise InputError("targets must be a matrix of one-hot rows")
    binary = (q == 0) | (q == 1)
    if not binary.all() or not np.all(q.sum(axis=1) == 1):
        raise InputError("targets must be exactly one-hot rows")


def loss(p: ad.Tensor, q: np.ndarray) -> ad.Tensor:
    """Mean over rows of -sum_c [q log p + (1-q) log(1-p)].

    ``p`` holds probability rows (epsilon-guarded inside the logs); ``q``
    holds one-hot target rows.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != p.shape:
        raise InputError(f"loss shapes differ: {p.shape} vs {q.shape}")
    _validate_one_hot(q)
    return _cross_entropy_terms(p, q)


def binary_cross_entropy(p: ad.Tensor, y: np.ndarray) -> ad.Tensor:
    """Same objective for single-column probabilities with 0/1 targets."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape != p.shape:
        raise InputError(f"bce shapes differ: {p.shape} vs {y.shape}")
    if not (((y == 0) | (y == 1)).all()):
        raise InputError("binary targets must be 0/1")
    return _cross_entropy_terms(p, y)


def _cross_entropy_terms(p: ad.Tensor, q: np.ndarray) -> ad.Tensor:
    n_rows = p.shape[0]
    ones = np.ones(p.shape)
    one_minus_p = ad.add(ad.scale(p, -1.0), ad.constant(ones))
    hit = ad.elementwise_mul(ad.constant(q), ad.log(p))
    miss = ad.elementwise_mul(ad.constant(ones - q), ad.log(one_minus_p))
    return ad.scale(ad.sum_all(ad.add(hit, miss)), -1.0 / n_rows)


def mse(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = ad.add(pred, ad.constant(-target))
    return ad.scale(ad.sum_all(ad.elementwise_mul(diff, diff)), 1.0 / pred.shape[0])


def l2_penalty(params: ModelParams, weight: float) -> ad.Tensor | None:
    """weight * sum of squared entries over all weight matrices (biases and
    LayerNorm parameters excluded)."""
    if weight == 0:
        return None
    total = None
    for _, tensor, kind in parameter_manifest(params):
        if kind != "weight":
            continue
        sq = ad.sum_all(ad.elementwise_mul(tensor, tensor))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, weight) if total is not None else None


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: list[ad.Tensor], grads: list[np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    if len(params) != len(grads):
        raise InputError("adam_step: params/grads length mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError("NaN/Inf gradient in adam_step")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# fit


def _model_dims(cfg: TrainConfig, d_in: int) -> ModelDims:
    return ModelDims(d_in=d_in, d_out=cfg.hidden_dim, layers=cfg.layers,
                     d_k=cfg.d_k, num_heads=cfg.num_heads)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _snapshot(params: ModelParams) -> list[np.ndarray]:
    return [t.values.copy() for t in trainable_tensors(params)]


def _restore(params: ModelParams, snapshot: list[np.ndarray]) -> None:
    for t, values in zip(trainable_tensors(params), snapshot):
        t.values = values.copy()


def message_graph_without(graph: Graph, removed_edges: np.ndarray) -> Graph:
    """Copy of the graph with the given edge rows removed (no-leak eval)."""
    keep = np.ones(graph.num_edges, dtype=bool)
    keep[removed_edges] = False
    edges = graph.edges[keep]
    offsets, targets = build_csr(edges, graph.num_nodes)
    return Graph(num_nodes=graph.num_nodes, edges=edges, directed=graph.directed,
                 offsets=offsets, targets=targets, features=graph.features,
                 node_labels=graph.node_labels,
                 edge_labels=graph.edge_labels[keep] if graph.edge_labels is not None else None)


def _sample_negative_edges(graph: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-edges (unordered), rejected against the adjacency."""
    existing = set(map(tuple, np.sort(graph.edges, axis=1).tolist()))
    out = []
    guard = 0
    while len(out) < count:
        u, v = rng.integers(0, graph.num_nodes, size=2)
        guard += 1
        if guard > 200 * max(count, 1):
            raise ConfigError("negative sampling stalled; graph too dense")
        if u == v:
            continue
        key = (min(int(u), int(v)), max(int(u), int(v)))
        if key in existing:
            continue
        out.append((int(u), int(v)))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


class _TaskRunner:
    """Task-specific batching, loss, and validation shared by fit/evaluate."""

    def __init__(self, dataset, split: SplitSpec, cfg: TrainConfig):
        self.cfg = cfg
        self.split = split
        if cfg.task == "regression":
            if isinstance(dataset, Graph):
                raise ConfigError("graph regression expects a list of graphs")
            self.graphs: list[Graph] = list(dataset)
            self.graph = None
            d_in = self.graphs[0].feature_dim
            n_classes = 1
        else:
            if not isinstance(dataset, Graph):
                raise ConfigError(f"task {cfg.task} expects a single graph")
            self.graph = dataset
            self.graphs = []
            d_in = dataset.feature_dim
            if cfg.task == "node":
                if dataset.node_labels is None:
                    raise ConfigError("node task requires node labels")
                n_classes = int(dataset.node_labels.max()) + 1
            elif cfg.task == "sentiment":
                if dataset.edge_labels is None:
                    raise ConfigError("sentiment task requires edge labels")
                n_classes = int(dataset.edge_labels.max()) + 1
                if n_classes != 3:
                    n_classes = max(n_classes, 3)
            else:
                n_classes = 0
        self.d_in = d_in
        self.n_classes = n_classes
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
        train = np.asarray(split.train_idx)
        n_val = max(1, int(round(0.1 * train.shape[0]))) if train.shape[0] > 1 else 0
        perm = rng.permutation(train.shape[0])
        self.val_idx = np.sort(train[perm[:n_val]])
        self.fit_idx = np.sort(train[perm[n_val:]])
        if self.fit_idx.shape[0] == 0:
            raise ConfigError("training split is empty after validation holdout")
        if cfg.task == "link":
            # Test edges leave the message-passing graph entirely.
            self.message_graph = message_graph_without(self.graph, np.asarray(split.test_idx))
            neg_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
            self.train_negatives = _sample_negative_edges(
                self.graph, self.fit_idx.shape[0], neg_rng)
            self.val_negatives = _sample_negative_edges(
                self.graph, max(self.val_idx.shape[0], 1), neg_rng)
            self.test_negatives = _sample_negative_edges(
                self.graph, max(np.asarray(split.test_idx).shape[0], 1), neg_rng)
        else:
            self.message_graph = self.graph

    # -- batching ----------------------------------------------------------

    def batches(self, rng: np.random.Generator) -> list[np.ndarray]:
        idx = self.fit_idx
        order = rng.permutation(idx.shape[0])
        shuffled = idx[order]
        size = self.cfg.batch_size
        return [shuffled[i:i + size] for i in range(0, shuffled.shape[0], size)]

    def batch_loss(self, batch: np.ndarray, rng: np.random.Generator) -> ad.Tensor:
        cfg = self.cfg
        if cfg.task == "node":
            nodes = batch
            result = forward(self.graph, nodes, self.params, cfg, rng=rng)
            probs = tk.node_classify(result.final, self.params.head)
            targets = _one_hot(self.graph.node_labels[nodes], self.n_classes)
            return loss(probs, targets)
        if cfg.task == "link":
            pos = self.graph.edges[batch]
            neg_pick = rng.integers(0, self.train_negatives.shape[0], size=batch.shape[0])
            neg = self.train_negatives[neg_pick]
            pairs = np.concatenate([pos, neg], axis=0)
            y = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
            nodes = np.unique(pairs)
            result = forward(self.message_graph, nodes, self.params, cfg, rng=rng)
            u = np.searchsorted(nodes, pairs[:, 0])
            v = np.searchsorted(nodes, pairs[:, 1])
            scores = tk.link_scores(ad.gather_rows(result.final, u),
                                    ad.gather_rows(result.final, v))
            return binary_cross_entropy(scores, y)
        if cfg.task == "sentiment":
            pairs = self.graph.edges[batch]
            labels = self.graph.edge_labels[batch]
            nodes = np.unique(pairs)
            result = forward(self.graph, nodes, self.params, cfg, rng=rng)
            u = np.searchsorted(nodes, pairs[:, 0])
            v = np.searchsorted(nodes, pairs[:, 1])
            probs = tk.edge_sentiment(ad.gather_rows(result.final, u),
                                      ad.gather_rows(result.final, v),
                                      self.params.head)
            return loss(probs, _one_hot(labels, self.n_classes))
        # regression: disjoint union of the batch graphs
        union, pool = disjoint_union([self.graphs[i] for i in batch])
        result = forward(union, np.arange(union.num_nodes), self.params, cfg, rng=rng)
        preds = tk.graph_regress_batched(result.final, pool, self.params.head)
        targets = np.asarray([self.graphs[i].graph_target for i in batch])
        return mse(preds, targets)

    # -- validation / evaluation -------------------------------------------

    def metric_name(self) -> str:
        return {"node": "accuracy", "link": "auroc",
                "sentiment": "accuracy", "regression": "mae"}[self.cfg.task]

    def higher_is_better(self) -> bool:
        return self.cfg.task != "regression"

    def evaluate(self, idx: np.ndarray, negatives: np.ndarray | None = None) -> dict:
        """Deterministic full-graph inference metrics on the given entities."""
        cfg = self.cfg
        if idx.shape[0] == 0:
            raise ConfigError("cannot evaluate an empty entity set")
        if cfg.task == "regression":
            preds = []
            targets = []
            for i in idx:
                g = self.graphs[i]
                result = forward(g, np.arange(g.num_nodes), self.params, cfg, sampled=False)
                pred = tk.graph_regress(result.final, self.params.head)
                preds.append(float(pred.values[0, 0]))
                targets.append(g.graph_target)
            return {"mae": tk.mae(preds, targets)}
        emb = forward(self.message_graph, np.arange(self.message_graph.num_nodes),
                      self.params, cfg, sampled=False).final
        if cfg.task == "node":
            probs = tk.node_classify(emb, self.params.head).values
            rows = probs[idx]
            labels = self.graph.node_labels[idx]
            preds = rows.argmax(axis=1)
            out = {"accuracy": tk.accuracy(preds, labels),
                   "f1_micro": tk.f1_micro(preds, labels)}
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    out["auroc"] = tk.auroc_ovr(rows, labels)
                except InputError:
                    pass
            return out
        if cfg.task == "link":
            pos = self.graph.edges[idx]
            neg = negatives if negatives is not None else self.test_negatives
            pairs = np.concatenate([pos, neg], axis=0)
            y = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
            scores = _pair_scores(emb.values, pairs)
            return {"auroc": tk.binary_auroc(scores, y.astype(bool)),
                    "accuracy": tk.accuracy((scores >= 0.5).astype(int), y.astype(int))}
        # sentiment
        pairs = self.graph.edges[idx]
        labels = self.graph.edge_labels[idx]
        u_rows = ad.constant(emb.values[pairs[:, 0]])
        v_rows = ad.constant(emb.values[pairs[:, 1]])
        probs = tk.edge_sentiment(u_rows, v_rows, self.params.head).values
        preds = probs.argmax(axis=1)
        return {"accuracy": tk.accuracy(preds, labels),
                "f1_micro": tk.f1_micro(preds, labels)}

    def validation_metric(self) -> float:
        if self.val_idx.shape[0] == 0:
            return float("nan")
        if self.cfg.task == "link":
            metrics = self.evaluate(self.val_idx, negatives=self.val_negatives)
        else:
            metrics = self.evaluate(self.val_idx)
        return metrics[self.metric_name()]


def _pair_scores(embeddings: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    dots = (embeddings[pairs[:, 0]] * embeddings[pairs[:, 1]]).sum(axis=1)
    return np.where(dots >= 0, 1.0 / (1.0 + np.exp(-np.abs(dots))),
                    np.exp(-np.abs(dots)) / (1.0 + np.exp(-np.abs(dots))))


def disjoint_union(graphs: list[Graph]) -> tuple[Graph, np.ndarray]:
    """Merge graphs with offset node ids; returns the union and the
    (num_graphs x total_nodes) mean-pool matrix."""
    sizes = [g.num_nodes for g in graphs]
    total = int(np.sum(sizes))
    offset = 0
    edge_blocks = []
    feat_blocks = []
    pool = np.zeros((len(graphs), total))
    for gi, g in enumerate(graphs):
        if g.num_edges:
            edge_blocks.append(g.edges + offset)
        feat_blocks.append(g.features)
        pool[gi, offset:offset + g.num_nodes] = 1.0 / g.num_nodes
        offset += g.num_nodes
    edges = (np.concatenate(edge_blocks, axis=0) if edge_blocks
             else np.zeros((0, 2), dtype=np.int64))
    features = np.concatenate(feat_blocks, axis=0)
    offsets, targets = build_csr(edges, total)
    union = Graph(num_nodes=total, edges=edges, directed=False, offsets=offsets,
                  targets=targets, features=features)
    return union, pool


def fit(dataset, split: SplitSpec, cfg: TrainConfig) -> tuple[ModelParams, list[LossReport]]:
    """Train to convergence; returns the best-validation parameters.

    Stops when the epoch-mean loss changes by less than ``min_delta`` for
    ``patience`` consecutive epochs, or at ``max_epochs``.  A non-finite
    loss or gradient aborts with the last good parameters attached to the
    raised :class:`TrainingAbort`.
    """
    cfg.validate()
    runner = _TaskRunner(dataset, split, cfg)
    dims = _model_dims(cfg, runner.d_in)
    params = init_params(dims, cfg.variant, cfg.seed, task=cfg.task,
                         n_classes=runner.n_classes)
    runner.params = params
    trainables = trainable_tensors(params)
    state = OptimizerState.for_params(trainables)
    reports: list[LossReport] = []
    best_metric = None
    best_snapshot = _snapshot(params)
    last_good = _snapshot(params)
    prev_loss = None
    stall = 0
    higher_better = runner.higher_is_better()

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        # Fresh batches and neighbor samples every epoch (sample-invariance
        # is what keeps the fixed-fanout estimator from being memorized),
        # drawn from an epoch-keyed stream so runs replay exactly.
        epoch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303, epoch]))
        batches = runner.batches(epoch_rng)
        total_loss = 0.0
        total_examples = 0
        try:
            for batch in batches:
                for t in trainables:
                    t.grad = None
                with ad.Tape() as tape:
                    batch_loss = runner.batch_loss(batch, epoch_rng)
                    penalty = l2_penalty(params, cfg.l2_weight)
                    objective = batch_loss if penalty is None else ad.add(batch_loss, penalty)
                tape.backward(objective)
                adam_step(trainables, [t.grad for t in trainables], state, cfg.learning_rate)
                total_loss += float(batch_loss.values[0, 0]) * batch.shape[0]
                total_examples += batch.shape[0]
        except NonFiniteError as exc:
            _restore(params, last_good)
            raise TrainingAbort(f"epoch {epoch}: {exc}", params=params,
                                reports=reports) from exc
        last_good = _snapshot(params)
        epoch_loss = total_loss / total_examples
        val_metric = runner.validation_metric()
        seconds = time.perf_counter() - t0
        reports.append(LossReport(epoch=epoch, train_loss=epoch_loss,
                                  val_metric=val_metric, seconds=seconds))
        if not np.isnan(val_metric):
            better = (best_metric is None
                      or (val_metric > best_metric if higher_better
                          else val_metric < best_metric))
            if better:
                best_metric = val_metric
                best_snapshot = _snapshot(params)
        else:
            best_snapshot = _snapshot(params)
        if prev_loss is not None and abs(epoch_loss - prev_loss) < cfg.min_delta:
            stall += 1
            if stall >= cfg.patience:
                break
        else:
            stall = 0
        prev_loss = epoch_loss
    _restore(params, best_snapshot)
    return params, reports


def evaluate(dataset, split: SplitSpec, params: ModelParams, cfg: TrainConfig,
             which: str = "test") -> dict:
    """Metrics of a trained model on the train or test side of a split."""
    cfg.validate()
    runner = _TaskRunner(dataset, split, cfg)
    runner.params = params
    idx = np.asarray(split.test_idx if which == "test" else split.train_idx)
    return runner.evaluate(idx)
