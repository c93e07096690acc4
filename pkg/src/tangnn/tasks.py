"""Task heads over final embeddings, and the evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError
from .layers import Mlp, mlp_apply

TASKS = ("node", "link", "sentiment", "regression")


@dataclass
class TaskHead:
    kind: str
    n_classes: int = 0
    w: ad.Tensor | None = None      # linear heads (node, regression)
    b: ad.Tensor | None = None
    mlp: Mlp | None = None          # sentiment pair head


def node_classify(embeddings: ad.Tensor, head: TaskHead) -> ad.Tensor:
    """Class probabilities: softmax over a linear map of the embeddings."""
    return ad.softmax_rows(ad.add(ad.matmul(embeddings, head.w), head.b))


def link_score(g_u, g_v) -> float:
    """Probability that an edge joins two embeddings: sigmoid of their dot product."""
    g_u = np.asarray(g_u, dtype=np.float64).ravel()
    g_v = np.asarray(g_v, dtype=np.float64).ravel()
    if g_u.shape != g_v.shape:
        raise InputError("link_score embeddings must share a dimension")
    x = float(g_u @ g_v)
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def link_scores(u_rows: ad.Tensor, v_rows: ad.Tensor) -> ad.Tensor:
    """Batched link probabilities as a column tensor (training path)."""
    d = u_rows.shape[1]
    dots = ad.matmul(ad.elementwise_mul(u_rows, v_rows), ad.constant(np.ones((d, 1))))
    return ad.sigmoid(dots)


def edge_sentiment(g_u: ad.Tensor, g_v: ad.Tensor, head: TaskHead) -> ad.Tensor:
    """3-class probabilities for directed edges; order is (citing || cited)."""
    return ad.softmax_rows(mlp_apply(head.mlp, ad.concat_cols(g_u, g_v)))


def graph_regress(node_embeddings: ad.Tensor, head: TaskHead) -> ad.Tensor:
    """Scalar prediction: linear head over the mean-pooled node embeddings."""
    if node_embeddings.shape[0] < 1:
        raise InputError("graph_regress needs at least one node")
    pooled = ad.mean_rows(node_embeddings)
    return ad.add(ad.matmul(pooled, head.w), head.b)


def graph_regress_batched(node_embeddings: ad.Tensor, pool_matrix: np.ndarray,
                          head: TaskHead) -> ad.Tensor:
    """Per-graph predictions via a constant (graphs x nodes) averaging matrix."""
    pooled = ad.matmul(ad.constant(pool_matrix), node_embeddings)
    return ad.add(ad.matmul(pooled, head.w), head.b)


def init_head(kind: str, d_out: int, n_classes: int, rng: np.random.Generator) -> TaskHead:
    """Xavier-initialized head weights; biases zero."""
    def xavier(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    if kind == "node":
        if n_classes < 2:
            raise ConfigError("node classification needs >= 2 classes")
        return TaskHead(kind=kind, n_classes=n_classes,
                        w=xavier(d_out, n_classes),
                        b=ad.parameter(np.zeros((1, n_classes))))
    if kind == "link":
        return TaskHead(kind=kind)
    if kind == "sentiment":
        n_classes = 3
        return TaskHead(kind=kind, n_classes=n_classes,
                        mlp=Mlp(w1=xavier(2 * d_out, d_out),
                                b1=ad.parameter(np.zeros((1, d_out))),
                                w2=xavier(d_out, n_classes),
                                b2=ad.parameter(np.zeros((1, n_classes)))))
    if kind == "regression":
        return TaskHead(kind=kind, n_classes=1,
                        w=xavier(d_out, 1), b=ad.parameter(np.zeros((1, 1))))
    raise ConfigError(f"unknown task {kind!r}")


def head_parameters(head: TaskHead) -> list[tuple[str, ad.Tensor, str]]:
    out: list[tuple[str, ad.Tensor, str]] = []
    if head.w is not None:
        out.append(("head.w", head.w, "weight"))
        out.append(("head.b", head.b, "bias"))
    if head.mlp is not None:
        out.append(("head.mlp.w1", head.mlp.w1, "weight"))
        out.append(("head.mlp.b1", head.mlp.b1, "bias"))
        out.append(("head.mlp.w2", head.mlp.w2, "weight"))
        out.append(("head.mlp.b2", head.mlp.b2, "bias"))
    return out


# ---------------------------------------------------------------------------
# metrics


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise InputError("accuracy: length mismatch")
    if preds.size == 0:
        raise InputError("accuracy of an empty set")
    return float((preds == labels).mean())


def f1_micro(preds, labels) -> float:
    """Micro-averaged F1 from pooled per-class TP/FP/FN counts."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise InputError("f1_micro: length mismatch")
    classes = np.union1d(preds, labels)
    tp = fp = fn = 0
    for c in classes:
        tp += int(((preds == c) & (labels == c)).sum())
        fp += int(((preds == c) & (labels != c)).sum())
        fn += int(((preds != c) & (labels == c)).sum())
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auroc(scores, positives) -> float:
    """Rank-statistic AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC needs both positives and negatives")
    ranks = _midranks(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_ovr(prob_rows, labels) -> float:
    """Macro average of one-vs-rest AUROCs over the classes present."""
    probs = np.asarray(prob_rows, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise InputError("auroc_ovr: length mismatch")
    aucs = []
    for c in range(probs.shape[1]):
        mask = labels == c
        n_pos = int(mask.sum())
        if n_pos == 0 or n_pos == labels.shape[0]:
            warnings.warn(f"class {c} absent from one side; excluded from macro AUROC",
                          stacklevel=2)
            continue
        aucs.append(binary_auroc(probs[:, c], mask))
    if not aucs:
        raise InputError("no class had both positives and negatives")
    return float(np.mean(aucs))


def mae(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise InputError("mae: length mismatch")
    return float(np.abs(preds - targets).mean())
