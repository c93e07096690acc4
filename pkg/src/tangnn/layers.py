"""TANGNN layers: sampled neighborhood aggregation fused with Top-m attention.

Each layer runs two components over the previous layer's embeddings:

* neighborhood aggregation — mean of a fixed-fanout neighbor sample,
  concatenated with the node's own row, pushed through a sigmoid-activated
  linear map, then L2-normalized;
* Top-m attention — scaled dot-product attention from each node to the
  members of its rank window (see :mod:`tangnn.topm`), wrapped in the
  post-norm residual/FFN block.

The five wiring variants differ only in how the two component streams
feed the next layer and how the final embedding is assembled:

* ``tangnn``  — per-layer fusion MLP; fused output feeds both components.
* ``lc``      — as ``tangnn`` plus a final MLP over all layers' fused outputs.
* ``flc``     — the two streams run independently; fused only at the end.
* ``nai``     — next neighborhood input is the projected concatenation of
  both streams; the attention stream feeds itself.
* ``tai``     — mirror image of ``nai``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from . import topm as tm
from .errors import ConfigError, ShapeError
from .graph import Graph, sample_neighbors

VARIANTS = ("tangnn", "lc", "flc", "nai", "tai")


@dataclass
class ModelDims:
    d_in: int
    d_out: int = 64
    layers: int = 2
    d_k: int | None = None      # key/query width; defaults to d_out
    num_heads: int = 1

    def key_dim(self) -> int:
        dk = self.d_k if self.d_k is not None else self.d_out
        if dk % self.num_heads != 0:
            raise ConfigError(f"d_k={dk} not divisible by num_heads={self.num_heads}")
        return dk


@dataclass
class NeighAggrParams:
    w: ad.Tensor                # (2 * d_in, d_out)


@dataclass
class Mlp:
    """Two-layer perceptron with relu inner activation."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


def mlp_apply(mlp: Mlp, x: ad.Tensor) -> ad.Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, mlp.w1), mlp.b1))
    return ad.add(ad.matmul(hidden, mlp.w2), mlp.b2)


@dataclass
class LayerNormParams:
    gain: ad.Tensor             # (1, d)
    bias: ad.Tensor             # (1, d)


@dataclass
class TopmAggrParams:
    w_q: ad.Tensor              # (d_in, d_k)
    w_k: ad.Tensor
    w_v: ad.Tensor
    w_o: ad.Tensor              # (d_k, d_out)
    ffn: Mlp                    # d_out -> 4*d_out -> d_out
    ln1: LayerNormParams
    ln2: LayerNormParams
    resid_proj: ad.Tensor | None = None   # (d_in, d_out) when dims differ
    num_heads: int = 1


@dataclass
class LayerParams:
    neigh: NeighAggrParams
    topm: TopmAggrParams
    fusion: Mlp                 # (2*d_out) -> d_out
    aux: np.ndarray             # auxiliary unit vector, not trained
    mix: ad.Tensor | None = None  # nai/tai input projection (2*d_out -> d_out)


@dataclass
class ModelParams:
    variant: str
    layers: list[LayerParams]
    lc_mlp: Mlp | None
    head: Any
    dims: ModelDims


@dataclass
class ForwardResult:
    """Embeddings for the requested batch, plus per-layer streams for inspection."""

    final: ad.Tensor
    per_layer: list[ad.Tensor]      # fused outputs g^1..g^L (tangnn / lc only)
    h_layers: list[ad.Tensor]       # neighborhood stream, batch rows
    hp_layers: list[ad.Tensor]      # attention stream, batch rows
    batch: np.ndarray


# ---------------------------------------------------------------------------
# component forwards


def neigh_aggr_forward(g_prev: ad.Tensor, batch, graph: Graph,
                       params: NeighAggrParams, fanout: int,
                       rng: np.random.Generator) -> ad.Tensor:
    """Sampled mean aggregation for ``batch``; ``g_prev`` is indexed by node id."""
    batch = np.asarray(batch, dtype=np.int64)
    if g_prev.shape[0] != graph.num_nodes:
        raise ShapeError("neigh_aggr_forward expects embeddings for every node")
    samples = _sample_block(graph, batch, fanout, rng)
    return _neigh_block(g_prev, batch, samples, params)


def _sample_block(graph: Graph, batch: np.ndarray, fanout: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Fixed-width (len(batch), fanout) sample matrix; isolated nodes repeat themselves."""
    out = np.empty((batch.shape[0], fanout), dtype=np.int64)
    for j, v in enumerate(batch):
        s = sample_neighbors(graph, int(v), fanout, rng).sampled
        if s.shape[0] < fanout:
            s = np.full(fanout, s[0], dtype=np.int64)
        out[j] = s
    return out


def _neigh_block(g_prev: ad.Tensor, self_idx: np.ndarray, sample_idx: np.ndarray,
                 params: NeighAggrParams) -> ad.Tensor:
    fanout = sample_idx.shape[1]
    own = ad.gather_rows(g_prev, self_idx)
    neigh = ad.gather_rows(g_prev, sample_idx.ravel())
    neigh_mean = ad.segment_mean_rows(neigh, fanout)
    z = ad.matmul(ad.concat_cols(own, neigh_mean), params.w)
    return ad.l2_normalize_rows(ad.sigmoid(z))


def _neigh_full(g_prev: ad.Tensor, graph: Graph, params: NeighAggrParams) -> ad.Tensor:
    """Deterministic variant: mean over the full neighborhood (inference path)."""
    neigh_mean = ad.csr_mean_rows(g_prev, graph.offsets, graph.targets)
    z = ad.matmul(ad.concat_cols(g_prev, neigh_mean), params.w)
    return ad.l2_normalize_rows(ad.sigmoid(z))


def scaled_attention(window_rows: ad.Tensor, center_row: ad.Tensor,
                     params: TopmAggrParams, return_weights: bool = False):
    """Attention from one center to its window members.

    Query comes from the center's own projection; keys and values from
    the window rows. Scores are scaled by sqrt of the per-head key width.
    """
    if center_row.shape[0] != 1:
        raise ShapeError("center_row must be a single row")
    q = ad.matmul(center_row, params.w_q)
    k = ad.matmul(window_rows, params.w_k)
    v = ad.matmul(window_rows, params.w_v)
    dk = params.w_q.shape[1]
    heads = params.num_heads
    hd = dk // heads
    outs = []
    weights = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * hd, (h + 1) * hd) if heads > 1 else q
        kh = ad.slice_cols(k, h * hd, (h + 1) * hd) if heads > 1 else k
        vh = ad.slice_cols(v, h * hd, (h + 1) * hd) if heads > 1 else v
        scores = ad.scale(ad.matmul(qh, _transpose(kh)), 1.0 / np.sqrt(hd))
        attn = ad.softmax_rows(scores)
        weights.append(attn)
        outs.append(ad.matmul(attn, vh))
    head_cat = outs[0] if heads == 1 else ad.concat_cols(*outs)
    out = ad.matmul(head_cat, params.w_o)
    if return_weights:
        return out, weights
    return out


def _transpose(x: ad.Tensor) -> ad.Tensor:
    """Transpose via gather/reshape-free constant trick: only for small matrices."""
    rows, cols = x.shape
    flat = ad.reshape(x, rows * cols, 1)
    idx = (np.arange(rows * cols).reshape(rows, cols).T).ravel()
    return ad.reshape(ad.gather_rows(flat, idx), cols, rows)


def _attention_block(g_prev: ad.Tensor, index: tm.TopmIndex, centers: np.ndarray,
                     params: TopmAggrParams) -> ad.Tensor:
    """Batched window attention for ``centers`` (local pool indices)."""
    if index.windows.shape[1] == 0:
        windows = centers[:, None]          # degenerate pool: attend to self
    else:
        windows = index.windows[centers]
    b, w = windows.shape
    win_flat = windows.ravel()
    q_all = ad.matmul(ad.gather_rows(g_prev, centers), params.w_q)
    k_pool = ad.matmul(g_prev, params.w_k)
    v_pool = ad.matmul(g_prev, params.w_v)
    kw = ad.gather_rows(k_pool, win_flat)
    vw = ad.gather_rows(v_pool, win_flat)
    dk = params.w_q.shape[1]
    heads = params.num_heads
    hd = dk // heads
    rep = np.repeat(np.arange(b), w)
    outs = []
    for h in range(heads):
        qh = ad.slice_cols(q_all, h * hd, (h + 1) * hd) if heads > 1 else q_all
        kh = ad.slice_cols(kw, h * hd, (h + 1) * hd) if heads > 1 else kw
        vh = ad.slice_cols(vw, h * hd, (h + 1) * hd) if heads > 1 else vw
        q_rep = ad.gather_rows(qh, rep)
        scores = ad.matmul(ad.elementwise_mul(q_rep, kh), ad.constant(np.ones((hd, 1))))
        scores = ad.scale(ad.reshape(scores, b, w), 1.0 / np.sqrt(hd))
        attn = ad.softmax_rows(scores)
        a_cols = ad.matmul(ad.reshape(attn, b * w, 1), ad.constant(np.ones((1, hd))))
        weighted = ad.elementwise_mul(a_cols, vh)
        outs.append(ad.scale(ad.segment_mean_rows(weighted, w), float(w)))
    head_cat = outs[0] if heads == 1 else ad.concat_cols(*outs)
    return ad.matmul(head_cat, params.w_o)


def topm_aggr_forward(g_prev: ad.Tensor, index: tm.TopmIndex,
                      params: TopmAggrParams, centers=None) -> ad.Tensor:
    """Window attention followed by the post-norm residual + FFN block."""
    if centers is None:
        centers = np.arange(g_prev.shape[0])
    centers = np.asarray(centers, dtype=np.int64)
    attn_out = _attention_block(g_prev, index, centers, params)
    own = ad.gather_rows(g_prev, centers)
    residual = own if params.resid_proj is None else ad.matmul(own, params.resid_proj)
    if residual.shape[1] != attn_out.shape[1]:
        raise ShapeError("residual width differs from attention output; "
                         "resid_proj is required when d_in != d_out")
    h2 = ad.layer_norm_rows(ad.add(residual, attn_out),
                            params.ln1.gain, params.ln1.bias)
    h3 = mlp_apply(params.ffn, h2)
    return ad.layer_norm_rows(ad.add(h3, h2), params.ln2.gain, params.ln2.bias)


def fuse(h: ad.Tensor, hp: ad.Tensor, mlp: Mlp) -> ad.Tensor:
    """Per-layer fusion of the two component streams."""
    if h.shape[0] != hp.shape[0]:
        raise ShapeError("fuse: row sets differ")
    return mlp_apply(mlp, ad.concat_cols(h, hp))


# ---------------------------------------------------------------------------
# whole-model forward


@dataclass
class Frontier:
    """Per-layer node sets of a sampled minibatch computation graph.

    ``levels[i]`` holds the nodes whose layer-``i`` embeddings are needed
    (``levels[L]`` is the batch itself); ``samples[i]`` holds, for every
    node of ``levels[i]``, ``fanout_i`` local row indices into
    ``levels[i-1]``; ``self_idx[i]`` locates ``levels[i]`` inside
    ``levels[i-1]``.
    """

    levels: list[np.ndarray]
    samples: list[np.ndarray | None]
    self_idx: list[np.ndarray | None]


def build_frontier(graph: Graph, batch, fanouts, rng: np.random.Generator,
                   full: bool = False) -> Frontier:
    """Sample the computation graph of a batch, outermost layer first.

    With ``full=True`` every level is the whole node set (full-graph
    candidate pool); neighbor samples are still drawn per node.
    """
    batch = np.asarray(batch, dtype=np.int64)
    n_layers = len(fanouts)
    levels: list = [None] * (n_layers + 1)
    samples: list = [None] * (n_layers + 1)
    self_idx: list = [None] * (n_layers + 1)
    if full:
        everyone = np.arange(graph.num_nodes)
        for i in range(n_layers, 0, -1):
            levels[i] = everyone
            samples[i] = _sample_block(graph, everyone, fanouts[i - 1], rng)
            self_idx[i] = everyone
        levels[0] = everyone
        return Frontier(levels=levels, samples=samples, self_idx=self_idx)
    levels[n_layers] = batch
    for i in range(n_layers, 0, -1):
        current = levels[i]
        sample_global = _sample_block(graph, current, fanouts[i - 1], rng)
        prev = np.unique(np.concatenate([current, sample_global.ravel()]))
        levels[i - 1] = prev
        samples[i] = np.searchsorted(prev, sample_global)
        self_idx[i] = np.searchsorted(prev, current)
    return Frontier(levels=levels, samples=samples, self_idx=self_idx)


def forward(graph: Graph, batch, params: ModelParams, cfg,
            rng: np.random.Generator | None = None, sampled: bool = True,
            frontier: Frontier | None = None) -> ForwardResult:
    """Run the variant's dataflow over a batch of center nodes.

    ``sampled=True`` draws fixed-fanout neighbor samples (training mode;
    requires ``rng`` unless a prebuilt ``frontier`` is supplied).
    ``sampled=False`` uses the full-neighborhood mean and the full-graph
    candidate pool — the deterministic inference path.
    """
    variant = params.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    batch = np.asarray(batch, dtype=np.int64)
    n_layers = len(params.layers)
    everyone = np.arange(graph.num_nodes)

    if sampled:
        full_pool = getattr(cfg, "pool", "batch") == "full"
        if frontier is None:
            if rng is None:
                raise ConfigError("sampled forward needs an rng or a frontier")
            frontier = build_frontier(graph, batch, cfg.fanouts, rng, full=full_pool)
        levels, samples, self_idx = frontier.levels, frontier.samples, frontier.self_idx
    else:
        levels = [everyone] * (n_layers + 1)
        samples = [None] * (n_layers + 1)
        self_idx = [None] * (n_layers + 1)

    na_in = tm_in = ad.constant(graph.features[levels[0]])
    g_list: list[ad.Tensor] = []
    h_list: list[ad.Tensor] = []
    hp_list: list[ad.Tensor] = []
    h = hp = None

    for i in range(1, n_layers + 1):
        layer = params.layers[i - 1]
        if sampled:
            h = _neigh_block(na_in, self_idx[i], samples[i], layer.neigh)
        else:
            h = _neigh_full(na_in, graph, layer.neigh)
        index = tm.build_index(tm_in.values, layer.aux, cfg.m)
        if ad.diagnostics_active():
            # Window membership is a discrete choice; gradient checkers need
            # to know when a perturbation flips it.
            ad.record_diagnostic("topm_selection", hash(index.windows.tobytes()))
        hp = topm_aggr_forward(tm_in, index, layer.topm, centers=self_idx[i])

        h_list.append(h)
        hp_list.append(hp)

        if variant in ("tangnn", "lc"):
            g = fuse(h, hp, layer.fusion)
            g_list.append(g)
            na_in = tm_in = g
        elif variant == "flc":
            na_in, tm_in = h, hp
        elif variant == "nai":
            if i < n_layers:
                na_in = ad.matmul(ad.concat_cols(h, hp), params.layers[i].mix)
                tm_in = hp
        else:  # tai
            if i < n_layers:
                tm_in = ad.matmul(ad.concat_cols(h, hp), params.layers[i].mix)
                na_in = h

    batch_h = [_restrict(h_list[i], levels[i + 1], batch) for i in range(n_layers)]
    batch_hp = [_restrict(hp_list[i], levels[i + 1], batch) for i in range(n_layers)]
    batch_g = [_restrict(g_list[i], levels[i + 1], batch) for i in range(len(g_list))]

    if variant == "tangnn":
        final = batch_g[-1]
    elif variant == "lc":
        final = mlp_apply(params.lc_mlp, ad.concat_cols(*batch_g))
    else:
        final = fuse(batch_h[-1], batch_hp[-1], params.layers[-1].fusion)
    return ForwardResult(final=final, per_layer=batch_g,
                         h_layers=batch_h, hp_layers=batch_hp, batch=batch)


def _restrict(values: ad.Tensor, level: np.ndarray, batch: np.ndarray) -> ad.Tensor:
    """Select the batch rows out of a level-aligned (sorted-id) tensor."""
    if level.shape == batch.shape and np.array_equal(level, batch):
        return values
    pos = np.searchsorted(level, batch)
    if pos.max(initial=0) >= level.shape[0] or not np.array_equal(level[pos], batch):
        raise ShapeError("batch nodes missing from level")
    return ad.gather_rows(values, pos)
