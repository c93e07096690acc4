"""Graph topology, features, labels, splits, and neighbor sampling.

File formats
------------
Edge file: UTF-8 text, one edge per line, whitespace-separated
``src dst [edge_label]``; ``#`` starts a comment.  Node ids index rows of
the feature file, so they must lie in ``0 .. N-1``.

Feature file: header-less CSV, row ``i`` holds the features of node ``i``.

Label file: one integer per line, row ``i`` labels node ``i``.

Graph-level targets: CSV rows ``graph_id,target``.

Multi-graph manifest: CSV rows ``edge_path,feature_path,target_path``
with paths relative to the manifest; the target file row whose
``graph_id`` equals the manifest line index (or its only row) is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, RangeError, ShapeError


@dataclass
class Graph:
    """Immutable graph: CSR adjacency over the union of edge directions.

    ``edges`` keeps the original orientation (needed for directed tasks);
    ``offsets``/``targets`` store every edge in both directions so that
    neighbor queries see the in+out union.
    """

    num_nodes: int
    edges: np.ndarray          # (E, 2) int64, original orientation
    directed: bool
    offsets: np.ndarray        # (N+1,) int64
    targets: np.ndarray        # (2E,) int64
    features: np.ndarray       # (N, D) float64
    node_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    graph_target: float | None = None

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def neighbors(self, node: int) -> np.ndarray:
        return self.targets[self.offsets[node]:self.offsets[node + 1]]

    def degree(self, node: int) -> int:
        return int(self.offsets[node + 1] - self.offsets[node])

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass
class SplitSpec:
    """Disjoint, exhaustive train/test partition of one entity level."""

    level: str                 # node | edge | graph
    train_frac: float
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "level": self.level,
            "train_frac": self.train_frac,
            "seed": self.seed,
            "train": self.train_idx.tolist(),
            "test": self.test_idx.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["level"], float(d["train_frac"]), int(d["seed"]),
                   np.asarray(d["train"], dtype=np.int64),
                   np.asarray(d["test"], dtype=np.int64))


@dataclass
class NeighborSample:
    center: int
    sampled: np.ndarray        # (k,) int64, k <= fanout


def build_csr(edges: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR over the symmetrized arc multiset; neighbor lists sorted ascending."""
    if edges.size == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arcs = np.concatenate([edges, edges[:, ::-1]], axis=0)
    order = np.lexsort((arcs[:, 1], arcs[:, 0]))
    arcs = arcs[order]
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    counts = np.bincount(arcs[:, 0], minlength=num_nodes)
    offsets[1:] = np.cumsum(counts)
    return offsets, arcs[:, 1].copy()


def edges_from_csr(offsets: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Rebuild the stored arc multiset (each input edge appears both ways)."""
    n = offsets.shape[0] - 1
    src = np.repeat(np.arange(n, dtype=np.int64), np.diff(offsets))
    return np.stack([src, targets], axis=1)


def _parse_edge_file(path) -> tuple[np.ndarray, np.ndarray | None]:
    edges: list[tuple[int, int]] = []
    labels: list[int] = []
    labelled_lines = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ParseError(path, line_no, f"expected 'src dst [label]', got {raw.strip()!r}")
            try:
                src, dst = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, line_no, f"non-integer endpoint in {raw.strip()!r}")
            if src < 0 or dst < 0:
                raise RangeError(f"{path}:{line_no}: negative node id")
            edges.append((src, dst))
            if len(parts) == 3:
                try:
                    labels.append(int(parts[2]))
                except ValueError:
                    raise ParseError(path, line_no, f"non-integer edge label in {raw.strip()!r}")
                labelled_lines += 1
    if labelled_lines and labelled_lines != len(edges):
        raise ParseError(path, 0, "some edges carry labels and some do not")
    edge_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    label_arr = np.asarray(labels, dtype=np.int64) if labelled_lines else None
    return edge_arr, label_arr


def _parse_feature_file(path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric feature value in {line!r}")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(path, line_no,
                                 f"row has {len(row)} columns, expected {width}")
            rows.append(row)
    if not rows:
        raise ShapeError(f"{path}: feature file is empty")
    return np.asarray(rows, dtype=np.float64)


def _parse_label_file(path, expected: int) -> np.ndarray:
    labels: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise ParseError(path, line_no, f"non-integer label {line!r}")
    if len(labels) != expected:
        raise ShapeError(f"{path}: {len(labels)} labels for {expected} nodes")
    return np.asarray(labels, dtype=np.int64)


def load_graph(edge_path, feature_path, label_path=None, directed: bool = False) -> Graph:
    """Load a graph from an edge list, a feature CSV, and optional node labels."""
    features = _parse_feature_file(feature_path)
    num_nodes = features.shape[0]
    edges, edge_labels = _parse_edge_file(edge_path)
    if edges.size and edges.max() >= num_nodes:
        raise RangeError(
            f"{edge_path}: endpoint {int(edges.max())} >= {num_nodes} nodes "
            f"(node ids index feature rows)")
    node_labels = _parse_label_file(label_path, num_nodes) if label_path else None
    offsets, targets = build_csr(edges, num_nodes)
    return Graph(num_nodes=num_nodes, edges=edges, directed=directed,
                 offsets=offsets, targets=targets, features=features,
                 node_labels=node_labels, edge_labels=edge_labels)


def save_graph(graph: Graph, edge_path, feature_path, label_path=None) -> None:
    """Write a graph back out in the loadable text formats."""
    with open(edge_path, "w", encoding="utf-8") as fh:
        if graph.edge_labels is not None:
            for (u, v), lab in zip(graph.edges, graph.edge_labels):
                fh.write(f"{u} {v} {lab}\n")
        else:
            for u, v in graph.edges:
                fh.write(f"{u} {v}\n")
    np.savetxt(feature_path, graph.features, delimiter=",", fmt="%.10g")
    if label_path is not None:
        if graph.node_labels is None:
            raise ConfigError("graph has no node labels to save")
        np.savetxt(label_path, graph.node_labels, fmt="%d")


def load_manifest(manifest_path) -> list[Graph]:
    """Load a multi-graph dataset from a manifest of per-graph files."""
    base = Path(manifest_path).parent
    graphs: list[Graph] = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    entries = [ln for ln in lines if ln]
    for gid, entry in enumerate(entries):
        parts = [p.strip() for p in entry.split(",")]
        if len(parts) != 3:
            raise ParseError(manifest_path, gid + 1,
                             "expected 'edge_path,feature_path,target_path'")
        edge_path, feat_path, target_path = (base / p for p in parts)
        g = load_graph(edge_path, feat_path)
        g.graph_target = _read_graph_target(target_path, gid)
        graphs.append(g)
    if not graphs:
        raise ShapeError(f"{manifest_path}: manifest lists no graphs")
    return graphs


def _read_graph_target(path, graph_id: int) -> float:
    rows: list[tuple[int, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected 'graph_id,target'")
            try:
                rows.append((int(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(path, line_no, f"bad target row {line!r}")
    if len(rows) == 1:
        return rows[0][1]
    for gid, target in rows:
        if gid == graph_id:
            return target
    raise ShapeError(f"{path}: no target row for graph {graph_id}")


def sample_neighbors(graph: Graph, node: int, fanout: int, rng: np.random.Generator) -> NeighborSample:
    """Draw a fixed-width neighbor sample for one node.

    Degree >= fanout: ``fanout`` distinct neighbors via ``rng.choice``
    without replacement.  0 < degree < fanout: ``fanout`` indices drawn
    with replacement via ``rng.integers(0, degree, size=fanout)`` into
    the ascending neighbor list.  Degree 0: the sample is ``[node]``.
    """
    if node < 0 or node >= graph.num_nodes:
        raise RangeError(f"node {node} out of range")
    if fanout < 1:
        raise ConfigError("fanout must be >= 1")
    neigh = graph.neighbors(node)
    deg = neigh.shape[0]
    if deg == 0:
        return NeighborSample(node, np.asarray([node], dtype=np.int64))
    if deg >= fanout:
        picks = rng.choice(deg, size=fanout, replace=False)
        return NeighborSample(node, neigh[picks].astype(np.int64))
    draws = rng.integers(0, deg, size=fanout)
    return NeighborSample(node, neigh[draws].astype(np.int64))


def make_split(dataset, level: str, train_frac: float, seed: int) -> SplitSpec:
    """Seeded disjoint split over nodes, edges, or whole graphs."""
    if not (0.0 < train_frac < 1.0):
        raise ConfigError(f"train_frac must be in (0,1), got {train_frac}")
    if level == "node":
        if not isinstance(dataset, Graph):
            raise ConfigError("node-level splits need a single graph")
        if dataset.node_labels is None:
            raise ConfigError("node-level split requires node labels")
        total = dataset.num_nodes
    elif level == "edge":
        if not isinstance(dataset, Graph):
            raise ConfigError("edge-level splits need a single graph")
        total = dataset.num_edges
        if total == 0:
            raise ConfigError("edge-level split on a graph without edges")
    elif level == "graph":
        if isinstance(dataset, Graph):
            raise ConfigError("graph-level splits need a list of graphs")
        total = len(dataset)
        if any(g.graph_target is None for g in dataset):
            raise ConfigError("graph-level split requires graph targets")
    else:
        raise ConfigError(f"unknown split level {level!r}")
    n_train = int(round(train_frac * total))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    train = np.sort(perm[:n_train]).astype(np.int64)
    test = np.sort(perm[n_train:]).astype(np.int64)
    return SplitSpec(level=level, train_frac=train_frac, seed=seed,
                     train_idx=train, test_idx=test)


def synthetic_graph(kind: str, n: int, params: dict | None = None, seed: int = 0) -> Graph:
    """Deterministic synthetic fixtures.

    ``sbm``: a k-block stochastic block model (default 2 blocks) with
    intra-block edge probability ``p_in`` > ``p_out`` and unit-variance
    Gaussian features whose block means differ by ``shift`` standard
    deviations per dimension (sign patterns distinguish blocks); node
    labels are the blocks.

    ``regression``: an Erdos-Renyi graph whose scalar target is its mean
    degree; feature column 0 carries ``degree / 10`` so the target stays
    recoverable, remaining columns are noise.
    """
    if n < 2:
        raise ConfigError("synthetic graphs need n >= 2")
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if kind == "sbm":
        p_in = float(params.pop("p_in", 0.2))
        p_out = float(params.pop("p_out", 0.02))
        feat_dim = int(params.pop("feat_dim", 16))
        shift = float(params.pop("shift", 1.0))
        blocks = int(params.pop("num_blocks", 2))
        if params:
            raise ConfigError(f"unknown sbm params: {sorted(params)}")
        if p_in <= p_out:
            raise ConfigError("sbm fixture requires p_in > p_out")
        labels = (np.arange(n) * blocks // n).astype(np.int64)
        iu, ju = np.triu_indices(n, k=1)
        same = labels[iu] == labels[ju]
        probs = np.where(same, p_in, p_out)
        keep = rng.random(iu.shape[0]) < probs
        edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
        if blocks == 2:
            signs = np.stack([-np.ones(feat_dim), np.ones(feat_dim)])
        else:
            signs = rng.choice([-1.0, 1.0], size=(blocks, feat_dim))
        means = signs * (shift / 2.0)
        features = means[labels] + rng.normal(size=(n, feat_dim))
        offsets, targets = build_csr(edges, n)
        return Graph(num_nodes=n, edges=edges, directed=False, offsets=offsets,
                     targets=targets, features=features, node_labels=labels)
    if kind == "regression":
        edge_prob = float(params.pop("edge_prob", 0.2))
        feat_dim = int(params.pop("feat_dim", 8))
        if params:
            raise ConfigError(f"unknown regression params: {sorted(params)}")
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.shape[0]) < edge_prob
        edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
        offsets, targets = build_csr(edges, n)
        degs = np.diff(offsets).astype(np.float64)
        features = rng.normal(size=(n, feat_dim))
        features[:, 0] = degs / 10.0
        g = Graph(num_nodes=n, edges=edges, directed=False, offsets=offsets,
                  targets=targets, features=features)
        g.graph_target = float(degs.mean())
        return g
    raise ConfigError(f"unknown synthetic kind {kind!r}")
