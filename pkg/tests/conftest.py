"""Shared fixtures: a desk-scale citation-style dataset.

Real Cora is not shipped; the fixture reproduces its published shape
(2707 nodes, 5429 undirected edges, 7 classes) with a homophilous edge
process and class-separated Gaussian features so that the graph is
genuinely learnable at desk scale.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from tangnn import graph as gr


@dataclass
class CoraFixture:
    graph: gr.Graph
    seed: int

    def write(self, directory):
        edge_path = directory / "cora_edges.txt"
        feat_path = directory / "cora_features.csv"
        label_path = directory / "cora_labels.txt"
        gr.save_graph(self.graph, edge_path, feat_path, label_path)
        return edge_path, feat_path, label_path


def make_cora_like(seed=0, n=2707, num_edges=5429, num_classes=7,
                   feat_dim=64, homophily=0.88, shift=0.5) -> gr.Graph:
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * num_classes // n).astype(np.int64)
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    seen = set()
    edges = []
    while len(edges) < num_edges:
        if rng.random() < homophily:
            c = int(rng.integers(num_classes))
            u, v = rng.choice(members[c], size=2, replace=False)
        else:
            u, v = rng.choice(n, size=2, replace=False)
        key = (min(int(u), int(v)), max(int(u), int(v)))
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)
    edges = np.asarray(edges, dtype=np.int64)
    # Sign-pattern class means, `shift` standard deviations per dimension:
    # any two classes differ in about half the dimensions.
    signs = rng.choice([-1.0, 1.0], size=(num_classes, feat_dim))
    means = signs * (shift / 2.0)
    features = means[labels] + rng.normal(size=(n, feat_dim))
    offsets, targets = gr.build_csr(edges, n)
    return gr.Graph(num_nodes=n, edges=edges, directed=False, offsets=offsets,
                    targets=targets, features=features, node_labels=labels)


@pytest.fixture(scope="session")
def cora_fixture() -> CoraFixture:
    return CoraFixture(graph=make_cora_like(seed=0), seed=0)
