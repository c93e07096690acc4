"""Tests for the binary checkpoint format."""

import numpy as np
import pytest

from tangnn import checkpoint as ck
from tangnn import graph as gr
from tangnn import training as tr
from tangnn.errors import ConfigError
from tangnn.layers import ModelDims, forward


def small_model(variant="tangnn", task="node", n_classes=3, seed=4):
    dims = ModelDims(d_in=5, d_out=6, layers=2)
    params = tr.init_params(dims, variant, seed, task=task, n_classes=n_classes)
    cfg = tr.TrainConfig(variant=variant, task=task, hidden_dim=6,
                         fanouts=(3, 2), m=4, seed=seed)
    return params, cfg


class TestRoundTrip:
    def test_values_restored_exactly(self, tmp_path):
        params, cfg = small_model()
        rng = np.random.default_rng(0)
        for _, t, _ in tr.parameter_manifest(params):
            t.values += rng.normal(scale=0.1, size=t.values.shape)
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, params, cfg, n_classes=3)
        restored, header = ck.load_checkpoint(path)
        assert header["variant"] == "tangnn"
        for (_, a, _), (_, b, _) in zip(tr.parameter_manifest(params),
                                        tr.parameter_manifest(restored)):
            np.testing.assert_array_equal(a.values, b.values)
        for la, lb in zip(params.layers, restored.layers):
            np.testing.assert_array_equal(la.aux, lb.aux)

    def test_restored_model_reproduces_forward(self, tmp_path):
        params, cfg = small_model(variant="lc")
        graph = gr.synthetic_graph("sbm", 20, {"p_in": 0.4, "p_out": 0.1,
                                               "feat_dim": 5}, seed=1)
        batch = np.arange(10)
        before = forward(graph, batch, params, cfg, sampled=False).final.values
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, params, cfg, n_classes=3)
        restored, _ = ck.load_checkpoint(path)
        after = forward(graph, batch, restored, cfg, sampled=False).final.values
        np.testing.assert_array_equal(before, after)

    def test_all_variants_round_trip(self, tmp_path):
        for variant in ("tangnn", "lc", "flc", "nai", "tai"):
            params, cfg = small_model(variant=variant)
            path = tmp_path / f"{variant}.ckpt"
            ck.save_checkpoint(path, params, cfg, n_classes=3)
            restored, header = ck.load_checkpoint(path)
            assert header["variant"] == variant
            assert len(tr.parameter_manifest(restored)) == \
                len(tr.parameter_manifest(params))


class TestValidation:
    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"\x00\x01\x02definitely not json\n")
        with pytest.raises(ConfigError):
            ck.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        params, cfg = small_model()
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, params, cfg, n_classes=3)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(Exception):
            ck.load_checkpoint(path)

    def test_variant_mismatch_rejected(self, tmp_path):
        params, cfg = small_model(variant="tangnn")
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, params, cfg, n_classes=3)
        _, header = ck.load_checkpoint(path)
        other = tr.TrainConfig(variant="flc", task="node", hidden_dim=6, fanouts=(3, 2))
        with pytest.raises(ConfigError):
            ck.check_compatible(header, other)

    def test_dim_mismatch_rejected(self, tmp_path):
        params, cfg = small_model()
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, params, cfg, n_classes=3)
        _, header = ck.load_checkpoint(path)
        other = tr.TrainConfig(variant="tangnn", task="node", hidden_dim=32, fanouts=(3, 2))
        with pytest.raises(ConfigError):
            ck.check_compatible(header, other)
