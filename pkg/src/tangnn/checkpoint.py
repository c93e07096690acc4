"""Single-file model checkpoints.

Layout: one JSON header line (format tag, version, variant, task, dims,
selection settings), then the parameter arrays — trainables followed by
the per-layer auxiliary vectors — as flat little-endian float64 in
declaration order.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import ModelDims, ModelParams
from .training import TrainConfig, init_params, parameter_manifest

FORMAT = "tangnn-checkpoint"
VERSION = 1


def _array_streams(params: ModelParams) -> list[np.ndarray]:
    arrays = [t.values for _, t, _ in parameter_manifest(params)]
    arrays.extend(layer.aux for layer in params.layers)
    return arrays


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig,
                    n_classes: int, extra: dict | None = None) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "variant": params.variant,
        "task": cfg.task,
        "d_in": params.dims.d_in,
        "hidden_dim": params.dims.d_out,
        "layers": params.dims.layers,
        "d_k": params.dims.d_k,
        "num_heads": params.dims.num_heads,
        "n_classes": n_classes,
        "m": cfg.m,
        "fanouts": list(cfg.fanouts),
        "pool": cfg.pool,
        "seed": cfg.seed,
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for arr in _array_streams(params):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not a checkpoint file") from exc
    if header.get("format") != FORMAT:
        raise ConfigError(f"{path}: unknown checkpoint format")
    if header.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
    dims = ModelDims(d_in=header["d_in"], d_out=header["hidden_dim"],
                     layers=header["layers"], d_k=header["d_k"],
                     num_heads=header["num_heads"])
    params = init_params(dims, header["variant"], seed=0,
                         task=header["task"], n_classes=header["n_classes"])
    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for arr in _array_streams(params):
        size = arr.size
        if offset + size > flat.shape[0]:
            raise ShapeError(f"{path}: checkpoint payload truncated")
        arr[...] = flat[offset:offset + size].reshape(arr.shape)
        offset += size
    if offset != flat.shape[0]:
        raise ShapeError(f"{path}: {flat.shape[0] - offset} trailing values in checkpoint")
    return params, header


def check_compatible(header: dict, cfg: TrainConfig) -> None:
    """Reject checkpoint/config mismatches before evaluation."""
    if header["variant"] != cfg.variant:
        raise ConfigError(f"checkpoint variant {header['variant']!r} "
                          f"does not match config {cfg.variant!r}")
    if header["task"] != cfg.task:
        raise ConfigError(f"checkpoint task {header['task']!r} "
                          f"does not match config {cfg.task!r}")
    if header["layers"] != cfg.layers or header["hidden_dim"] != cfg.hidden_dim:
        raise ConfigError("checkpoint dimensions do not match config")
