"""Checkpoint format: a JSON manifest next to a flat binary blob.

The manifest records hyperparameters and the parameter names and shapes in
order; the blob holds the parameter values as little-endian 8-byte floats
concatenated in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams

MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "checkpoint.bin"


def save_checkpoint(out_dir, params: ModelParams):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "hyperparameters": asdict(params.config),
        "dtype": "<f8",
        "parameters": [{"name": name, "shape": list(t.data.shape)}
                       for name, t in params.items()],
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")))
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                    for _, t in params.items())
    (out_dir / BLOB_NAME).write_bytes(blob)


def load_checkpoint(ckpt_dir) -> ModelParams:
    ckpt_dir = Path(ckpt_dir)
    try:
        manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
        config = ModelConfig(**manifest["hyperparameters"])
        blob = (ckpt_dir / BLOB_NAME).read_bytes()
        params = ModelParams(config)
        offset = 0
        for entry in manifest["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(blob):
                raise FormatError("checkpoint blob shorter than manifest")
            values = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
            params.add(entry["name"], values.astype(np.float64))
            offset = end
        if offset != len(blob):
            raise FormatError("checkpoint blob longer than manifest")
        return params
    except FormatError:
        raise
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot load checkpoint from {ckpt_dir}: {e}") from e
