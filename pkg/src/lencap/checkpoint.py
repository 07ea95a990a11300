"""Versioned JSON checkpoints.

Floats are written with Python's shortest round-trip repr, so
``load(save(model))`` reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .captioner import Captioner, ModelConfig
from .data import Vocab
from .nncore import ParamStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def to_json(model: Captioner, meta: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "vocab_hash": model.vocab.content_hash(),
        "params": {name: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
                   for name, a in model.store.params.items()},
        "meta": meta or {},
    }


def from_json(doc: dict) -> tuple[Captioner, dict]:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version!r} is not supported "
                              f"(expected {FORMAT_VERSION})")
    config = ModelConfig(**doc["config"])
    vocab = Vocab(doc["vocab"])
    if vocab.content_hash() != doc["vocab_hash"]:
        raise CheckpointError("checkpoint vocab does not match its recorded hash")
    store = ParamStore()
    expected = config.param_shapes()
    if set(expected) != set(doc["params"]):
        raise CheckpointError("checkpoint parameters do not match the model config")
    for name, shape in expected.items():
        entry = doc["params"][name]
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"parameter {name}: shape {entry['shape']} != {shape}")
        store.add(name, np.array(entry["values"], dtype=np.float64).reshape(shape))
    return Captioner(config, vocab, store), doc.get("meta", {})


def save(model: Captioner, path: Path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_json(model, meta)) + "\n")


def load(path: Path) -> tuple[Captioner, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_json(doc)
