"""Text-query embedding: one unit-norm row per text, order preserved."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import ModalityError


def hash_embedding(text: str, channels: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-embedding: the text seeds a random unit vector."""
    digest = hashlib.sha256(f"{seed}:{text}".encode()).digest()
    rng = np.random.default_rng(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(channels)
    return (v / np.linalg.norm(v)).astype(np.float32)


def pretrained_embeddings(texts: list[str], model_name: str, device: str) -> np.ndarray:
    try:
        from transformers import CLIPTextModel, CLIPTokenizer
        tokenizer = CLIPTokenizer.from_pretrained(model_name)
        model = CLIPTextModel.from_pretrained(model_name)
    except Exception as e:
        raise ModalityError(f"text: could not load text encoder {model_name!r}: {e}") from e
    import torch
    model = model.to(device).eval()
    with torch.no_grad():
        tokens = tokenizer(texts, padding=True, return_tensors="pt").to(device)
        out = model(**tokens).pooler_output.cpu().numpy().astype(np.float32)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def embed_queries(texts: list[str], out_path, channels: int = 512,
                  model: str = "hash", device: str = "cpu", seed: int = 0) -> Path:
    """Write a (Q, C) little-endian float32 blob plus a JSON sidecar recording the texts."""
    if not texts:
        raise ValueError("no texts given")
    if any(not t.strip() for t in texts):
        raise ValueError("empty text in query list")
    if model == "hash":
        rows = np.stack([hash_embedding(t, channels, seed) for t in texts])
    else:
        rows = pretrained_embeddings(texts, model, device)
        channels = rows.shape[1]
    out_path = Path(out_path)
    out_path.write_bytes(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    out_path.with_suffix(".json").write_text(json.dumps({
        "ids": texts, "channels": int(channels), "model": model,
    }, indent=2) + "\n")
    return out_path
