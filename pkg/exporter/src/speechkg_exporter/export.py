"""Batch text encoding with pretrained transformers.

Reads a JSONL of {key, text} records, runs the model in eval mode, pools
token states into one vector per key, and writes the result in the
speechkg binary embedding format so the trainer can load it directly.

Identical texts always produce identical vectors: the encoder runs once
per distinct text, so batch boundaries cannot introduce float drift
between duplicates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from speechkg.features import write_embedding_file

log = logging.getLogger(__name__)

POOLING_MODES = ("model_default", "mean", "cls", "last_token")

# architecture name fragments that mark a next-token decoder, where the
# running summary lives in the final position rather than a CLS slot
_CAUSAL_HINTS = ("ForCausalLM", "LMHeadModel")


class ExportError(Exception):
    """Bad input, unknown model, or an unusable configuration."""


class ResourceLimitError(Exception):
    """The batch did not fit in memory; retry with a smaller batch."""


@dataclass
class ExportRequest:
    model_name: str
    input_path: str
    batch_size: int = 32
    pooling: str = "model_default"

    def __post_init__(self):
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ExportError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.pooling not in POOLING_MODES:
            raise ExportError(f"unknown pooling {self.pooling!r}, expected one of {POOLING_MODES}")


def read_requests(path) -> list[tuple[str, str]]:
    """Parse {key, text} JSONL records; keys must be unique.

    Errors carry 1-based line numbers.
    """
    entries: list[tuple[str, str]] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(payload, dict):
                raise ExportError(f"line {lineno}: record is not an object")
            key = payload.get("key")
            if not isinstance(key, str) or not key:
                raise ExportError(f"line {lineno}: key must be a non-empty string")
            text = payload.get("text")
            if not isinstance(text, str):
                raise ExportError(f"line {lineno}: text must be a string")
            if key in seen:
                raise ExportError(
                    f"line {lineno}: duplicate key {key!r} (first seen on line {seen[key]})"
                )
            seen[key] = lineno
            entries.append((key, text))
    return entries


def load_model(model_name: str):
    """Load tokenizer and base model; any loading failure is an ExportError."""
    from transformers import AutoModel, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_name)
        model = AutoModel.from_pretrained(model_name)
    except (OSError, ValueError, RuntimeError) as exc:
        raise ExportError(f"cannot load model {model_name!r}: {exc}") from exc
    model.eval()
    return tokenizer, model


def resolve_pooling(config, has_pooler: bool, requested: str) -> str:
    """Pick the concrete pooling for a request.

    model_default prefers the model's own pooled output when it ships
    one, falls back to last_token for causal decoders, and mean over
    token states otherwise. The resolved name goes into the manifest.
    """
    if requested != "model_default":
        return requested
    architectures = getattr(config, "architectures", None) or []
    if any(hint in arch for arch in architectures for hint in _CAUSAL_HINTS):
        return "last_token"
    if has_pooler:
        return "pooler"
    return "mean"


def pool_hidden(hidden: torch.Tensor, mask: torch.Tensor, mode: str,
                pooler_output: torch.Tensor | None = None) -> torch.Tensor:
    """Collapse (batch, seq, dim) token states to (batch, dim)."""
    if mode == "pooler":
        if pooler_output is None:
            raise ExportError("model produced no pooled output")
        return pooler_output
    if mode == "cls":
        return hidden[:, 0, :]
    if mode == "last_token":
        # largest position still covered by the mask, robust to either
        # padding side; an all-zero mask row degenerates to position 0
        positions = torch.arange(hidden.shape[1], device=hidden.device)
        last = (mask * positions).argmax(dim=1)
        return hidden[torch.arange(hidden.shape[0]), last]
    if mode == "mean":
        expanded = mask.unsqueeze(-1).to(hidden.dtype)
        total = (hidden * expanded).sum(dim=1)
        denom = expanded.sum(dim=1).clamp(min=1.0)
        return total / denom
    raise ExportError(f"unknown resolved pooling {mode!r}")


def _encode_batch(model, encoded):
    with torch.no_grad():
        return model(**encoded)


def _is_out_of_memory(exc: RuntimeError) -> bool:
    if isinstance(exc, getattr(torch, "OutOfMemoryError", ())):
        return True
    message = str(exc).lower()
    return "out of memory" in message or "can't allocate" in message


def export_embeddings(req: ExportRequest, out_path) -> dict:
    """Encode every text and write one vector per key to out_path.

    Returns {"count", "dim"}. Empty texts get a zero vector and a
    warning instead of an encoder pass. A manifest lands next to the
    output recording the resolved pooling and input digests.
    """
    started = time.monotonic()
    entries = read_requests(req.input_path)
    tokenizer, model = load_model(req.model_name)
    mode = resolve_pooling(model.config, _model_has_pooler(model), req.pooling)

    distinct = list(dict.fromkeys(text for _, text in entries if text.strip()))
    max_len = getattr(model.config, "max_position_embeddings", None)
    tokenize_kwargs = {"padding": True, "truncation": True, "return_tensors": "pt"}
    if isinstance(max_len, int) and 0 < max_len < 100_000:
        tokenize_kwargs["max_length"] = max_len

    by_text: dict[str, np.ndarray] = {}
    for start in range(0, len(distinct), req.batch_size):
        batch = distinct[start : start + req.batch_size]
        encoded = tokenizer(batch, **tokenize_kwargs)
        try:
            out = _encode_batch(model, encoded)
        except RuntimeError as exc:
            if _is_out_of_memory(exc):
                raise ResourceLimitError(
                    f"out of memory encoding a batch of {len(batch)} texts; "
                    f"retry with a smaller --batch-size"
                ) from exc
            raise
        pooled = pool_hidden(
            out.last_hidden_state,
            encoded["attention_mask"],
            mode,
            getattr(out, "pooler_output", None),
        )
        rows = pooled.to(torch.float32).numpy()
        if not np.all(np.isfinite(rows)):
            bad = batch[int(np.argwhere(~np.isfinite(rows).all(axis=1))[0][0])]
            raise ExportError(f"model produced non-finite values for text {bad!r}")
        for text, row in zip(batch, rows):
            by_text[text] = row

    dim = getattr(model.config, "hidden_size", None)
    if by_text:
        dim = next(iter(by_text.values())).shape[0]
    if dim is None:
        raise ExportError("cannot determine embedding dim: no texts and no hidden_size")

    vectors = np.zeros((len(entries), dim), dtype=np.float32)
    keys = []
    n_empty = 0
    for i, (key, text) in enumerate(entries):
        keys.append(key)
        if text.strip():
            vectors[i] = by_text[text]
        else:
            n_empty += 1
            log.warning("empty text for key %r, writing a zero vector", key)

    write_embedding_file(out_path, keys, vectors)
    _write_manifest(out_path, req, mode, dim, len(keys), n_empty, started)
    return {"count": len(keys), "dim": int(dim)}


def _model_has_pooler(model) -> bool:
    return getattr(model, "pooler", None) is not None


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_path, req: ExportRequest, mode: str, dim: int,
                    count: int, n_empty: int, started: float) -> None:
    manifest = {
        "command": "export",
        "config": {
            "model": req.model_name,
            "pooling": req.pooling,
            "resolved_pooling": mode,
            "batch_size": req.batch_size,
            "dim": int(dim),
            "count": count,
            "empty_texts": n_empty,
        },
        "inputs": {str(req.input_path): _sha256_file(req.input_path)},
        "outputs": [str(out_path)],
        "duration_s": round(time.monotonic() - started, 3),
    }
    with open(f"{os.fspath(out_path)}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
