import json
import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")
os.environ.setdefault("TRANSFORMERS_VERBOSITY", "error")

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizer

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "a", "b", "c", "d", "hello", "world", "graph", "speech",
    "node", "alpha", "beta", "gamma", "delta",
]


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small saved encoder checkpoint, loadable without network access."""
    root = tmp_path_factory.mktemp("tiny-encoder")
    vocab_path = root / "vocab.txt"
    vocab_path.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
    )
    model = BertModel(config)
    tokenizer = BertTokenizer(str(vocab_path), model_max_length=64)
    model.save_pretrained(root)
    tokenizer.save_pretrained(root)
    return str(root)


@pytest.fixture
def write_requests(tmp_path):
    """Writer for {key, text} JSONL inputs; returns the file path."""

    def _write(rows, name="requests.jsonl"):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        return str(path)

    return _write
