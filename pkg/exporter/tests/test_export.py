import json
import types

import numpy as np
import pytest
import torch

from speechkg.features import read_embedding_file

import speechkg_exporter.export as export_mod
from speechkg_exporter import (
    ExportError,
    ExportRequest,
    ResourceLimitError,
    export_embeddings,
    read_requests,
    resolve_pooling,
)
from speechkg_exporter.export import pool_hidden


def test_read_requests_order_and_content(write_requests):
    path = write_requests([
        {"key": "u1", "text": "hello world"},
        {"key": "e:alpha", "text": "alpha"},
        {"key": "u2", "text": ""},
    ])
    entries = read_requests(path)
    assert entries == [("u1", "hello world"), ("e:alpha", "alpha"), ("u2", "")]


def test_read_requests_skips_blank_lines(write_requests, tmp_path):
    path = tmp_path / "gappy.jsonl"
    path.write_text('{"key": "a", "text": "hello"}\n\n{"key": "b", "text": "world"}\n')
    assert [k for k, _ in read_requests(path)] == ["a", "b"]


def test_duplicate_key_names_key_and_lines(write_requests):
    path = write_requests([
        {"key": "u1", "text": "hello"},
        {"key": "u2", "text": "world"},
        {"key": "u1", "text": "again"},
    ])
    with pytest.raises(ExportError, match=r"line 3: duplicate key 'u1' \(first seen on line 1\)"):
        read_requests(path)


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"key": "a", "text": "x"}\n{not json\n')
    with pytest.raises(ExportError, match="line 2: invalid JSON"):
        read_requests(path)


def test_bad_record_shapes(write_requests):
    with pytest.raises(ExportError, match="line 1: key must be a non-empty string"):
        read_requests(write_requests([{"text": "x"}]))
    with pytest.raises(ExportError, match="line 1: text must be a string"):
        read_requests(write_requests([{"key": "a", "text": 7}]))
    with pytest.raises(ExportError, match="line 1: record is not an object"):
        read_requests(write_requests(["just a string"]))


def test_request_validation():
    with pytest.raises(ExportError, match="batch_size"):
        ExportRequest(model_name="m", input_path="p", batch_size=0)
    with pytest.raises(ExportError, match="unknown pooling"):
        ExportRequest(model_name="m", input_path="p", pooling="max")


def test_resolve_pooling_rules():
    causal = types.SimpleNamespace(architectures=["GPT2LMHeadModel"])
    assert resolve_pooling(causal, False, "model_default") == "last_token"
    causal2 = types.SimpleNamespace(architectures=["LlamaForCausalLM"])
    assert resolve_pooling(causal2, False, "model_default") == "last_token"
    encoder = types.SimpleNamespace(architectures=["BertModel"])
    assert resolve_pooling(encoder, True, "model_default") == "pooler"
    assert resolve_pooling(encoder, False, "model_default") == "mean"
    bare = types.SimpleNamespace(architectures=None)
    assert resolve_pooling(bare, False, "model_default") == "mean"
    # explicit request always wins
    assert resolve_pooling(causal, True, "cls") == "cls"


def test_pool_hidden_oracles():
    hidden = torch.tensor([
        [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
        [[10.0, 20.0], [30.0, 40.0], [0.0, 0.0]],
    ])
    mask = torch.tensor([[1, 1, 1], [1, 1, 0]])
    mean = pool_hidden(hidden, mask, "mean").numpy()
    assert np.allclose(mean, [[3.0, 4.0], [20.0, 30.0]])
    cls = pool_hidden(hidden, mask, "cls").numpy()
    assert np.allclose(cls, [[1.0, 2.0], [10.0, 20.0]])
    last = pool_hidden(hidden, mask, "last_token").numpy()
    assert np.allclose(last, [[5.0, 6.0], [30.0, 40.0]])
    # left padding still finds the final covered position
    left = pool_hidden(hidden, torch.tensor([[0, 1, 1], [0, 0, 1]]), "last_token").numpy()
    assert np.allclose(left, [[5.0, 6.0], [0.0, 0.0]])


def test_export_basic_roundtrip(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([
        {"key": "u1", "text": "hello world"},
        {"key": "u2", "text": "graph speech node"},
        {"key": "e:alpha", "text": "alpha"},
    ])
    out = tmp_path / "tiny.emb"
    req = ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=2)
    summary = export_embeddings(req, out)
    assert summary == {"count": 3, "dim": 16}
    keys, rows = read_embedding_file(out)
    assert keys == ["u1", "u2", "e:alpha"]
    assert rows.shape == (3, 16)
    assert np.all(np.isfinite(rows))
    assert not np.allclose(rows[0], rows[1])


def test_identical_texts_identical_vectors(tiny_model_dir, write_requests, tmp_path):
    # duplicates land in different batches on purpose
    path = write_requests([
        {"key": "a", "text": "hello world"},
        {"key": "b", "text": "graph speech"},
        {"key": "c", "text": "alpha beta gamma"},
        {"key": "d", "text": "hello world"},
    ])
    out = tmp_path / "dup.emb"
    export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=2), out)
    keys, rows = read_embedding_file(out)
    assert rows[keys.index("a")].tobytes() == rows[keys.index("d")].tobytes()
    assert not np.allclose(rows[keys.index("a")], rows[keys.index("b")])


def test_empty_text_zero_vector_with_warning(tiny_model_dir, write_requests, tmp_path, caplog):
    path = write_requests([
        {"key": "u1", "text": "hello"},
        {"key": "u2", "text": "   "},
    ])
    out = tmp_path / "empty.emb"
    with caplog.at_level("WARNING"):
        summary = export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path), out)
    assert summary["count"] == 2
    keys, rows = read_embedding_file(out)
    assert np.all(rows[keys.index("u2")] == 0.0)
    assert np.any(rows[keys.index("u1")] != 0.0)
    assert any("u2" in rec.message and "zero vector" in rec.message for rec in caplog.records)


def test_all_empty_texts_still_export(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([{"key": "u1", "text": ""}, {"key": "u2", "text": ""}])
    out = tmp_path / "zeros.emb"
    summary = export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path), out)
    assert summary == {"count": 2, "dim": 16}
    _, rows = read_embedding_file(out)
    assert np.all(rows == 0.0)


def test_reexport_is_bit_identical(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([
        {"key": "u1", "text": "hello world"},
        {"key": "u2", "text": "alpha beta"},
    ])
    out_a = tmp_path / "a.emb"
    out_b = tmp_path / "b.emb"
    req = ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=2)
    export_embeddings(req, out_a)
    export_embeddings(req, out_b)
    assert out_a.read_bytes() == out_b.read_bytes()


def test_batch_size_changes_stay_within_float_tolerance(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([
        {"key": "u1", "text": "hello"},
        {"key": "u2", "text": "graph speech node alpha"},
        {"key": "u3", "text": "beta"},
    ])
    out_one = tmp_path / "one.emb"
    out_all = tmp_path / "all.emb"
    export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=1), out_one)
    export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=3), out_all)
    _, rows_one = read_embedding_file(out_one)
    _, rows_all = read_embedding_file(out_all)
    assert np.allclose(rows_one, rows_all, atol=1e-5)


def test_pooling_modes_differ(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([{"key": "u1", "text": "hello world graph speech"}])
    rows = {}
    for mode in ("mean", "cls", "last_token", "model_default"):
        out = tmp_path / f"{mode}.emb"
        req = ExportRequest(model_name=tiny_model_dir, input_path=path, pooling=mode)
        export_embeddings(req, out)
        _, vecs = read_embedding_file(out)
        rows[mode] = vecs[0]
    assert not np.allclose(rows["mean"], rows["cls"])
    assert not np.allclose(rows["mean"], rows["last_token"])
    assert not np.allclose(rows["cls"], rows["last_token"])
    # this encoder ships a pooled output, so the default is neither of the raw modes
    assert not np.allclose(rows["model_default"], rows["mean"])


def test_manifest_records_resolution(tiny_model_dir, write_requests, tmp_path):
    path = write_requests([{"key": "u1", "text": "hello"}, {"key": "u2", "text": ""}])
    out = tmp_path / "m.emb"
    export_embeddings(ExportRequest(model_name=tiny_model_dir, input_path=path), out)
    with open(f"{out}.manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "export"
    cfg = manifest["config"]
    assert cfg["model"] == tiny_model_dir
    assert cfg["pooling"] == "model_default"
    assert cfg["resolved_pooling"] == "pooler"
    assert cfg["dim"] == 16 and cfg["count"] == 2 and cfg["empty_texts"] == 1
    digest = manifest["inputs"][path]
    assert len(digest) == 64 and set(digest) <= set("0123456789abcdef")
    assert manifest["outputs"] == [str(out)]


def test_unknown_model_is_export_error(write_requests, tmp_path):
    path = write_requests([{"key": "u1", "text": "hello"}])
    req = ExportRequest(model_name=str(tmp_path / "no-such-model"), input_path=path)
    with pytest.raises(ExportError, match="cannot load model"):
        export_embeddings(req, tmp_path / "x.emb")


def test_out_of_memory_maps_to_resource_error(tiny_model_dir, write_requests, tmp_path, monkeypatch):
    path = write_requests([{"key": "u1", "text": "hello"}])

    def boom(model, encoded):
        raise torch.OutOfMemoryError("CUDA out of memory")

    monkeypatch.setattr(export_mod, "_encode_batch", boom)
    req = ExportRequest(model_name=tiny_model_dir, input_path=path, batch_size=8)
    with pytest.raises(ResourceLimitError, match="smaller --batch-size"):
        export_embeddings(req, tmp_path / "x.emb")


def test_other_runtime_errors_pass_through(tiny_model_dir, write_requests, tmp_path, monkeypatch):
    path = write_requests([{"key": "u1", "text": "hello"}])

    def boom(model, encoded):
        raise RuntimeError("shape mismatch in attention")

    monkeypatch.setattr(export_mod, "_encode_batch", boom)
    req = ExportRequest(model_name=tiny_model_dir, input_path=path)
    with pytest.raises(RuntimeError, match="shape mismatch"):
        export_embeddings(req, tmp_path / "x.emb")


def test_non_finite_model_output_names_text(tiny_model_dir, write_requests, tmp_path, monkeypatch):
    path = write_requests([{"key": "u1", "text": "hello"}])

    def bad(model, encoded):
        hidden = torch.full((1, encoded["input_ids"].shape[1], 16), float("nan"))
        return types.SimpleNamespace(last_hidden_state=hidden, pooler_output=None)

    monkeypatch.setattr(export_mod, "_encode_batch", bad)
    req = ExportRequest(model_name=tiny_model_dir, input_path=path, pooling="mean")
    with pytest.raises(ExportError, match="non-finite values for text 'hello'"):
        export_embeddings(req, tmp_path / "x.emb")
