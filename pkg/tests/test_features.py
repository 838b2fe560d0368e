import numpy as np
import pytest

from speechkg.errors import ConfigError, FormatError, MissingKeyError
from speechkg.features import (
    load_features,
    random_features,
    read_embedding_file,
    read_embedding_jsonl,
    write_embedding_file,
    write_embedding_jsonl,
    write_features,
)

from _synth import toy_graph


def test_random_features_shape_and_moments():
    empty = random_features(0, 16, 3)
    assert empty.data.shape == (0, 16)
    m = random_features(10_000, 64, 3)
    assert -0.05 < m.data.mean() < 0.05
    assert 0.9 < m.data.var() < 1.1


def test_random_features_deterministic():
    a = random_features(50, 8, 9)
    b = random_features(50, 8, 9)
    assert a.data.tobytes() == b.data.tobytes()


def test_random_features_rejects_bad_dims():
    with pytest.raises(ConfigError):
        random_features(10, 0, 0)
    with pytest.raises(ConfigError):
        random_features(-1, 4, 0)


def test_file_size_arithmetic(tmp_path):
    # 8 magic + 4 dim + 4 count + (4 keylen + key bytes + dim*4)
    path = tmp_path / "one.emb"
    write_embedding_file(path, ["ab"], [[1.0, -1.0]])
    assert path.stat().st_size == 8 + 4 + 4 + (4 + 2 + 8)
    keys, rows = read_embedding_file(path)
    assert keys == ["ab"]
    assert rows.tolist() == [[1.0, -1.0]]


def test_empty_file_is_header_only(tmp_path):
    path = tmp_path / "empty.emb"
    write_embedding_file(path, [], np.zeros((0, 3)))
    assert path.stat().st_size == 16
    keys, rows = read_embedding_file(path)
    assert keys == []
    assert rows.shape == (0, 3)


def test_binary_roundtrip_within_f32(tmp_path):
    rng = np.random.default_rng(4)
    vectors = rng.standard_normal((7, 5))
    keys = [f"key {i} ứ" for i in range(7)]
    path = tmp_path / "round.emb"
    write_embedding_file(path, keys, vectors)
    got_keys, got = read_embedding_file(path)
    assert got_keys == keys
    np.testing.assert_allclose(got, vectors, rtol=1e-6, atol=1e-7)


def test_rewrite_is_byte_identical(tmp_path):
    rng = np.random.default_rng(5)
    vectors = rng.standard_normal((4, 3))
    keys = ["a", "b", "c", "d"]
    p1, p2 = tmp_path / "a.emb", tmp_path / "b.emb"
    write_embedding_file(p1, keys, vectors)
    got_keys, got = read_embedding_file(p1)
    write_embedding_file(p2, got_keys, got)
    assert p1.read_bytes() == p2.read_bytes()


def test_write_rejects_duplicates_and_nonfinite(tmp_path):
    with pytest.raises(FormatError, match="duplicate"):
        write_embedding_file(tmp_path / "d.emb", ["k", "k"], np.zeros((2, 2)))
    with pytest.raises(FormatError, match="finite"):
        write_embedding_file(tmp_path / "n.emb", ["k"], [[np.nan, 0.0]])


def test_read_rejects_corruption(tmp_path):
    path = tmp_path / "good.emb"
    write_embedding_file(path, ["key"], [[1.0, 2.0]])
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.emb"
    bad_magic.write_bytes(b"WRONGMAG" + blob[8:])
    with pytest.raises(FormatError, match="offset 0"):
        read_embedding_file(bad_magic)

    truncated = tmp_path / "trunc.emb"
    truncated.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_embedding_file(truncated)

    trailing = tmp_path / "trail.emb"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_embedding_file(trailing)


def test_jsonl_roundtrip_and_errors(tmp_path):
    path = tmp_path / "vecs.jsonl"
    write_embedding_jsonl(path, ["x", "y"], [[1.0, 2.0], [3.0, 4.0]])
    keys, rows = read_embedding_jsonl(path)
    assert keys == ["x", "y"]
    assert rows.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    ragged = tmp_path / "ragged.jsonl"
    ragged.write_text('{"key": "a", "vector": [1.0]}\n{"key": "b", "vector": [1.0, 2.0]}\n')
    with pytest.raises(FormatError, match="line 2"):
        read_embedding_jsonl(ragged)


def test_load_features_aligns_rows_to_node_keys(tmp_path):
    g = toy_graph()
    # key -> vector oracle map, written in shuffled order
    vec_of = {n.key: [float(n.node_id), float(n.node_id) * 2.0] for n in g.nodes}
    keys = sorted(vec_of)[::-1]
    path = tmp_path / "feat.emb"
    write_embedding_file(path, keys, [vec_of[k] for k in keys])
    m = load_features(path, g)
    assert m.missing_count == 0
    for n in g.nodes:
        assert m.data[n.node_id].tolist() == vec_of[n.key]


def test_load_features_missing_key_policies(tmp_path):
    g = toy_graph()
    keys = [n.key for n in g.nodes if n.key != "fever"]
    path = tmp_path / "partial.emb"
    write_embedding_file(path, keys, np.ones((len(keys), 2)))
    with pytest.raises(MissingKeyError, match="fever"):
        load_features(path, g)
    m = load_features(path, g, missing_policy="zero_fill")
    assert m.missing_count == 1
    fever = next(n.node_id for n in g.nodes if n.key == "fever")
    assert m.data[fever].tolist() == [0.0, 0.0]
    with pytest.raises(ConfigError):
        load_features(path, g, missing_policy="skip")


def test_write_features_roundtrip(tmp_path):
    g = toy_graph()
    m = random_features(g.n_nodes, 6, 12)
    path = tmp_path / "nodes.emb"
    write_features(m, [n.key for n in g.nodes], path)
    back = load_features(path, g)
    np.testing.assert_allclose(back.data, m.data, rtol=1e-6, atol=1e-7)
