"""GNN layers over the autodiff core: shared-weight mean aggregation,
symmetric-normalized convolution, and two attention variants, plus
adjacency construction, model assembly, and checkpoint files.

All forwards consume a GraphContext, which pre-extracts from a graph the
sparse operators and the directed (receiver, neighbor) pair arrays that
attention needs. Contexts can restrict message passing to an edge
subset, which the link-prediction task uses to hide held-out edges.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, SparseAdjacency, Tensor
from .errors import ConfigError, FormatError, ShapeError
from .util import atomic_write_bytes

LAYER_KINDS = ("sage", "gcn", "gat", "supergat")
HEAD_KINDS = ("node_classifier", "link_decoder")
CHECKPOINT_MAGIC = b"SKGCKPT1"

_ACTIVATIONS = {
    "relu": ad.relu,
    "elu": ad.elu,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    in_dim: int
    out_dim: int
    aggregator: str = "mean"
    attention_heads: int = 1
    leaky_slope: float = 0.2
    self_loops: bool = True
    activation: str = "default"  # resolves to elu for attention kinds, relu otherwise
    edge_dim: int = 0  # width of the supergat edge-feature concat slot

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.attention_heads < 1:
            raise ConfigError(f"attention_heads must be >= 1, got {self.attention_heads}")
        if self.aggregator != "mean":
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.edge_dim < 0:
            raise ConfigError(f"edge_dim must be >= 0, got {self.edge_dim}")

    def resolved_activation(self) -> str:
        if self.activation != "default":
            return self.activation
        return "elu" if self.kind in ("gat", "supergat") else "relu"


def _activate(t: Tensor, config: LayerConfig) -> Tensor:
    name = config.resolved_activation()
    fn = _ACTIVATIONS.get(name)
    if fn is None:
        raise ConfigError(f"unknown activation {name!r}")
    return fn(t)


@dataclass
class GraphContext:
    """Graph structure lowered to arrays, optionally restricted to a subset
    of edges. Pair arrays hold every directed edge plus one self pair per
    node, grouped by receiver; segment k aggregates into node k."""

    n: int
    adj_norm: SparseAdjacency
    adj_raw: SparseAdjacency
    degree: np.ndarray  # (n,) edge count per node under the active subset
    pair_dst: np.ndarray  # receiver node per directed pair, nondecreasing
    pair_src: np.ndarray  # neighbor node per directed pair
    pair_edge: np.ndarray  # active-edge position per pair, -1 for self pairs
    segments: Segments
    edge_indices: np.ndarray  # graph edge ids that participate


def normalize_adjacency(graph, edge_indices=None) -> SparseAdjacency:
    """Symmetric normalization with self-loops: entry (i, j) carries
    1/sqrt(d_i * d_j) where d counts the node's edges plus its self-loop."""
    edges = _active_edges(graph, edge_indices)
    deg = _edge_degrees(graph.n_nodes, edges) + 1.0
    entries = []
    for u, v in edges:
        w = 1.0 / np.sqrt(deg[u] * deg[v])
        entries.append((u, v, w))
        entries.append((v, u, w))
    for i in range(graph.n_nodes):
        entries.append((i, i, 1.0 / deg[i]))
    return SparseAdjacency.from_entries(graph.n_nodes, entries)


def _active_edges(graph, edge_indices):
    if edge_indices is None:
        return list(graph.edges)
    return [graph.edges[int(i)] for i in edge_indices]


def _edge_degrees(n: int, edges) -> np.ndarray:
    deg = np.zeros(n, dtype=np.float64)
    for u, v in edges:
        deg[u] += 1.0
        deg[v] += 1.0
    return deg


def build_graph_context(graph, edge_indices=None) -> GraphContext:
    n = graph.n_nodes
    if n == 0:
        raise ConfigError("cannot build a context for an empty graph")
    if edge_indices is None:
        edge_indices = np.arange(graph.n_edges, dtype=np.int64)
    else:
        edge_indices = np.asarray(edge_indices, dtype=np.int64)
    edges = _active_edges(graph, edge_indices)
    degree = _edge_degrees(n, edges)

    raw_entries = []
    for u, v in edges:
        raw_entries.append((u, v, 1.0))
        raw_entries.append((v, u, 1.0))
    adj_raw = SparseAdjacency.from_entries(n, raw_entries)
    adj_norm = normalize_adjacency(graph, edge_indices)

    us = np.array([e[0] for e in edges], dtype=np.int64)
    vs = np.array([e[1] for e in edges], dtype=np.int64)
    eid = np.arange(len(edges), dtype=np.int64)
    loop = np.arange(n, dtype=np.int64)
    dst = np.concatenate([us, vs, loop])
    src = np.concatenate([vs, us, loop])
    pedge = np.concatenate([eid, eid, np.full(n, -1, dtype=np.int64)])
    order = np.argsort(dst, kind="stable")
    dst, src, pedge = dst[order], src[order], pedge[order]
    segments = Segments.from_sorted_ids(dst, n)
    return GraphContext(
        n=n,
        adj_norm=adj_norm,
        adj_raw=adj_raw,
        degree=degree,
        pair_dst=dst,
        pair_src=src,
        pair_edge=pedge,
        segments=segments,
        edge_indices=edge_indices,
    )


@dataclass
class AttentionMap:
    """Attention weights per directed (receiver, neighbor) pair, aligned
    with the context's pair arrays; alpha rows sum to 1 per receiver."""

    pair_dst: np.ndarray
    pair_src: np.ndarray
    pair_edge: np.ndarray
    alpha: Tensor  # (n_pairs, 1)


def init_layer_params(config: LayerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    if config.kind in ("sage", "gcn"):
        params["W"] = _xavier(rng, config.in_dim, config.out_dim)
    else:
        w_in = config.in_dim + (config.edge_dim if config.kind == "supergat" else 0)
        for k in range(config.attention_heads):
            params[f"W{k}"] = _xavier(rng, w_in, config.out_dim)
            params[f"a_self{k}"] = _xavier_vec(rng, config.out_dim)
            params[f"a_neigh{k}"] = _xavier_vec(rng, config.out_dim)
    return params


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _xavier_vec(rng: np.random.Generator, out_dim: int) -> Tensor:
    # one half of the length-2*out_dim attention vector
    limit = np.sqrt(6.0 / (2 * out_dim + 1))
    return Tensor(rng.uniform(-limit, limit, size=(out_dim, 1)), requires_grad=True)


def sage_forward(params, ctx: GraphContext, h, config: LayerConfig) -> Tensor:
    """Mean over the closed neighborhood, one shared weight matrix, then
    the configured activation. An isolated node reduces to act(W h_v)."""
    h = ad.as_tensor(h)
    total = ad.add(ad.spmm(ctx.adj_raw, h), h)
    mean = ad.scale_rows(total, 1.0 / (ctx.degree + 1.0))
    return _activate(ad.matmul(mean, params["W"]), config)


def gcn_forward(params, ctx: GraphContext, h, config: LayerConfig) -> Tensor:
    """Symmetric-normalized propagation, then the linear map, then the
    activation."""
    h = ad.as_tensor(h)
    return _activate(ad.matmul(ad.spmm(ctx.adj_norm, h), params["W"]), config)


def _segment_softmax(logits: Tensor, ctx: GraphContext) -> Tensor:
    """Softmax within each receiver segment, shifted by the segment max."""
    m = ad.segment_max_const(logits, ctx.segments)
    shifted = ad.add_const(logits, -np.repeat(m, ctx.segments.sizes, axis=0))
    e = ad.exp(shifted)
    denom = ad.segment_sum(e, ctx.segments)
    return ad.div(e, ad.expand_segments(denom, ctx.segments))


def gat_forward(params, ctx: GraphContext, h, config: LayerConfig) -> Tensor:
    out, _ = _gat_like_forward(params, ctx, h, config, edge_features=None, with_map=False)
    return out


def supergat_forward(
    params, ctx: GraphContext, h, config: LayerConfig, edge_features=None
) -> tuple[Tensor, AttentionMap]:
    """Attention over [h_neighbor || edge_feature] messages; also returns
    the attention map for the auxiliary loss. With edge_dim 0 this matches
    gat_forward exactly."""
    return _gat_like_forward(params, ctx, h, config, edge_features, with_map=True)


def _pair_edge_features(ctx: GraphContext, config: LayerConfig, edge_features) -> np.ndarray:
    n_edges = len(ctx.edge_indices)
    if edge_features is None:
        ef = np.zeros((n_edges, config.edge_dim), dtype=np.float64)
    else:
        ef = edge_features.data if isinstance(edge_features, Tensor) else np.asarray(edge_features)
        ef = np.asarray(ef, dtype=np.float64)
        if ef.shape != (n_edges, config.edge_dim):
            raise ShapeError(
                f"edge features {ef.shape} do not align with "
                f"{n_edges} active edges x edge_dim {config.edge_dim}"
            )
    pef = np.zeros((ctx.pair_dst.size, config.edge_dim), dtype=np.float64)
    mask = ctx.pair_edge >= 0
    pef[mask] = ef[ctx.pair_edge[mask]]
    return pef


def _gat_like_forward(params, ctx, h, config, edge_features, with_map):
    h = ad.as_tensor(h)
    if h.shape[0] != ctx.n:
        raise ShapeError(f"h rows {h.shape[0]} != {ctx.n} nodes")
    is_super = config.kind == "supergat"
    use_edges = is_super and config.edge_dim > 0
    if use_edges:
        pef = _pair_edge_features(ctx, config, edge_features)
        self_pad = np.zeros((ctx.n, config.edge_dim), dtype=np.float64)

    head_sum = None
    alpha_sum = None
    for k in range(config.attention_heads):
        W = params[f"W{k}"]
        a_self = params[f"a_self{k}"]
        a_neigh = params[f"a_neigh{k}"]
        if use_edges:
            # message per pair is W [h_neighbor || e]; the receiver side uses
            # its own message with a zero edge slot
            m_self = ad.matmul(ad.concat_cols(h, Tensor(self_pad)), W)
            m_pair = ad.matmul(
                ad.concat_cols(ad.gather_rows(h, ctx.pair_src), Tensor(pef)), W
            )
        else:
            m_self = ad.matmul(h, W)
            m_pair = ad.matmul(ad.gather_rows(h, ctx.pair_src), W)
        s_self = ad.matmul(m_self, a_self)
        s_pair = ad.matmul(m_pair, a_neigh)
        logits = ad.leaky_relu(
            ad.add(ad.gather_rows(s_self, ctx.pair_dst), s_pair), config.leaky_slope
        )
        alpha = _segment_softmax(logits, ctx)
        agg = ad.segment_sum(ad.mul(alpha, m_pair), ctx.segments)
        head_sum = agg if head_sum is None else ad.add(head_sum, agg)
        if with_map:
            alpha_sum = alpha if alpha_sum is None else ad.add(alpha_sum, alpha)

    if config.attention_heads > 1:
        head_sum = ad.scale(head_sum, 1.0 / config.attention_heads)
        if with_map:
            alpha_sum = ad.scale(alpha_sum, 1.0 / config.attention_heads)
    out = _activate(head_sum, config)
    if not with_map:
        return out, None
    amap = AttentionMap(
        pair_dst=ctx.pair_dst, pair_src=ctx.pair_src, pair_edge=ctx.pair_edge, alpha=alpha_sum
    )
    return out, amap


def uniform_attention_targets(ctx: GraphContext) -> dict[tuple[int, int], float]:
    """Targets that treat every active pair as observed: each receiver
    spreads weight uniformly over its closed neighborhood."""
    inv = 1.0 / (ctx.degree + 1.0)
    return {
        (int(u), int(v)): float(inv[u]) for u, v in zip(ctx.pair_dst, ctx.pair_src)
    }


def supergat_attention_loss(attention_map: AttentionMap, targets) -> Tensor:
    """Sum of squared differences between attention weights and targets,
    which must cover exactly the map's (receiver, neighbor) pairs."""
    n_pairs = attention_map.pair_dst.size
    if len(targets) != n_pairs:
        raise ShapeError(f"{len(targets)} targets for {n_pairs} pairs")
    tvec = np.empty((n_pairs, 1), dtype=np.float64)
    for i in range(n_pairs):
        key = (int(attention_map.pair_dst[i]), int(attention_map.pair_src[i]))
        if key not in targets:
            raise ShapeError(f"no target for pair {key}")
        tvec[i, 0] = targets[key]
    diff = ad.add_const(attention_map.alpha, -tvec)
    return ad.sum_all(ad.mul(diff, diff))


@dataclass(frozen=True)
class ArchSpec:
    """Model-level shape: a stack of same-kind layers plus a head."""

    kind: str
    hidden_dim: int = 64
    n_layers: int = 2
    attention_heads: int = 1
    leaky_slope: float = 0.2
    edge_dim: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")


@dataclass
class GnnModel:
    layer_configs: list[LayerConfig]
    layer_params: list[dict[str, Tensor]]
    head: str
    n_classes: int = 0
    head_params: dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, params in enumerate(self.layer_params):
            for name, tensor in params.items():
                out[f"layer{i}.{name}"] = tensor
        for name, tensor in self.head_params.items():
            out[f"head.{name}"] = tensor
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            p.data = snapshot[name].copy()

    def forward(
        self,
        ctx: GraphContext,
        h,
        training: bool = False,
        dropout_p: float = 0.0,
        drop_rng=None,
        edge_features=None,
    ) -> tuple[Tensor, list[AttentionMap]]:
        """Run the layer stack; returns (output, attention maps).

        The output is class logits under the node_classifier head and node
        embeddings under the link_decoder head. Attention maps are collected
        from every supergat layer for the auxiliary loss.
        """
        x = ad.as_tensor(h)
        if x.shape[1] != self.layer_configs[0].in_dim:
            raise ConfigError(
                f"feature dim {x.shape[1]} != model input dim {self.layer_configs[0].in_dim}"
            )
        maps: list[AttentionMap] = []
        for config, params in zip(self.layer_configs, self.layer_params):
            if training and dropout_p > 0.0:
                x = ad.dropout(x, dropout_p, drop_rng, training=True)
            if config.kind == "sage":
                x = sage_forward(params, ctx, x, config)
            elif config.kind == "gcn":
                x = gcn_forward(params, ctx, x, config)
            elif config.kind == "gat":
                x = gat_forward(params, ctx, x, config)
            else:
                x, amap = supergat_forward(params, ctx, x, config, edge_features)
                maps.append(amap)
        if self.head == "node_classifier":
            if training and dropout_p > 0.0:
                x = ad.dropout(x, dropout_p, drop_rng, training=True)
            x = ad.add(ad.matmul(x, self.head_params["W"]), self.head_params["b"])
        return x, maps


def build_model(
    arch: ArchSpec,
    in_dim: int,
    head: str,
    n_classes: int = 0,
    seed: int = 0,
) -> GnnModel:
    """Assemble a model: n_layers of the chosen kind, then the head.

    The link_decoder head scores pairs by inner products of the final
    embeddings, so the last layer keeps a linear activation there. The
    classifier head starts at zero so initial logits carry no noise.
    """
    if head not in HEAD_KINDS:
        raise ConfigError(f"unknown head {head!r}, expected one of {HEAD_KINDS}")
    if head == "node_classifier" and n_classes < 2:
        raise ConfigError(f"node_classifier needs n_classes >= 2, got {n_classes}")
    rng = np.random.default_rng(seed)
    configs: list[LayerConfig] = []
    params: list[dict[str, Tensor]] = []
    for i in range(arch.n_layers):
        last = i == arch.n_layers - 1
        configs.append(
            LayerConfig(
                kind=arch.kind,
                in_dim=in_dim if i == 0 else arch.hidden_dim,
                out_dim=arch.hidden_dim,
                attention_heads=arch.attention_heads,
                leaky_slope=arch.leaky_slope,
                activation="identity" if (last and head == "link_decoder") else "default",
                edge_dim=arch.edge_dim if arch.kind == "supergat" else 0,
            )
        )
        params.append(init_layer_params(configs[-1], rng))
    head_params: dict[str, Tensor] = {}
    if head == "node_classifier":
        head_params["W"] = Tensor(
            np.zeros((arch.hidden_dim, n_classes)), requires_grad=True
        )
        head_params["b"] = Tensor(np.zeros((1, n_classes)), requires_grad=True)
    return GnnModel(
        layer_configs=configs,
        layer_params=params,
        head=head,
        n_classes=n_classes,
        head_params=head_params,
        seed=seed,
    )


def save_checkpoint(model: GnnModel, path, meta: dict | None = None) -> None:
    """Binary container: magic, u32 header length, JSON header, then f32
    parameter blobs in header order."""
    named = model.parameters()
    header = {
        "format": 1,
        "layers": [asdict(c) for c in model.layer_configs],
        "head": model.head,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for p in named.values():
        parts.append(p.data.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> tuple[GnnModel, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint file: {path}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    if 12 + header_len > len(blob):
        raise FormatError(f"truncated checkpoint header at offset 12 in {path}")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    if header.get("format") != 1:
        raise FormatError(f"unsupported checkpoint format {header.get('format')!r}")
    configs = [LayerConfig(**c) for c in header["layers"]]
    offset = 12 + header_len
    tensors: dict[str, Tensor] = {}
    for entry in header["params"]:
        rows, cols = (int(x) for x in entry["shape"])
        nbytes = 4 * rows * cols
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated blob for {entry['name']!r} at offset {offset}")
        arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
        tensors[entry["name"]] = Tensor(
            arr.astype(np.float64).reshape(rows, cols), requires_grad=True
        )
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")

    layer_params: list[dict[str, Tensor]] = [{} for _ in configs]
    head_params: dict[str, Tensor] = {}
    for name, tensor in tensors.items():
        scope, _, pname = name.partition(".")
        if scope == "head":
            head_params[pname] = tensor
        elif scope.startswith("layer"):
            layer_params[int(scope[5:])][pname] = tensor
        else:
            raise FormatError(f"unknown parameter scope {scope!r}")
    model = GnnModel(
        layer_configs=configs,
        layer_params=layer_params,
        head=header["head"],
        n_classes=int(header.get("n_classes", 0)),
        head_params=head_params,
        seed=int(header.get("seed", 0)),
    )
    return model, header.get("meta", {})
