"""Training loops, heads, and negative sampling for node classification
and link prediction.

Both trainers run full batch. Classification sees the whole graph
structure and masks the loss to train nodes; link prediction message
passes over train edges only, scores pairs with an inner-product
decoder, and resamples 1:1 negatives each epoch. Model selection keeps
the epoch with the lowest dev loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, MissingKeyError, SamplingError, TrainingError
from .features import FeatureMatrix
from .graph import NAMED_ENTITY, UTTERANCE, KnowledgeGraph
from .layers import ArchSpec, GnnModel, GraphContext, build_graph_context, build_model
from .metrics import average_precision, macro_one_vs_rest, roc_auc
from .optim import AdamState, adam_step, zero_grads
from .util import atomic_write_text, derive_seed

log = logging.getLogger(__name__)

TASKS = ("node_classification", "link_prediction")
LABEL_TARGETS = ("entity_type_binary", "ne_type_multiclass")
BINARY_CLASS_NAMES = [NAMED_ENTITY, UTTERANCE]  # class 1, the positive, is utterance


@dataclass
class TaskConfig:
    task: str
    label_target: str = "entity_type_binary"
    epochs: int = 250
    lr: float = 0.005
    weight_decay: float = 0.05
    dropout: float = 0.2
    seed: int = 0
    negative_ratio: float = 1.0
    lambda_att: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.label_target not in LABEL_TARGETS:
            raise ConfigError(f"unknown label_target {self.label_target!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.negative_ratio <= 0:
            raise ConfigError(f"negative_ratio must be > 0, got {self.negative_ratio}")


@dataclass
class TrainedModel:
    model: GnnModel
    config: TaskConfig
    loss_curve: list[tuple[int, float, float]]
    best_epoch: int
    train_edge_indices: np.ndarray | None = None  # link task: message-passing edges
    label_vocab: list[str] | None = None  # classification: class id -> name


@dataclass
class EdgeBatch:
    positives: np.ndarray  # (k, 2) node pairs
    negatives: np.ndarray  # (m, 2) node pairs, absent from the graph

    def validate(self, graph: KnowledgeGraph) -> None:
        edge_set = graph.edge_set()
        for u, v in self.negatives:
            if u == v:
                raise SamplingError(f"negative self pair ({u}, {u})")
            if _norm_pair(int(u), int(v)) in edge_set:
                raise SamplingError(f"negative ({u}, {v}) is a real edge")


@dataclass
class EvalReport:
    ap: float
    auc: float
    loss_curve: list[tuple[int, float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"ap": self.ap, "auc": self.auc, "extra": self.extra}


def _norm_pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u <= v else (v, u)


def node_labels(graph: KnowledgeGraph, target: str, vocab=None):
    """Per-node integer labels for a classification target.

    Returns (labels, n_classes, mask, class_names); mask marks nodes that
    participate. The multiclass target covers entity nodes only, and nodes
    whose type falls outside the vocabulary are masked out.
    """
    n = graph.n_nodes
    if target == "entity_type_binary":
        labels = np.array(
            [1 if node.entity_type == UTTERANCE else 0 for node in graph.nodes], dtype=np.int64
        )
        return labels, 2, np.ones(n, dtype=bool), list(BINARY_CLASS_NAMES)
    if target == "ne_type_multiclass":
        names = list(vocab) if vocab is not None else list(graph.ne_type_vocabulary)
        if not names:
            raise ConfigError("ne_type_multiclass needs a non-empty vocabulary")
        index = {t: i for i, t in enumerate(names)}
        labels = np.full(n, -1, dtype=np.int64)
        mask = np.zeros(n, dtype=bool)
        skipped = 0
        for node in graph.nodes:
            if node.entity_type != NAMED_ENTITY:
                continue
            c = index.get(node.ne_type)
            if c is None:
                skipped += 1
                continue
            labels[node.node_id] = c
            mask[node.node_id] = True
        if skipped:
            log.warning("%d entity nodes have types outside the vocabulary", skipped)
        return labels, len(names), mask, names
    raise ConfigError(f"unknown label_target {target!r}")


def _split_node_indices(split, mask: np.ndarray):
    if split is None:
        train = np.flatnonzero(mask)
        empty = np.empty(0, dtype=np.int64)
        return train, empty, empty
    if not split.node_assignment:
        raise ConfigError("node classification needs a node split")
    out = []
    for name in ("train", "dev", "test"):
        ids = split.indices(name, "nodes")
        out.append(ids[mask[ids]] if ids.size else ids)
    return tuple(out)


def _attention_penalty(maps, ctx: GraphContext, lam: float):
    """Auxiliary attention loss summed over supergat layers: squared
    distance to the uniform closed-neighborhood target."""
    if not maps or lam == 0.0:
        return None
    tvec = (1.0 / (ctx.degree + 1.0))[ctx.pair_dst].reshape(-1, 1)
    total = None
    for amap in maps:
        diff = ad.add_const(amap.alpha, -tvec)
        term = ad.sum_all(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, lam)


def train_node_classifier(
    graph: KnowledgeGraph,
    features: FeatureMatrix,
    split,
    arch: ArchSpec,
    cfg: TaskConfig,
) -> TrainedModel:
    """Full-batch classifier training with the whole graph visible.

    split may be None, which trains on every labeled node (the setup used
    before zero-shot transfer); the dev column then tracks the eval-mode
    train loss.
    """
    if features.n_nodes != graph.n_nodes:
        raise ConfigError(f"{features.n_nodes} feature rows for {graph.n_nodes} nodes")
    labels, n_classes, mask, names = node_labels(graph, cfg.label_target)
    train_idx, dev_idx, _ = _split_node_indices(split, mask)
    if train_idx.size == 0:
        raise ConfigError("no labeled training nodes")

    ctx = build_graph_context(graph)
    model = build_model(
        arch,
        in_dim=features.dim,
        head="node_classifier",
        n_classes=n_classes,
        seed=derive_seed(cfg.seed, "init"),
    )
    h0 = Tensor(features.data)
    eye = np.eye(n_classes)
    train_onehot = eye[labels[train_idx]]
    dev_sel = dev_idx if dev_idx.size else train_idx
    dev_onehot = eye[labels[dev_sel]]

    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    curve: list[tuple[int, float, float]] = []
    best_epoch, best_dev, best_params = 0, np.inf, model.snapshot()
    for epoch in range(cfg.epochs):
        logits, maps = model.forward(
            ctx, h0, training=True, dropout_p=cfg.dropout, drop_rng=drop_rng
        )
        loss = ad.softmax_cross_entropy(ad.gather_rows(logits, train_idx), train_onehot)
        penalty = _attention_penalty(maps, ctx, cfg.lambda_att)
        if penalty is not None:
            loss = ad.add(loss, penalty)
        train_loss = ad.check_finite_loss(loss, f"epoch {epoch}")
        zero_grads(params)
        loss.backward()
        adam_step(params, opt)

        eval_logits, _ = model.forward(ctx, h0, training=False)
        dev_tensor = ad.softmax_cross_entropy(ad.gather_rows(eval_logits, dev_sel), dev_onehot)
        dev_loss = ad.check_finite_loss(dev_tensor, f"epoch {epoch} (dev)")
        dev_tensor.release_graph()  # never backpropagated
        curve.append((epoch, train_loss, dev_loss))
        if dev_loss < best_dev:
            best_epoch, best_dev, best_params = epoch, dev_loss, model.snapshot()
    model.restore(best_params)
    return TrainedModel(
        model=model,
        config=cfg,
        loss_curve=curve,
        best_epoch=best_epoch,
        label_vocab=names,
    )


def _class_probabilities(model: GnnModel, ctx: GraphContext, features: FeatureMatrix):
    logits, _ = model.forward(ctx, Tensor(features.data), training=False)
    x = logits.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def evaluate_node_classifier(
    trained: TrainedModel,
    graph: KnowledgeGraph,
    features: FeatureMatrix,
    node_indices,
    ctx: GraphContext | None = None,
    labels=None,
) -> EvalReport:
    """AP and AUC over the given nodes; tied scores are neutralized by a
    seeded shuffle before the ranking metrics."""
    idx = np.asarray(node_indices, dtype=np.int64)
    if ctx is None:
        ctx = build_graph_context(graph)
    if labels is None:
        labels, _, mask, _ = node_labels(
            graph,
            trained.config.label_target,
            vocab=trained.label_vocab if trained.config.label_target == "ne_type_multiclass" else None,
        )
        idx = idx[mask[idx]]
    probs = _class_probabilities(trained.model, ctx, features)
    rng = np.random.default_rng(derive_seed(trained.config.seed, "eval_shuffle"))
    perm = rng.permutation(idx.size)
    sel = idx[perm]
    if trained.config.label_target == "entity_type_binary":
        ap = average_precision(probs[sel, 1], labels[sel])
        auc = roc_auc(probs[sel, 1], labels[sel])
        extra = {"n_eval": int(idx.size), "positive_class": UTTERANCE}
    else:
        n_classes = trained.model.n_classes
        ap, auc, per_class = macro_one_vs_rest(probs[sel], labels[sel], n_classes)
        extra = {"n_eval": int(idx.size), "per_class": {str(k): v for k, v in per_class.items()}}
    return EvalReport(ap=ap, auc=auc, loss_curve=trained.loss_curve, extra=extra)


def sample_negative_edges(
    graph: KnowledgeGraph,
    n: int,
    seed,
    constraint: str = "bipartite_only",
    exclude=None,
) -> np.ndarray:
    """Uniform non-edges, distinct within the returned batch.

    seed may be an int or a Generator. bipartite_only draws
    (utterance, entity) pairs; any_pair draws unordered node pairs.
    """
    if constraint not in ("bipartite_only", "any_pair"):
        raise ConfigError(f"unknown constraint {constraint!r}")
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    if n == 0:
        return np.empty((0, 2), dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    exclude_set = graph.edge_set() if exclude is None else {(min(u, v), max(u, v)) for u, v in exclude}

    if constraint == "bipartite_only":
        utt = np.array(graph.utterance_ids(), dtype=np.int64)
        ent = np.array(graph.entity_ids(), dtype=np.int64)
        kind = np.zeros(graph.n_nodes, dtype=np.int8)
        kind[utt] = 1
        population = utt.size * ent.size
        excluded = sum(1 for u, v in exclude_set if kind[u] != kind[v])
    else:
        population = graph.n_nodes * (graph.n_nodes - 1) // 2
        excluded = len(exclude_set)
    available = population - excluded
    if n > available:
        raise SamplingError(f"requested {n} non-edges, only {available} exist")

    if population <= max(4 * n, 1024):
        # dense regime: enumerate candidates and choose without replacement
        if constraint == "bipartite_only":
            cands = [
                (int(u), int(e))
                for u in utt
                for e in ent
                if _norm_pair(int(u), int(e)) not in exclude_set
            ]
        else:
            cands = [
                (i, j)
                for i in range(graph.n_nodes)
                for j in range(i + 1, graph.n_nodes)
                if (i, j) not in exclude_set
            ]
        picks = rng.choice(len(cands), size=n, replace=False)
        return np.array([cands[int(i)] for i in picks], dtype=np.int64)

    chosen: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    attempts = 0
    while len(chosen) < n:
        attempts += 1
        if attempts > 1000:
            raise SamplingError(
                f"rejection sampling stalled after {attempts} rounds "
                f"({len(chosen)}/{n} found, {available} available)"
            )
        batch = max(2 * (n - len(chosen)), 64)
        if constraint == "bipartite_only":
            us = utt[rng.integers(0, utt.size, size=batch)]
            vs = ent[rng.integers(0, ent.size, size=batch)]
        else:
            us = rng.integers(0, graph.n_nodes, size=batch)
            vs = rng.integers(0, graph.n_nodes, size=batch)
        for u, v in zip(us.tolist(), vs.tolist()):
            if u == v:
                continue
            pair = _norm_pair(u, v)
            if pair in exclude_set or pair in seen:
                continue
            seen.add(pair)
            chosen.append((u, v))
            if len(chosen) == n:
                break
    return np.array(chosen, dtype=np.int64)


def _pair_logits(emb: Tensor, pairs: np.ndarray) -> Tensor:
    left = ad.gather_rows(emb, pairs[:, 0])
    right = ad.gather_rows(emb, pairs[:, 1])
    return ad.row_sum(ad.mul(left, right))


def train_link_predictor(
    graph: KnowledgeGraph,
    features: FeatureMatrix,
    split,
    arch: ArchSpec,
    cfg: TaskConfig,
) -> TrainedModel:
    """BCE on inner-product scores over train positives plus per-epoch
    resampled negatives. Message passing sees train edges only, and
    negatives are drawn outside the full edge set, so held-out edges
    never reach the training signal.

    split may be None, which trains on every edge before zero-shot
    transfer; the dev column then scores the train positives.
    """
    if features.n_nodes != graph.n_nodes:
        raise ConfigError(f"{features.n_nodes} feature rows for {graph.n_nodes} nodes")
    if split is None:
        train_e = np.arange(graph.n_edges, dtype=np.int64)
        dev_e = np.empty(0, dtype=np.int64)
        test_e = np.empty(0, dtype=np.int64)
    else:
        if not split.edge_assignment:
            raise ConfigError("link prediction needs an edge split")
        train_e = split.indices("train", "edges")
        dev_e = split.indices("dev", "edges")
        test_e = split.indices("test", "edges")
    if train_e.size == 0:
        raise ConfigError("no training edges")

    edges = np.array(graph.edges, dtype=np.int64)
    train_pairs = edges[train_e]
    held_out = {_norm_pair(int(u), int(v)) for u, v in edges[np.concatenate([dev_e, test_e])]}
    train_set = {_norm_pair(int(u), int(v)) for u, v in train_pairs}
    if train_set & held_out:
        raise TrainingError("train edges overlap held-out edges")

    ctx = build_graph_context(graph, edge_indices=train_e)
    model = build_model(
        arch, in_dim=features.dim, head="link_decoder", seed=derive_seed(cfg.seed, "init")
    )
    h0 = Tensor(features.data)
    full_edge_set = graph.edge_set()

    dev_pairs = edges[dev_e] if dev_e.size else train_pairs
    dev_neg = sample_negative_edges(
        graph,
        dev_pairs.shape[0],
        np.random.default_rng(derive_seed(cfg.seed, "dev_negatives")),
        exclude=full_edge_set,
    )
    dev_all = np.vstack([dev_pairs, dev_neg])
    dev_labels = np.concatenate(
        [np.ones(dev_pairs.shape[0]), np.zeros(dev_neg.shape[0])]
    ).reshape(-1, 1)

    n_neg = max(1, int(round(train_pairs.shape[0] * cfg.negative_ratio)))
    neg_rng = np.random.default_rng(derive_seed(cfg.seed, "negatives"))
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    curve: list[tuple[int, float, float]] = []
    best_epoch, best_dev, best_params = 0, np.inf, model.snapshot()
    for epoch in range(cfg.epochs):
        batch = EdgeBatch(
            positives=train_pairs,
            negatives=sample_negative_edges(graph, n_neg, neg_rng, exclude=full_edge_set),
        )
        emb, maps = model.forward(
            ctx, h0, training=True, dropout_p=cfg.dropout, drop_rng=drop_rng
        )
        pairs = np.vstack([batch.positives, batch.negatives])
        y = np.concatenate(
            [np.ones(batch.positives.shape[0]), np.zeros(batch.negatives.shape[0])]
        ).reshape(-1, 1)
        loss = ad.binary_cross_entropy_with_logits(_pair_logits(emb, pairs), y)
        penalty = _attention_penalty(maps, ctx, cfg.lambda_att)
        if penalty is not None:
            loss = ad.add(loss, penalty)
        train_loss = ad.check_finite_loss(loss, f"epoch {epoch}")
        zero_grads(params)
        loss.backward()
        adam_step(params, opt)

        emb_eval, _ = model.forward(ctx, h0, training=False)
        dev_tensor = ad.binary_cross_entropy_with_logits(_pair_logits(emb_eval, dev_all), dev_labels)
        dev_loss = ad.check_finite_loss(dev_tensor, f"epoch {epoch} (dev)")
        dev_tensor.release_graph()  # never backpropagated
        curve.append((epoch, train_loss, dev_loss))
        if dev_loss < best_dev:
            best_epoch, best_dev, best_params = epoch, dev_loss, model.snapshot()
    model.restore(best_params)
    return TrainedModel(
        model=model,
        config=cfg,
        loss_curve=curve,
        best_epoch=best_epoch,
        train_edge_indices=train_e,
    )


def evaluate_link_predictor(
    trained: TrainedModel,
    graph: KnowledgeGraph,
    features: FeatureMatrix,
    eval_edge_indices,
    negatives_purpose: str = "test_negatives",
    message_edge_indices=None,
) -> EvalReport:
    """Balanced ranking evaluation: held-out positives against an equal
    number of sampled non-edges. Message passing defaults to the model's
    train edges; pass message_edge_indices when scoring a different graph."""
    eval_e = np.asarray(eval_edge_indices, dtype=np.int64)
    if eval_e.size == 0:
        raise ConfigError("no edges to evaluate")
    edges = np.array(graph.edges, dtype=np.int64)
    pos = edges[eval_e]
    neg = sample_negative_edges(
        graph,
        pos.shape[0],
        np.random.default_rng(derive_seed(trained.config.seed, negatives_purpose)),
        exclude=graph.edge_set(),
    )
    if message_edge_indices is None:
        message_edge_indices = trained.train_edge_indices
    ctx = build_graph_context(graph, edge_indices=message_edge_indices)
    emb, _ = trained.model.forward(ctx, Tensor(features.data), training=False)
    scores = _pair_logits(emb, np.vstack([pos, neg])).data.reshape(-1)
    labels = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    rng = np.random.default_rng(derive_seed(trained.config.seed, "eval_shuffle"))
    perm = rng.permutation(scores.size)
    return EvalReport(
        ap=average_precision(scores[perm], labels[perm]),
        auc=roc_auc(scores[perm], labels[perm]),
        loss_curve=trained.loss_curve,
        extra={"n_eval": int(scores.size)},
    )


def score_edges(
    trained: TrainedModel,
    graph: KnowledgeGraph,
    features: FeatureMatrix,
    pairs,
    edge_indices=None,
) -> np.ndarray:
    """Inner-product logits for arbitrary node pairs; symmetric in (u, v)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ConfigError(f"pairs must be (k, 2), got {pairs.shape}")
    if pairs.size and (pairs.min() < 0 or pairs.max() >= graph.n_nodes):
        bad = pairs.flat[np.argmax((pairs < 0) | (pairs >= graph.n_nodes))]
        raise MissingKeyError(f"unknown node id {int(bad)}")
    if edge_indices is None:
        edge_indices = trained.train_edge_indices
    ctx = build_graph_context(graph, edge_indices=edge_indices)
    emb, _ = trained.model.forward(ctx, Tensor(features.data), training=False)
    return _pair_logits(emb, pairs).data.reshape(-1)


def transductive_infer(
    trained: TrainedModel,
    other_graph: KnowledgeGraph,
    other_features: FeatureMatrix,
    labels=None,
) -> EvalReport:
    """Zero-shot forward pass on an independent graph.

    Classification scores every labeled node; link prediction ranks the
    graph's own edges against sampled non-edges.
    """
    in_dim = trained.model.layer_configs[0].in_dim
    if other_features.dim != in_dim:
        raise ConfigError(f"feature dim {other_features.dim} != model input dim {in_dim}")
    if other_features.n_nodes != other_graph.n_nodes:
        raise ConfigError(
            f"{other_features.n_nodes} feature rows for {other_graph.n_nodes} nodes"
        )
    ctx = build_graph_context(other_graph)
    if trained.config.task == "node_classification":
        if labels is None:
            labels_arr, _, mask, _ = node_labels(
                other_graph,
                trained.config.label_target,
                vocab=trained.label_vocab
                if trained.config.label_target == "ne_type_multiclass"
                else None,
            )
            idx = np.flatnonzero(mask)
        else:
            labels_arr = np.asarray(labels, dtype=np.int64)
            idx = np.arange(other_graph.n_nodes, dtype=np.int64)
        return evaluate_node_classifier(
            trained, other_graph, other_features, idx, ctx=ctx, labels=labels_arr
        )
    # zero-shot link scoring sees the whole unseen graph as input
    all_edges = np.arange(other_graph.n_edges, dtype=np.int64)
    return evaluate_link_predictor(
        trained,
        other_graph,
        other_features,
        all_edges,
        message_edge_indices=all_edges,
    )


def loss_curve_csv(curve) -> str:
    lines = ["epoch,train_loss,dev_loss"]
    for epoch, train_loss, dev_loss in curve:
        lines.append(f"{epoch},{train_loss!r},{dev_loss!r}")
    return "\n".join(lines) + "\n"


def write_loss_csv(path, curve) -> None:
    atomic_write_text(path, loss_curve_csv(curve))
