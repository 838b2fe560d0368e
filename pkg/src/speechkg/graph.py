"""Bipartite speech knowledge graph: build, validate, split, summarize.

A corpus of entity-annotated utterance transcripts becomes a graph with
one node per utterance and one node per distinct entity surface form.
An edge joins an utterance to each entity it mentions, so entities that
are mentioned together sit two hops apart.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusError, EntityError, FormatError, LabelError
from .util import atomic_write_text

log = logging.getLogger(__name__)

UTTERANCE = "utterance"
NAMED_ENTITY = "named_entity"
SPLIT_NAMES = ("train", "dev", "test")
STAT_FIELDS = ("n_nodes", "n_edges", "n_utterance_nodes", "n_entity_nodes")


@dataclass(frozen=True)
class EntityMention:
    surface: str
    ne_type: str


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    text: str
    entities: tuple[EntityMention, ...] = ()


@dataclass(frozen=True)
class Node:
    node_id: int
    key: str
    entity_type: str  # UTTERANCE or NAMED_ENTITY
    ne_type: str | None = None


@dataclass
class KnowledgeGraph:
    nodes: list[Node]
    edges: list[tuple[int, int]]
    ne_type_vocabulary: list[str]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def utterance_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.entity_type == UTTERANCE]

    def entity_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.entity_type == NAMED_ENTITY]

    def edge_set(self) -> frozenset[tuple[int, int]]:
        """Edges as order-normalized pairs, for membership tests."""
        return frozenset(_norm_pair(u, v) for u, v in self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def validate(self) -> None:
        """Check structural invariants; raises FormatError on violation."""
        for i, node in enumerate(self.nodes):
            if node.node_id != i:
                raise FormatError(f"node ids not dense at position {i}")
            is_entity = node.entity_type == NAMED_ENTITY
            if node.entity_type not in (UTTERANCE, NAMED_ENTITY):
                raise FormatError(f"bad entity_type {node.entity_type!r}")
            if is_entity != (node.ne_type is not None):
                raise FormatError(f"ne_type presence mismatch on node {i}")
        seen = set()
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for u, v in self.edges:
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise FormatError(f"edge ({u}, {v}) out of range")
            if u == v:
                raise FormatError(f"self-loop on node {u}")
            if self.nodes[u].entity_type == self.nodes[v].entity_type:
                raise FormatError(f"edge ({u}, {v}) joins same-kind nodes")
            pair = _norm_pair(u, v)
            if pair in seen:
                raise FormatError(f"duplicate edge ({u}, {v})")
            seen.add(pair)
            deg[u] += 1
            deg[v] += 1
        for node in self.nodes:
            if node.entity_type == NAMED_ENTITY and deg[node.node_id] == 0:
                raise FormatError(f"entity node {node.key!r} has degree 0")

    def to_json_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "node_id": n.node_id,
                    "key": n.key,
                    "entity_type": n.entity_type,
                    "ne_type": n.ne_type,
                }
                for n in self.nodes
            ],
            "edges": [[u, v] for u, v in self.edges],
            "ne_type_vocabulary": list(self.ne_type_vocabulary),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "KnowledgeGraph":
        try:
            nodes = [
                Node(
                    node_id=int(n["node_id"]),
                    key=str(n["key"]),
                    entity_type=str(n["entity_type"]),
                    ne_type=None if n.get("ne_type") is None else str(n["ne_type"]),
                )
                for n in payload["nodes"]
            ]
            edges = [(int(u), int(v)) for u, v in payload["edges"]]
            vocab = [str(t) for t in payload.get("ne_type_vocabulary", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad graph JSON: {exc}") from exc
        graph = cls(nodes=nodes, edges=edges, ne_type_vocabulary=vocab)
        graph.validate()
        return graph

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json_dict(), ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad graph JSON in {path}: {exc}") from exc
        return cls.from_json_dict(payload)


@dataclass
class GraphSplit:
    node_assignment: dict[int, str]
    edge_assignment: dict[int, str]
    seed: int

    def indices(self, name: str, unit: str) -> np.ndarray:
        """Sorted ids assigned to one split class for the given unit."""
        assignment = self.node_assignment if unit == "nodes" else self.edge_assignment
        return np.array(sorted(i for i, s in assignment.items() if s == name), dtype=np.int64)


@dataclass
class StatsReport:
    n_nodes: int
    n_edges: int
    n_utterance_nodes: int
    n_entity_nodes: int
    per_split: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["stat\ttrain\tdev\ttest\ttotal"]
        for stat in STAT_FIELDS:
            cells = [stat]
            for name in SPLIT_NAMES:
                value = self.per_split.get(name, {}).get(stat)
                cells.append("" if value is None else str(value))
            cells.append(str(getattr(self, stat)))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _norm_pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u <= v else (v, u)


def canonicalize_entity(surface: str) -> str:
    """Lowercased, whitespace-collapsed, trimmed form of an entity surface."""
    key = " ".join(surface.split()).lower()
    if not key:
        raise EntityError(f"entity surface is empty after trimming: {surface!r}")
    return key


def read_corpus(path) -> list[UtteranceRecord]:
    """Parse a JSONL corpus file; blank lines are skipped.

    Errors carry 1-based line numbers.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                records.append(_record_from_dict(payload))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"line {lineno}: {exc}") from exc
    return records


def _record_from_dict(payload: dict) -> UtteranceRecord:
    if not isinstance(payload, dict):
        raise ValueError("record is not an object")
    utterance_id = payload["utterance_id"]
    if not isinstance(utterance_id, str) or not utterance_id:
        raise ValueError("utterance_id must be a non-empty string")
    text = payload.get("text", "")
    if not isinstance(text, str):
        raise ValueError("text must be a string")
    mentions = []
    for ent in payload.get("entities", []):
        if not isinstance(ent, dict) or "surface" not in ent or "ne_type" not in ent:
            raise ValueError("entity entries need surface and ne_type")
        mentions.append(EntityMention(surface=str(ent["surface"]), ne_type=str(ent["ne_type"])))
    return UtteranceRecord(utterance_id=utterance_id, text=text, entities=tuple(mentions))


def write_corpus(records, path) -> None:
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "utterance_id": rec.utterance_id,
                    "text": rec.text,
                    "entities": [
                        {"surface": m.surface, "ne_type": m.ne_type} for m in rec.entities
                    ],
                },
                ensure_ascii=False,
            )
        )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def build_graph(corpus, ne_type_vocabulary=None) -> KnowledgeGraph:
    """One utterance node per record, one entity node per distinct canonical
    surface, one edge per distinct (utterance, entity) incidence.

    When ne_type_vocabulary is given, every mention label must come from it;
    otherwise the vocabulary is collected in first-appearance order.
    """
    declared = None if ne_type_vocabulary is None else list(ne_type_vocabulary)
    if declared is not None and len(set(declared)) != len(declared):
        raise ConfigError("ne_type_vocabulary has duplicates")
    known = None if declared is None else set(declared)

    nodes: list[Node] = []
    seen_utts: dict[str, int] = {}
    for rec in corpus:
        if rec.utterance_id in seen_utts:
            raise CorpusError(f"duplicate utterance_id {rec.utterance_id!r}")
        seen_utts[rec.utterance_id] = len(nodes)
        nodes.append(Node(node_id=len(nodes), key=rec.utterance_id, entity_type=UTTERANCE))

    vocab: list[str] = [] if declared is None else declared
    entity_ids: dict[str, int] = {}
    entity_types: dict[str, str] = {}
    edges: list[tuple[int, int]] = []
    seen_edges: set[tuple[int, int]] = set()
    for rec in corpus:
        u = seen_utts[rec.utterance_id]
        for mention in rec.entities:
            key = canonicalize_entity(mention.surface)
            if known is not None and mention.ne_type not in known:
                raise LabelError(
                    f"utterance {rec.utterance_id!r}: unknown ne_type {mention.ne_type!r}"
                )
            if declared is None and mention.ne_type not in vocab:
                vocab.append(mention.ne_type)
            if key not in entity_ids:
                entity_ids[key] = len(nodes)
                entity_types[key] = mention.ne_type
                nodes.append(
                    Node(
                        node_id=len(nodes),
                        key=key,
                        entity_type=NAMED_ENTITY,
                        ne_type=mention.ne_type,
                    )
                )
            elif entity_types[key] != mention.ne_type:
                # same surface under two labels: keep the first-seen label
                log.warning(
                    "entity %r labeled %r and %r; keeping %r",
                    key,
                    entity_types[key],
                    mention.ne_type,
                    entity_types[key],
                )
            e = entity_ids[key]
            if (u, e) not in seen_edges:
                seen_edges.add((u, e))
                edges.append((u, e))
    return KnowledgeGraph(nodes=nodes, edges=edges, ne_type_vocabulary=vocab)


def _allocate(total: int, ratios) -> tuple[int, int, int]:
    """Class sizes for a 3-way split: dev and test round to nearest, train
    takes the remainder, trimmed if rounding overshoots on tiny inputs."""
    n_dev = int(round(ratios[1] * total))
    n_test = int(round(ratios[2] * total))
    n_train = total - n_dev - n_test
    while n_train < 0:
        if n_dev >= n_test and n_dev > 0:
            n_dev -= 1
        else:
            n_test -= 1
        n_train += 1
    return n_train, n_dev, n_test


def split_graph(graph: KnowledgeGraph, ratios, seed: int, unit: str) -> GraphSplit:
    """Uniform random partition of nodes or edges under the seed."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ConfigError(f"need 3 ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise ConfigError(f"negative ratio in {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios sum to {sum(ratios)!r}, expected 1")
    if unit not in ("nodes", "edges"):
        raise ConfigError(f"unknown split unit {unit!r}")

    total = graph.n_nodes if unit == "nodes" else graph.n_edges
    sizes = _allocate(total, ratios)
    perm = np.random.default_rng(seed).permutation(total)
    assignment: dict[int, str] = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for idx in perm[start : start + size]:
            assignment[int(idx)] = name
        start += size
    if unit == "nodes":
        return GraphSplit(node_assignment=assignment, edge_assignment={}, seed=seed)
    return GraphSplit(node_assignment={}, edge_assignment=assignment, seed=seed)


def graph_stats(graph: KnowledgeGraph, split: GraphSplit | None = None) -> StatsReport:
    n_utt = sum(1 for n in graph.nodes if n.entity_type == UTTERANCE)
    report = StatsReport(
        n_nodes=graph.n_nodes,
        n_edges=graph.n_edges,
        n_utterance_nodes=n_utt,
        n_entity_nodes=graph.n_nodes - n_utt,
    )
    if split is None:
        return report
    for name in SPLIT_NAMES:
        counts: dict[str, int] = {}
        if split.node_assignment:
            ids = split.indices(name, "nodes")
            counts["n_nodes"] = len(ids)
            counts["n_utterance_nodes"] = sum(
                1 for i in ids if graph.nodes[int(i)].entity_type == UTTERANCE
            )
            counts["n_entity_nodes"] = counts["n_nodes"] - counts["n_utterance_nodes"]
        if split.edge_assignment:
            counts["n_edges"] = len(split.indices(name, "edges"))
        report.per_split[name] = counts
    return report


def write_stats_tsv(report: StatsReport, path) -> None:
    atomic_write_text(path, report.to_tsv())
