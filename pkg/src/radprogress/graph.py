"""Disease progression graph: PMI mining, assembly, retrieval, serialization.

Nodes are observations (duplicated per POS/NEG status and prior/current visit
side) plus single-token temporal and spatial entity words. Edges follow the
reasoning path orientation ``entity -> o_prior -> o_current -> entity``:

* ``S``/``B``/``W``: temporal entity -> prior observation, and current
  observation -> temporal entity, selected per (observation, relation) by
  top-K PMI over training records;
* ``R_S``: current observation -> spatial entity, top-K PMI;
* ``R_O``: prior observation -> current observation of the same label,
  regardless of status, no PMI.

Co-occurrence is counted at the record level: a record contributes 1 to a
(observation-with-status, progression, word) cell when it carries the
observation, the progression label, and the word in its report. Ties in the
top-K ranking break lexicographically by entity word so builds are
reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .constants import (
    CURRENT_SIDE,
    OBSERVATIONS,
    OBSERVATION_TOKENS,
    PRIOR_SIDE,
    PROGRESSION_TO_RELATION,
    REL_OBS,
    REL_SPATIAL,
    RELATIONS,
    SIDES,
    STATUSES,
    TEMPORAL_LEXICON,
    TEMPORAL_RELATIONS,
    SPATIAL_LEXICON,
)
from .corpus import CorpusSplit, VisitRecord, Vocabulary, tokenize_report

NODE_OBSERVATION = "observation"
NODE_TEMPORAL = "temporal_entity"
NODE_SPATIAL = "spatial_entity"
NODE_KINDS = (NODE_OBSERVATION, NODE_TEMPORAL, NODE_SPATIAL)


class GraphError(ValueError):
    """Structural violation while building or validating a graph."""


class UndefinedPairError(GraphError):
    """PMI requested for a pair where a marginal count is zero."""


class GraphFormatError(ValueError):
    """Broken serialized graph JSON."""


@dataclass(frozen=True)
class GraphNode:
    kind: str
    label: str
    token_id: int
    status: str | None = None
    side: str | None = None

    @property
    def is_entity(self) -> bool:
        return self.kind in (NODE_TEMPORAL, NODE_SPATIAL)


@dataclass(frozen=True)
class TypedEdge:
    source: int
    relation: str
    target: int
    pmi: float | None = None


@dataclass(frozen=True)
class ProgressionGraph:
    nodes: tuple[GraphNode, ...]
    edges: tuple[TypedEdge, ...]
    k: int

    def entity_indices(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.is_entity]

    def observation_indices(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.kind == NODE_OBSERVATION]

    def observation_index(self) -> dict[tuple[str, str, str], int]:
        """Map (label, status, side) -> node position for observation nodes."""
        return {
            (node.label, node.status, node.side): i
            for i, node in enumerate(self.nodes)
            if node.kind == NODE_OBSERVATION
        }


def compute_pmi(count_xy: int, count_x: int, count_y: int, n_docs: int) -> float:
    """Pointwise mutual information ln(count_xy * n_docs / (count_x * count_y)).

    A zero joint count returns -inf (the caller drops such candidates); a zero
    marginal raises :class:`UndefinedPairError`.
    """
    if n_docs < 1:
        raise ValueError(f"n_docs must be >= 1, got {n_docs}")
    for name, value in (("count_xy", count_xy), ("count_x", count_x), ("count_y", count_y)):
        if not 0 <= value <= n_docs:
            raise ValueError(f"{name}={value} outside 0..n_docs={n_docs}")
    if count_xy > min(count_x, count_y):
        raise ValueError(
            f"count_xy={count_xy} exceeds min(count_x, count_y)="
            f"{min(count_x, count_y)}"
        )
    if count_x == 0 or count_y == 0:
        raise UndefinedPairError(
            f"pmi undefined for marginals count_x={count_x}, count_y={count_y}"
        )
    if count_xy == 0:
        return float("-inf")
    return math.log((count_xy * n_docs) / (count_x * count_y))


def filter_lexicons(
    temporal: Sequence[str], spatial: Sequence[str], vocab: Vocabulary
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Keep single-token in-vocabulary entries; temporal wins overlaps."""

    def usable(word: str) -> bool:
        return tokenize_report(word) == [word] and word in vocab

    temporal_kept: list[str] = []
    for word in temporal:
        if usable(word) and word not in temporal_kept:
            temporal_kept.append(word)
    spatial_kept: list[str] = []
    for word in spatial:
        if usable(word) and word not in temporal_kept and word not in spatial_kept:
            spatial_kept.append(word)
    return tuple(temporal_kept), tuple(spatial_kept)


@dataclass
class CooccurrenceCounts:
    """Record-level counts backing every PMI computation."""

    n_docs: int
    obs: Counter
    obs_prog: Counter
    word: Counter
    obs_word: Counter
    obs_prog_word: Counter


def _record_units(
    record: VisitRecord, temporal: frozenset, spatial: frozenset
) -> tuple[tuple, ...]:
    obs = tuple(record.observations)
    rels = tuple(
        PROGRESSION_TO_RELATION[p] for p in record.progressions
    )
    tokens = set(tokenize_report(record.report))
    t_words = tuple(sorted(tokens & temporal))
    s_words = tuple(sorted(tokens & spatial))
    return obs, rels, t_words, s_words


def collect_cooccurrence(
    records: Sequence[VisitRecord],
    temporal: Sequence[str],
    spatial: Sequence[str],
    num_workers: int = 0,
) -> CooccurrenceCounts:
    """Count record-level co-occurrence units (parallel map, ordered merge)."""
    t_set, s_set = frozenset(temporal), frozenset(spatial)
    if num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            units = list(pool.map(lambda r: _record_units(r, t_set, s_set), records))
    else:
        units = [_record_units(r, t_set, s_set) for r in records]
    counts = CooccurrenceCounts(
        n_docs=len(records),
        obs=Counter(),
        obs_prog=Counter(),
        word=Counter(),
        obs_word=Counter(),
        obs_prog_word=Counter(),
    )
    for obs, rels, t_words, s_words in units:
        counts.obs.update(obs)
        for word in t_words + s_words:
            counts.word[word] += 1
        for o in obs:
            counts.obs_prog.update((o, rel) for rel in rels)
            counts.obs_word.update((o, word) for word in s_words)
            for rel in rels:
                counts.obs_prog_word.update((o, rel, word) for word in t_words)
    return counts


def _top_k_candidates(
    candidates: Iterable[tuple[str, float]], k: int
) -> list[tuple[str, float]]:
    # Highest PMI first; equal scores break toward the earlier word.
    ranked = sorted(candidates, key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def build_progression_graph(
    train: CorpusSplit | Sequence[VisitRecord],
    vocab: Vocabulary,
    temporal_lexicon: Sequence[str] = TEMPORAL_LEXICON,
    spatial_lexicon: Sequence[str] = SPATIAL_LEXICON,
    k: int = 30,
    num_workers: int = 0,
) -> ProgressionGraph:
    """Mine the progression graph from training records.

    Empty (post-filter) lexicons yield a graph of observation nodes and R_O
    edges only.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    records = train.train if isinstance(train, CorpusSplit) else tuple(train)
    temporal, spatial = filter_lexicons(temporal_lexicon, spatial_lexicon, vocab)
    counts = collect_cooccurrence(records, temporal, spatial, num_workers=num_workers)

    present_units = [
        (label, status)
        for label in OBSERVATIONS
        for status in STATUSES
        if counts.obs[(label, status)] > 0
    ]

    selected_temporal: dict[tuple[tuple[str, str], str], list[tuple[str, float]]] = {}
    selected_spatial: dict[tuple[str, str], list[tuple[str, float]]] = {}
    for unit in present_units:
        for rel in TEMPORAL_RELATIONS:
            count_x = counts.obs_prog[(unit, rel)]
            if count_x == 0:
                continue
            cands = []
            for word in temporal:
                count_xy = counts.obs_prog_word[(unit, rel, word)]
                if count_xy == 0:
                    continue
                pmi = compute_pmi(count_xy, count_x, counts.word[word], counts.n_docs)
                cands.append((word, pmi))
            if cands:
                selected_temporal[(unit, rel)] = _top_k_candidates(cands, k)
        cands = []
        for word in spatial:
            count_xy = counts.obs_word[(unit, word)]
            if count_xy == 0:
                continue
            pmi = compute_pmi(
                count_xy, counts.obs[unit], counts.word[word], counts.n_docs
            )
            cands.append((word, pmi))
        if cands:
            selected_spatial[unit] = _top_k_candidates(cands, k)

    nodes: list[GraphNode] = []
    node_pos: dict[tuple, int] = {}

    def add_obs_node(label: str, status: str, side: str) -> int:
        key = (NODE_OBSERVATION, label, status, side)
        if key not in node_pos:
            node_pos[key] = len(nodes)
            nodes.append(
                GraphNode(
                    kind=NODE_OBSERVATION,
                    label=label,
                    token_id=vocab.observation_token_id(label),
                    status=status,
                    side=side,
                )
            )
        return node_pos[key]

    def add_entity_node(word: str, kind: str) -> int:
        key = (kind, word)
        if key not in node_pos:
            node_pos[key] = len(nodes)
            nodes.append(GraphNode(kind=kind, label=word, token_id=vocab.id_of(word)))
        return node_pos[key]

    for label, status in present_units:
        for side in SIDES:
            add_obs_node(label, status, side)

    used_temporal = sorted(
        {word for picks in selected_temporal.values() for word, _ in picks}
    )
    used_spatial = sorted(
        {word for picks in selected_spatial.values() for word, _ in picks}
    )
    for word in used_temporal:
        add_entity_node(word, NODE_TEMPORAL)
    for word in used_spatial:
        add_entity_node(word, NODE_SPATIAL)

    edges: list[TypedEdge] = []
    for label in OBSERVATIONS:
        statuses_here = [s for s in STATUSES if counts.obs[(label, s)] > 0]
        for status_p in statuses_here:
            for status_c in statuses_here:
                edges.append(
                    TypedEdge(
                        source=node_pos[(NODE_OBSERVATION, label, status_p, PRIOR_SIDE)],
                        relation=REL_OBS,
                        target=node_pos[(NODE_OBSERVATION, label, status_c, CURRENT_SIDE)],
                    )
                )
    for unit in present_units:
        label, status = unit
        prior_idx = node_pos[(NODE_OBSERVATION, label, status, PRIOR_SIDE)]
        current_idx = node_pos[(NODE_OBSERVATION, label, status, CURRENT_SIDE)]
        for rel in TEMPORAL_RELATIONS:
            for word, pmi in selected_temporal.get((unit, rel), []):
                entity_idx = node_pos[(NODE_TEMPORAL, word)]
                edges.append(TypedEdge(entity_idx, rel, prior_idx, pmi))
                edges.append(TypedEdge(current_idx, rel, entity_idx, pmi))
        for word, pmi in selected_spatial.get(unit, []):
            entity_idx = node_pos[(NODE_SPATIAL, word)]
            edges.append(TypedEdge(current_idx, REL_SPATIAL, entity_idx, pmi))

    graph = ProgressionGraph(nodes=tuple(nodes), edges=tuple(edges), k=k)
    validate_graph(graph)
    return graph


def validate_graph(graph: ProgressionGraph) -> None:
    """Check node/edge type constraints; raise :class:`GraphError` on breach."""
    for node in graph.nodes:
        if node.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {node.kind!r}")
        if node.kind == NODE_OBSERVATION:
            if node.status not in STATUSES or node.side not in SIDES:
                raise GraphError(
                    f"observation node {node.label!r} needs status and side"
                )
        elif node.status is not None or node.side is not None:
            raise GraphError(f"entity node {node.label!r} cannot carry status/side")
    seen: set[tuple[int, str, int]] = set()
    for edge in graph.edges:
        if not (0 <= edge.source < len(graph.nodes)) or not (
            0 <= edge.target < len(graph.nodes)
        ):
            raise GraphError(f"edge endpoint out of range: {edge}")
        key = (edge.source, edge.relation, edge.target)
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)
        src, dst = graph.nodes[edge.source], graph.nodes[edge.target]
        if edge.relation in TEMPORAL_RELATIONS:
            ok = (
                src.kind == NODE_TEMPORAL
                and dst.kind == NODE_OBSERVATION
                and dst.side == PRIOR_SIDE
            ) or (
                src.kind == NODE_OBSERVATION
                and src.side == CURRENT_SIDE
                and dst.kind == NODE_TEMPORAL
            )
            if not ok:
                raise GraphError(f"temporal edge endpoints invalid: {edge}")
        elif edge.relation == REL_SPATIAL:
            if not (
                src.kind == NODE_OBSERVATION
                and src.side == CURRENT_SIDE
                and dst.kind == NODE_SPATIAL
            ):
                raise GraphError(f"spatial edge endpoints invalid: {edge}")
        elif edge.relation == REL_OBS:
            if not (
                src.kind == NODE_OBSERVATION
                and src.side == PRIOR_SIDE
                and dst.kind == NODE_OBSERVATION
                and dst.side == CURRENT_SIDE
                and src.label == dst.label
            ):
                raise GraphError(f"observation edge endpoints invalid: {edge}")
        else:
            raise GraphError(f"unknown relation {edge.relation!r}")
        if edge.relation == REL_OBS:
            if edge.pmi is not None:
                raise GraphError("R_O edges carry no PMI")
        elif edge.pmi is None or not math.isfinite(edge.pmi):
            raise GraphError(f"PMI edge needs a finite score: {edge}")


def retrieve_subgraph(
    graph: ProgressionGraph,
    prior_obs: Iterable[tuple[str, str]],
    current_obs: Iterable[tuple[str, str]],
    progressions: Iterable[str],
) -> ProgressionGraph:
    """Induced per-sample subgraph for a (prior, current, progression) query.

    Prior-side temporal edges are filtered to the queried progressions;
    current-side temporal and spatial edges always come along; entity nodes
    are whatever those edges touch. Queries not present in the graph
    contribute nothing; an empty query yields an empty graph.
    """
    prior_set = set(prior_obs)
    current_set = set(current_obs)
    wanted_rels = {PROGRESSION_TO_RELATION[p] for p in progressions}

    selected_prior: set[int] = set()
    selected_current: set[int] = set()
    for i, node in enumerate(graph.nodes):
        if node.kind != NODE_OBSERVATION:
            continue
        if node.side == PRIOR_SIDE and (node.label, node.status) in prior_set:
            selected_prior.add(i)
        if node.side == CURRENT_SIDE and (node.label, node.status) in current_set:
            selected_current.add(i)

    kept_edges: list[TypedEdge] = []
    touched: set[int] = set(selected_prior) | set(selected_current)
    for edge in graph.edges:
        if edge.relation == REL_OBS:
            keep = edge.source in selected_prior and edge.target in selected_current
        elif edge.relation == REL_SPATIAL:
            keep = edge.source in selected_current
        elif graph.nodes[edge.source].kind == NODE_TEMPORAL:
            keep = edge.target in selected_prior and edge.relation in wanted_rels
        else:
            keep = edge.source in selected_current
        if keep:
            kept_edges.append(edge)
            touched.add(edge.source)
            touched.add(edge.target)

    kept_nodes = sorted(touched)
    remap = {old: new for new, old in enumerate(kept_nodes)}
    return ProgressionGraph(
        nodes=tuple(graph.nodes[i] for i in kept_nodes),
        edges=tuple(
            TypedEdge(remap[e.source], e.relation, remap[e.target], e.pmi)
            for e in kept_edges
        ),
        k=graph.k,
    )


def graph_to_obj(graph: ProgressionGraph) -> dict:
    nodes = [
        {
            "kind": n.kind,
            "label": n.label,
            "status": n.status,
            "side": n.side,
            "token_id": n.token_id,
        }
        for n in graph.nodes
    ]
    edges = []
    for e in graph.edges:
        entry: dict = {"src": e.source, "rel": e.relation, "dst": e.target}
        if e.pmi is not None:
            entry["pmi"] = e.pmi
        edges.append(entry)
    return {"nodes": nodes, "edges": edges, "K": graph.k}


def graph_to_json(graph: ProgressionGraph) -> str:
    return json.dumps(graph_to_obj(graph))


def graph_from_obj(obj: dict) -> ProgressionGraph:
    if not isinstance(obj, dict) or not {"nodes", "edges", "K"} <= set(obj):
        raise GraphFormatError("graph JSON needs 'nodes', 'edges', and 'K' keys")
    try:
        nodes = tuple(
            GraphNode(
                kind=n["kind"],
                label=n["label"],
                token_id=n["token_id"],
                status=n.get("status"),
                side=n.get("side"),
            )
            for n in obj["nodes"]
        )
        edges = tuple(
            TypedEdge(e["src"], e["rel"], e["dst"], e.get("pmi")) for e in obj["edges"]
        )
        graph = ProgressionGraph(nodes=nodes, edges=edges, k=int(obj["K"]))
    except (KeyError, TypeError) as exc:
        raise GraphFormatError(f"malformed graph JSON: {exc}") from exc
    validate_graph(graph)
    return graph


def graph_from_json(payload: str) -> ProgressionGraph:
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid graph JSON: {exc.msg}") from exc
    return graph_from_obj(obj)


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_of_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


__all__ = [
    "NODE_KINDS",
    "NODE_OBSERVATION",
    "NODE_SPATIAL",
    "NODE_TEMPORAL",
    "CooccurrenceCounts",
    "GraphError",
    "GraphFormatError",
    "GraphNode",
    "ProgressionGraph",
    "TypedEdge",
    "UndefinedPairError",
    "build_progression_graph",
    "collect_cooccurrence",
    "compute_pmi",
    "filter_lexicons",
    "graph_from_json",
    "graph_from_obj",
    "graph_to_json",
    "graph_to_obj",
    "retrieve_subgraph",
    "sha256_of_file",
    "sha256_of_text",
    "validate_graph",
]
