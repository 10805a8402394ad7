"""Progression graph tests: PMI, mining, retrieval, serialization."""

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    brute_force_top_k,
    expected_edge_pmi,
    graph_edge_pmi,
    node_key,
    random_corpus,
)
from radprogress.constants import STATUS_NEGATIVE, STATUS_POSITIVE
from radprogress.corpus import Vocabulary
from radprogress.graph import (
    GraphError,
    GraphFormatError,
    GraphNode,
    ProgressionGraph,
    TypedEdge,
    UndefinedPairError,
    build_progression_graph,
    compute_pmi,
    filter_lexicons,
    graph_from_json,
    graph_to_json,
    retrieve_subgraph,
    sha256_of_text,
    validate_graph,
)


class TestComputePmi:
    def test_ln2_example(self):
        # Joint in 1 of 2 docs, each marginal 1: ln(1*2 / (1*1)) = ln 2.
        assert compute_pmi(1, 1, 1, 2) == pytest.approx(math.log(2), abs=1e-12)

    def test_independence_is_zero(self):
        assert compute_pmi(2, 2, 2, 2) == pytest.approx(0.0, abs=1e-12)

    def test_zero_joint_is_neg_inf(self):
        assert compute_pmi(0, 3, 4, 10) == float("-inf")

    def test_zero_marginal_undefined(self):
        with pytest.raises(UndefinedPairError):
            compute_pmi(0, 0, 4, 10)

    def test_bad_n_docs(self):
        with pytest.raises(ValueError):
            compute_pmi(0, 0, 0, 0)

    def test_count_above_n_docs(self):
        with pytest.raises(ValueError):
            compute_pmi(1, 11, 1, 10)

    def test_joint_above_marginal(self):
        with pytest.raises(ValueError):
            compute_pmi(5, 4, 6, 10)

    @given(st.data())
    @settings(max_examples=200, deadline=None)
    def test_symmetry_and_bound(self, data):
        n = data.draw(st.integers(1, 50))
        cx = data.draw(st.integers(1, n))
        cy = data.draw(st.integers(1, n))
        cxy = data.draw(st.integers(1, min(cx, cy)))
        pmi = compute_pmi(cxy, cx, cy, n)
        assert pmi == compute_pmi(cxy, cy, cx, n)
        assert pmi <= math.log(n) + 1e-12

    @given(st.data())
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_joint_count(self, data):
        n = data.draw(st.integers(2, 50))
        cx = data.draw(st.integers(2, n))
        cy = data.draw(st.integers(2, n))
        hi = min(cx, cy)
        cxy = data.draw(st.integers(1, hi - 1))
        assert compute_pmi(cxy, cx, cy, n) < compute_pmi(cxy + 1, cx, cy, n)


class TestTopK:
    def test_tie_breaks_toward_earlier_word(self):
        cands = [("zeta", 1.0), ("alpha", 1.0), ("mid", 2.0)]
        assert brute_force_top_k(cands, 2) == [("mid", 2.0), ("alpha", 1.0)]

    @given(st.data())
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_k(self, data):
        words = data.draw(
            st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=8, unique=True)
        )
        cands = [
            (w, data.draw(st.sampled_from([0.5, 1.0, 2.0]))) for w in words
        ]
        k = data.draw(st.integers(1, 8))
        smaller = {w for w, _ in brute_force_top_k(cands, k)}
        larger = {w for w, _ in brute_force_top_k(cands, k + 1)}
        assert smaller <= larger


class TestBuildAgainstBruteForce:
    @pytest.mark.parametrize("seed", range(6))
    def test_edges_match_oracle(self, seed):
        rng = random.Random(seed)
        records = random_corpus(rng, max_docs=30)
        k = rng.choice([1, 3, 30])
        vocab = Vocabulary.from_corpus(records, min_count=1)
        graph = build_progression_graph(records, vocab, k=k)
        actual = graph_edge_pmi(graph)
        expected = expected_edge_pmi(records, k)
        assert set(actual) == set(expected)
        for key, pmi in expected.items():
            if pmi is None:
                assert actual[key] is None
            else:
                assert actual[key] == pytest.approx(pmi, abs=1e-9)

    def test_nodes_cover_present_units_on_both_sides(self):
        records = random_corpus(random.Random(1), max_docs=20)
        vocab = Vocabulary.from_corpus(records, min_count=1)
        graph = build_progression_graph(records, vocab, k=5)
        keys = {node_key(n) for n in graph.nodes}
        for r in records:
            for label, status in r.observations:
                assert ("observation", label, status, "prior") in keys
                assert ("observation", label, status, "current") in keys

    def test_entity_token_ids_resolve_in_vocab(self):
        records = random_corpus(random.Random(2), max_docs=20)
        vocab = Vocabulary.from_corpus(records, min_count=1)
        graph = build_progression_graph(records, vocab, k=5)
        for node in graph.nodes:
            if node.is_entity:
                assert vocab.token_of(node.token_id) == node.label
                assert node.token_id != vocab.unk_id

    def test_bad_k(self):
        with pytest.raises(ValueError):
            build_progression_graph([], Vocabulary(), k=0)

    def test_deterministic_json(self):
        records = random_corpus(random.Random(3), max_docs=20)
        vocab = Vocabulary.from_corpus(records, min_count=1)
        a = graph_to_json(build_progression_graph(records, vocab, k=4))
        b = graph_to_json(build_progression_graph(records, vocab, k=4))
        assert a == b


class TestFilterLexicons:
    def test_vocab_and_single_token_filter(self):
        vocab = Vocabulary.build([["stable", "small", "big big"]])
        temporal, spatial = filter_lexicons(
            ["stable", "missing", "two words"], ["small", "gone"], vocab
        )
        assert temporal == ("stable",)
        assert spatial == ("small",)

    def test_temporal_wins_overlap(self):
        vocab = Vocabulary.build([["stable", "small"]])
        temporal, spatial = filter_lexicons(["stable"], ["stable", "small"], vocab)
        assert temporal == ("stable",)
        assert spatial == ("small",)


def tiny_graph():
    """Hand-built graph: one observation (both sides), two entities.

    Nodes: 0 = Edema/POS/prior, 1 = Edema/POS/current,
           2 = temporal "worsening", 3 = spatial "small".
    Edges: R_O 0->1; W pair via node 2; B pair via node 2; R_S 1->3.
    """
    nodes = (
        GraphNode("observation", "Edema", 14, STATUS_POSITIVE, "prior"),
        GraphNode("observation", "Edema", 14, STATUS_POSITIVE, "current"),
        GraphNode("temporal_entity", "worsening", 30),
        GraphNode("spatial_entity", "small", 31),
    )
    edges = (
        TypedEdge(0, "R_O", 1),
        TypedEdge(2, "W", 0, 0.5),
        TypedEdge(1, "W", 2, 0.5),
        TypedEdge(2, "B", 0, 0.25),
        TypedEdge(1, "B", 2, 0.25),
        TypedEdge(1, "R_S", 3, 0.75),
    )
    return ProgressionGraph(nodes=nodes, edges=edges, k=30)


class TestValidateGraph:
    def test_tiny_graph_valid(self):
        validate_graph(tiny_graph())

    def test_unknown_kind(self):
        g = ProgressionGraph((GraphNode("mystery", "x", 1),), (), 1)
        with pytest.raises(GraphError, match="kind"):
            validate_graph(g)

    def test_observation_needs_status_and_side(self):
        g = ProgressionGraph((GraphNode("observation", "Edema", 14),), (), 1)
        with pytest.raises(GraphError, match="status and side"):
            validate_graph(g)

    def test_entity_cannot_carry_side(self):
        g = ProgressionGraph(
            (GraphNode("temporal_entity", "new", 9, None, "prior"),), (), 1
        )
        with pytest.raises(GraphError, match="status/side"):
            validate_graph(g)

    def test_edge_out_of_range(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, g.edges + (TypedEdge(0, "R_O", 9),), g.k)
        with pytest.raises(GraphError, match="out of range"):
            validate_graph(bad)

    def test_duplicate_edge(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, g.edges + (TypedEdge(0, "R_O", 1),), g.k)
        with pytest.raises(GraphError, match="duplicate"):
            validate_graph(bad)

    def test_temporal_edge_direction(self):
        g = tiny_graph()
        # prior -> entity is the wrong direction for a temporal relation.
        bad = ProgressionGraph(g.nodes, (TypedEdge(0, "W", 2, 0.5),), g.k)
        with pytest.raises(GraphError, match="temporal"):
            validate_graph(bad)

    def test_spatial_edge_from_prior_side(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, (TypedEdge(0, "R_S", 3, 0.5),), g.k)
        with pytest.raises(GraphError, match="spatial"):
            validate_graph(bad)

    def test_obs_edge_label_mismatch(self):
        nodes = tiny_graph().nodes + (
            GraphNode("observation", "Pneumonia", 16, STATUS_POSITIVE, "current"),
        )
        bad = ProgressionGraph(nodes, (TypedEdge(0, "R_O", 4),), 30)
        with pytest.raises(GraphError, match="observation edge"):
            validate_graph(bad)

    def test_obs_edge_rejects_pmi(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, (TypedEdge(0, "R_O", 1, 1.0),), g.k)
        with pytest.raises(GraphError, match="R_O"):
            validate_graph(bad)

    def test_pmi_edge_needs_finite_score(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, (TypedEdge(1, "R_S", 3, None),), g.k)
        with pytest.raises(GraphError, match="finite"):
            validate_graph(bad)

    def test_unknown_relation(self):
        g = tiny_graph()
        bad = ProgressionGraph(g.nodes, (TypedEdge(0, "X", 1, 0.1),), g.k)
        with pytest.raises(GraphError, match="relation"):
            validate_graph(bad)


class TestRetrieveSubgraph:
    def test_empty_query_yields_empty_graph(self):
        sub = retrieve_subgraph(tiny_graph(), [], [], [])
        assert sub.nodes == ()
        assert sub.edges == ()

    def test_unknown_query_contributes_nothing(self):
        sub = retrieve_subgraph(
            tiny_graph(), [("Pneumonia", "POS")], [("Pneumonia", "POS")], ["Worse"]
        )
        assert sub.nodes == ()

    def test_prior_temporal_filtered_by_progression(self):
        sub = retrieve_subgraph(
            tiny_graph(), [("Edema", "POS")], [("Edema", "POS")], ["Worse"]
        )
        rels = sorted(e.relation for e in sub.edges)
        # W entity->prior kept, B entity->prior dropped, both current->entity
        # temporal edges kept, plus R_O and R_S.
        assert rels == ["B", "R_O", "R_S", "W", "W"]

    def test_current_only_query_keeps_current_side_edges(self):
        sub = retrieve_subgraph(tiny_graph(), [], [("Edema", "POS")], [])
        rels = sorted(e.relation for e in sub.edges)
        assert rels == ["B", "R_S", "W"]
        keys = {node_key(n) for n in sub.nodes}
        assert ("observation", "Edema", "POS", "prior") not in keys

    def test_ro_needs_both_endpoints(self):
        sub = retrieve_subgraph(tiny_graph(), [("Edema", "POS")], [], [])
        assert all(e.relation != "R_O" for e in sub.edges)

    def test_indices_remapped_and_valid(self):
        sub = retrieve_subgraph(tiny_graph(), [], [("Edema", "POS")], [])
        validate_graph(sub)
        assert {node_key(n)[0] for n in sub.nodes} == {
            "observation", "temporal_entity", "spatial_entity",
        }

    def test_status_mismatch_excluded(self):
        sub = retrieve_subgraph(
            tiny_graph(), [], [("Edema", STATUS_NEGATIVE)], []
        )
        assert sub.nodes == ()

    def test_retrieval_from_mined_graph_is_valid(self):
        records = random_corpus(random.Random(5), max_docs=25)
        vocab = Vocabulary.from_corpus(records, min_count=1)
        graph = build_progression_graph(records, vocab, k=3)
        for r in records[:10]:
            sub = retrieve_subgraph(
                graph, r.observations, r.observations, r.progressions
            )
            validate_graph(sub)
            for node in sub.nodes:
                assert node_key(node) in {node_key(n) for n in graph.nodes}


class TestSerialization:
    def test_round_trip(self):
        g = tiny_graph()
        clone = graph_from_json(graph_to_json(g))
        assert clone == g

    def test_mined_round_trip(self):
        records = random_corpus(random.Random(6), max_docs=25)
        vocab = Vocabulary.from_corpus(records, min_count=1)
        g = build_progression_graph(records, vocab, k=4)
        assert graph_from_json(graph_to_json(g)) == g

    def test_missing_keys_rejected(self):
        with pytest.raises(GraphFormatError, match="needs"):
            graph_from_json(json.dumps({"nodes": []}))

    def test_invalid_json_rejected(self):
        with pytest.raises(GraphFormatError, match="invalid"):
            graph_from_json("{nope")

    def test_malformed_edge_rejected(self):
        payload = json.dumps({"nodes": [], "edges": [{"src": 0}], "K": 1})
        with pytest.raises(GraphFormatError, match="malformed"):
            graph_from_json(payload)

    def test_validation_applies_on_load(self):
        payload = json.dumps(
            {
                "nodes": [{"kind": "mystery", "label": "x", "token_id": 1}],
                "edges": [],
                "K": 1,
            }
        )
        with pytest.raises(GraphError):
            graph_from_json(payload)

    def test_sha256_of_text(self):
        # sha256("abc"), a published reference value.
        assert sha256_of_text("abc") == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )
