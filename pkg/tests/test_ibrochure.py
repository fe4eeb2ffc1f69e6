from __future__ import annotations

import json

import numpy as np
import pytest

from hyperwalker.errors import ContractViolation, NoKnowledgeBaseError, NotFoundError
from hyperwalker.ibrochure import EdgeKind, Hyperedge, HypergraphStore, prune_ehr_duplicates
from hyperwalker.manifold import ClinicalNode, Modality


def brute_ball(store: HypergraphStore, seed: str, modalities, tau: float) -> set[str]:
    """Reference membership by scanning every node in pure Python."""
    a = store.nodes[seed].embedding.astype(np.float64)
    out = set()
    for k, n in store.nodes.items():
        if k == seed or n.modality not in modalities:
            continue
        b = n.embedding.astype(np.float64)
        s = sum(x * y for x, y in zip(a, b)) / (np.sqrt(sum(a * a)) * np.sqrt(sum(b * b)))
        if s > tau:
            out.add(k)
    return out


def toy_store(tau=0.8) -> HypergraphStore:
    nodes = [
        ClinicalNode("s1-img", "s1", "p1", "image", [1.0, 0.0, 0.0]),
        ClinicalNode("s1-ehr", "s1", "p1", "ehr", [0.95, 0.3, 0.0]),
        ClinicalNode("s1-rep", "s1", "p1", "report", [0.0, 1.0, 0.0]),
        ClinicalNode("s2-rep", "s2", "p2", "report", [0.1, 0.99, 0.0]),
        ClinicalNode("s2-img", "s2", "p2", "image", [0.0, 0.0, 1.0]),
        ClinicalNode("kb-a", "kb-a", "kb", "knowledge", [0.0, 1.0, 0.1]),
        ClinicalNode("kb-b", "kb-b", "kb", "knowledge", [0.0, 0.1, 1.0]),
    ]
    return HypergraphStore.build(nodes, 3, tau_sim=tau, tau_prune=None)


def test_id_edges_group_each_study():
    store = toy_store()
    assert store.edges["id:s1"].members == {"s1-img", "s1-ehr", "s1-rep"}
    assert store.edges["id:s2"].members == {"s2-rep", "s2-img"}
    # single-node studies (knowledge anchors) get no id edge
    assert "id:kb-a" not in store.edges


def test_similarity_edges_use_strict_threshold():
    store = toy_store()
    e = store.edges["sim:s1-img"]
    assert e.kind is EdgeKind.SIMILARITY
    assert e.members == {"s1-img", "s1-ehr"}
    assert e.weights["s1-ehr"] == pytest.approx(0.95 / np.hypot(0.95, 0.3))
    assert "sim:s2-img" not in store.edges  # nothing above threshold


def test_similarity_exactly_at_threshold_is_excluded():
    c = 0.8
    nodes = [ClinicalNode("a", "s1", "p", "image", [1.0, 0.0]),
             ClinicalNode("b", "s2", "p", "image", [c, np.sqrt(1 - c * c)])]
    store = HypergraphStore.build(nodes, 2, tau_sim=float(np.float32(c)) + 1e-7, tau_prune=None)
    assert "sim:a" not in store.edges


def test_report_and_disease_edges():
    store = toy_store()
    assert store.edges["rep:s1-rep"].members == {"s1-rep", "s2-rep"}
    assert store.edges["dis:s1-rep"].members == {"s1-rep", "kb-a"}
    assert store.edges["dis:s2-rep"].members == {"s2-rep", "kb-a"}


def test_disease_tie_goes_to_smallest_id():
    nodes = [ClinicalNode("r", "s", "p", "report", [1.0, 0.0]),
             ClinicalNode("kb-z", "kz", "kb", "knowledge", [1.0, 1.0]),
             ClinicalNode("kb-m", "km", "kb", "knowledge", [1.0, -1.0])]
    store = HypergraphStore.build(nodes, 2, tau_prune=None)
    assert store.edges["dis:r"].members == {"r", "kb-m"}


def test_disease_edge_without_knowledge_raises():
    store = HypergraphStore(2)
    store.add_node(ClinicalNode("r", "s", "p", "report", [1.0, 0.0]))
    with pytest.raises(NoKnowledgeBaseError):
        store.induce_disease_edges("r")


def test_report_edge_requires_a_report():
    store = toy_store()
    with pytest.raises(ContractViolation):
        store.induce_report_edges("s1-img")
    with pytest.raises(NotFoundError):
        store.induce_report_edges("missing")


def test_memberships_match_the_quadratic_scan(small_world):
    store = small_world["store"]
    for node_id, node in store.nodes.items():
        if node.modality in (Modality.EHR, Modality.IMAGE):
            want = brute_ball(store, node_id, {Modality.EHR, Modality.IMAGE}, store.tau_sim)
            edge = store.edges.get(f"sim:{node_id}")
        elif node.modality is Modality.REPORT:
            want = brute_ball(store, node_id, {Modality.REPORT}, store.tau_sim)
            edge = store.edges.get(f"rep:{node_id}")
        else:
            continue
        got = set() if edge is None else edge.members - {node_id}
        assert got == want, node_id


def test_incidence_matrix_matches_edges():
    store = toy_store()
    nodes, edges, H = store.incidence_matrix()
    assert H.shape == (len(store.nodes), len(store.edges))
    for j, e in enumerate(edges):
        for i, n in enumerate(nodes):
            assert H[i, j] == store.edges[e].weights.get(n, 0.0)
    # every report belongs to exactly one disease edge
    dis = [j for j, e in enumerate(edges) if e.startswith("dis:")]
    for i, n in enumerate(nodes):
        if store.nodes[n].modality is Modality.REPORT:
            assert np.count_nonzero(H[i, dis]) == 1


def test_expand_neighborhood_depths():
    store = toy_store()
    one = store.expand_neighborhood("s1-img", 1)
    assert one == {"s1-ehr": 1, "s1-rep": 1}
    two = store.expand_neighborhood("s1-img", 2)
    assert two["s2-rep"] == 2 and two["kb-a"] == 2
    assert "s1-img" not in two
    with pytest.raises(ContractViolation):
        store.expand_neighborhood("s1-img", 0)


def test_audit_and_node_to_edges_sync(small_world):
    assert small_world["store"].audit() == []


def test_hyperedge_json_layout():
    e = Hyperedge("rep:x", EdgeKind.REPORT, "x", {"x": 1.0, "y": 0.9})
    obj = e.to_json()
    assert obj == {"edge_id": "rep:x", "kind": "ReportBased", "seed": "x", "members": ["x", "y"],
                   "weights": [1.0, 0.9]}
    assert Hyperedge.from_json(obj) == e


def test_save_load_round_trip(tmp_path, small_world):
    store = small_world["store"]
    store.save(tmp_path / "st")
    back = HypergraphStore.load(tmp_path / "st")
    assert back.index == store.index
    assert back.edges == store.edges
    assert set(back.nodes) == set(store.nodes)
    for k, n in store.nodes.items():
        assert np.array_equal(back.nodes[k].embedding, n.embedding)
        assert back.nodes[k].merged_from == n.merged_from
    assert back.audit() == []


def test_dump_edges_is_one_json_object_per_line(tmp_path):
    store = toy_store()
    store.dump_edges(tmp_path / "e.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert len(rows) == len(store.edges)
    assert {r["kind"] for r in rows} == {"IdBased", "SimilarityBased", "ReportBased", "DiseaseBased"}


def test_prune_only_touches_ehr():
    v = [1.0, 0.0, 0.0]
    w = [0.999, 0.04, 0.0]
    nodes = [ClinicalNode("e1", "s", "p", "ehr", v), ClinicalNode("e2", "s", "p", "ehr", w),
             ClinicalNode("i1", "s", "p", "image", v), ClinicalNode("r1", "s", "p", "report", w)]
    out = {n.node_id: n for n in prune_ehr_duplicates(nodes, 0.9)}
    assert set(out) == {"e1", "i1", "r1"}
    assert out["e1"].merged_from == ("e2",)


def test_tau_sim_must_be_open_interval():
    with pytest.raises(ContractViolation):
        HypergraphStore(4, tau_sim=1.0)
