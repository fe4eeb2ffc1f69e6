"""Implicit hypergraph over clinical nodes.

Four hyperedge families are induced from identity and geometry:

* ``IdBased``: every node of a study (studies with two or more nodes).
* ``SimilarityBased``: EHR/Image nodes within the similarity ball of a seed.
* ``ReportBased``: other reports within the similarity ball of a report.
* ``DiseaseBased``: a report tethered to its most similar knowledge node.

Incidence weights are the cosine similarity to the seed (1.0 for the seed
itself and for every member of an ``IdBased`` edge).
"""

from __future__ import annotations

import enum
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractViolation, NoKnowledgeBaseError, NotFoundError
from .hnsw import HnswIndex, HnswParams
from .manifold import ClinicalNode, Modality, cosine_similarity, prune_study_nodes

DEFAULT_TAU_SIM = 0.8
# slack on the ANN stopping rule so float32 index distances never cut the ball short
_BALL_MARGIN = 1e-4


class EdgeKind(str, enum.Enum):
    ID = "IdBased"
    SIMILARITY = "SimilarityBased"
    REPORT = "ReportBased"
    DISEASE = "DiseaseBased"


_EDGE_PREFIX = {
    EdgeKind.ID: "id",
    EdgeKind.SIMILARITY: "sim",
    EdgeKind.REPORT: "rep",
    EdgeKind.DISEASE: "dis",
}


@dataclass
class Hyperedge:
    edge_id: str
    kind: EdgeKind
    seed_node: str
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def members(self) -> frozenset[str]:
        return frozenset(self.weights)

    def to_json(self) -> dict:
        members = sorted(self.weights)
        return {
            "edge_id": self.edge_id,
            "kind": self.kind.value,
            "seed": self.seed_node,
            "members": members,
            "weights": [self.weights[m] for m in members],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Hyperedge":
        return cls(
            edge_id=obj["edge_id"],
            kind=EdgeKind(obj["kind"]),
            seed_node=obj["seed"],
            weights={m: float(w) for m, w in zip(obj["members"], obj["weights"])},
        )


class HypergraphStore:
    """Nodes, induced hyperedges and the HNSW index over all node embeddings."""

    def __init__(self, dim: int, tau_sim: float = DEFAULT_TAU_SIM,
                 index_params: HnswParams | None = None, seed: int = 0):
        if not 0.0 < tau_sim < 1.0:
            raise ContractViolation(f"tau_sim must lie in (0, 1), got {tau_sim}")
        self.dim = dim
        self.tau_sim = tau_sim
        self.nodes: dict[str, ClinicalNode] = {}
        self.edges: dict[str, Hyperedge] = {}
        self.node_to_edges: dict[str, set[str]] = defaultdict(set)
        self.index = HnswIndex(dim, index_params, seed=seed)

    # -- construction ----------------------------------------------------
    def add_node(self, node: ClinicalNode) -> None:
        if node.embedding.shape[0] != self.dim:
            raise ContractViolation(f"node {node.node_id} has dim {node.embedding.shape[0]}, store expects {self.dim}")
        self.index.insert(node.node_id, node.embedding)
        self.nodes[node.node_id] = node

    @classmethod
    def build(cls, nodes: Iterable[ClinicalNode], dim: int, tau_sim: float = DEFAULT_TAU_SIM,
              tau_prune: float | None = 0.9, index_params: HnswParams | None = None,
              seed: int = 0) -> "HypergraphStore":
        """Prune same-study EHR duplicates, index everything, induce all edges.

        Pass ``tau_prune=None`` to skip pruning.
        """
        nodes = list(nodes)
        if tau_prune is not None:
            nodes = prune_ehr_duplicates(nodes, tau_prune)
        store = cls(dim, tau_sim=tau_sim, index_params=index_params, seed=seed)
        for node in sorted(nodes, key=lambda n: n.node_id):
            store.add_node(node)
        store.induce_all()
        return store

    def induce_all(self) -> dict[str, int]:
        counts = {kind.value: 0 for kind in EdgeKind}
        counts[EdgeKind.ID.value] = self.induce_id_edges()
        has_kb = bool(self.ids_by_modality(Modality.KNOWLEDGE))
        for node_id in sorted(self.nodes):
            modality = self.nodes[node_id].modality
            if modality in (Modality.EHR, Modality.IMAGE):
                if self.induce_similarity_edges(node_id) is not None:
                    counts[EdgeKind.SIMILARITY.value] += 1
            elif modality is Modality.REPORT:
                if self.induce_report_edges(node_id) is not None:
                    counts[EdgeKind.REPORT.value] += 1
                if has_kb:
                    self.induce_disease_edges(node_id)
                    counts[EdgeKind.DISEASE.value] += 1
        return counts

    def _put_edge(self, edge: Hyperedge) -> Hyperedge:
        old = self.edges.pop(edge.edge_id, None)
        if old is not None:
            for m in old.weights:
                self.node_to_edges[m].discard(old.edge_id)
        self.edges[edge.edge_id] = edge
        for m in edge.weights:
            self.node_to_edges[m].add(edge.edge_id)
        return edge

    def _node(self, node_id: str) -> ClinicalNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFoundError(f"unknown node {node_id!r}") from None

    def ids_by_modality(self, *modalities: Modality) -> list[str]:
        wanted = set(modalities)
        return sorted(k for k, n in self.nodes.items() if n.modality in wanted)

    def induce_id_edges(self) -> int:
        by_study: dict[str, list[str]] = defaultdict(list)
        for node_id, node in self.nodes.items():
            by_study[node.study_id].append(node_id)
        created = 0
        for study_id in sorted(by_study):
            members = sorted(by_study[study_id])
            if len(members) < 2:
                continue
            self._put_edge(Hyperedge(
                edge_id=f"id:{study_id}", kind=EdgeKind.ID, seed_node=members[0],
                weights={m: 1.0 for m in members},
            ))
            created += 1
        return created

    def threshold_ball(self, node_id: str, modalities: Iterable[Modality]) -> dict[str, float]:
        """Nodes of the given modalities with similarity strictly above ``tau_sim``.

        Candidates come from the index with ``ef`` doubled until the farthest
        returned node lies outside the ball and one further doubling finds no
        new node inside it (or the whole index is scanned); membership is
        then decided by exact cosine similarity.
        """
        seed = self._node(node_id)
        allowed = set(modalities)
        n = len(self.index)
        radius = 1.0 - self.tau_sim + _BALL_MARGIN
        ef = min(n, max(self.index.params.ef_search, 32))
        inside_before = None
        while True:
            hits = self.index.search(seed.embedding, k=ef, ef=ef)
            inside = {i for i, dist in hits if dist <= radius}
            if ef >= n or (hits[-1][1] > radius and inside == inside_before):
                break
            if hits[-1][1] > radius:
                inside_before = inside
            ef = min(n, 2 * ef)
        out = {}
        for other_id, _ in hits:
            if other_id == node_id:
                continue
            other = self.nodes[other_id]
            if other.modality not in allowed:
                continue
            s = cosine_similarity(seed.embedding, other.embedding)
            if s > self.tau_sim:
                out[other_id] = s
        return out

    def _ball_edge(self, node_id: str, kind: EdgeKind, modalities) -> Hyperedge | None:
        ball = self.threshold_ball(node_id, modalities)
        edge_id = f"{_EDGE_PREFIX[kind]}:{node_id}"
        if not ball:
            if edge_id in self.edges:
                self._put_edge(Hyperedge(edge_id, kind, node_id, {node_id: 1.0}))
                self._drop_edge(edge_id)
            return None
        weights = {node_id: 1.0, **ball}
        return self._put_edge(Hyperedge(edge_id, kind, node_id, weights))

    def _drop_edge(self, edge_id: str) -> None:
        edge = self.edges.pop(edge_id)
        for m in edge.weights:
            self.node_to_edges[m].discard(edge_id)

    def induce_similarity_edges(self, node_id: str) -> Hyperedge | None:
        return self._ball_edge(node_id, EdgeKind.SIMILARITY, (Modality.EHR, Modality.IMAGE))

    def induce_report_edges(self, report_node_id: str) -> Hyperedge | None:
        if self._node(report_node_id).modality is not Modality.REPORT:
            raise ContractViolation(f"{report_node_id} is not a report node")
        return self._ball_edge(report_node_id, EdgeKind.REPORT, (Modality.REPORT,))

    def induce_disease_edges(self, report_node_id: str) -> Hyperedge:
        report = self._node(report_node_id)
        if report.modality is not Modality.REPORT:
            raise ContractViolation(f"{report_node_id} is not a report node")
        kb = self.ids_by_modality(Modality.KNOWLEDGE)
        if not kb:
            raise NoKnowledgeBaseError("no knowledge nodes in the store")
        best_id, best = None, -np.inf
        for k in kb:  # sorted, so strict > keeps the smallest id on ties
            s = cosine_similarity(report.embedding, self.nodes[k].embedding)
            if s > best:
                best_id, best = k, s
        return self._put_edge(Hyperedge(
            edge_id=f"dis:{report_node_id}", kind=EdgeKind.DISEASE, seed_node=report_node_id,
            weights={report_node_id: 1.0, best_id: best},
        ))

    # -- navigation ------------------------------------------------------
    def expand_neighborhood(self, node_id: str, depth: int) -> dict[str, int]:
        """Nodes reachable by crossing at most ``depth`` hyperedges.

        Returns a mapping node id -> minimal number of hyperedges crossed.
        The start node is excluded.
        """
        if depth < 1:
            raise ContractViolation("depth must be >= 1")
        self._node(node_id)
        reached = {node_id: 0}
        seen_edges: set[str] = set()
        frontier = deque([node_id])
        while frontier:
            u = frontier.popleft()
            du = reached[u]
            if du >= depth:
                continue
            for e in sorted(self.node_to_edges.get(u, ())):
                if e in seen_edges:
                    continue
                seen_edges.add(e)
                for m in sorted(self.edges[e].weights):
                    if m not in reached:
                        reached[m] = du + 1
                        frontier.append(m)
        del reached[node_id]
        return reached

    def embeddings(self, node_ids: Iterable[str]) -> np.ndarray:
        return np.stack([self.nodes[i].embedding for i in node_ids])

    def incidence_matrix(self) -> tuple[list[str], list[str], np.ndarray]:
        """Dense |V| x |E| incidence matrix with rows/cols in sorted id order."""
        node_ids = sorted(self.nodes)
        edge_ids = sorted(self.edges)
        row = {k: i for i, k in enumerate(node_ids)}
        H = np.zeros((len(node_ids), len(edge_ids)))
        for j, e in enumerate(edge_ids):
            for m, w in self.edges[e].weights.items():
                H[row[m], j] = w
        return node_ids, edge_ids, H

    def audit(self) -> list[str]:
        problems = list(self.index.audit())
        inverse: dict[str, set[str]] = defaultdict(set)
        for e, edge in self.edges.items():
            if edge.seed_node not in edge.weights:
                problems.append(f"{e}: seed not a member")
            for m in edge.weights:
                inverse[m].add(e)
        for node_id in set(inverse) | {k for k, v in self.node_to_edges.items() if v}:
            if inverse.get(node_id, set()) != self.node_to_edges.get(node_id, set()):
                problems.append(f"{node_id}: node_to_edges out of sync")
        return problems

    # -- persistence -----------------------------------------------------
    def dump_edges(self, path) -> None:
        with open(path, "w") as fh:
            for e in sorted(self.edges):
                fh.write(json.dumps(self.edges[e].to_json()) + "\n")

    def save(self, directory) -> None:
        from .workbench import node_to_record, write_jsonl

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_jsonl(directory / "nodes.jsonl", [node_to_record(self.nodes[k]) for k in sorted(self.nodes)])
        self.dump_edges(directory / "edges.jsonl")
        self.index.save(directory / "index.hwix")
        (directory / "store.json").write_text(json.dumps({"dim": self.dim, "tau_sim": self.tau_sim}, indent=2))

    @classmethod
    def load(cls, directory) -> "HypergraphStore":
        from .workbench import ingest_jsonl, record_to_node

        directory = Path(directory)
        meta = json.loads((directory / "store.json").read_text())
        store = cls(meta["dim"], tau_sim=meta["tau_sim"])
        store.index = HnswIndex.load(directory / "index.hwix")
        for rec in ingest_jsonl(directory / "nodes.jsonl", dims=meta["dim"]):
            node = record_to_node(rec)
            store.nodes[node.node_id] = node
        with open(directory / "edges.jsonl") as fh:
            for line in fh:
                if line.strip():
                    store._put_edge(Hyperedge.from_json(json.loads(line)))
        return store


def prune_ehr_duplicates(nodes: Iterable[ClinicalNode], tau_prune: float = 0.9) -> list[ClinicalNode]:
    """Apply :func:`prune_study_nodes` to the EHR nodes of each study."""
    keep, ehr = [], defaultdict(list)
    for n in nodes:
        (ehr[n.study_id] if n.modality is Modality.EHR else keep).append(n)
    for study_id in sorted(ehr):
        keep.extend(prune_study_nodes(ehr[study_id], tau_prune))
    return sorted(keep, key=lambda n: n.node_id)
