"""Embedding arithmetic, clinical node identity and redundancy pruning."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DegenerateVectorError

DEFAULT_DIM = 1024
UNIT_TOL = 1e-6
DEGENERATE_NORM = 1e-6


class Modality(str, enum.Enum):
    EHR = "ehr"
    IMAGE = "image"
    REPORT = "report"
    KNOWLEDGE = "knowledge"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractViolation(f"unknown modality {value!r}") from None


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite float32 vector, optionally checking length."""
    v = np.asarray(values, dtype=np.float32).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise ContractViolation(f"embedding has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("embedding contains non-finite entries")
    return v


@dataclass(frozen=True)
class ClinicalNode:
    """An embedding tagged with its study, subject and modality.

    ``merged_from`` lists the node ids absorbed into this node by pruning;
    the node's own id is not repeated there.
    """

    node_id: str
    study_id: str
    subject_id: str
    modality: Modality
    embedding: np.ndarray = field(repr=False, compare=False)
    merged_from: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        object.__setattr__(self, "embedding", as_embedding(self.embedding))
        object.__setattr__(self, "merged_from", tuple(self.merged_from))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    Raises:
        DegenerateVectorError: if either operand is the zero vector.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0:
        raise DegenerateVectorError("cosine_similarity: operand 'a' is the zero vector")
    if nb == 0.0:
        raise DegenerateVectorError("cosine_similarity: operand 'b' is the zero vector")
    s = float(a @ b / (na * nb))
    return min(1.0, max(-1.0, s))


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean length, keeping its dtype if floating."""
    arr = np.asarray(v)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    n = float(np.sqrt(np.sum(arr.astype(np.float64) ** 2)))
    if not np.isfinite(n):
        raise ContractViolation("l2_normalize: non-finite input")
    if n < DEGENERATE_NORM:
        raise DegenerateVectorError(f"l2_normalize: norm {n:.3g} below {DEGENERATE_NORM}")
    return (arr.astype(np.float64) / n).astype(arr.dtype)


def similarity_matrix(vectors) -> np.ndarray:
    """Pairwise cosine similarities of the rows of ``vectors`` (float64)."""
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0.0):
        raise DegenerateVectorError("similarity_matrix: zero row")
    x = x / norms[:, None]
    return np.clip(x @ x.T, -1.0, 1.0)


def _components(adjacency: np.ndarray) -> list[list[int]]:
    n = adjacency.shape[0]
    seen = [False] * n
    out = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(adjacency[i]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        out.append(sorted(comp))
    return out


def _merge(members: Sequence[ClinicalNode], sims: np.ndarray) -> ClinicalNode:
    # weight = mean similarity to the other members of the component
    k = len(members)
    weights = (sims.sum(axis=1) - np.diag(sims)) / (k - 1)
    weights = np.clip(weights, 0.0, None)
    if weights.sum() <= 0.0:
        weights = np.ones(k)
    weights = weights / weights.sum()
    stacked = np.stack([m.embedding.astype(np.float64) for m in members])
    centroid = l2_normalize(weights @ stacked).astype(np.float32)
    rep = min(members, key=lambda m: m.node_id)
    absorbed = []
    for m in members:
        if m.node_id != rep.node_id:
            absorbed.append(m.node_id)
        absorbed.extend(m.merged_from)
    return replace(rep, embedding=centroid, merged_from=tuple(sorted(absorbed)))


def prune_study_nodes(nodes: Sequence[ClinicalNode], tau_prune: float = 0.9) -> list[ClinicalNode]:
    """Merge near-duplicate nodes of a single study.

    Nodes whose pairwise similarity exceeds ``tau_prune`` are linked and each
    connected component collapses into one representative: the member with
    the smallest node id, carrying the similarity-weighted centroid of the
    component. Merging repeats until no pair of outputs exceeds the
    threshold, so the result is a fixed point (pruning it again is a no-op).

    Args:
        nodes: nodes that all share one ``study_id``.
        tau_prune: merge threshold in (0, 1).

    Returns:
        Representatives ordered by node id.
    """
    if not 0.0 < tau_prune < 1.0:
        raise ContractViolation(f"tau_prune must lie in (0, 1), got {tau_prune}")
    nodes = list(nodes)
    if not nodes:
        return []
    studies = {n.study_id for n in nodes}
    if len(studies) > 1:
        raise ContractViolation(f"prune_study_nodes: mixed study ids {sorted(studies)}")

    current = sorted(nodes, key=lambda n: n.node_id)
    while True:
        sims = similarity_matrix([n.embedding for n in current])
        adj = sims > tau_prune
        np.fill_diagonal(adj, False)
        if not adj.any():
            return current
        merged = []
        for comp in _components(adj):
            if len(comp) == 1:
                merged.append(current[comp[0]])
            else:
                merged.append(_merge([current[i] for i in comp], sims[np.ix_(comp, comp)]))
        current = sorted(merged, key=lambda n: n.node_id)
