from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperwalker.errors import ContractViolation, DegenerateVectorError
from hyperwalker.manifold import (
    ClinicalNode,
    Modality,
    as_embedding,
    cosine_distance,
    cosine_similarity,
    l2_normalize,
    prune_study_nodes,
    similarity_matrix,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)
vec8 = arrays(np.float64, 8, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def py_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def node(node_id, vec, study="s1", modality="ehr"):
    return ClinicalNode(node_id, study, "p1", modality, np.asarray(vec, dtype=np.float32))


@pytest.mark.parametrize("a, b, expected", [
    ([1, 0], [1, 0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 0], [-1, 0], -1.0),
    ([3, 4], [6, 8], 1.0),
])
def test_cosine_similarity_small_cases(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-12)


@given(vec8, vec8)
def test_cosine_matches_scalar_loop(a, b):
    assert cosine_similarity(a, b) == pytest.approx(py_cosine(a, b), abs=1e-9)


@given(vec8, vec8)
def test_cosine_is_symmetric_and_bounded(a, b):
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert -1.0 <= s <= 1.0
    assert cosine_distance(a, b) == pytest.approx(1.0 - s)


@pytest.mark.parametrize("which", ["a", "b"])
def test_cosine_names_the_zero_operand(which):
    v, z = np.ones(4), np.zeros(4)
    args = (z, v) if which == "a" else (v, z)
    with pytest.raises(DegenerateVectorError, match=f"'{which}'"):
        cosine_similarity(*args)


def test_cosine_shape_mismatch():
    with pytest.raises(ContractViolation):
        cosine_similarity(np.ones(3), np.ones(4))


@given(vec8)
def test_l2_normalize_gives_unit_length(v):
    assert np.linalg.norm(l2_normalize(v)) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_keeps_float32():
    out = l2_normalize(np.array([3.0, 4.0], dtype=np.float32))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, [0.6, 0.8], rtol=1e-6)


def test_l2_normalize_rejects_tiny_vectors():
    with pytest.raises(DegenerateVectorError):
        l2_normalize(np.full(4, 1e-8))


def test_similarity_matrix_matches_pairwise(rng):
    x = rng.standard_normal((6, 5))
    s = similarity_matrix(x)
    for i, j in itertools.product(range(6), repeat=2):
        assert s[i, j] == pytest.approx(py_cosine(x[i], x[j]), abs=1e-12)


def test_modality_parse_is_case_insensitive():
    assert Modality.parse("Report") is Modality.REPORT
    with pytest.raises(ContractViolation):
        Modality.parse("audio")


def test_as_embedding_checks_length_and_finiteness():
    assert as_embedding([1, 2, 3], dim=3).dtype == np.float32
    with pytest.raises(ContractViolation):
        as_embedding([1, 2], dim=3)
    with pytest.raises(ContractViolation):
        as_embedding([1.0, np.nan])


# -- pruning -----------------------------------------------------------------

def test_prune_merges_near_duplicates_into_smallest_id():
    a = node("b", [1.0, 0.0, 0.0])
    b = node("a", [0.999, 0.04, 0.0])
    c = node("c", [0.0, 1.0, 0.0])
    out = prune_study_nodes([a, b, c], tau_prune=0.9)
    assert [n.node_id for n in out] == ["a", "c"]
    merged = out[0]
    assert merged.merged_from == ("b",)
    assert np.linalg.norm(merged.embedding) == pytest.approx(1.0, abs=1e-6)
    # the centroid sits between the two originals
    assert cosine_similarity(merged.embedding, a.embedding) > 0.99
    assert cosine_similarity(merged.embedding, b.embedding) > 0.99


def test_prune_leaves_distinct_nodes_alone():
    nodes = [node("x", [1, 0]), node("y", [0, 1])]
    assert prune_study_nodes(nodes) == nodes


def test_prune_rejects_mixed_studies():
    with pytest.raises(ContractViolation, match="mixed"):
        prune_study_nodes([node("a", [1, 0], "s1"), node("b", [1, 0], "s2")])


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.5])
def test_prune_rejects_bad_threshold(tau):
    with pytest.raises(ContractViolation):
        prune_study_nodes([node("a", [1, 0])], tau_prune=tau)


@given(st.integers(0, 10_000), st.integers(2, 9), st.floats(0.02, 0.6))
def test_prune_contract_holds_on_random_clusters(seed, n, spread):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(6)
    nodes = [node(f"n{i}", base + spread * rng.standard_normal(6)) for i in range(n)]
    out = prune_study_nodes(nodes, 0.9)
    # no surviving pair above the threshold
    for u, v in itertools.combinations(out, 2):
        assert cosine_similarity(u.embedding, v.embedding) <= 0.9 + 1e-9
    # conservation: every input id is a survivor or recorded exactly once
    accounted = [n.node_id for n in out] + [m for n in out for m in n.merged_from]
    assert sorted(accounted) == sorted(x.node_id for x in nodes)
    # idempotent
    again = prune_study_nodes(out, 0.9)
    assert [n.node_id for n in again] == [n.node_id for n in out]
    for u, v in zip(again, out):
        assert np.array_equal(u.embedding, v.embedding)
