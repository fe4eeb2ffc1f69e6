"""Hierarchical Navigable Small World index over cosine distance.

Vectors are normalized on insert and stored as float32, so the distance
``1 - <u, v>`` is the cosine distance. Layer assignment uses the index's own
seeded generator, which makes construction deterministic for a fixed seed
and insertion order.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .binfmt import Reader, Writer
from .errors import (
    ContractViolation,
    CorruptionError,
    DegenerateVectorError,
    DuplicateInsertError,
    EmptyIndexError,
)
from .manifold import DEGENERATE_NORM

MAGIC = b"HWIX"
VERSION = 1


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    M0: int = 32
    ef_construction: int = 200
    ef_search: int = 64
    level_multiplier: float = 1.0 / math.log(16)

    def __post_init__(self):
        if self.M < 2 or self.M0 < self.M:
            raise ContractViolation("need M >= 2 and M0 >= M")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ContractViolation("ef values must be positive")
        if not self.level_multiplier > 0:
            raise ContractViolation("level_multiplier must be positive")


class HnswIndex:
    """Approximate k-NN graph index keyed by string node ids.

    Args:
        dim: vector length.
        params: graph parameters; ``level_multiplier`` defaults to ``1/ln(M)``.
        seed: seed for the level-assignment generator.

    Example:
        >>> idx = HnswIndex(dim=3, seed=0)
        >>> idx.insert("a", [1.0, 0.0, 0.0])
        >>> idx.search([1.0, 0.1, 0.0], k=1)[0][0]
        'a'
    """

    def __init__(self, dim: int, params: HnswParams | None = None, seed: int = 0, **overrides):
        if params is None:
            if overrides.get("M", 0) >= 2 and "level_multiplier" not in overrides:
                overrides["level_multiplier"] = 1.0 / math.log(overrides["M"])
            params = HnswParams(**overrides)
        elif overrides:
            raise TypeError("pass either params or keyword overrides, not both")
        self.dim = int(dim)
        self.params = params
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._vecs = np.zeros((16, self.dim), dtype=np.float32)
        self._levels: list[int] = []
        # _links[node][level] -> neighbour positions
        self._links: list[list[list[int]]] = []
        self._entry: int | None = None
        self._max_level = -1

    # -- basic accessors -------------------------------------------------
    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, node_id) -> bool:
        return node_id in self._pos

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def entry_point(self) -> tuple[str, int] | None:
        if self._entry is None:
            return None
        return self._ids[self._entry], self._max_level

    def level_of(self, node_id: str) -> int:
        return self._levels[self._pos[node_id]]

    def vector(self, node_id: str) -> np.ndarray:
        return self._vecs[self._pos[node_id]].copy()

    def neighbors(self, node_id: str, level: int = 0) -> list[str]:
        return [self._ids[j] for j in self._links[self._pos[node_id]][level]]

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: len(self._ids)]

    # -- internals -------------------------------------------------------
    def _max_degree(self, level: int) -> int:
        return self.params.M0 if level == 0 else self.params.M

    def _draw_level(self) -> int:
        u = self._rng.random()
        while u <= 0.0:
            u = self._rng.random()
        return int(math.floor(-math.log(u) * self.params.level_multiplier))

    def _prepare(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise ContractViolation(f"vector length {v.shape[0]} != index dim {self.dim}")
        if not np.all(np.isfinite(v)):
            raise ContractViolation("vector contains non-finite entries")
        n = float(np.sqrt(v @ v))
        if n < DEGENERATE_NORM:
            raise DegenerateVectorError("cannot index a zero vector")
        return (v / n).astype(np.float32)

    def _search_layer(self, q: np.ndarray, entry: list[tuple[float, int]], ef: int, level: int):
        vecs = self._vecs
        links = self._links
        visited = {i for _, i in entry}
        candidates = list(entry)
        heapq.heapify(candidates)
        results = [(-d, i) for d, i in entry]
        heapq.heapify(results)
        while len(results) > ef:
            heapq.heappop(results)
        while candidates:
            d, c = heapq.heappop(candidates)
            if d > -results[0][0] and len(results) >= ef:
                break
            fresh = [n for n in links[c][level] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            dists = 1.0 - vecs[fresh] @ q
            if len(results) >= ef:
                keep = np.flatnonzero(dists < -results[0][0])
                if keep.size == 0:
                    continue
                pairs = zip([fresh[j] for j in keep], dists[keep].tolist())
            else:
                pairs = zip(fresh, dists.tolist())
            for n, dn in pairs:
                if len(results) < ef or dn < -results[0][0]:
                    heapq.heappush(candidates, (dn, n))
                    heapq.heappush(results, (-dn, n))
                    if len(results) > ef:
                        heapq.heappop(results)
        return sorted((-d, i) for d, i in results)

    def _select(self, cands: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base point than to every neighbour already kept."""
        if len(cands) <= 1:
            return [i for _, i in cands][:m]
        idx = [i for _, i in cands]
        base_d = np.fromiter((d for d, _ in cands), dtype=np.float32, count=len(cands))
        V = self._vecs[idx]
        gram = V @ V.T
        keep: list[int] = []
        for j in range(len(idx)):
            if keep and gram[j, keep].max() > 1.0 - base_d[j]:
                continue
            keep.append(j)
            if len(keep) >= m:
                break
        return [idx[j] for j in keep]

    def _shrink(self, node: int, level: int):
        nbrs = self._links[node][level]
        dists = (1.0 - self._vecs[nbrs] @ self._vecs[node]).tolist()
        cands = sorted(zip(dists, nbrs))
        self._links[node][level] = self._select(cands, self._max_degree(level))

    # -- public operations -----------------------------------------------
    def insert(self, node_id: str, v) -> None:
        if node_id in self._pos:
            raise DuplicateInsertError(f"node {node_id!r} already indexed")
        q = self._prepare(v)
        level = self._draw_level()
        pos = len(self._ids)
        if pos == self._vecs.shape[0]:
            grown = np.zeros((2 * pos, self.dim), dtype=np.float32)
            grown[:pos] = self._vecs[:pos]
            self._vecs = grown
        self._vecs[pos] = q
        self._ids.append(node_id)
        self._pos[node_id] = pos
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])

        if self._entry is None:
            self._entry, self._max_level = pos, level
            return

        ep = [(float(1.0 - self._vecs[self._entry] @ q), self._entry)]
        for lc in range(self._max_level, level, -1):
            ep = self._search_layer(q, ep, 1, lc)[:1]
        for lc in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(q, ep, self.params.ef_construction, lc)
            chosen = self._select(found, self.params.M)
            self._links[pos][lc] = list(chosen)
            cap = self._max_degree(lc)
            for n in chosen:
                self._links[n][lc].append(pos)
                if len(self._links[n][lc]) > cap:
                    self._shrink(n, lc)
            ep = found
        if level > self._max_level:
            self._entry, self._max_level = pos, level

    def search(self, q, k: int, ef: int | None = None) -> list[tuple[str, float]]:
        """Return up to ``k`` ``(node_id, cosine_distance)`` pairs, nearest first."""
        if self._entry is None:
            raise EmptyIndexError("search on an empty index")
        if k < 1:
            raise ContractViolation("k must be >= 1")
        if ef is None:
            ef = max(self.params.ef_search, k)
        elif ef < k:
            raise ContractViolation(f"ef ({ef}) must be >= k ({k})")
        q = self._prepare(q)
        ep = [(float(1.0 - self._vecs[self._entry] @ q), self._entry)]
        for lc in range(self._max_level, 0, -1):
            ep = self._search_layer(q, ep, 1, lc)[:1]
        found = self._search_layer(q, ep, ef, 0)
        return [(self._ids[i], max(0.0, float(d))) for d, i in found[:k]]

    def brute_force(self, q, k: int) -> list[tuple[str, float]]:
        """Exact k-NN by full scan (reference for recall measurements)."""
        q = self._prepare(q).astype(np.float64)
        d = 1.0 - self.vectors.astype(np.float64) @ q
        order = np.argsort(d, kind="stable")[:k]
        return [(self._ids[i], float(d[i])) for i in order]

    def audit(self) -> list[str]:
        """Structural check; returns a list of violated invariants (empty if sound)."""
        problems = []
        for pos, links in enumerate(self._links):
            if len(links) != self._levels[pos] + 1:
                problems.append(f"{self._ids[pos]}: {len(links)} layers for level {self._levels[pos]}")
            for lc, nbrs in enumerate(links):
                if len(nbrs) > self._max_degree(lc):
                    problems.append(f"{self._ids[pos]}: degree {len(nbrs)} at layer {lc}")
                for n in nbrs:
                    if self._levels[n] < lc:
                        problems.append(f"{self._ids[pos]}: neighbour below layer {lc}")
        if self._entry is not None and self._levels[self._entry] != max(self._levels):
            problems.append("entry point is not on the top layer")
        return problems

    # -- persistence -----------------------------------------------------
    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.u32(self.dim)
        p = self.params
        for x in (p.M, p.M0, p.ef_construction, p.ef_search):
            w.u32(x)
        w.f64(p.level_multiplier)
        w.i64(self.seed)
        w.text(json.dumps(self._rng.bit_generator.state))
        w.u32(len(self._ids))
        for node_id in self._ids:
            w.text(node_id)
        w.array(self.vectors, "float32")
        w.array(np.asarray(self._levels, dtype=np.int32), "int32")
        flat, counts = [], []
        for links in self._links:
            for nbrs in links:
                counts.append(len(nbrs))
                flat.extend(nbrs)
        w.array(np.asarray(counts, dtype=np.int32), "int32")
        w.array(np.asarray(flat, dtype=np.int32), "int32")
        w.i64(-1 if self._entry is None else self._entry)
        w.i64(self._max_level)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "HnswIndex":
        r = Reader(data, MAGIC, (VERSION,))
        dim = r.u32()
        M, M0, efc, efs = (r.u32() for _ in range(4))
        params = HnswParams(M=M, M0=M0, ef_construction=efc, ef_search=efs, level_multiplier=r.f64())
        seed = r.i64()
        idx = cls(dim, params, seed=seed)
        idx._rng.bit_generator.state = json.loads(r.text())
        n = r.u32()
        idx._ids = [r.text() for _ in range(n)]
        idx._pos = {k: i for i, k in enumerate(idx._ids)}
        vecs = r.array("float32").reshape(n, dim)
        idx._vecs = np.zeros((max(16, n), dim), dtype=np.float32)
        idx._vecs[:n] = vecs
        idx._levels = r.array("int32").tolist()
        counts = r.array("int32").tolist()
        flat = r.array("int32").tolist()
        idx._entry = r.i64()
        idx._max_level = r.i64()
        r.done()
        if len(counts) != sum(lvl + 1 for lvl in idx._levels) or sum(counts) != len(flat):
            raise CorruptionError("adjacency tables do not match the level assignment")
        links, it, offset = [], 0, 0
        for lvl in idx._levels:
            per = []
            for _ in range(lvl + 1):
                per.append(flat[offset:offset + counts[it]])
                offset += counts[it]
                it += 1
            links.append(per)
        idx._links = links
        if idx._entry < 0:
            idx._entry = None
        return idx

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HnswIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def __eq__(self, other) -> bool:
        if not isinstance(other, HnswIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.params == other.params
            and self._ids == other._ids
            and self._levels == other._levels
            and self._links == other._links
            and self._entry == other._entry
            and self._max_level == other._max_level
            and np.array_equal(self.vectors, other.vectors)
        )

    __hash__ = None

    def describe(self) -> dict:
        return {"dim": self.dim, "size": len(self), "max_level": self._max_level, **asdict(self.params)}
