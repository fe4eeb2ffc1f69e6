"""Diagnosis episodes: fused query, multi-hop retrieval, linger updates and TTT."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import ContractViolation, EmptyIndexError
from .fusion import FusionParameters, film_backward, film_forward, fuse
from .ibrochure import HypergraphStore
from .manifold import Modality
from .optim import AdamW
from .walker import (
    EMPTY_EPISODE_REWARD,
    Decision,
    PolicyParameters,
    RewardWeights,
    reward_components,
    selection_distribution,
    softmax,
)

log = logging.getLogger(__name__)

STOP = "STOP"


@dataclass(frozen=True)
class TTTConfig:
    enabled: bool = False
    lr: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 1
    max_triplets: int = 4


@dataclass(frozen=True)
class NavigationConfig:
    k_candidates: int = 32
    expansion_depth: int = 1
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    linger_epsilon: float = 1e-6
    linger: bool = True
    allow_stop: bool = True
    greedy: bool = False
    # overrides reward_weights.temperature when set (training schedule)
    temperature: float | None = None

    def __post_init__(self):
        if self.k_candidates < 1:
            raise ContractViolation("k_candidates must be >= 1")
        if not 1 <= self.expansion_depth <= self.reward_weights.d_max:
            raise ContractViolation("expansion_depth must lie in [1, d_max]")
        if self.ttt.steps != 1:
            log.warning("TTT configured with %d steps; the protocol uses a single step", self.ttt.steps)

    @property
    def effective_temperature(self) -> float:
        return self.temperature if self.temperature is not None else self.reward_weights.temperature


@dataclass
class Case:
    case_id: str
    z_img: np.ndarray
    z_ehr: np.ndarray
    study_id: str = ""
    subject_id: str = ""


@dataclass
class Triplet:
    study_id: str
    subject_id: str
    z_img: np.ndarray
    z_ehr: np.ndarray
    z_report: np.ndarray


# -- policies ------------------------------------------------------------

class Policy(Protocol):
    def distribution(self, query: np.ndarray, cands: np.ndarray, temperature: float,
                     allow_stop: bool) -> np.ndarray: ...


class LearnedPolicy:
    """Adapter exposing :class:`PolicyParameters` through the policy protocol."""

    def __init__(self, params: PolicyParameters):
        self.params = params

    def distribution(self, query, cands, temperature, allow_stop):
        return selection_distribution(query, cands, self.params, temperature, allow_stop)


class CosinePolicy:
    """Oracle scorer: score = cosine to the current query; never stops."""

    def distribution(self, query, cands, temperature, allow_stop):
        c = np.asarray(cands, dtype=np.float64)
        s = c @ query / (np.linalg.norm(c, axis=1) * np.linalg.norm(query))
        probs = softmax(s / temperature)
        return np.append(probs, 0.0) if allow_stop else probs


class UniformPolicy:
    """Uniform choice among the candidates; never stops."""

    def distribution(self, query, cands, temperature, allow_stop):
        n = len(cands)
        probs = np.full(n, 1.0 / n)
        return np.append(probs, 0.0) if allow_stop else probs


def as_policy(policy) -> Policy:
    return LearnedPolicy(policy) if isinstance(policy, PolicyParameters) else policy


# -- linger ----------------------------------------------------------------

def linger_orthogonalize(z_q, selected, eps: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Remove from ``z_q`` its projection on the mean of ``selected``.

    Returns ``(query, fallback)``; ``fallback`` is True when the mean
    vanishes or ``z_q`` is parallel to it, in which case ``z_q`` comes back
    unchanged.
    """
    sel = np.asarray(selected, dtype=np.float64)
    if sel.size == 0:
        raise ContractViolation("linger_orthogonalize needs at least one selection")
    z_q = np.asarray(z_q, dtype=np.float64)
    mean = np.atleast_2d(sel).mean(axis=0)
    mm = float(mean @ mean)
    if np.sqrt(mm) < eps:
        return z_q.copy(), True
    orth = z_q - (z_q @ mean) / mm * mean
    n = float(np.linalg.norm(orth))
    if n < eps:
        return z_q.copy(), True
    orth = orth / n
    # one re-projection pass removes the rounding residue of the first
    orth = orth - (orth @ mean) / mm * mean
    return orth / np.linalg.norm(orth), False


# -- TTT -------------------------------------------------------------------

class AlignmentObjective:
    """Surrogate TTT loss: mean over triplets of ``1 - cos(fuse(img, ehr), report)``."""

    def loss(self, p: FusionParameters, triplets: Sequence[Triplet]) -> float:
        return self.loss_and_grad(p, triplets, need_grad=False)[0]

    def loss_and_grad(self, p: FusionParameters, triplets: Sequence[Triplet], need_grad: bool = True):
        total = 0.0
        grads = {k: np.zeros(v.shape) for k, v in p.arrays().items()} if need_grad else None
        for t in triplets:
            out, cache = film_forward(t.z_img, t.z_ehr, p)
            r = np.asarray(t.z_report, dtype=np.float64)
            r = r / np.linalg.norm(r)
            total += 1.0 - float(out @ r)
            if need_grad:
                g = film_backward(cache, -r, p)
                for k, v in g.params().items():
                    grads[k] += v
        n = len(triplets)
        if need_grad:
            grads = {k: v / n for k, v in grads.items()}
        return total / n, grads


@dataclass
class TTTResult:
    params: FusionParameters
    loss_before: float | None
    loss_after: float | None
    status: str
    n_triplets: int = 0


def check_leakage(case_study_id: str, triplets: Sequence[Triplet]) -> list[Triplet]:
    """Triplets drawn from the case's own study (empty list means clean)."""
    return [t for t in triplets if t.study_id == case_study_id]


def ttt_step(params: FusionParameters, triplets: Sequence[Triplet], cfg: TTTConfig = TTTConfig(),
             objective=None) -> TTTResult:
    """One AdamW step on a private copy of the fusion adapters.

    ``params`` itself is never modified; moments start fresh on every call.
    """
    triplets = list(triplets)
    if not triplets:
        log.warning("ttt_step called without triplets; skipping")
        return TTTResult(params.copy(), None, None, "no-triplets")
    objective = objective or AlignmentObjective()
    new = params.copy()
    opt = AdamW(cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    before, _ = objective.loss_and_grad(new, triplets, need_grad=False)
    for _ in range(cfg.steps):
        _, grads = objective.loss_and_grad(new, triplets)
        opt.step(new.arrays(), grads)
    after, _ = objective.loss_and_grad(new, triplets, need_grad=False)
    return TTTResult(new, before, after, "ok", len(triplets))


def gather_triplets(store: HypergraphStore, study_order: Sequence[str], exclude_study: str,
                    limit: int) -> list[Triplet]:
    """Complete (image, EHR, report) triplets for studies in ``study_order``."""
    by_study: dict[str, dict[Modality, str]] = {}
    for node_id in sorted(store.nodes):
        node = store.nodes[node_id]
        by_study.setdefault(node.study_id, {}).setdefault(node.modality, node_id)
    out, seen = [], set()
    for study in study_order:
        if study in seen or study == exclude_study:
            continue
        seen.add(study)
        mods = by_study.get(study, {})
        if all(m in mods for m in (Modality.IMAGE, Modality.EHR, Modality.REPORT)):
            first = store.nodes[mods[Modality.IMAGE]]
            out.append(Triplet(study, first.subject_id,
                               store.nodes[mods[Modality.IMAGE]].embedding,
                               store.nodes[mods[Modality.EHR]].embedding,
                               store.nodes[mods[Modality.REPORT]].embedding))
            if len(out) >= limit:
                break
    return out


# -- episodes --------------------------------------------------------------

@dataclass
class HopRecord:
    hop_index: int
    query: list[float]
    candidate_ids: list[str]
    candidate_source: list[str]      # "Index" | "Expansion", aligned with candidate_ids
    candidate_depth: list[int]
    chosen: str
    depth_consumed: int
    temperature: float
    allow_stop: bool
    linger_fallback: bool = False


@dataclass
class EpisodeTrace:
    case_id: str
    seed: int
    hops: list[HopRecord] = field(default_factory=list)
    selected_set: list[str] = field(default_factory=list)
    rewards: dict[str, float] | None = None
    reward_query: list[float] | None = None
    degenerate: bool = False
    ttt: dict | None = None

    @property
    def h(self) -> int:
        return len(self.selected_set)

    @property
    def d(self) -> int:
        return max((hop.depth_consumed for hop in self.hops), default=0)

    @property
    def total(self) -> float:
        return self.rewards["total"] if self.rewards else EMPTY_EPISODE_REWARD

    def decisions(self, store: HypergraphStore) -> list[Decision]:
        out = []
        for hop in self.hops:
            cands = store.embeddings(hop.candidate_ids)
            chosen = len(hop.candidate_ids) if hop.chosen == STOP else hop.candidate_ids.index(hop.chosen)
            out.append(Decision(np.asarray(hop.query), cands, chosen, hop.temperature, hop.allow_stop))
        return out

    def replay_rewards(self, store: HypergraphStore, weights: RewardWeights = RewardWeights()) -> dict | None:
        if not self.selected_set:
            return None
        return reward_components(np.asarray(self.reward_query), store.embeddings(self.selected_set),
                                 self.d, self.h, weights)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EpisodeTrace":
        obj = dict(obj)
        obj["hops"] = [HopRecord(**h) for h in obj.get("hops", [])]
        return cls(**obj)


def _candidate_pool(store, query, selected_ids, last, cfg):
    n = len(store.index)
    k = min(cfg.k_candidates, n)
    hits = store.index.search(query, k=k, ef=max(store.index.params.ef_search, k))
    taken = set(selected_ids)
    pool: dict[str, tuple[str, int]] = {}
    for node_id, _ in hits:
        if node_id not in taken:
            pool[node_id] = ("Index", 0)
    if last is not None:
        ring = store.expand_neighborhood(last, cfg.expansion_depth)
        for node_id, dep in sorted(ring.items(), key=lambda kv: (kv[1], kv[0])):
            if node_id not in taken and node_id not in pool:
                pool[node_id] = ("Expansion", dep)
    return pool


def run_episode(case: Case, store: HypergraphStore, policy, fusion: FusionParameters,
                cfg: NavigationConfig = NavigationConfig(), rng_seed: int = 0) -> EpisodeTrace:
    """Roll out one diagnosis episode and return its fully populated trace."""
    if len(store.index) == 0:
        raise EmptyIndexError("cannot navigate an empty store")
    policy = as_policy(policy)
    w = cfg.reward_weights
    temp = cfg.effective_temperature
    rng = np.random.default_rng(rng_seed)
    base_query = fuse(case.z_img, case.z_ehr, fusion)
    query = base_query
    trace = EpisodeTrace(case_id=case.case_id, seed=int(rng_seed))
    selected: list[str] = []
    fallback = False

    for hop in range(w.h_max):
        pool = _candidate_pool(store, query, selected, selected[-1] if selected else None, cfg)
        if not pool:
            break
        ids = list(pool)
        cands = store.embeddings(ids)
        probs = policy.distribution(query, cands, temp, cfg.allow_stop)
        if cfg.greedy:
            choice = int(np.argmax(probs))
        else:
            choice = int(rng.choice(len(probs), p=probs))
        chosen = STOP if choice == len(ids) else ids[choice]
        depth = 0 if chosen == STOP else pool[chosen][1]
        trace.hops.append(HopRecord(
            hop_index=hop, query=[float(x) for x in query], candidate_ids=ids,
            candidate_source=[pool[i][0] for i in ids], candidate_depth=[pool[i][1] for i in ids],
            chosen=chosen, depth_consumed=depth, temperature=temp, allow_stop=cfg.allow_stop,
            linger_fallback=fallback,
        ))
        if chosen == STOP:
            break
        selected.append(chosen)

        if hop == 0 and cfg.ttt.enabled:
            study_order = [store.nodes[chosen].study_id] + [store.nodes[i].study_id for i in ids]
            triplets = gather_triplets(store, study_order, case.study_id, cfg.ttt.max_triplets)
            leaks = check_leakage(case.study_id, triplets)
            if leaks:
                trace.ttt = {"status": "refused-leakage", "studies": [t.study_id for t in leaks]}
            else:
                res = ttt_step(fusion, triplets, cfg.ttt)
                trace.ttt = {"status": res.status, "n_triplets": res.n_triplets,
                             "loss_before": res.loss_before, "loss_after": res.loss_after,
                             "studies": [t.study_id for t in triplets]}
                if res.status == "ok":
                    fusion = res.params
                    base_query = fuse(case.z_img, case.z_ehr, fusion)

        if cfg.linger:
            query, fallback = linger_orthogonalize(base_query, store.embeddings(selected), cfg.linger_epsilon)
        else:
            query, fallback = base_query, False

    trace.selected_set = selected
    trace.reward_query = [float(x) for x in base_query]
    if selected:
        trace.rewards = reward_components(base_query, store.embeddings(selected), trace.d, trace.h, w)
    else:
        trace.degenerate = True
    return trace
