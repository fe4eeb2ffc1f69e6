"""Synthetic planted-evidence manifolds, JSONL records, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ValidationError
from .fusion import FusionParameters
from .ibrochure import HypergraphStore
from .manifold import ClinicalNode, Modality
from .navigator import (
    Case,
    CosinePolicy,
    EpisodeTrace,
    LearnedPolicy,
    NavigationConfig,
    UniformPolicy,
    run_episode,
)
from .walker import (
    EMPTY_EPISODE_REWARD,
    PolicyParameters,
    ReinforceTrainer,
    RewardWeights,
    reward_components,
    temperature_schedule,
)

log = logging.getLogger(__name__)

MODALITY_NAMES = tuple(m.value for m in Modality)
_DUPLICATE_NOISE = 0.05


# -- records ---------------------------------------------------------------

@dataclass
class NodeRecord:
    node_id: str
    subject_id: str
    study_id: str
    modality: str
    embedding: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, NodeRecord):
            return NotImplemented
        return (
            (self.node_id, self.subject_id, self.study_id, self.modality, self.metadata)
            == (other.node_id, other.subject_id, other.study_id, other.modality, other.metadata)
            and np.array_equal(self.embedding, other.embedding)
        )

    def to_json(self, precision: str = "float32") -> dict:
        emb = self.embedding.astype(np.float16 if precision == "float16" else np.float32)
        return {
            "node_id": self.node_id,
            "subject_id": self.subject_id,
            "study_id": self.study_id,
            "modality": self.modality,
            "embedding": [float(x) for x in emb],
            "metadata": self.metadata,
        }


def record_to_node(rec: NodeRecord) -> ClinicalNode:
    return ClinicalNode(rec.node_id, rec.study_id, rec.subject_id, Modality.parse(rec.modality),
                        rec.embedding, tuple(rec.metadata.get("merged_from", ())))


def node_to_record(node: ClinicalNode) -> NodeRecord:
    meta = {"merged_from": list(node.merged_from)} if node.merged_from else {}
    return NodeRecord(node.node_id, node.subject_id, node.study_id, node.modality.value, node.embedding, meta)


def write_jsonl(path, records: Iterable[NodeRecord], precision: str = "float32") -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(precision)) + "\n")


def ingest_jsonl(path, dims: int | None = None) -> list[NodeRecord]:
    """Read and validate node records, one JSON object per line.

    Embeddings may arrive at reduced precision; they are upcast to float32.
    All problems are collected and raised together as a
    :class:`ValidationError` carrying 1-based line numbers.
    """
    records, problems, seen = [], [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append((lineno, f"malformed JSON ({exc.msg})"))
                continue
            if not isinstance(obj, dict):
                problems.append((lineno, "expected a JSON object"))
                continue
            missing = [k for k in ("node_id", "subject_id", "study_id", "modality", "embedding") if k not in obj]
            if missing:
                problems.append((lineno, f"missing field(s) {', '.join(missing)}"))
                continue
            modality = str(obj["modality"]).lower()
            if modality not in MODALITY_NAMES:
                problems.append((lineno, f"unknown modality {obj['modality']!r}"))
                continue
            try:
                emb = np.asarray(obj["embedding"], dtype=np.float32).reshape(-1)
            except (TypeError, ValueError):
                problems.append((lineno, "embedding is not a numeric array"))
                continue
            if dims is None:
                dims = emb.shape[0]
            if emb.shape[0] != dims:
                problems.append((lineno, f"embedding has {emb.shape[0]} dims, expected {dims}"))
                continue
            if not np.all(np.isfinite(emb)):
                problems.append((lineno, "embedding contains non-finite values"))
                continue
            node_id = str(obj["node_id"])
            if node_id in seen:
                problems.append((lineno, f"duplicate node_id {node_id!r}"))
                continue
            seen.add(node_id)
            records.append(NodeRecord(node_id, str(obj["subject_id"]), str(obj["study_id"]), modality,
                                      emb, dict(obj.get("metadata") or {})))
    if problems:
        raise ValidationError(problems)
    return records


# -- synthetic generator ---------------------------------------------------

def _default_offsets() -> dict[str, float]:
    return {"image": 0.2, "ehr": 0.8, "report": 0.0, "knowledge": 0.0}


def _default_noise() -> dict[str, float]:
    return {"image": 0.4, "ehr": 0.4, "report": 0.0, "knowledge": 0.0}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a planted-evidence manifold.

    A node of modality ``m`` is
    ``normalize(concept + modality_offsets[m] * u_m + noise)``: ``u_m`` is a
    unit direction shared by every node of the modality (a modality gap) and
    the isotropic noise has expected norm
    ``cluster_spread + modality_noise[m]``. The default knowledge node of each
    condition sits exactly on the concept direction. All vectors are drawn in the zero-mean subspace, where layer
    normalization preserves direction.
    """

    dims: int = 128
    n_subjects: int = 100
    studies_per_subject: int = 4
    n_conditions: int = 8
    cluster_spread: float = 0.1
    modality_offsets: dict = field(default_factory=_default_offsets)
    modality_noise: dict = field(default_factory=_default_noise)
    n_knowledge: int | None = None
    duplicate_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dims < 4:
            raise ContractViolation("dims must be >= 4")
        for name in ("n_subjects", "studies_per_subject", "n_conditions"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.n_knowledge is not None and self.n_knowledge < 1:
            raise ContractViolation("n_knowledge must be >= 1")
        for table in (self.modality_offsets, self.modality_noise):
            unknown = set(table) - set(MODALITY_NAMES)
            if unknown:
                raise ContractViolation(f"unknown modality key(s) {sorted(unknown)}")
        if self.cluster_spread < 0 or any(v < 0 for v in (*self.modality_offsets.values(),
                                                          *self.modality_noise.values())):
            raise ContractViolation("spreads and offsets must be non-negative")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise ContractViolation("duplicate_rate must lie in [0, 1]")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _centered(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def generate_manifold(spec: SyntheticSpec) -> tuple[list[NodeRecord], dict[str, list[str]]]:
    """Generate node records and the planted evidence of every study.

    Returns:
        ``(records, ground_truth)``. ``ground_truth[study_id]`` lists the
        same-condition Report nodes of *other* studies plus the knowledge
        node(s) of the study's condition; any study can serve as a held-out
        case.
    """
    rng = np.random.default_rng(spec.seed)
    D = spec.dims
    concepts = np.stack([_unit(_centered(rng.standard_normal(D))) for _ in range(spec.n_conditions)])
    gaps = {m: _unit(_centered(rng.standard_normal(D))) for m in MODALITY_NAMES}
    offsets = {**_default_offsets(), **spec.modality_offsets}
    noise = {**_default_noise(), **spec.modality_noise}

    def emit(cond: int, modality: str) -> np.ndarray:
        v = concepts[cond] + offsets[modality] * gaps[modality]
        scale = spec.cluster_spread + noise[modality]
        if scale > 0:
            v = v + scale * _centered(rng.standard_normal(D)) / math.sqrt(D)
        return _unit(v).astype(np.float32)

    def duplicate(v: np.ndarray) -> np.ndarray:
        # perpendicular nudge: similarity is exactly 1/sqrt(1 + noise^2) > 0.99
        g = _centered(rng.standard_normal(D))
        g -= (g @ v) * v
        return _unit(v + _DUPLICATE_NOISE * _unit(g)).astype(np.float32)

    records: list[NodeRecord] = []
    study_condition: dict[str, int] = {}
    reports_by_condition: dict[int, list[tuple[str, str]]] = {c: [] for c in range(spec.n_conditions)}
    n_study = 0
    for s in range(spec.n_subjects):
        subject = f"sub{s:04d}"
        for _ in range(spec.studies_per_subject):
            study = f"st{n_study:05d}"
            n_study += 1
            cond = int(rng.integers(spec.n_conditions))
            study_condition[study] = cond
            meta = {"condition": cond}
            records.append(NodeRecord(f"{study}-img", subject, study, "image", emit(cond, "image"), dict(meta)))
            records.append(NodeRecord(f"{study}-rep", subject, study, "report", emit(cond, "report"), dict(meta)))
            reports_by_condition[cond].append((study, f"{study}-rep"))
            for j in range(int(rng.integers(1, 4))):
                v = emit(cond, "ehr")
                records.append(NodeRecord(f"{study}-ehr{j}", subject, study, "ehr", v, dict(meta)))
                if rng.random() < spec.duplicate_rate:
                    records.append(NodeRecord(f"{study}-ehr{j}d", subject, study, "ehr", duplicate(v),
                                              {**meta, "duplicate_of": f"{study}-ehr{j}"}))

    n_kb = spec.n_conditions if spec.n_knowledge is None else spec.n_knowledge
    kb_by_condition: dict[int, list[str]] = {c: [] for c in range(spec.n_conditions)}
    for k in range(n_kb):
        cond = k % spec.n_conditions
        v = concepts[cond] + offsets["knowledge"] * gaps["knowledge"]
        if k >= spec.n_conditions:
            # extra anchors of an already-covered condition get perturbed like any node
            scale = spec.cluster_spread + noise["knowledge"]
            v = v + scale * _centered(rng.standard_normal(D)) / math.sqrt(D)
        node_id = f"kb-{k:03d}"
        records.append(NodeRecord(node_id, "kb", f"kb-{k:03d}", "knowledge", _unit(v).astype(np.float32),
                                  {"condition": cond}))
        kb_by_condition[cond].append(node_id)

    ground_truth = {}
    for study, cond in study_condition.items():
        planted = [rid for st, rid in reports_by_condition[cond] if st != study] + kb_by_condition[cond]
        ground_truth[study] = sorted(planted)
    return records, ground_truth


# -- splits and cases ------------------------------------------------------

@dataclass
class Split:
    graph: list[NodeRecord]
    train: list[Case]
    test: list[Case]


def cases_from_records(records: Sequence[NodeRecord]) -> list[Case]:
    """One case per study that has an image and at least one EHR node."""
    by_study: dict[str, dict[str, NodeRecord]] = {}
    for rec in sorted(records, key=lambda r: r.node_id):
        by_study.setdefault(rec.study_id, {}).setdefault(rec.modality, rec)
    out = []
    for study in sorted(by_study):
        mods = by_study[study]
        if "image" in mods and "ehr" in mods:
            img = mods["image"]
            out.append(Case(study, img.embedding, mods["ehr"].embedding, study, img.subject_id))
    return out


def split_studies(records: Sequence[NodeRecord], graph_frac: float = 0.01, train_frac: float = 0.01,
                  seed: int = 0) -> Split:
    """Partition studies into hypergraph / training / test portions.

    Knowledge nodes always go into the hypergraph. A warning is logged when
    the hypergraph portion has fewer than 100 nodes.
    """
    if graph_frac <= 0 or train_frac < 0 or graph_frac + train_frac > 1:
        raise ContractViolation("need 0 < graph_frac, 0 <= train_frac, graph_frac + train_frac <= 1")
    studies = sorted({r.study_id for r in records if r.modality != "knowledge"})
    order = np.random.default_rng(seed).permutation(len(studies))
    n_graph = max(1, int(round(graph_frac * len(studies))))
    n_train = int(round(train_frac * len(studies)))
    graph_st = {studies[i] for i in order[:n_graph]}
    train_st = {studies[i] for i in order[n_graph:n_graph + n_train]}
    graph = [r for r in records if r.modality == "knowledge" or r.study_id in graph_st]
    if len(graph) < 100:
        log.warning("hypergraph split has only %d nodes (graph_frac=%g)", len(graph), graph_frac)
    rest = [r for r in records if r.modality != "knowledge" and r.study_id not in graph_st]
    cases = cases_from_records(rest)
    return Split(graph, [c for c in cases if c.study_id in train_st], [c for c in cases if c.study_id not in train_st])


def build_store(records: Sequence[NodeRecord], tau_sim: float = 0.8, tau_prune: float | None = 0.9,
                seed: int = 0, drop_modalities: Iterable[str] = ()) -> HypergraphStore:
    drop = {Modality.parse(m) for m in drop_modalities}
    nodes = [record_to_node(r) for r in records]
    nodes = [n for n in nodes if n.modality not in drop]
    if not nodes:
        raise ContractViolation("no nodes to build a store from")
    dim = nodes[0].embedding.shape[0]
    return HypergraphStore.build(nodes, dim, tau_sim=tau_sim, tau_prune=tau_prune, seed=seed)


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    episodes: int = 2000
    lr: float = 1e-3
    batch_size: int = 4
    hidden: int = 256
    t_start: float = 1.0
    decay_fraction: float = 0.5
    seed: int = 0


def train_policy(store: HypergraphStore, fusion: FusionParameters, cases: Sequence[Case],
                 nav: NavigationConfig = NavigationConfig(), train: TrainConfig = TrainConfig(),
                 params: PolicyParameters | None = None,
                 on_episode: Callable[[dict], None] | None = None) -> tuple[PolicyParameters, list[dict]]:
    """REINFORCE training of the Walker on sampled episodes.

    Episodes sample actions at a temperature decaying geometrically from
    ``t_start`` to the evaluation temperature over the first
    ``decay_fraction`` of training. TTT is disabled during training.
    """
    if not cases:
        raise ContractViolation("train_policy needs at least one case")
    params = params if params is not None else PolicyParameters.init(store.dim, train.hidden, seed=train.seed)
    trainer = ReinforceTrainer(params, lr=train.lr)
    rng = np.random.default_rng(train.seed)
    t_end = nav.reward_weights.temperature
    nav = replace(nav, greedy=False, ttt=replace(nav.ttt, enabled=False))
    rows, batch = [], []
    for ep in range(train.episodes):
        temp = temperature_schedule(ep, train.episodes, train.t_start, t_end, train.decay_fraction)
        case = cases[int(rng.integers(len(cases)))]
        trace = run_episode(case, store, LearnedPolicy(params), fusion, replace(nav, temperature=temp),
                            rng_seed=int(rng.integers(2**63)))
        batch.append((trace.decisions(store), trace.total))
        rw = trace.rewards or {}
        row = {"episode": ep, "reward": trace.total, "r_acc": rw.get("r_acc"), "r_div": rw.get("r_div"),
               "r_dp": rw.get("r_dp"), "r_hp": rw.get("r_hp"), "baseline": trainer.baseline,
               "temperature": temp}
        if len(batch) >= train.batch_size or ep == train.episodes - 1:
            trainer.update(batch)
            batch = []
        row["baseline"] = trainer.baseline
        rows.append(row)
        if on_episode is not None:
            on_episode(row)
    return params, rows


# -- evaluation ------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    episodes: int
    mean_total: float
    mean_r_acc: float
    mean_r_div: float
    mean_hops: float
    mean_depth: float
    hit_rate: float
    sec_per_episode: float
    degenerate: int


def summarize(method: str, traces: Sequence[EpisodeTrace], ground_truth: dict[str, Sequence[str]],
              seconds: float = 0.0) -> MethodSummary:
    """Aggregate a method's traces. Reward means skip degenerate (empty) episodes
    except ``mean_total``, which counts them at the empty-episode reward."""
    if not traces:
        raise ContractViolation("summarize needs at least one trace")
    full = [t for t in traces if t.rewards]
    hits = sum(bool(set(t.selected_set) & set(ground_truth.get(t.case_id, ()))) for t in traces)

    def mean(xs):
        return float(np.mean(xs)) if xs else float("nan")

    return MethodSummary(
        method=method,
        episodes=len(traces),
        mean_total=mean([t.total for t in traces]),
        mean_r_acc=mean([t.rewards["r_acc"] for t in full]),
        mean_r_div=mean([t.rewards["r_div"] for t in full]),
        mean_hops=mean([t.h for t in traces]),
        mean_depth=mean([t.d for t in traces]),
        hit_rate=hits / len(traces),
        sec_per_episode=seconds / len(traces),
        degenerate=len(traces) - len(full),
    )


def flat_knn_trace(case: Case, store: HypergraphStore, fusion: FusionParameters, size: int,
                   weights: RewardWeights) -> EpisodeTrace:
    """Baseline: the evidence set is simply the top-``size`` index neighbours."""
    from .fusion import fuse

    q = fuse(case.z_img, case.z_ehr, fusion)
    size = max(1, min(size, weights.h_max, len(store.index)))
    ids = [i for i, _ in store.index.search(q, k=size)]
    trace = EpisodeTrace(case_id=case.case_id, seed=0, selected_set=ids, reward_query=[float(x) for x in q])
    trace.rewards = reward_components(q, store.embeddings(ids), 0, len(ids), weights)
    return trace


@dataclass
class EvalReport:
    rows: list[MethodSummary]
    traces: dict[str, list[EpisodeTrace]] = field(repr=False, default_factory=dict)

    def row(self, method: str) -> MethodSummary:
        return next(r for r in self.rows if r.method == method)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def table(self) -> str:
        cols = ["method", "mean_total", "mean_r_acc", "mean_r_div", "mean_hops", "mean_depth",
                "hit_rate", "sec_per_episode"]
        cells = [cols] + [[r.method] + [f"{getattr(r, c):.4f}" for c in cols[1:]] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
                 for row in cells]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


BASELINES = ("random", "greedy-cosine", "flat-knn")


def evaluate(store: HypergraphStore, policy: PolicyParameters | None, fusion: FusionParameters,
             cases: Sequence[Case], ground_truth: dict[str, Sequence[str]],
             baselines: Sequence[str] = BASELINES, nav: NavigationConfig = NavigationConfig(),
             seed: int = 0, walker_name: str = "walker") -> EvalReport:
    """Run the Walker (greedy, evaluation temperature) and the requested baselines."""
    if not cases:
        raise ContractViolation("evaluate needs at least one case")
    unknown = set(baselines) - set(BASELINES)
    if unknown:
        raise ContractViolation(f"unknown baseline(s) {sorted(unknown)}")
    rows, traces = [], {}

    def run(name, pol, cfg):
        t0 = time.perf_counter()
        out = [run_episode(c, store, pol, fusion, cfg, rng_seed=seed + i) for i, c in enumerate(cases)]
        rows.append(summarize(name, out, ground_truth, time.perf_counter() - t0))
        traces[name] = out

    eval_nav = replace(nav, temperature=None)
    if policy is not None:
        run(walker_name, LearnedPolicy(policy), replace(eval_nav, greedy=True))
    if "random" in baselines:
        run("random", UniformPolicy(), replace(eval_nav, greedy=False, allow_stop=False))
    if "greedy-cosine" in baselines:
        run("greedy-cosine", CosinePolicy(), replace(eval_nav, greedy=True, allow_stop=False))
    if "flat-knn" in baselines:
        ref = traces.get(walker_name) or traces.get("greedy-cosine")
        sizes = [len(t.selected_set) for t in ref] if ref else [1] * len(cases)
        t0 = time.perf_counter()
        out = [flat_knn_trace(c, store, fusion, s, nav.reward_weights) for c, s in zip(cases, sizes)]
        rows.append(summarize("flat-knn", out, ground_truth, time.perf_counter() - t0))
        traces["flat-knn"] = out
    return EvalReport(rows, traces)


# -- ablations -------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no-ehr": {"drop": ("ehr",)},
    "no-xray": {"drop": ("image",)},
    "no-knowledge": {"drop": ("knowledge",)},
    "no-racc": {"weights": {"lambda_a": 0.0}},
    "no-rdiv": {"weights": {"lambda_d": 0.0}},
    "no-rbudget": {"weights": {"lambda_p": 0.0}},
    "no-linger": {"nav": {"linger": False}},
}


def ablate_case(case: Case, variant: str) -> Case:
    """Input-side modality removal: without EHR the EHR slot is zeroed; without
    X-ray the EHR embedding stands in for the image."""
    drop = ABLATIONS[variant].get("drop", ())
    if "ehr" in drop:
        return replace(case, z_ehr=np.zeros_like(case.z_ehr))
    if "image" in drop:
        return replace(case, z_img=case.z_ehr)
    return case


def ablate_nav(nav: NavigationConfig, variant: str) -> NavigationConfig:
    spec = ABLATIONS[variant]
    if "weights" in spec:
        nav = replace(nav, reward_weights=replace(nav.reward_weights, **spec["weights"]))
    if "nav" in spec:
        nav = replace(nav, **spec["nav"])
    return nav
