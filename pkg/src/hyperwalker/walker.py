"""Walker: candidate scoring policy, selection distribution, rewards and REINFORCE."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .binfmt import Reader, Writer
from .errors import ContractViolation
from .optim import AdamW

MAGIC = b"HWPL"
VERSION = 1
BASELINE_DECAY = 0.95
# Terminal reward for an episode that stopped before selecting anything.
EMPTY_EPISODE_REWARD = 0.0


@dataclass(frozen=True)
class RewardWeights:
    lambda_a: float = 1.0
    lambda_d: float = 0.5
    lambda_p: float = 0.3
    d_max: int = 5
    h_max: int = 5
    temperature: float = 0.01

    def __post_init__(self):
        if self.d_max < 1 or self.h_max < 1:
            raise ContractViolation("d_max and h_max must be >= 1")
        if not self.temperature > 0:
            raise ContractViolation("temperature must be positive")


@dataclass
class PolicyParameters:
    Wp1: np.ndarray   # 2D x H
    bp1: np.ndarray   # H
    wp2: np.ndarray   # H
    bp2: np.ndarray   # scalar (0-d array)
    stop_score: np.ndarray  # scalar (0-d array)

    @classmethod
    def init(cls, dim: int, hidden: int = 256, seed: int = 0, dtype=np.float32) -> "PolicyParameters":
        rng = np.random.default_rng(seed)
        b1 = 1.0 / math.sqrt(2 * dim)
        b2 = 1.0 / math.sqrt(hidden)
        return cls(
            Wp1=rng.uniform(-b1, b1, (2 * dim, hidden)).astype(dtype),
            bp1=rng.uniform(-b1, b1, hidden).astype(dtype),
            wp2=rng.uniform(-b2, b2, hidden).astype(dtype),
            bp2=np.zeros((), dtype),
            stop_score=np.zeros((), dtype),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int = 256, dtype=np.float32) -> "PolicyParameters":
        return cls(np.zeros((2 * dim, hidden), dtype), np.zeros(hidden, dtype), np.zeros(hidden, dtype),
                   np.zeros((), dtype), np.zeros((), dtype))

    @property
    def dim(self) -> int:
        return self.Wp1.shape[0] // 2

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(**{k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        for name, a in self.arrays().items():
            w.text(name)
            w.array(a, "float32")
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyParameters":
        r = Reader(data, MAGIC, (VERSION,))
        out = {}
        for f in fields(cls):
            name = r.text()
            if name != f.name:
                raise ContractViolation(f"expected tensor {f.name!r}, found {name!r}")
            out[name] = r.array("float32")
        r.done()
        return cls(**out)


def _pairs(z_q: np.ndarray, cands: np.ndarray) -> np.ndarray:
    q = np.broadcast_to(z_q, (cands.shape[0], z_q.shape[0]))
    return np.concatenate([q, cands], axis=1)


def score_candidates(z_q, cands, p: PolicyParameters) -> np.ndarray:
    """Vectorised :func:`score_candidate` over the rows of ``cands``."""
    z_q = np.asarray(z_q, dtype=np.float64)
    cands = np.atleast_2d(np.asarray(cands, dtype=np.float64))
    if z_q.shape[0] != p.dim or cands.shape[1] != p.dim:
        raise ContractViolation(f"expected vectors of length {p.dim}")
    hidden = np.tanh(_pairs(z_q, cands) @ p.Wp1.astype(np.float64) + p.bp1)
    return hidden @ p.wp2.astype(np.float64) + float(p.bp2)


def score_candidate(z_q, z_i, p: PolicyParameters) -> float:
    return float(score_candidates(z_q, np.asarray(z_i)[None, :], p)[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def selection_distribution(z_q, cands, p: PolicyParameters, temperature: float,
                           allow_stop: bool = True) -> np.ndarray:
    """Tempered softmax over candidate scores; the last entry is STOP when allowed."""
    cands = np.asarray(cands)
    if cands.ndim != 2 or cands.shape[0] == 0:
        raise ContractViolation("selection_distribution needs at least one candidate")
    if not temperature > 0:
        raise ContractViolation("temperature must be positive")
    scores = score_candidates(z_q, cands, p)
    if allow_stop:
        scores = np.append(scores, float(p.stop_score))
    return softmax(scores / temperature)


# -- rewards ---------------------------------------------------------------

def _unit_rows(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def reward_accuracy(z_q, selected) -> float:
    selected = np.asarray(selected)
    if selected.size == 0:
        raise ContractViolation("reward_accuracy needs a non-empty selection")
    q = _unit_rows(z_q)[0]
    return float(np.mean(_unit_rows(selected) @ q))


def reward_diversity(selected) -> float:
    selected = np.asarray(selected)
    n = 0 if selected.size == 0 else np.atleast_2d(selected).shape[0]
    if n <= 1:
        return 1.0
    u = _unit_rows(selected)
    g = u @ u.T
    off = g.sum() - np.trace(g)
    return float(1.0 - off / (n * (n - 1)))


def reward_budget(d: int, h: int, w: RewardWeights = RewardWeights()) -> tuple[float, float]:
    if not 0 <= d <= w.d_max:
        raise ContractViolation(f"depth {d} outside [0, {w.d_max}]")
    if not 0 <= h <= w.h_max:
        raise ContractViolation(f"hop count {h} outside [0, {w.h_max}]")
    return d / w.d_max, h / w.h_max


def combine_rewards(r_acc: float, r_div: float, r_dp: float, r_hp: float, w: RewardWeights) -> float:
    return w.lambda_a * r_acc + w.lambda_d * r_div - w.lambda_p * (r_dp + r_hp)


def reward_components(z_q, selected, d: int, h: int, w: RewardWeights = RewardWeights()) -> dict[str, float]:
    r_acc = reward_accuracy(z_q, selected)
    r_div = reward_diversity(selected)
    r_dp, r_hp = reward_budget(d, h, w)
    return {"r_acc": r_acc, "r_div": r_div, "r_dp": r_dp, "r_hp": r_hp,
            "total": combine_rewards(r_acc, r_div, r_dp, r_hp, w)}


def total_reward(z_q, selected, d: int, h: int, w: RewardWeights = RewardWeights()) -> float:
    return reward_components(z_q, selected, d, h, w)["total"]


# -- policy gradient -------------------------------------------------------

@dataclass
class Decision:
    """Everything needed to rebuild one step's action distribution."""

    query: np.ndarray
    candidates: np.ndarray
    chosen: int              # row of ``candidates``, or len(candidates) for STOP
    temperature: float
    allow_stop: bool = True


def log_prob(p: PolicyParameters, dec: Decision) -> float:
    probs = selection_distribution(dec.query, dec.candidates, p, dec.temperature, dec.allow_stop)
    return float(np.log(probs[dec.chosen]))


def log_prob_grad(p: PolicyParameters, dec: Decision) -> dict[str, np.ndarray]:
    """Analytic gradient of ``log pi(chosen)`` w.r.t. every policy tensor."""
    x = _pairs(np.asarray(dec.query, dtype=np.float64), np.asarray(dec.candidates, dtype=np.float64))
    wp2 = p.wp2.astype(np.float64)
    t = np.tanh(x @ p.Wp1.astype(np.float64) + p.bp1)
    scores = t @ wp2 + float(p.bp2)
    n = scores.shape[0]
    if dec.allow_stop:
        scores = np.append(scores, float(p.stop_score))
    probs = softmax(scores / dec.temperature)
    onehot = np.zeros_like(probs)
    onehot[dec.chosen] = 1.0
    g_s = (onehot - probs) / dec.temperature
    g_cand = g_s[:n]
    g_a = np.outer(g_cand, wp2) * (1.0 - t * t)
    return {
        "Wp1": x.T @ g_a,
        "bp1": g_a.sum(axis=0),
        "wp2": g_cand @ t,
        "bp2": np.array(g_cand.sum()),
        "stop_score": np.array(g_s[n] if dec.allow_stop else 0.0),
    }


def episode_objective(p: PolicyParameters, episodes: Sequence[tuple[Sequence[Decision], float]],
                      baseline: float) -> float:
    """Mean over episodes of ``sum_t log pi(a_t) * (R - baseline)``."""
    total = 0.0
    for decisions, reward in episodes:
        adv = reward - baseline
        total += adv * sum(log_prob(p, d) for d in decisions)
    return total / max(1, len(episodes))


def episode_objective_grad(p: PolicyParameters, episodes, baseline: float) -> dict[str, np.ndarray]:
    grads = {k: np.zeros(v.shape) for k, v in p.arrays().items()}
    for decisions, reward in episodes:
        adv = reward - baseline
        if adv == 0.0:
            continue
        for dec in decisions:
            for k, g in log_prob_grad(p, dec).items():
                grads[k] += adv * g
    scale = 1.0 / max(1, len(episodes))
    return {k: g * scale for k, g in grads.items()}


class ReinforceTrainer:
    """REINFORCE with an exponential-moving-average baseline and Adam moments.

    Episodes are ``(decisions, reward)`` pairs; see
    :meth:`hyperwalker.navigator.EpisodeTrace.decisions` for producing the
    decision list from a stored trace.
    """

    def __init__(self, params: PolicyParameters, lr: float = 1e-3, betas=(0.9, 0.999),
                 baseline: float | None = None, baseline_decay: float = BASELINE_DECAY):
        self.params = params
        self.optimizer = AdamW(lr, betas=betas, weight_decay=0.0)
        self.baseline = baseline
        self.baseline_decay = baseline_decay

    def update(self, episodes: Sequence[tuple[Sequence[Decision], float]]) -> float:
        """One gradient-ascent step; returns the baseline used for the advantage."""
        if not episodes:
            return self.baseline if self.baseline is not None else 0.0
        mean_r = float(np.mean([r for _, r in episodes]))
        if self.baseline is None:
            self.baseline = mean_r
        used = self.baseline
        grads = episode_objective_grad(self.params, episodes, used)
        self.optimizer.step(self.params.arrays(), grads, maximize=True)
        self.baseline = self.baseline_decay * self.baseline + (1.0 - self.baseline_decay) * mean_r
        return used


def policy_gradient_update(p: PolicyParameters, episodes, baseline: float, lr: float = 1e-3,
                           optimizer: AdamW | None = None) -> tuple[PolicyParameters, float]:
    """Functional REINFORCE step returning ``(new_params, new_baseline)``.

    ``p`` is not modified. Pass a persistent ``optimizer`` to carry Adam
    moments across calls; by default a fresh one is used.
    """
    episodes = list(episodes)
    new = p.copy()
    if not episodes:
        return new, baseline
    opt = optimizer or AdamW(lr, weight_decay=0.0)
    opt.step(new.arrays(), episode_objective_grad(p, episodes, baseline), maximize=True)
    mean_r = float(np.mean([r for _, r in episodes]))
    return new, BASELINE_DECAY * baseline + (1.0 - BASELINE_DECAY) * mean_r


def temperature_schedule(episode: int, total: int, start: float = 1.0, end: float = 0.01,
                         decay_fraction: float = 0.5) -> float:
    """Geometric decay from ``start`` to ``end`` over the first ``decay_fraction`` of training."""
    horizon = max(1, int(total * decay_fraction))
    if episode >= horizon:
        return end
    return float(start * (end / start) ** (episode / horizon))
