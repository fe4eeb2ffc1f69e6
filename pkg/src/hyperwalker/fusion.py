"""FiLM fusion of image and EHR embeddings with hand-written backprop.

Forward pass::

    h      = tanh(W1.T @ z_ehr + b1)
    gamma  = W_gamma.T @ h + b_gamma
    beta   = W_beta.T @ h + b_beta
    x      = z_img + gamma * z_img + beta
    y      = (x - mean(x)) / sqrt(var(x) + eps)      # LayerNorm, no affine
    z      = y / ||y||

With the gamma/beta heads zero-initialised the modulation branch vanishes
and ``z`` is just the normalised, centred image embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .binfmt import Reader, Writer
from .errors import ContractViolation, DegenerateVectorError

LN_EPS = 1e-5
MAGIC = b"HWFP"
VERSION = 1


@dataclass
class FusionParameters:
    W1: np.ndarray        # D x H
    b1: np.ndarray        # H
    W_gamma: np.ndarray   # H x D
    b_gamma: np.ndarray   # D
    W_beta: np.ndarray    # H x D
    b_beta: np.ndarray    # D

    @classmethod
    def identity(cls, dim: int, hidden: int = 512, seed: int = 0, dtype=np.float32) -> "FusionParameters":
        """Hidden layer ~ U(-1/sqrt(D), 1/sqrt(D)); gamma/beta heads exactly zero."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        return cls(
            W1=rng.uniform(-bound, bound, (dim, hidden)).astype(dtype),
            b1=rng.uniform(-bound, bound, hidden).astype(dtype),
            W_gamma=np.zeros((hidden, dim), dtype),
            b_gamma=np.zeros(dim, dtype),
            W_beta=np.zeros((hidden, dim), dtype),
            b_beta=np.zeros(dim, dtype),
        )

    @classmethod
    def random(cls, dim: int, hidden: int, seed: int = 0, scale: float = 0.5, dtype=np.float64) -> "FusionParameters":
        """Fully random parameters (non-zero heads); used for tests and ablations."""
        rng = np.random.default_rng(seed)
        return cls(**{
            f.name: (scale * rng.standard_normal(shape)).astype(dtype)
            for f, shape in zip(fields(cls), [(dim, hidden), (hidden,), (hidden, dim), (dim,), (hidden, dim), (dim,)])
        })

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "FusionParameters":
        return FusionParameters(**{k: v.copy() for k, v in self.arrays().items()})

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        for name, a in self.arrays().items():
            w.text(name)
            w.array(a, "float32")
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FusionParameters":
        r = Reader(data, MAGIC, (VERSION,))
        out = {}
        for f in fields(cls):
            name = r.text()
            if name != f.name:
                raise ContractViolation(f"expected tensor {f.name!r}, found {name!r}")
            out[name] = r.array("float32")
        r.done()
        return cls(**out)


@dataclass
class FusionCache:
    z_img: np.ndarray
    z_ehr: np.ndarray
    h: np.ndarray
    gamma: np.ndarray
    y: np.ndarray
    y_norm: float
    std: float
    out: np.ndarray
    params_id: int


@dataclass
class FusionGrads:
    W1: np.ndarray
    b1: np.ndarray
    W_gamma: np.ndarray
    b_gamma: np.ndarray
    W_beta: np.ndarray
    b_beta: np.ndarray
    z_img: np.ndarray
    z_ehr: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("W1", "b1", "W_gamma", "b_gamma", "W_beta", "b_beta")}


def layer_norm(x: np.ndarray, eps: float = LN_EPS) -> tuple[np.ndarray, float]:
    xc = x - x.mean()
    std = float(np.sqrt(np.mean(xc * xc) + eps))
    return xc / std, std


def film_forward(z_img, z_ehr, p: FusionParameters) -> tuple[np.ndarray, FusionCache]:
    z_img = np.asarray(z_img, dtype=np.float64)
    z_ehr = np.asarray(z_ehr, dtype=np.float64)
    if z_img.shape != (p.dim,) or z_ehr.shape != (p.dim,):
        raise ContractViolation(f"inputs must have shape ({p.dim},)")
    if not (np.all(np.isfinite(z_img)) and np.all(np.isfinite(z_ehr))):
        raise ContractViolation("non-finite fusion input")
    W1, b1 = p.W1.astype(np.float64), p.b1.astype(np.float64)
    h = np.tanh(z_ehr @ W1 + b1)
    gamma = h @ p.W_gamma.astype(np.float64) + p.b_gamma
    beta = h @ p.W_beta.astype(np.float64) + p.b_beta
    x = z_img + gamma * z_img + beta
    y, std = layer_norm(x)
    y_norm = float(np.sqrt(y @ y))
    if y_norm < 1e-12:
        raise DegenerateVectorError("fused vector vanished after layer norm")
    out = y / y_norm
    return out, FusionCache(z_img, z_ehr, h, gamma, y, y_norm, std, out, id(p))


def film_backward(cache: FusionCache, upstream, p: FusionParameters) -> FusionGrads:
    """Gradients of ``<upstream, z_fused>`` w.r.t. every parameter and both inputs."""
    if cache.params_id != id(p):
        raise ContractViolation("cache was produced with a different parameter object")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.out.shape:
        raise ContractViolation("upstream gradient has the wrong shape")
    out, y = cache.out, cache.y
    # unit projection
    g_y = (g - out * (out @ g)) / cache.y_norm
    # layer norm (no affine)
    g_x = (g_y - g_y.mean() - y * np.mean(g_y * y)) / cache.std
    g_gamma = g_x * cache.z_img
    g_beta = g_x
    W_gamma = p.W_gamma.astype(np.float64)
    W_beta = p.W_beta.astype(np.float64)
    g_h = W_gamma @ g_gamma + W_beta @ g_beta
    g_pre = g_h * (1.0 - cache.h ** 2)
    return FusionGrads(
        W1=np.outer(cache.z_ehr, g_pre),
        b1=g_pre,
        W_gamma=np.outer(cache.h, g_gamma),
        b_gamma=g_gamma,
        W_beta=np.outer(cache.h, g_beta),
        b_beta=g_beta,
        z_img=g_x * (1.0 + cache.gamma),
        z_ehr=p.W1.astype(np.float64) @ g_pre,
    )


def fuse(z_img, z_ehr, p: FusionParameters) -> np.ndarray:
    return film_forward(z_img, z_ehr, p)[0]
