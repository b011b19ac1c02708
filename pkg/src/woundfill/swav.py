"""Swapped-prediction self-supervision with online Sinkhorn-Knopp codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import logsumexp, log_softmax

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class SwavConfig:
    temperature: float = 0.1
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    n_prototypes: int = 30

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be >= 1")
        if self.n_prototypes < 1:
            raise ValueError("n_prototypes must be >= 1")


def init_prototypes(feature_dim: int, n_prototypes: int, seed: int) -> np.ndarray:
    """Random unit columns, shape (F, K)."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((feature_dim, n_prototypes))
    return normalize_prototypes(c)


def normalize_prototypes(protos: np.ndarray) -> np.ndarray:
    return protos / np.linalg.norm(protos, axis=0, keepdims=True)


def prototype_scores(features, protos) -> np.ndarray:
    """Dot products c_k . z_b as a (K, B) matrix. ``features`` is (B, F)."""
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    c = np.asarray(protos, dtype=np.float64)
    if z.shape[1] != c.shape[0]:
        raise ValueError(f"feature length {z.shape[1]} does not match prototypes {c.shape[0]}")
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("features must be unit-normalized")
    return c.T @ z.T


def sinkhorn_codes(scores, epsilon: float, iters: int) -> np.ndarray:
    """Soft codes on the transportation polytope (rows sum to 1/K, columns to 1/B).

    Alternating row and column rescaling of exp(scores / epsilon), carried out
    in the log domain so small epsilon cannot overflow. The last step is the
    column rescaling.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("scores must be a (K, B) matrix")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite entries")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    k, b = s.shape
    logq = s / epsilon
    logq -= logsumexp(logq)
    for _ in range(iters):
        logq -= logsumexp(logq, axis=1, keepdims=True) + np.log(k)
        logq -= logsumexp(logq, axis=0, keepdims=True) + np.log(b)
    return np.exp(logq)


def code_entropy(q: np.ndarray) -> float:
    q = np.asarray(q)
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)))


def _cross_entropy(z, q, protos, temperature):
    logits = protos.T @ z / temperature
    return -float(np.dot(q, log_softmax(logits)))


def swapped_pair_loss(z_t, z_s, q_t, q_s, protos, temperature: float) -> float:
    """Predict the code of each view from the feature of the other, summed."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    q_t, q_s = np.asarray(q_t, dtype=np.float64), np.asarray(q_s, dtype=np.float64)
    if np.any(q_t < 0) or np.any(q_s < 0):
        raise ValueError("codes must be nonnegative")
    protos = np.asarray(protos, dtype=np.float64)
    return _cross_entropy(np.asarray(z_t), q_s, protos, temperature) + _cross_entropy(
        np.asarray(z_s), q_t, protos, temperature
    )


@dataclass
class SwavLossResult:
    loss: float
    grad_views: list[np.ndarray]  # one (B, F) array per view
    grad_protos: np.ndarray  # (F, K)
    codes: list[np.ndarray]  # one (K, B) array per view


def batch_swav_loss(
    views: list[np.ndarray], protos, config: SwavConfig, codes: list[np.ndarray] | None = None
) -> SwavLossResult:
    """Mean swapped-prediction loss over the images of a batch.

    ``views[v]`` holds the unit features (B, F) of augmentation ``v``. Codes
    come from Sinkhorn on each view's scores unless given; either way they are
    constants for the gradient. Every ordered pair of distinct views
    contributes one cross-entropy term.
    """
    if len(views) < 2:
        raise ValueError("need at least two augmented views per image")
    protos = np.asarray(protos, dtype=np.float64)
    views = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in views]
    bsz = views[0].shape[0]
    if any(z.shape != views[0].shape for z in views):
        raise ValueError("all views must have the same shape")
    scores = [prototype_scores(z, protos) for z in views]
    if codes is None:
        # per-image probability vectors: each column rescaled to sum to one
        codes = [sinkhorn_codes(s, config.epsilon, config.sinkhorn_iters) * bsz for s in scores]
    tau = config.temperature
    loss = 0.0
    grad_views = [np.zeros_like(z) for z in views]
    grad_protos = np.zeros_like(protos)
    for t, z_t in enumerate(views):
        logp = log_softmax(scores[t] / tau, axis=0)  # (K, B)
        p = np.exp(logp)
        for s in range(len(views)):
            if s == t:
                continue
            q = codes[s]
            loss -= float(np.sum(q * logp))
            dlogits = (p * q.sum(axis=0, keepdims=True) - q) / (tau * bsz)  # (K, B)
            grad_views[t] += dlogits.T @ protos.T
            grad_protos += z_t.T @ dlogits.T
    return SwavLossResult(loss / bsz, grad_views, grad_protos, codes)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.2
    noise_std: float = 0.02


IDENTITY_AUGMENT = AugmentConfig(crop_scale=(1.0, 1.0), flip_prob=0.0, brightness=0.0, noise_std=0.0)


def augment(image, rng_seed, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random crop-and-resize, horizontal flip, brightness shift and pixel noise.

    Output has the input's size and stays in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h, w = img.shape
    out = img
    lo, hi = config.crop_scale
    area = rng.uniform(lo, hi) if hi > lo else lo
    if area < 1.0:
        side = np.sqrt(area)
        ch, cw = side * h, side * w
        top = rng.uniform(0.0, h - ch)
        left = rng.uniform(0.0, w - cw)
        rows = top + (np.arange(h) + 0.5) * (ch / h) - 0.5
        cols = left + (np.arange(w) + 0.5) * (cw / w) - 0.5
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        out = map_coordinates(out, [rr, cc], order=1, mode="nearest")
    if config.flip_prob > 0 and rng.uniform() < config.flip_prob:
        out = out[:, ::-1]
    if config.brightness > 0:
        out = out + rng.uniform(-config.brightness, config.brightness)
    if config.noise_std > 0:
        out = out + rng.normal(0.0, config.noise_std, out.shape)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)
