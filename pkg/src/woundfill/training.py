"""Training loops: SwAV pretraining, supervised fine-tuning, Adam, splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .decoder import MorphableBasis
from .encoder import (
    EncoderParams,
    backbone_backward,
    backbone_forward,
    head_backward,
    head_forward,
    mapping_backward,
    mapping_forward,
)
from .swav import AugmentConfig, SwavConfig, augment, batch_swav_loss, normalize_prototypes

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 50
    epochs: int = 50
    seed: int = 0
    mode: str = "finetune"
    data_fraction: float = 1.0
    # False reuses epoch 0's shuffle and augmentation seeds every epoch
    vary_epoch_seed: bool = True

    def __post_init__(self):
        # learning_rate == 0 is accepted as a frozen-parameter control run
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be 'pretrain' or 'finetune', got {self.mode!r}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")


# --- loss -------------------------------------------------------------------


def _check_weights(w, n):
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if len(w) != n:
        raise ValueError(f"{len(w)} region weights for {n} vertices")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("region weights must be nonnegative with at least one positive")
    return w


def masked_l1(pred, truth, weights) -> float:
    """Region-weighted L1 distance, sum_i w_i * |pred_i - truth_i|_1 / N."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"vertex buffers differ in shape: {pred.shape} vs {truth.shape}")
    n = pred.shape[-2]
    w = _check_weights(weights, n)
    return float(np.sum(w * np.abs(pred - truth).sum(axis=-1)) / n)


def batch_masked_l1(pred, truth, w):
    """Mean masked L1 over a batch (M, N, 3) and its gradient wrt ``pred``."""
    m, n = pred.shape[0], pred.shape[1]
    diff = pred - truth
    per = np.abs(diff).sum(axis=2) @ w / n
    grad = np.sign(diff) * (w[None, :, None] / (n * m))
    return float(per.mean()), grad


def uniform_weights(n_vertices: int) -> np.ndarray:
    return np.ones(n_vertices)


def region_weights(
    directions: np.ndarray,
    regions: dict[str, float] | None = None,
    base: float = 1.0,
) -> np.ndarray:
    """Per-vertex weights with boosted disks around the eyes, nose and mouth.

    ``directions`` are the template's unit-sphere vertex directions. Region
    centers sit on the face side (+z) of the synthetic head.
    """
    centers = {
        "eyes": [(-0.35, 0.25, 0.9), (0.35, 0.25, 0.9)],
        "nose": [(0.0, 0.0, 1.0)],
        "mouth": [(0.0, -0.45, 0.89)],
    }
    regions = {"eyes": 2.0, "nose": 2.0, "mouth": 2.0} if regions is None else regions
    w = np.full(len(directions), base, dtype=np.float64)
    for name, weight in regions.items():
        for c in centers[name]:
            c = np.asarray(c) / np.linalg.norm(c)
            w[directions @ c > np.cos(np.radians(15))] = weight
    return _check_weights(w, len(directions))


def load_region_weights(path, n_vertices: int) -> np.ndarray:
    """CSV ``vertex_index,weight``; unlisted vertices keep weight 1."""
    w = np.ones(n_vertices)
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    w[rows[:, 0].astype(np.int64)] = rows[:, 1]
    return _check_weights(w, n_vertices)


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update on the entries of ``params`` named in ``grads``.

    Returns new (params, state); inputs are left untouched.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient for {name!r}: {bad} of {np.size(g)} entries at step {state.step + 1}"
            )
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
    t = state.step + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        m_prev = m.get(name, 0.0)
        v_prev = v.get(name, 0.0)
        m[name] = BETA1 * m_prev + (1.0 - BETA1) * g
        v[name] = BETA2 * v_prev + (1.0 - BETA2) * (g * g)
        step = lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + ADAM_EPS)
        new_params[name] = params[name] - step
    return new_params, AdamState(t, m, v)


# --- splits -----------------------------------------------------------------


def split_dataset(identities, seed: int) -> dict:
    """Assign whole identities to train/validation/test in a 6:2:2 ratio."""
    ids = list(identities)
    if len(set(ids)) != len(ids):
        raise ValueError("identities must be unique")
    n = len(ids)
    if n < 5:
        raise ValueError(f"need at least 5 identities to split 6:2:2, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(n * 0.6 + 0.5)
    n_val = int(n * 0.2 + 0.5)
    out = {}
    for rank, idx in enumerate(order.tolist()):
        part = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
        out[ids[idx]] = part
    return out


# --- loops ------------------------------------------------------------------


def epoch_rng(config: TrainConfig, epoch: int, stream: int = 0) -> np.random.Generator:
    e = epoch if config.vary_epoch_seed else 0
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(e, stream)))


def subsample(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a deterministic ``fraction`` of ``n`` items (at least one)."""
    keep = max(1, int(round(fraction * n)))
    return np.sort(np.random.default_rng([seed, 7]).permutation(n)[:keep])


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def swav_batch_step(enc: EncoderParams, protos, views_images, swav: SwavConfig):
    """Loss and gradients (encoder backbone+head, prototypes) for one batch of views."""
    units, caches = [], []
    for imgs in views_images:
        feat, bcache = backbone_forward(enc, imgs)
        unit, hcache = head_forward(enc, feat)
        units.append(unit)
        caches.append((bcache, hcache))
    res = batch_swav_loss(units, protos, swav)
    grads: dict[str, np.ndarray] = {}
    for (bcache, hcache), gunit in zip(caches, res.grad_views):
        dfeat, ghead = head_backward(enc, hcache, gunit)
        gbb = backbone_backward(enc, bcache, dfeat)
        for name, g in {**ghead, **gbb}.items():
            grads[name] = grads[name] + g if name in grads else g
    return res.loss, grads, res.grad_protos


def swav_views(images, rng: np.random.Generator, n_views: int, aug: AugmentConfig):
    seeds = rng.integers(0, 2**63, size=(len(images), n_views))
    return [
        np.stack([augment(img, int(seeds[i, v]), aug) for i, img in enumerate(images)])
        for v in range(n_views)
    ]


def pretrain_ssl(
    images,
    encoder: EncoderParams,
    protos,
    config: TrainConfig,
    swav: SwavConfig = SwavConfig(),
    aug: AugmentConfig = AugmentConfig(),
    n_views: int = 2,
):
    """SwAV pretraining of backbone, projection head and prototypes.

    Returns (encoder, prototypes, per-epoch mean loss).
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("pretraining needs at least one image")
    if config.mode != "pretrain":
        config = replace(config, mode="pretrain")
    images = images[subsample(len(images), config.data_fraction, config.seed)]
    enc = encoder.copy()
    protos = normalize_prototypes(np.array(protos, dtype=np.float64))
    state = AdamState()
    curve = []
    for epoch in range(config.epochs):
        rng = epoch_rng(config, epoch)
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for idx in _batches(order, config.batch_size):
            views = swav_views(images[idx], rng, n_views, aug)
            loss, grads, gproto = swav_batch_step(enc, protos, views, swav)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * len(idx)
            count += len(idx)
            if config.learning_rate > 0:
                params = {**enc.params, "prototypes": protos}
                params, state = adam_step(
                    params, {**grads, "prototypes": gproto}, state, config.learning_rate
                )
                protos = normalize_prototypes(params.pop("prototypes"))
                enc = EncoderParams(enc.config, params)
        curve.append(total / count)
        log.info("pretrain epoch %d loss %.6f", epoch + 1, curve[-1])
    return enc, protos, curve


def finetune_batch_step(enc: EncoderParams, basis: MorphableBasis, images, targets, weights):
    """Batch masked-L1 of decode(map(backbone(I))) and gradients for backbone+mapping."""
    feat, bcache = backbone_forward(enc, images)
    codes, acts = mapping_forward(enc, feat)
    pred = (codes @ basis.basis.T + basis.mean_shape).reshape(targets.shape)
    loss, dpred = batch_masked_l1(pred, targets, weights)
    dcode = dpred.reshape(len(codes), -1) @ basis.basis
    dfeat, gmap = mapping_backward(enc, acts, dcode)
    gbb = backbone_backward(enc, bcache, dfeat)
    return loss, {**gbb, **gmap}


def predict_vertices(enc: EncoderParams, basis: MorphableBasis, images, batch: int = 100):
    out = []
    images = np.asarray(images, dtype=np.float64)
    for i in range(0, len(images), batch):
        feat, _ = backbone_forward(enc, images[i : i + batch])
        codes, _ = mapping_forward(enc, feat)
        out.append(codes @ basis.basis.T + basis.mean_shape)
    return np.concatenate(out).reshape(len(images), basis.n_vertices, 3)


def dataset_loss(enc, basis, images, targets, weights) -> float:
    if len(images) == 0:
        return float("nan")
    pred = predict_vertices(enc, basis, images)
    return batch_masked_l1(pred, np.asarray(targets), weights)[0]


def mean_distance(enc, basis, images, targets) -> float:
    """Mean per-vertex Euclidean error, averaged over images."""
    pred = predict_vertices(enc, basis, images)
    return float(np.mean(np.linalg.norm(pred - np.asarray(targets), axis=2)))


@dataclass
class LossCurves:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_curve_csv(path, self.train, self.val)


def write_curve_csv(path, train, val=None) -> None:
    rows = ["epoch,train_loss,val_loss"]
    for i, tr in enumerate(train):
        v = "" if val is None or i >= len(val) or not np.isfinite(val[i]) else f"{val[i]:.6f}"
        rows.append(f"{i + 1},{tr:.6f},{v}")
    Path(path).write_text("\n".join(rows) + "\n")


def finetune(
    train,
    encoder: EncoderParams,
    basis: MorphableBasis,
    weights,
    config: TrainConfig,
    val=None,
):
    """Supervised training of backbone and mapping network; the decoder stays fixed.

    ``train`` and ``val`` are (images (M, H, W), target vertices (M, N, 3)).
    Returns (encoder, LossCurves) with the mean batch loss and the
    validation loss per epoch.
    """
    images, targets = (np.asarray(a, dtype=np.float64) for a in train)
    if len(images) == 0 or len(images) != len(targets):
        raise ValueError("need matching, non-empty images and targets")
    if targets.shape[1] != basis.n_vertices:
        raise ValueError("targets do not match the decoder's vertex count")
    w = _check_weights(weights, basis.n_vertices)
    if config.data_fraction < 1:
        keep = subsample(len(images), config.data_fraction, config.seed)
        images, targets = images[keep], targets[keep]
    enc = encoder.copy()
    state = AdamState()
    curves = LossCurves()
    for epoch in range(config.epochs):
        rng = epoch_rng(config, epoch, stream=1)
        order = rng.permutation(len(images))
        total = 0.0
        for idx in _batches(order, config.batch_size):
            loss, grads = finetune_batch_step(enc, basis, images[idx], targets[idx], w)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * len(idx)
            if config.learning_rate > 0:
                params, state = adam_step(enc.params, grads, state, config.learning_rate)
                enc = EncoderParams(enc.config, params)
        curves.train.append(total / len(images))
        curves.val.append(dataset_loss(enc, basis, *val, w) if val is not None else float("nan"))
        log.info(
            "finetune epoch %d train %.6f val %.6f", epoch + 1, curves.train[-1], curves.val[-1]
        )
    return enc, curves
