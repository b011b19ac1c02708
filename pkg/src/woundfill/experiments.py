"""End-to-end pipelines behind the method comparison table.

Every pipeline starts from an encoder trained with supervision on a pool of
undamaged identities disjoint from the corpus (the stand-in for a pretrained
face reconstruction model), then:

* ``transfer``: fine-tunes on the wounded corpus directly;
* ``ssl-20`` / ``ssl-100``: runs SwAV on 20% / 100% of the corpus training
  images first, then fine-tunes the same way.

``untrained`` evaluates a freshly initialised encoder as a floor.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Corpus, CorpusConfig, build_corpus
from .decoder import MorphableBasis, synth_basis
from .encoder import EncoderConfig, EncoderParams, init_encoder
from .swav import AugmentConfig, SwavConfig, init_prototypes
from .training import (
    LossCurves,
    TrainConfig,
    finetune,
    mean_distance,
    pretrain_ssl,
    uniform_weights,
)

log = logging.getLogger(__name__)

METHODS = ("transfer", "ssl-20", "ssl-100")
POOL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class ExperimentConfig:
    n_vertices: int = 642
    latent_dim: int = 16
    amplitude: float = 4.0
    decay: float = 1.5
    basis_seed: int = 0
    corpus: CorpusConfig = CorpusConfig()
    pool_identities: int = 1000
    pool_epochs: int = 30
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    swav: SwavConfig = SwavConfig()
    augment: AugmentConfig = AugmentConfig()


def arrays(corpus: Corpus, part: str | None):
    """Stacked (images, ground-truth vertices) for one split, one row per render."""
    pairs = corpus.pairs(part)
    if not pairs:
        return np.zeros((0, 1, 1)), np.zeros((0, 1, 3))
    images = np.stack([img for img, _ in pairs])
    targets = np.stack([s.gt_mesh.vertices for _, s in pairs])
    return images, targets


@dataclass
class PipelineResult:
    method: str
    test_distance: float
    finetune_curves: LossCurves
    ssl_curve: list[float] = field(default_factory=list)
    encoder: EncoderParams | None = None
    prototypes: np.ndarray | None = None


def make_basis(cfg: ExperimentConfig) -> MorphableBasis:
    return synth_basis(cfg.basis_seed, cfg.n_vertices, cfg.latent_dim, cfg.amplitude, cfg.decay)


def pool_pretrain(basis: MorphableBasis, cfg: ExperimentConfig, seed: int):
    """Supervised training on undamaged identities disjoint from the corpus."""
    pool = build_corpus(
        basis,
        cfg.pool_identities,
        seed=seed + POOL_SEED_OFFSET,
        config=replace(cfg.corpus, n_identities=cfg.pool_identities),
        wounded=False,
    )
    enc0 = init_encoder(replace(cfg.encoder, latent_dim=basis.latent_dim), seed)
    tc = replace(cfg.train, epochs=cfg.pool_epochs, seed=seed + POOL_SEED_OFFSET, data_fraction=1.0)
    enc, curves = finetune(
        arrays(pool, None), enc0, basis, uniform_weights(basis.n_vertices), tc
    )
    return enc0, enc, curves


def run_method(
    method: str,
    start: EncoderParams,
    corpus: Corpus,
    basis: MorphableBasis,
    cfg: ExperimentConfig,
    seed: int,
    weights=None,
) -> PipelineResult:
    weights = uniform_weights(basis.n_vertices) if weights is None else weights
    train, val, test = (arrays(corpus, p) for p in ("train", "validation", "test"))
    enc = start
    ssl_curve: list[float] = []
    protos = None
    if method.startswith("ssl-"):
        fraction = int(method.split("-")[1]) / 100.0
        protos = init_prototypes(cfg.encoder.proj_dim, cfg.swav.n_prototypes, seed)
        ssl_cfg = replace(cfg.train, seed=seed, mode="pretrain", data_fraction=fraction)
        enc, protos, ssl_curve = pretrain_ssl(train[0], enc, protos, ssl_cfg, cfg.swav, cfg.augment)
    elif method != "transfer":
        raise ValueError(f"unknown method {method!r}")
    ft_cfg = replace(cfg.train, seed=seed, mode="finetune", data_fraction=1.0)
    enc, curves = finetune(train, enc, basis, weights, ft_cfg, val=val)
    dist = mean_distance(enc, basis, *test)
    return PipelineResult(method, dist, curves, ssl_curve, enc, protos)


@dataclass
class SeedRun:
    seed: int
    untrained: float
    pooled: float
    results: dict[str, PipelineResult]
    seconds: float


def run_seed(cfg: ExperimentConfig, seed: int, methods=METHODS, basis=None) -> SeedRun:
    t0 = time.perf_counter()
    basis = make_basis(cfg) if basis is None else basis
    corpus = build_corpus(basis, seed=seed, config=cfg.corpus)
    enc0, pooled, _ = pool_pretrain(basis, cfg, seed)
    test = arrays(corpus, "test")
    results = {}
    for m in methods:
        results[m] = run_method(m, pooled, corpus, basis, cfg, seed)
        log.info("seed %d %s test distance %.6f", seed, m, results[m].test_distance)
    return SeedRun(
        seed,
        mean_distance(enc0, basis, *test),
        mean_distance(pooled, basis, *test),
        results,
        time.perf_counter() - t0,
    )


def median_table(runs: list[SeedRun], methods=METHODS) -> dict[str, float]:
    table = {m: float(np.median([r.results[m].test_distance for r in runs])) for m in methods}
    table["untrained"] = float(np.median([r.untrained for r in runs]))
    return table


def report_csv(table: dict[str, float], methods=METHODS) -> str:
    lines = ["method,mean_distance"] + [f"{m},{table[m]:.6f}" for m in methods]
    return "\n".join(lines) + "\n"
