"""Feature-space PGD with optional attention guidance.

One call to :func:`run_attack` attacks one frame: it computes the clean
projected features once, builds the guidance artifacts from the clean
attention, then takes signed-gradient ascent steps on ``1 - cos(F_t, F_clean)``
while keeping the perturbation inside the L-infinity ball and the image
inside [0, 1].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction

import numpy as np

from . import tensor as T
from .encoder import AGGREGATIONS, VisionEncoder, attention_scores
from .guidance import GuidanceArtifacts, build_artifacts


class NumericalError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


class Strategy(str, Enum):
    BASE = "BASE"
    AW = "AW"
    TKM = "TKM"
    TKL = "TKL"


class Init(str, Enum):
    UNIFORM = "UNIFORM"
    GAUSSIAN = "GAUSSIAN"


SIMILARITIES = ("flat", "per_patch")


def budget(value) -> float:
    """Parse a budget given as a number or a fraction string such as ``"4/255"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    if isinstance(value, bool):
        raise TypeError("budget must be a number")
    return float(value)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 4 / 255
    alpha: float = 1 / 255
    iterations: int = 6
    strategy: Strategy = Strategy.BASE
    topk_ratio: float = 0.1
    init: Init = Init.UNIFORM
    gaussian_sigma: float | None = None
    loss_eps: float = 1e-8
    seed: int = 0
    attention_block: int = -1
    aggregation: str = "mean_heads_mean_queries"
    recompute_mask_per_iter: bool = False
    similarity: str = "flat"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "init", Init(self.init))
        if not 0.0 <= self.alpha <= self.epsilon <= 1.0:
            raise ValueError(
                f"need 0 <= alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}")
        if isinstance(self.iterations, bool) or int(self.iterations) != self.iterations \
                or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ValueError(f"topk_ratio must be in (0, 1], got {self.topk_ratio}")
        if not self.loss_eps > 0:
            raise ValueError(f"loss_eps must be positive, got {self.loss_eps}")
        if self.gaussian_sigma is not None and self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")

    @property
    def sigma(self) -> float:
        return self.epsilon / 2 if self.gaussian_sigma is None else self.gaussian_sigma


@dataclass
class AttackResult:
    adversarial: np.ndarray           # [3, H, W]
    perturbation: np.ndarray          # adversarial - clean
    loss_trace: list[float]           # T + 1 entries
    iteration_seconds: list[float]    # T entries
    modified_patch_fraction: float
    max_abs_perturbation: float
    artifacts: GuidanceArtifacts | None
    clean_features: np.ndarray = field(repr=False, default=None)
    adversarial_features: np.ndarray = field(repr=False, default=None)

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


@dataclass
class AttackState:
    clean: np.ndarray
    delta: np.ndarray
    adversarial: np.ndarray


def init_perturbation(shape, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    eps = cfg.epsilon
    if cfg.init is Init.UNIFORM:
        d = rng.uniform(-eps, eps, size=shape)
    else:
        d = rng.normal(0.0, cfg.sigma, size=shape)
    return np.clip(d, -eps, eps)


def uniform_noise_image(image: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Random-noise baseline: iid uniform noise in [-epsilon, epsilon], clipped to [0, 1]."""
    return np.clip(image + rng.uniform(-epsilon, epsilon, size=image.shape), 0.0, 1.0)


def feature_loss(F, F_clean, eps: float = 1e-8, similarity: str = "flat"):
    """1 - cosine similarity of projected features (flattened, or mean of per-patch)."""
    F = F if isinstance(F, T.Tensor) else T.Tensor(F)
    # the cancellation-free form keeps finite differences accurate near F == F_clean
    if similarity == "flat":
        return T.cosine_distance(F, F_clean, eps)
    return T.mean(T.cosine_distance(F, F_clean, eps, axis=-1))


def tkl_loss(F, F_clean, feature_mask: np.ndarray, eps: float = 1e-8, similarity: str = "flat"):
    """Cosine loss restricted to the selected patches' feature rows."""
    feature_mask = np.asarray(feature_mask)
    if not feature_mask.any():
        raise ValueError("Top-K feature mask selects no patches")
    F = F if isinstance(F, T.Tensor) else T.Tensor(F)
    m = T.Tensor(feature_mask.astype(F.dtype))
    Fc = T.Tensor(np.asarray(F_clean.data if isinstance(F_clean, T.Tensor) else F_clean) * m.data)
    return feature_loss(T.mul(F, m), Fc, eps, similarity)


def compute_clean_reference(enc: VisionEncoder, image: np.ndarray):
    """Projected clean features (detached) plus the clean attention record."""
    F, rec = enc.features(T.Tensor(image))
    return np.array(F.data), rec


def strategy_transform(G: np.ndarray, artifacts: GuidanceArtifacts | None, strategy) -> np.ndarray:
    strategy = Strategy(strategy)
    if strategy is Strategy.AW:
        if artifacts is None or artifacts.weight_map is None:
            raise ValueError("AW needs an attention weight map")
        return G * artifacts.weight_map
    if strategy is Strategy.TKM:
        if artifacts is None or artifacts.pixel_mask is None:
            raise ValueError("TKM needs a Top-K pixel mask")
        return G * artifacts.pixel_mask
    return G


def _objective(F, F_clean, cfg: AttackConfig, artifacts):
    if cfg.strategy is Strategy.TKL:
        if artifacts is None or artifacts.feature_mask is None:
            raise ValueError("TKL needs a Top-K feature mask")
        return tkl_loss(F, F_clean, artifacts.feature_mask, cfg.loss_eps, cfg.similarity)
    return feature_loss(F, F_clean, cfg.loss_eps, cfg.similarity)


def loss_and_grad(enc: VisionEncoder, image: np.ndarray, F_clean, cfg: AttackConfig,
                  artifacts=None):
    """Objective at ``image`` and its gradient with respect to the pixels."""
    x = T.Tensor(image, requires_grad=True)
    F, rec = enc.features(x)
    loss = _objective(F, F_clean, cfg, artifacts)
    (g,) = T.grad(loss, [x])
    return float(loss.data), np.asarray(g, dtype=np.float64), rec, F.data


def _artifacts_from(enc: VisionEncoder, rec, cfg: AttackConfig) -> GuidanceArtifacts | None:
    if cfg.strategy is Strategy.BASE:
        return None
    c = enc.config
    scores = attention_scores(rec, cfg.attention_block, cfg.aggregation)
    return build_artifacts(scores, cfg.topk_ratio, c.grid_h, c.grid_w, c.patch_size,
                           with_weight_map=cfg.strategy is Strategy.AW)


def pgd_step(state: AttackState, enc: VisionEncoder, cfg: AttackConfig, F_clean,
             artifacts=None):
    """One ascent step. Returns (new state, loss at the old iterate, attention record)."""
    loss, G, rec, _ = loss_and_grad(enc, state.adversarial, F_clean, cfg, artifacts)
    if not np.all(np.isfinite(G)) or not np.isfinite(loss):
        raise NumericalError(f"non-finite gradient or loss (loss={loss})")
    G = strategy_transform(G, artifacts, cfg.strategy)
    eps = cfg.epsilon
    delta = np.clip(state.delta + cfg.alpha * np.sign(G), -eps, eps)
    adv = np.clip(state.clean + delta, 0.0, 1.0)
    return AttackState(state.clean, delta, adv), loss, rec


def modified_patch_fraction(clean: np.ndarray, adv: np.ndarray, patch_size: int) -> float:
    changed = np.any(clean != adv, axis=0)
    h, w = changed.shape
    P = patch_size
    per_patch = changed.reshape(h // P, P, w // P, P).any(axis=(1, 3))
    return float(per_patch.mean())


def run_attack(enc: VisionEncoder, image, cfg: AttackConfig,
               artifacts: GuidanceArtifacts | None = None,
               rng: np.random.Generator | None = None) -> AttackResult:
    """Attack one frame.

    ``artifacts`` overrides the guidance built from the clean attention; it
    is how callers inject a custom weight map or mask.
    """
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    F_clean, rec = compute_clean_reference(enc, image)
    if artifacts is None:
        artifacts = _artifacts_from(enc, rec, cfg)

    delta = init_perturbation(image.shape, cfg, rng)
    if cfg.strategy is Strategy.TKM:
        delta = delta * strategy_transform(np.ones_like(delta), artifacts, Strategy.TKM)
    state = AttackState(image, delta, np.clip(image + delta, 0.0, 1.0))

    trace, seconds = [], []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        state, loss, rec_t = pgd_step(state, enc, cfg, F_clean, artifacts)
        if cfg.recompute_mask_per_iter and cfg.strategy is not Strategy.BASE:
            artifacts = _artifacts_from(enc, rec_t, cfg)
        seconds.append(time.perf_counter() - t0)
        trace.append(loss)

    F_adv, _ = enc.features(T.Tensor(state.adversarial))
    final = _objective(F_adv, F_clean, cfg, artifacts)
    trace.append(float(final.data))

    pert = state.adversarial - image
    return AttackResult(
        adversarial=state.adversarial,
        perturbation=pert,
        loss_trace=trace,
        iteration_seconds=seconds,
        modified_patch_fraction=modified_patch_fraction(image, state.adversarial,
                                                        enc.config.patch_size),
        max_abs_perturbation=float(np.abs(pert).max()),
        artifacts=artifacts,
        clean_features=F_clean,
        adversarial_features=np.array(F_adv.data),
    )


def with_overrides(cfg: AttackConfig, **kw) -> AttackConfig:
    return replace(cfg, **kw)
