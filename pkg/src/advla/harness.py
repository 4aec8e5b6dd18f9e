"""Desk-scale closed-loop reaching task used to measure task-level attack impact.

An agent blob must reach a goal blob. A frozen linear head maps mean-pooled
projected features to a 2-D velocity; the attack only touches the image,
never the head. Each episode re-renders, (optionally) attacks, and acts
once per step, so every frame gets a fresh clean reference.
"""

from __future__ import annotations

import csv
import gc
import io
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attack import AttackConfig, Strategy, run_attack, uniform_noise_image
from .encoder import VisionEncoder

CONDITIONS = ("CLEAN", "RANDOM", "ADVLA", "AW", "TKM", "TKL")
_STRATEGY_OF = {"ADVLA": Strategy.BASE, "AW": Strategy.AW, "TKM": Strategy.TKM, "TKL": Strategy.TKL}

METRICS_HEADER = ("condition", "epsilon", "alpha", "iters", "ratio", "trials", "sr", "fr",
                  "mean_loss", "mean_iter_seconds", "mean_patch_fraction")

AGENT_COLOR = (1.0, 0.15, 0.1)
GOAL_COLOR = (0.1, 0.35, 1.0)


@dataclass(frozen=True)
class Blob:
    x: float
    y: float
    radius: float                  # pixels
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    agent: tuple[float, float]
    goal: tuple[float, float]
    agent_radius: float = 6.0
    goal_radius: float = 8.0
    background: float = 0.45
    distractors: tuple[Blob, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        for name, (x, y) in (("agent", self.agent), ("goal", self.goal)):
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"{name} position {(x, y)} outside [0, 1]^2")
        radii = [self.agent_radius, self.goal_radius] + [b.radius for b in self.distractors]
        if min(radii) < 2.0:
            raise ValueError("blob radii must be at least 2 pixels")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background shade must be in [0, 1]")


@dataclass(frozen=True)
class TaskConfig:
    max_steps: int = 64
    step_size: float = 0.08        # max agent displacement per step, unit coordinates
    success_radius: float = 0.08
    margin: float = 0.08
    min_start_distance: float = 0.35
    num_distractors: int = 0
    goal: tuple[float, float] | None = None   # fixed goal, or None to sample one per scene
    background: float = 0.45
    agent_radius: float = 6.0      # pixels
    goal_radius: float = 8.0
    train_scenes: int = 600
    ridge: float = 1e-5


def _coverage(h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    # pixel-centre distance, linear 1 px anti-alias ramp; zero beyond r + 0.5
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def render_scene(spec: SceneSpec, height: int = 64, width: int = 64) -> np.ndarray:
    """Rasterise a scene into a [3, H, W] float image in [0, 1]."""
    spec.validate()
    img = np.full((3, height, width), spec.background)
    blobs = list(spec.distractors)
    blobs.append(Blob(spec.goal[0], spec.goal[1], spec.goal_radius, GOAL_COLOR))
    blobs.append(Blob(spec.agent[0], spec.agent[1], spec.agent_radius, AGENT_COLOR))
    for b in blobs:
        cov = _coverage(height, width, b.x * width, b.y * height, b.radius)
        color = np.asarray(b.color).reshape(3, 1, 1)
        img = img * (1.0 - cov) + color * cov
    return np.clip(img, 0.0, 1.0)


def sample_scene(rng: np.random.Generator, task: TaskConfig, min_distance: float | None = None) -> SceneSpec:
    lo, hi = task.margin, 1.0 - task.margin
    min_distance = task.min_start_distance if min_distance is None else min_distance
    goal = tuple(rng.uniform(lo, hi, 2)) if task.goal is None else tuple(task.goal)
    while True:
        agent = tuple(rng.uniform(lo, hi, 2))
        if np.hypot(agent[0] - goal[0], agent[1] - goal[1]) >= min_distance:
            break
    distractors = tuple(
        Blob(*rng.uniform(lo, hi, 2), float(rng.uniform(3, 5)), tuple(rng.uniform(0.2, 0.8, 3)))
        for _ in range(task.num_distractors))
    return SceneSpec(agent=agent, goal=goal, agent_radius=task.agent_radius,
                     goal_radius=task.goal_radius, background=task.background,
                     distractors=distractors, seed=int(rng.integers(2**31)))


def optimal_action(spec: SceneSpec) -> np.ndarray:
    """Regression target: the full displacement to the goal (clamped at act time)."""
    return np.subtract(spec.goal, spec.agent).astype(np.float64)


def pooled_features(enc: VisionEncoder, image: np.ndarray) -> np.ndarray:
    F, _ = enc.features(T.Tensor(image))
    return np.asarray(F.data, dtype=np.float64).mean(axis=0)


@dataclass(frozen=True)
class PolicyHead:
    weights: np.ndarray   # [D_text, 2]
    bias: np.ndarray      # [2]
    ridge: float

    def act(self, pooled: np.ndarray) -> np.ndarray:
        return pooled @ self.weights + self.bias


def fit_ridge(X: np.ndarray, Y: np.ndarray, ridge: float) -> PolicyHead:
    """Centred ridge regression with a per-sample penalty.

    Solves (Xc'Xc + n*ridge*I) W = Xc'Yc, so duplicating the dataset leaves W
    unchanged; the intercept is unpenalised.
    """
    if not ridge > 0:
        raise ValueError("ridge coefficient must be positive")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc + n * ridge * np.eye(X.shape[1])
    W = np.linalg.solve(A, Xc.T @ Yc)
    return PolicyHead(W, ym - xm @ W, ridge)


def fit_policy(enc: VisionEncoder, scenes: Sequence[SceneSpec], ridge: float = 1e-5) -> PolicyHead:
    if len(scenes) < 200:
        raise ValueError(f"need at least 200 training scenes, got {len(scenes)}")
    c = enc.config
    X = np.stack([pooled_features(enc, render_scene(s, c.image_h, c.image_w)) for s in scenes])
    Y = np.stack([optimal_action(s) for s in scenes])
    return fit_ridge(X, Y, ridge)


def training_scenes(task: TaskConfig, seed: int) -> list[SceneSpec]:
    # training covers near-goal states too, which rollouts always pass through
    rng = np.random.default_rng([seed, 1])
    return [sample_scene(rng, task, min_distance=0.02) for _ in range(task.train_scenes)]


@dataclass
class EpisodeRecord:
    condition: str
    steps: int
    success: bool
    losses: list[float] = field(default_factory=list)
    attack_seconds: list[float] = field(default_factory=list)
    patch_fractions: list[float] = field(default_factory=list)
    trajectory: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class Condition:
    name: str
    epsilon: float = 0.0
    alpha: float = 1 / 255
    iters: int = 0
    ratio: float = 0.1

    def __post_init__(self):
        if self.name not in CONDITIONS:
            raise ValueError(f"unknown condition {self.name!r}; choose from {CONDITIONS}")

    def attack_config(self, base: AttackConfig, seed: int) -> AttackConfig:
        return replace(base, epsilon=self.epsilon, alpha=min(self.alpha, self.epsilon),
                       iterations=self.iters, strategy=_STRATEGY_OF[self.name],
                       topk_ratio=self.ratio, seed=seed)


def _reached(pos, goal, radius) -> bool:
    return float(np.hypot(pos[0] - goal[0], pos[1] - goal[1])) <= radius


def run_episode(enc: VisionEncoder, policy: PolicyHead, spec: SceneSpec, condition: Condition,
                task: TaskConfig = TaskConfig(), attack_base: AttackConfig = AttackConfig(),
                seed: int = 0) -> EpisodeRecord:
    """Closed-loop rollout. Step seeds derive from ``seed`` so conditions pair up."""
    c = enc.config
    rec = EpisodeRecord(condition.name, 0, False)
    pos = np.array(spec.agent, dtype=np.float64)
    lo, hi = task.margin, 1.0 - task.margin
    rec.trajectory.append(tuple(pos))
    if _reached(pos, spec.goal, task.success_radius):
        rec.success = True
        return rec
    for step in range(task.max_steps):
        frame = render_scene(replace(spec, agent=(pos[0], pos[1])), c.image_h, c.image_w)
        step_rng = np.random.default_rng([seed, step])
        if condition.name == "CLEAN":
            pooled = pooled_features(enc, frame)
        elif condition.name == "RANDOM":
            pooled = pooled_features(enc, uniform_noise_image(frame, condition.epsilon, step_rng))
        else:
            cfg = condition.attack_config(attack_base, seed)
            res = run_attack(enc, frame, cfg, rng=step_rng)
            pooled = np.asarray(res.adversarial_features, dtype=np.float64).mean(axis=0)
            rec.losses.append(res.final_loss)
            rec.attack_seconds.extend(res.iteration_seconds)
            rec.patch_fractions.append(res.modified_patch_fraction)
        action = policy.act(pooled)
        norm = float(np.linalg.norm(action))
        if norm > task.step_size:
            action = action * (task.step_size / norm)
        pos = np.clip(pos + action, lo, hi)
        rec.steps = step + 1
        rec.trajectory.append(tuple(pos))
        if _reached(pos, spec.goal, task.success_radius):
            rec.success = True
            break
    return rec


@dataclass
class MetricsRow:
    condition: str
    epsilon: float
    alpha: float
    iters: int
    ratio: float
    trials: int
    sr: float
    fr: float
    mean_loss: float
    mean_iter_seconds: float
    mean_patch_fraction: float

    def as_tuple(self):
        return tuple(getattr(self, k) for k in METRICS_HEADER)


@dataclass
class MetricsTable:
    rows: list[MetricsRow]
    episodes: dict[int, list[EpisodeRecord]] = field(default_factory=dict, repr=False)

    def find(self, condition: str, epsilon: float | None = None, iters: int | None = None):
        for r in self.rows:
            if r.condition == condition and (epsilon is None or abs(r.epsilon - epsilon) < 1e-12) \
                    and (iters is None or r.iters == iters):
                return r
        raise KeyError((condition, epsilon, iters))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r.as_tuple()])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean(xs) -> float:
    xs = list(xs)
    return float(sum(xs) / len(xs)) if xs else 0.0


def summarize(condition: Condition, episodes: list[EpisodeRecord]) -> MetricsRow:
    n = len(episodes)
    sr = sum(e.success for e in episodes) / n
    losses = [l for e in episodes for l in e.losses]
    secs = [s for e in episodes for s in e.attack_seconds]
    fracs = [f for e in episodes for f in e.patch_fractions]
    return MetricsRow(condition.name, condition.epsilon, condition.alpha if condition.iters else 0.0,
                      condition.iters, condition.ratio if condition.name in ("TKM", "TKL") else 1.0,
                      n, sr, 1.0 - sr, _mean(losses), _mean(secs), _mean(fracs))


def episode_specs(task: TaskConfig, trials: int, seed: int) -> list[SceneSpec]:
    rng = np.random.default_rng([seed, 2])
    return [sample_scene(rng, task) for _ in range(trials)]


def _episode_job(args):
    return run_episode(*args)


def evaluate_suite(enc: VisionEncoder, policy: PolicyHead, conditions: Iterable[Condition],
                   trials: int, task: TaskConfig = TaskConfig(),
                   attack_base: AttackConfig = AttackConfig(), seed: int = 0,
                   progress=None, workers: int = 1) -> MetricsTable:
    """Paired evaluation: trial i uses the same start scene and seeds in every condition.

    With ``workers > 1`` episodes run in a process pool; results are gathered
    in trial order, so the table does not depend on the worker count.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    specs = episode_specs(task, trials, seed)
    rows, episodes = [], {}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for ci, cond in enumerate(conditions):
            jobs = [(enc, policy, s, cond, task, attack_base, seed * 1_000_003 + i)
                    for i, s in enumerate(specs)]
            eps = list(pool.map(_episode_job, jobs) if pool else map(_episode_job, jobs))
            episodes[ci] = eps
            rows.append(summarize(cond, eps))
            if progress is not None:
                progress(rows[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return MetricsTable(rows, episodes)


def table2_conditions(epsilons=(2 / 255, 4 / 255, 8 / 255), iters: int = 6,
                      strategies=("ADVLA", "AW", "TKM", "TKL"), ratio: float = 0.1,
                      alpha: float = 1 / 255) -> list[Condition]:
    conds = [Condition("CLEAN")]
    for e in epsilons:
        conds.append(Condition("RANDOM", epsilon=e, alpha=0.0, iters=0))
        conds += [Condition(s, epsilon=e, alpha=alpha, iters=iters, ratio=ratio) for s in strategies]
    return conds


def table3_conditions(iter_grid=(4, 5, 6), epsilon: float = 4 / 255,
                      strategies=("ADVLA", "AW", "TKM", "TKL"), ratio: float = 0.1,
                      alpha: float = 1 / 255) -> list[Condition]:
    return [Condition(s, epsilon=epsilon, alpha=alpha, iters=t, ratio=ratio)
            for t in iter_grid for s in strategies]


def fr_monotonicity(table: MetricsTable, condition: str = "ADVLA",
                    tolerance: float = 0.0) -> list[str]:
    """Messages for every epsilon step where FR drops by more than ``tolerance``."""
    rows = sorted((r for r in table.rows if r.condition == condition), key=lambda r: (r.iters, r.epsilon))
    problems = []
    for a, b in zip(rows, rows[1:]):
        if a.iters == b.iters and b.fr < a.fr - tolerance:
            problems.append(f"{condition}: FR fell from {a.fr:.3f} at eps={a.epsilon:.5f} "
                            f"to {b.fr:.3f} at eps={b.epsilon:.5f} (T={a.iters})")
    return problems


# ---------------------------------------------------------------------------
# timing


BENCH_HEADER = ("repeat", "iterations", "total_seconds", "mean_iter_seconds")


@dataclass
class BenchReport:
    iterations: int
    rows: list[tuple[int, int, float, float]]
    iteration_seconds: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.iteration_seconds)

    @property
    def median(self) -> float:
        return statistics.median(self.iteration_seconds)

    @property
    def stdev(self) -> float:
        return statistics.pstdev(self.iteration_seconds)

    @property
    def median_total(self) -> float:
        return statistics.median(r[2] for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def bench_iteration_time(enc: VisionEncoder, cfg: AttackConfig, repeats: int = 10,
                         image: np.ndarray | None = None) -> BenchReport:
    """Wall-clock seconds of whole attacks and of each PGD iteration."""
    if repeats < 10:
        raise ValueError("repeats must be >= 10")
    c = enc.config
    if image is None:
        image = np.random.default_rng(cfg.seed).uniform(0.0, 1.0, (3, c.image_h, c.image_w))
    run_attack(enc, image, cfg)   # warm-up, untimed
    rows, per_iter = [], []
    # as timeit does: collect up front, keep the cyclic collector out of the timed region
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(repeats):
            t0 = time.perf_counter()
            res = run_attack(enc, image, replace(cfg, seed=cfg.seed + r))
            total = time.perf_counter() - t0
            per_iter.extend(res.iteration_seconds)
            rows.append((r, cfg.iterations, total,
                         statistics.fmean(res.iteration_seconds) if res.iteration_seconds else 0.0))
    finally:
        if was_enabled:
            gc.enable()
    return BenchReport(cfg.iterations, rows, per_iter or [0.0])
