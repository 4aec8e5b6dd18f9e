"""Finite-difference checks of the autodiff ops and the full attack gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attack import feature_loss
from .encoder import VisionEncoder

OP_TOLERANCE = 1e-6
PIPELINE_TOLERANCE = 1e-4
STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} max rel err {self.max_rel_error:.3e} (< {self.tolerance:g})"


def check_scalar_fn(name: str, fn: Callable[..., T.Tensor], inputs: list[np.ndarray],
                    tol: float = OP_TOLERANCE, h: float = STEP) -> CheckResult:
    """Compare autodiff and central differences for every entry of every input."""
    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    grads = T.grad(fn(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [T.Tensor(a) for a in inputs]
            args[i] = T.Tensor(xi)
            return float(fn(*args).data)

        g_fd = T.numerical_grad(f, x, h)
        worst = max(worst, float(T.relative_error(grads[i], g_fd).max()))
    return CheckResult(name, worst, tol)


def op_checks(seed: int = 0) -> list[CheckResult]:
    """Gradient checks of each differentiable op on small random inputs."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    w = r(3, 4)
    proj = r(2, 5)
    c = r(6)
    w_batched = r(2, 3, 2)
    w_mean = r(3)
    checks = [
        ("matmul", lambda a, b: T.tensor_sum(T.mul(T.matmul(a, b), T.Tensor(w))), [r(3, 3), r(3, 4)]),
        ("matmul_batched", lambda a, b: T.tensor_sum(T.mul(T.matmul(a, b), T.Tensor(w_batched))),
         [r(2, 3, 4), r(2, 4, 2)]),
        ("softmax_rows", lambda x: T.tensor_sum(T.mul(T.softmax_rows(x), T.Tensor(proj))), [r(2, 5)]),
        ("layernorm", lambda x, g, b: T.tensor_sum(T.mul(T.layernorm(x, g, b), T.Tensor(proj))),
         [r(2, 5), r(5), r(5)]),
        ("gelu", lambda x: T.tensor_sum(T.mul(T.gelu(x), T.Tensor(proj))), [r(2, 5) * 2]),
        ("add_mul_scale", lambda a, b: T.tensor_sum(T.scale(T.mul(T.add(a, b), a), 0.7)),
         [r(3, 4), r(4)]),
        ("sub_div", lambda a, b: T.tensor_sum(T.div(T.sub(a, b), T.add(T.mul(b, b), 1.0))),
         [r(3, 4), r(3, 4)]),
        ("reshape_transpose", lambda a: T.tensor_sum(T.mul(a.reshape(4, 3).transpose(1, 0), T.Tensor(w))),
         [r(2, 6)]),
        ("mean_axis", lambda a: T.tensor_sum(T.mul(T.mean(a, axis=1), T.Tensor(w_mean))), [r(3, 4)]),
        ("l2_norm", lambda a: T.l2_norm(a), [r(3, 4)]),
        ("cosine_flat", lambda a: T.sub(1.0, T.cosine_similarity(a, T.Tensor(c.reshape(2, 3)))),
         [r(2, 3)]),
        ("cosine_rows", lambda a: T.tensor_sum(T.cosine_similarity(a, T.Tensor(c.reshape(2, 3)), axis=-1)),
         [r(2, 3)]),
        ("cosine_distance", lambda a: T.cosine_distance(a, T.Tensor(c.reshape(2, 3))), [r(2, 3)]),
        ("cosine_distance_rows",
         lambda a: T.tensor_sum(T.cosine_distance(a, T.Tensor(c.reshape(2, 3)), axis=-1)), [r(2, 3)]),
    ]
    return [check_scalar_fn(name, fn, inputs) for name, fn, inputs in checks]


def pipeline_check(enc: VisionEncoder, clean: np.ndarray, image: np.ndarray, n_pixels: int = 100,
                   seed: int = 0, h: float = STEP, loss_eps: float = 1e-8,
                   tol: float = PIPELINE_TOLERANCE) -> CheckResult:
    """Autodiff vs central differences of 1 - cos(F(image), F(clean)) at sampled pixels."""
    F_clean = np.array(enc.features(T.Tensor(clean))[0].data)

    def loss_at(x):
        F, _ = enc.features(T.Tensor(x))
        return float(feature_loss(F, F_clean, loss_eps).data)

    x = T.Tensor(np.array(image, dtype=np.float64), requires_grad=True)
    F, _ = enc.features(x)
    (g,) = T.grad(feature_loss(F, F_clean, loss_eps), [x])
    rng = np.random.default_rng(seed)
    idx = rng.choice(image.size, size=min(n_pixels, image.size), replace=False)
    g_fd = T.numerical_grad(loss_at, image, h, indices=idx).reshape(-1)[idx]
    err = T.relative_error(g.reshape(-1)[idx], g_fd)
    return CheckResult(f"pipeline ({len(idx)} pixels)", float(err.max()), tol)


def directional_check(enc: VisionEncoder, clean: np.ndarray, image: np.ndarray, seed: int = 0,
                      h: float = STEP, loss_eps: float = 1e-8) -> float:
    """Relative error between grad.v and the central difference along a random direction v."""
    F_clean = np.array(enc.features(T.Tensor(clean))[0].data)
    v = np.random.default_rng(seed).standard_normal(image.shape)
    v /= np.linalg.norm(v)

    def loss_at(xx):
        return float(feature_loss(enc.features(T.Tensor(xx))[0], F_clean, loss_eps).data)

    x = T.Tensor(np.array(image, dtype=np.float64), requires_grad=True)
    (g,) = T.grad(feature_loss(enc.features(x)[0], F_clean, loss_eps), [x])
    jvp = float(np.sum(g * v))
    fd = (loss_at(image + h * v) - loss_at(image - h * v)) / (2 * h)
    return abs(jvp - fd) / max(abs(jvp), abs(fd), 1e-8)
