"""Matplotlib figures written next to the CSV/PPM outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

_COLORS = {"ADVLA": "C0", "AW": "C1", "TKM": "C2", "TKL": "C3", "RANDOM": "0.5", "CLEAN": "k"}


def _save(fig, path):
    # fixed metadata so reruns produce identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def amplify(perturbation: np.ndarray, amp: float) -> np.ndarray:
    """Display-only view of a perturbation: 0.5 + amp * delta, clamped to [0, 1]."""
    return np.clip(0.5 + amp * np.asarray(perturbation), 0.0, 1.0)


def overlay(image: np.ndarray, gray: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a [H, W] map (scaled to max 1) over a [3, H, W] image."""
    g = np.asarray(gray, dtype=np.float64)
    if g.max() > 0:
        g = g / g.max()
    return (1.0 - alpha) * np.asarray(image) + alpha * g[None]


def fr_vs_epsilon(table, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        clean = [r for r in table.rows if r.condition == "CLEAN"]
        if clean:
            ax.axhline(clean[0].fr, color="k", lw=0.8, ls=":", label="clean")
        names = sorted({r.condition for r in table.rows} - {"CLEAN"})
        for name in names:
            for iters in sorted({r.iters for r in table.rows if r.condition == name}):
                rows = sorted((r for r in table.rows if r.condition == name and r.iters == iters),
                              key=lambda r: r.epsilon)
                label = name if name == "RANDOM" else f"{name} T={iters}"
                ax.plot([r.epsilon * 255 for r in rows], [r.fr for r in rows], marker="o",
                        color=_COLORS.get(name), ls="--" if name == "RANDOM" else "-", label=label)
        ax.set_xlabel("epsilon (x/255)")
        ax.set_ylabel("failure rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def fr_vs_iterations(table, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for name in sorted({r.condition for r in table.rows} - {"CLEAN", "RANDOM"}):
            for eps in sorted({r.epsilon for r in table.rows if r.condition == name}):
                rows = sorted((r for r in table.rows if r.condition == name and r.epsilon == eps),
                              key=lambda r: r.iters)
                ax.plot([r.iters for r in rows], [r.fr for r in rows], marker="o",
                        color=_COLORS.get(name), label=f"{name} eps={eps * 255:.0f}/255")
        ax.set_xlabel("PGD iterations")
        ax.set_ylabel("failure rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def loss_trace(losses, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.plot(range(len(losses)), losses, marker=".")
        ax.set_xlabel("iteration")
        ax.set_ylabel("1 - cos(F_t, F_clean)")
        fig.tight_layout()
        _save(fig, path)


def attack_panel(clean, adversarial, perturbation, weight_map, pixel_mask, amp, path) -> None:
    """Clean / adversarial / amplified perturbation / attention / Top-K mask."""
    panels = [("clean", clean.transpose(1, 2, 0)),
              ("adversarial", adversarial.transpose(1, 2, 0)),
              (f"perturbation x{amp:g}", amplify(perturbation, amp).transpose(1, 2, 0))]
    if weight_map is not None:
        panels.append(("attention", overlay(clean, weight_map).transpose(1, 2, 0)))
    if pixel_mask is not None:
        panels.append(("top-k mask", overlay(clean, pixel_mask).transpose(1, 2, 0)))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(1.9 * len(panels), 2.2))
        for ax, (title, img) in zip(np.atleast_1d(axes), panels):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(title, fontsize=8)
            ax.axis("off")
        fig.tight_layout()
        _save(fig, path)


def bench_histogram(seconds, path, reference: float | None = 0.06) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.8, 2.6))
        ax.hist(np.asarray(seconds) * 1e3, bins=20, color="C0")
        if reference is not None:
            ax.axvline(reference * 1e3, color="k", ls=":", lw=0.8, label="0.06 s (GPU, full model)")
            ax.legend(fontsize=7)
        ax.set_xlabel("ms per PGD iteration")
        ax.set_ylabel("count")
        fig.tight_layout()
        _save(fig, path)
