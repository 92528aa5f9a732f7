"""Matplotlib figures written straight to files (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def training_curves(log, path, window: int = 25):
    """Critic gap and mean gradient norm per step, with a running mean."""
    steps = np.asarray(log.step)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, vals, title in ((axes[0], -np.asarray(log.gap), "E_n[psi] - E_r[psi]"), (axes[1], np.asarray(log.mean_grad_norm), "mean |grad_x psi|")):
        ax.plot(steps, vals, lw=0.5, alpha=0.4)
        if len(vals) >= window:
            k = np.ones(window) / window
            ax.plot(steps[window - 1 :], np.convolve(vals, k, mode="valid"), lw=1.2)
        ax.set_title(title)
        ax.set_xlabel("step")
    axes[1].axhline(1.0, color="k", ls=":", lw=0.8)
    _save(fig, path)


def reconstruction_grid(truths, methods: dict, path, count: int = 4):
    """Rows: test images; columns: ground truth then each method."""
    count = min(count, len(truths))
    cols = ["Truth"] + list(methods)
    fig, axes = plt.subplots(count, len(cols), figsize=(2 * len(cols), 2 * count), squeeze=False)
    for i in range(count):
        for j, name in enumerate(cols):
            img = truths[i] if name == "Truth" else methods[name][i]
            ax = axes[i, j]
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name)
    _save(fig, path)


def decay_curve(etas, distances, slope, path, label="critic"):
    """W1 against eta with the fitted line through eta = 0."""
    etas = np.asarray(etas)
    distances = np.asarray(distances)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(etas, distances, "o", label=label)
    mid = distances[len(distances) // 2]
    ax.plot(etas, mid + slope * (etas - etas[len(etas) // 2]), "-", lw=1, label=f"slope {slope:.3f}")
    ax.set_xlabel("eta")
    ax.set_ylabel("W1")
    ax.legend()
    _save(fig, path)


def critic_field(critic, manifold, real, noisy, path, extent: float = 1.8, n: int = 81):
    """Critic level sets over the plane with the two sample clouds."""
    g = np.linspace(-extent, extent, n)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    vals = np.asarray(critic.value(pts)).reshape(n, n)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    for ax, field, title in ((axes[0], vals, "critic"), (axes[1], manifold.distance(pts).reshape(n, n), "distance to manifold")):
        cs = ax.contourf(xx, yy, field, levels=20, cmap="viridis")
        fig.colorbar(cs, ax=ax)
        ax.scatter(real[:, 0], real[:, 1], s=2, c="w")
        ax.scatter(noisy[:, 0], noisy[:, 1], s=2, c="r")
        ax.set_aspect("equal")
        ax.set_title(title)
    _save(fig, path)


def stability_plot(report, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.loglog(report.scales, report.deviations, "o-")
    ax.set_xlabel("perturbation scale")
    ax.set_ylabel("reconstruction deviation")
    _save(fig, path)
