"""Deterministic SVG charts for the evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .counterfactual import RandomReferenceCurve  # noqa: E402

_RC = {"svg.hashsalt": "uattr", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_delta_loss(summary: list[dict], curve: RandomReferenceCurve | None, path) -> Path:
    """Mean ΔL against k per method, with standard-error bands."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        methods = sorted({r["method"] for r in summary if r["method"] != "random"})
        for m in methods:
            rows = sorted((r for r in summary if r["method"] == m), key=lambda r: r["k"])
            ks = [r["k"] for r in rows]
            mu = [r["mean_delta_loss"] for r in rows]
            se = [r["se_delta_loss"] for r in rows]
            ax.plot(ks, mu, marker="o", ms=3, label=m)
            ax.fill_between(ks, [a - b for a, b in zip(mu, se)], [a + b for a, b in zip(mu, se)], alpha=0.2)
        if curve is not None and curve.points:
            ks = [p.k for p in curve.points]
            mu = [p.mean_delta_loss for p in curve.points]
            se = [p.se_delta_loss for p in curve.points]
            ax.plot(ks, mu, color="0.3", ls="--", marker="s", ms=3, label="random")
            ax.fill_between(ks, [a - b for a, b in zip(mu, se)], [a + b for a, b in zip(mu, se)], color="0.5", alpha=0.2)
        ax.set_xlabel("k removed")
        ax.set_ylabel("mean ΔL (query)")
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_equivalent_k(rows: list[dict], path) -> Path:
    """Equivalent random K per method and k; clamped values drawn hollow."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for m in sorted({r["method"] for r in rows}):
            rs = sorted((r for r in rows if r["method"] == m), key=lambda r: r["k"])
            line, = ax.plot([r["k"] for r in rs], [r["equivalent_k"] for r in rs], marker="o", ms=3, label=m)
            clamped = [r for r in rs if r["out_of_range"]]
            if clamped:
                ax.scatter([r["k"] for r in clamped], [r["equivalent_k"] for r in clamped], s=40,
                           facecolors="none", edgecolors=line.get_color())
        lim = max([r["k"] for r in rows] + [1])
        ax.plot([0, lim], [0, lim], color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("k removed")
        ax.set_ylabel("equivalent random k")
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_delta_gen(summary: list[dict], path, key: str = "mean_delta_gen_mse", label: str = "mean ΔG (pixel MSE)") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for m in sorted({r["method"] for r in summary}):
            rows = sorted((r for r in summary if r["method"] == m), key=lambda r: r["k"])
            ax.plot([r["k"] for r in rows], [r[key] for r in rows], marker="o", ms=3, label=m,
                    ls="--" if m == "random" else "-")
        ax.set_xlabel("k removed")
        ax.set_ylabel(label)
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        return _save(fig, path)
