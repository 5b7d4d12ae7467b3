"""Report writers: key/value text, CSV tables, and the plot bundle.

All writers are deterministic: text output is ordering-stable and figures
are saved with creation metadata stripped so repeated runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVEFIG = {"dpi": 110, "metadata": {"Software": None, "CreationDate": None}}


def write_report(path: str | Path, sections: dict[str, dict[str, object]]) -> Path:
    """`[section]` headers with sorted `key = value` lines."""
    lines = []
    for name, entries in sections.items():
        lines.append(f"[{name}]")
        for key in sorted(entries):
            lines.append(f"{key} = {entries[key]}")
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines))
    return path


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return path


def plot_correlation_scatter(
    belief_cos: np.ndarray,
    action_dist: np.ndarray,
    obs_cos: np.ndarray,
    r_action: float,
    r_obs: float,
    path: str | Path,
) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].scatter(belief_cos, action_dist, s=4, alpha=0.35, color="tab:blue", edgecolors="none")
    axes[0].set_xlabel("belief cosine similarity")
    axes[0].set_ylabel("future action distance (l2)")
    axes[0].set_title(f"action structure (r = {r_action:.2f} on -distance)")
    axes[1].scatter(belief_cos, obs_cos, s=4, alpha=0.35, color="tab:orange", edgecolors="none")
    axes[1].set_xlabel("belief cosine similarity")
    axes[1].set_ylabel("frame-summary cosine at t+5")
    axes[1].set_title(f"visual structure (r = {r_obs:.2f})")
    fig.tight_layout()
    return _save(fig, path)


def plot_kl_curve(kl_curve: np.ndarray, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(kl_curve)), kl_curve, lw=0.8, color="tab:green")
    tail = max(1, int(round(0.1 * len(kl_curve))))
    ax.axhline(float(np.mean(kl_curve[-tail:])), ls="--", color="gray", label="final-10% mean")
    ax.set_xlabel("training iteration")
    ax.set_ylabel("mean per-step KL (nats)")
    ax.set_title("latent KL over belief training")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_divergence_fan(divergence_1: np.ndarray, divergence_5: np.ndarray, path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, mat, title in ((axes[0], divergence_1, "1-step decodes"), (axes[1], divergence_5, "5-step decodes")):
        im = ax.imshow(mat, cmap="viridis", vmin=0.0)
        ax.set_title(f"pairwise divergence, {title}")
        ax.set_xlabel("prior sample")
        ax.set_ylabel("prior sample")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_attention_heatmap(timesteps: np.ndarray, rows: np.ndarray, uniform_level: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    im = ax.imshow(rows, aspect="auto", cmap="magma", vmin=0.0, vmax=max(1e-6, float(rows.max())))
    ax.set_yticks(range(len(timesteps)), [str(int(t)) for t in timesteps])
    labels = ["belief"] + [f"frame -{rows.shape[1] - 1 - i}" for i in range(1, rows.shape[1])]
    ax.set_xticks(range(rows.shape[1]), labels, rotation=45, ha="right")
    ax.set_ylabel("episode step")
    ax.set_title(f"evidence-position attention (uniform = {uniform_level:.3f})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_memory_bars(contexts: tuple[int, ...], counts: dict[str, list[int]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    kinds = list(counts)
    width = 0.8 / len(kinds)
    xs = np.arange(len(contexts))
    for j, kind in enumerate(kinds):
        row = counts[kind]
        ratios = [c / row[0] for c in row]
        ax.bar(xs + j * width, ratios, width=width, label=kind)
    ax.set_xticks(xs + width * (len(kinds) - 1) / 2, [str(c) for c in contexts])
    ax.set_xlabel("temporal context length (frames)")
    ax.set_ylabel("retained floats, relative to 1 frame")
    ax.set_title("memory scaling by context-handling strategy")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(curves: dict[str, np.ndarray], path: str | Path, ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        ax.plot(np.arange(len(values)), values, lw=0.8, label=name)
    ax.set_xlabel("training iteration")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
