"""Figures written next to the TSV reports: loss curves and ablation charts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}
FIGSIZE = (4.8, 3.0)
# Fixed metadata keeps PNG bytes identical across reruns.
PNG_META = {"Software": None}


def _moving_average(xs: Sequence[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, x in enumerate(xs):
        acc += x
        if i >= window:
            acc -= xs[i - window]
        out.append(acc / min(i + 1, window))
    return out


def _save(fig, path: Path) -> Path:
    fig.tight_layout(pad=0.4)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path: str | Path, title: str = "", ylabel: str = "loss") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        steps = range(1, len(losses) + 1)
        ax.plot(steps, losses, color="0.75", lw=0.6, label="per step")
        window = max(1, len(losses) // 50)
        ax.plot(steps, _moving_average(list(losses), window), color="#0072B2", lw=1.4, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_ablation(rows: Sequence[dict], path: str | Path, axis: str) -> Path:
    """Bars of BLEU and chrF per setting; the data-size axis is drawn as lines."""
    labels = [str(r["setting"]) for r in rows]
    bleu = [r["bleu"] for r in rows]
    chrf = [r["chrf"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        if axis == "data-size":
            ax.plot(labels, bleu, "o-", color="#0072B2", label="BLEU")
            ax.plot(labels, chrf, "s--", color="#D55E00", label="chrF")
            ax.set_xlabel("training pairs")
        else:
            xs = range(len(rows))
            ax.bar([x - 0.2 for x in xs], bleu, 0.4, color="#0072B2", label="BLEU")
            ax.bar([x + 0.2 for x in xs], chrf, 0.4, color="#D55E00", label="chrF")
            ax.set_xticks(list(xs), labels, rotation=15 if len(rows) > 3 else 0)
        ax.set_ylim(0, 100)
        ax.set_ylabel("score")
        ax.set_title(axis)
        ax.legend(frameon=False)
        return _save(fig, Path(path))
