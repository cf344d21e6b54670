"""PNG figures for assessment curves and retrieval hit rates (Agg backend only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import OPERATION_COLUMNS, AssessmentReport  # noqa: E402


def plot_assessment(reports: dict, path):
    """One panel per method: per-operation accuracy against probe epoch."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    fig, axes = plt.subplots(1, len(reports), figsize=(4.2 * len(reports), 3.4), squeeze=False, sharey=True)
    for ax, rep in zip(axes[0], reports):
        _assessment_panel(ax, rep)
    axes[0][0].set_ylabel("accuracy")
    axes[0][-1].legend(loc="lower right", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _assessment_panel(ax, rep: AssessmentReport):
    for name in OPERATION_COLUMNS:
        e, a = zip(*rep.operations[name])
        ax.plot(e, a, marker="o", ms=3, label=name)
    e, a = zip(*rep.overall)
    ax.plot(e, a, color="black", lw=2, label="overall")
    ax.set_title(rep.method)
    ax.set_xlabel("probe epoch")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)


def plot_hit_rates(rates: dict, path):
    """Grouped bars of top-k hit rate; ``rates`` maps method -> {k: rate}."""
    methods = list(rates)
    ks = sorted({k for r in rates.values() for k in r})
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(ks), 3.2))
    for j, m in enumerate(methods):
        xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(ks))]
        ax.bar(xs, [rates[m].get(k, 0.0) for k in ks], width, label=m)
    ax.set_xticks(range(len(ks)), [f"top-{k}" for k in ks])
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("hit rate")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curve(log, path, title=""):
    """Train loss and (where evaluated) test accuracy against epoch."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r.epoch for r in log.records], [r.train_loss for r in log.records], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ev = log.evaluated()
    if ev:
        ax2 = ax.twinx()
        ax2.plot([r.epoch for r in ev], [r.test_accuracy for r in ev], color="tab:red", marker=".")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("test accuracy", color="tab:red")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
