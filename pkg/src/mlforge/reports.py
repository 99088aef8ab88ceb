"""Report rendering: plain-text summaries, CSV tables, and figures.

Every report path writes its delimited data first and then renders the
matching matplotlib figure next to it, so desk-scale toy runs produce the
same artifacts a full-scale run would (per-category and tags-per-image
histograms, training loss curve, throughput and scaling-efficiency curves).
"""

from __future__ import annotations

import math
import os

import numpy as np

from .curation import DatasetStats
from .distsim import ScalingReport
from .metrics import EvalResult
from .taxonomy import HierarchyStats


def _savefig(fig, path) -> None:
    fig.savefig(path, dpi=120)
    import matplotlib.pyplot as plt

    plt.close(fig)


def _new_figure():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def taxonomy_report(stats: HierarchyStats) -> str:
    lines = [
        "# hierarchy statistics (path length counts nodes, not edges)",
        f"tree_count={stats.tree_count}",
        f"longest_path={stats.longest_path}",
        f"mean_path={stats.mean_path:.6f}",
    ]
    return "\n".join(lines) + "\n"


def stats_report_text(
    stats: DatasetStats, n_records: int, trainable_threshold: int = 100, log2: bool = False
) -> str:
    counts = stats.images_per_category.values()
    lines = [
        "# dataset statistics" + (" (counts reported as log2)" if log2 else ""),
        f"records={n_records}",
        f"categories={len(stats.images_per_category)}",
        f"mean_tags_per_image={stats.mean_tags:.6f}",
        f"max_tags_per_image={stats.max_tags}",
        f"min_tags_per_image={stats.min_tags}",
        f"max_images_per_category={max(counts) if counts else 0}",
        f"min_images_per_category={min(counts) if counts else 0}",
        f"mean_images_per_category="
        f"{(sum(counts) / len(stats.images_per_category)) if stats.images_per_category else 0:.6f}",
        f"trainable_categories_gt_{trainable_threshold}="
        f"{stats.trainable_count(trainable_threshold)}",
    ]
    return "\n".join(lines) + "\n"


def _log2_or_raw(value: int, log2: bool) -> str:
    if not log2:
        return str(value)
    return f"{math.log2(value):.6f}" if value > 0 else ""


def write_stats_report(
    stats: DatasetStats,
    n_records: int,
    out_dir,
    trainable_threshold: int = 100,
    log2: bool = False,
    figures: bool = True,
) -> None:
    """report.txt plus the two histogram CSVs and their figures."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(stats_report_text(stats, n_records, trainable_threshold, log2))
    per_cat = sorted(stats.images_per_category.items(), key=lambda kv: (-kv[1], kv[0]))
    header = "cat_id,count,log2_count" if log2 else "cat_id,count"
    with open(os.path.join(out_dir, "images_per_category.csv"), "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for cat, count in per_cat:
            row = f"{cat},{count}"
            if log2:
                row += f",{_log2_or_raw(count, True)}"
            fh.write(row + "\n")
    with open(os.path.join(out_dir, "tags_per_image.csv"), "w", encoding="utf-8") as fh:
        fh.write("n_tags,count\n")
        for n_tags in sorted(stats.tags_per_image):
            fh.write(f"{n_tags},{stats.tags_per_image[n_tags]}\n")
    if not figures:
        return
    plt = _new_figure()
    if per_cat:
        counts = np.array([c for _, c in per_cat], dtype=float)
        ys = np.log2(counts) if log2 else counts
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.plot(np.arange(len(ys)), ys, lw=1.2)
        mean = float(np.log2(counts.mean())) if log2 else float(counts.mean())
        ax.axhline(mean, color="green", lw=1.0, label="mean")
        ax.set_xlabel("category (sorted by count)")
        ax.set_ylabel("images per category" + (" (log2)" if log2 else ""))
        ax.legend()
        fig.tight_layout()
        _savefig(fig, os.path.join(out_dir, "images_per_category.png"))
    if stats.tags_per_image:
        ks = sorted(stats.tags_per_image)
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.bar(ks, [stats.tags_per_image[k] for k in ks], width=0.8)
        ax.set_xlabel("annotated tags per image")
        ax.set_ylabel("images")
        fig.tight_layout()
        _savefig(fig, os.path.join(out_dir, "tags_per_image.png"))


def eval_report_text(result: EvalResult) -> str:
    return (
        f"k={result.k} precision={result.precision:.6f} recall={result.recall:.6f} "
        f"f1={result.f1:.6f} n_instances={result.n} n_excluded={result.n_excluded}\n"
    )


def write_per_instance_csv(Y, S, k, path) -> None:
    """CSV of per-instance precision/recall/F1 at top-k."""
    from .metrics import topk_binarize

    Y = np.asarray(Y, dtype=float)
    S = np.asarray(S, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("instance,precision,recall,f1\n")
        for i in range(Y.shape[0]):
            npos = Y[i].sum()
            if npos == 0:
                fh.write(f"{i},,,\n")
                continue
            hits = float((Y[i] * topk_binarize(S[i], k)).sum())
            p = hits / k
            r = hits / npos
            f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
            fh.write(f"{i},{p:.6f},{r:.6f},{f1:.6f}\n")


def write_loss_log(losses: list[float], out_dir, figures: bool = True) -> None:
    """loss_log.csv plus the log2 training-loss curve figure."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "loss_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss,log2_loss\n")
        for step, loss in enumerate(losses):
            log2_loss = f"{math.log2(loss):.6f}" if loss > 0 else ""
            fh.write(f"{step},{loss!r},{log2_loss}\n")
    if not figures or not losses:
        return
    plt = _new_figure()
    fig, ax = plt.subplots(figsize=(7, 3.2))
    steps = np.arange(len(losses))
    safe = np.array([math.log2(v) if v > 0 else np.nan for v in losses])
    ax.plot(steps, safe, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (log2)")
    fig.tight_layout()
    _savefig(fig, os.path.join(out_dir, "loss_curve.png"))


def write_scaling_report(report: ScalingReport, out_dir, figures: bool = True) -> None:
    """scaling.csv plus throughput and efficiency figures."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scaling.csv"), "w", encoding="utf-8") as fh:
        fh.write("k,images_per_second,efficiency\n")
        for row in report.rows:
            fh.write(f"{row.k},{row.images_per_second:.6f},{row.efficiency:.6f}\n")
    if not figures:
        return
    plt = _new_figure()
    ks = [row.k for row in report.rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(ks, [row.images_per_second for row in report.rows], marker="o")
    ax.set_xlabel("workers")
    ax.set_ylabel("images per second")
    fig.tight_layout()
    _savefig(fig, os.path.join(out_dir, "throughput.png"))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(ks, [row.efficiency for row in report.rows], marker="o")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("workers")
    ax.set_ylabel("scaling efficiency")
    fig.tight_layout()
    _savefig(fig, os.path.join(out_dir, "efficiency.png"))


def write_divergence_log(divergence: list[float], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,max_abs_replica_difference\n")
        for step, value in enumerate(divergence):
            fh.write(f"{step},{value!r}\n")
