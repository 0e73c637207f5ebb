"""Figure rendering for run and sweep outputs.

Every report path writes PNGs next to its CSVs; all figures are built from
those CSVs so they can be regenerated offline. Uses the Agg backend — this
is a headless tool.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def training_curves(csv_path, out_png) -> None:
    rows = _read_csv(csv_path)
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    moving = [float(r["moving_loss"]) for r in rows]
    acc = [float(r["acc_top1"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, moving, lw=1.0)
    ax1.set_xlabel("observations")
    ax1.set_ylabel("moving loss")
    ax2.plot(steps, acc, lw=1.0, color="tab:blue")
    ax2.set_xlabel("observations")
    ax2.set_ylabel("avg online accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def compare_curves(csv_paths, labels, out_png) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for path, label in zip(csv_paths, labels):
        rows = _read_csv(path)
        ax.plot([int(r["step"]) for r in rows],
                [float(r["acc_top1"]) for r in rows], lw=1.2, label=label)
    ax.set_xlabel("observations")
    ax.set_ylabel("avg online accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def p0_sweep_figure(rows, out_png) -> None:
    methods = sorted({r["method"] for r in rows})
    schemes = sorted({r["scheme"] for r in rows})
    fig, axes = plt.subplots(1, len(methods), figsize=(5.0 * len(methods), 3.5),
                             squeeze=False)
    for ax, method in zip(axes[0], methods):
        for scheme in schemes:
            sel = [r for r in rows if r["method"] == method and r["scheme"] == scheme]
            sel.sort(key=lambda r: r["p0_value"])
            ax.plot([r["p0_value"] for r in sel],
                    [0.0 if r["diverged"] else r["acc_top1"] for r in sel],
                    marker="o", ms=3, lw=1.0, label=scheme)
        ax.set_xscale("log")
        ax.set_xlabel("initial variance")
        ax.set_ylabel("online accuracy after probe")
        ax.set_title(method)
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def beta_sweep_figure(rows, out_png) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot([r["beta"] for r in rows], [r["acc_top1"] for r in rows],
            marker="o", ms=4, lw=1.2)
    ax.set_xlabel("forgetting factor")
    ax.set_ylabel("avg online accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def offdiag_curve(csv_path, out_png) -> None:
    rows = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot([int(r["step"]) for r in rows],
            [float(r["off_diagonal_mass"]) for r in rows], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("relative off-diagonal mass")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
