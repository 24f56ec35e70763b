"""Render training-dynamics figures from a run directory.

Reads the metrics CSV (and ``eval_final.json`` when present) and writes
PNG files next to it: loss curves, AP trajectory, pseudo-label count
and confidence, precision-recall curves, and the pseudo-confidence
histogram. The CSV remains the source of truth; figures are a
convenience rendering of the same numbers.
"""
from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _read_metrics(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append(row)
    return rows


def _series(rows, key):
    xs, ys = [], []
    for r in rows:
        if r[key] != "":
            xs.append(int(r["iteration"]))
            ys.append(float(r[key]))
    return np.array(xs), np.array(ys)


def render_report(run_dir, out_dir=None) -> list[str]:
    """Write all figures for one run; returns the created file paths."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    metrics = os.path.join(run_dir, "metrics.csv")
    rows = _read_metrics(metrics)
    written: list[str] = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (
        ("l_sup_cls", "supervised cls"),
        ("l_sup_reg", "supervised reg"),
        ("l_unsup_cls", "unsupervised cls"),
        ("l_unsup_reg", "unsupervised reg"),
        ("total", "total"),
    ):
        xs, ys = _series(rows, key)
        if xs.size:
            ax.plot(xs, ys, label=label, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    xs, _ = _series(rows, "AP50")
    if xs.size:
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("mAP", "AP50", "AP75"):
            xs, ys = _series(rows, key)
            ax.plot(xs, ys, marker="o", markersize=3, label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("average precision")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "ap_curves.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    xs = np.array([int(r["iteration"]) for r in rows])
    n_pseudo = np.array([float(r["n_pseudo"]) for r in rows])
    conf = np.array([float(r["mean_pseudo_conf"]) for r in rows])
    ax1.plot(xs, n_pseudo, linewidth=1, color="tab:blue")
    ax1.set_ylabel("pseudo boxes / batch")
    ax2.plot(xs, conf, linewidth=1, color="tab:orange")
    ax2.set_ylabel("mean confidence")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    path = os.path.join(out_dir, "pseudo_stats.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    eval_path = os.path.join(run_dir, "eval_final.json")
    if os.path.exists(eval_path):
        with open(eval_path, "r", encoding="utf-8") as f:
            report = json.load(f)
        recalls = np.linspace(0.0, 1.0, 101)
        fig, ax = plt.subplots(figsize=(5, 5))
        for thr, curve in sorted(report["pr_curves"].items()):
            ax.plot(recalls, curve, label=f"IoU {thr}", linewidth=1)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, "pr_curves.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        stats = report.get("pseudo_stats")
        if stats:
            fig, ax = plt.subplots(figsize=(6, 4))
            edges = np.linspace(0.0, 1.0, len(stats["confidence_histogram"]) + 1)
            ax.bar(
                edges[:-1],
                stats["confidence_histogram"],
                width=np.diff(edges),
                align="edge",
                edgecolor="black",
                linewidth=0.4,
            )
            ax.set_xlabel("pseudo-label confidence")
            ax.set_ylabel("count")
            fig.tight_layout()
            path = os.path.join(out_dir, "pseudo_confidence_hist.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    return written
