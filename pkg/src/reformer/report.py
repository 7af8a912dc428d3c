"""Render a training run into files: a delimited summary (CSV) plus
matplotlib figures for the loss curves and the learning-rate schedule.
"""
from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOG_FIELDS = ["step", "lr", "loss_total", "loss_caption", "loss_relation"]


def read_training_log(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            missing = [k for k in LOG_FIELDS if k not in row]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: training log is empty")
    return rows


def write_training_report(rows, out_dir):
    """CSV + PNG figures for a list of training-log rows.

    Returns {"csv": path, "figures": [paths]}.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "training_log.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})

    steps = [r["step"] for r in rows]
    figures = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss_total"] for r in rows], label="total", lw=1.5)
    if any(r["loss_caption"] for r in rows):
        ax.plot(steps, [r["loss_caption"] for r in rows], label="caption", lw=1.0)
    if any(r["loss_relation"] for r in rows):
        ax.plot(steps, [r["loss_relation"] for r in rows], label="relation", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    loss_path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    figures.append(loss_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["lr"] for r in rows], color="tab:orange", lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    lr_path = os.path.join(out_dir, "lr_schedule.png")
    fig.savefig(lr_path, dpi=120)
    plt.close(fig)
    figures.append(lr_path)

    return {"csv": csv_path, "figures": figures}
