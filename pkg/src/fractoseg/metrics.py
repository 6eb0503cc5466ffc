"""IoU / mIoU / Dice on hard masks and per-image diagnostic tables.

Counting is exact integer arithmetic. A class absent from both masks has no value
(``None``) and is left out of the means; a class predicted but absent from the truth
scores 0.
"""
from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES, N_CLASSES
from .errors import EmptyInput, ShapeMismatch


def _check(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    return pred, truth


def confusion(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Integer confusion matrix, rows = truth, cols = prediction."""
    pred, truth = _check(pred, truth)
    idx = truth.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _counts(cm: np.ndarray):
    inter = np.diag(cm)
    n_truth = cm.sum(axis=1)
    n_pred = cm.sum(axis=0)
    return inter, n_truth, n_pred


def iou(pred: np.ndarray, truth: np.ndarray, cls: int) -> float | None:
    pred, truth = _check(pred, truth)
    a = truth == cls
    b = pred == cls
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return None
    return int(np.count_nonzero(a & b)) / union


@dataclass
class ClassIoUReport:
    ious: list[float | None]
    miou: float
    n_pixels: list[int]
    n_classes: int
    image_id: str = ""

    def row(self) -> dict:
        out = {"id": self.image_id}
        for name, v in zip(CLASS_NAMES, self.ious):
            out[f"iou_{name}"] = v
        out["miou"] = self.miou
        out["n_classes"] = self.n_classes
        return out


def _mean_defined(values) -> float:
    """Mean of the defined entries, exact for ``Fraction`` inputs and rounded once."""
    vals = [v for v in values if v is not None]
    return float(sum(vals, Fraction(0)) / len(vals)) if vals else float("nan")


def miou(pred: np.ndarray, truth: np.ndarray, image_id: str = "") -> ClassIoUReport:
    cm = confusion(pred, truth)
    inter, n_truth, n_pred = _counts(cm)
    union = n_truth + n_pred - inter
    exact = [None if u == 0 else Fraction(int(i), int(u)) for i, u in zip(inter, union)]
    ious = [None if v is None else float(v) for v in exact]
    return ClassIoUReport(ious, _mean_defined(exact), [int(v) for v in n_truth], int(np.count_nonzero(n_truth)), image_id)


def dice_coefficient(pred: np.ndarray, truth: np.ndarray) -> tuple[list[float | None], float]:
    """Per-class hard Dice ``2|A∩B| / (|A| + |B|)`` and its mean over defined classes."""
    cm = confusion(pred, truth)
    inter, n_truth, n_pred = _counts(cm)
    exact = [None if (a + b) == 0 else Fraction(2 * int(i), int(a + b)) for i, a, b in zip(inter, n_truth, n_pred)]
    return [None if v is None else float(v) for v in exact], _mean_defined(exact)


def mean_report(reports: Sequence[ClassIoUReport]) -> dict:
    """Dataset-level summary: per-class mean IoU over images where defined, and mean image mIoU."""
    if not reports:
        raise EmptyInput("no reports")
    out = {}
    for c, name in enumerate(CLASS_NAMES):
        vals = [r.ious[c] for r in reports if r.ious[c] is not None]
        out[f"iou_{name}"] = float(np.mean(vals)) if vals else None
    out["miou"] = float(np.mean([r.miou for r in reports]))
    return out


def diagnostics(reports: Sequence[ClassIoUReport]) -> dict:
    """Per-class (n_pixels, IoU) points and mIoU statistics bucketed by class count.

    Images lacking a class in the truth get ``n_pixels = 1`` so they sit at 10^0 on a log axis.
    """
    if not reports:
        raise EmptyInput("no reports")
    per_class = {name: [] for name in CLASS_NAMES}
    buckets: dict[int, list[float]] = {}
    for r in reports:
        for c, name in enumerate(CLASS_NAMES):
            per_class[name].append({
                "id": r.image_id,
                "n_pixels": r.n_pixels[c] if r.n_pixels[c] > 0 else 1,
                "iou": r.ious[c],
                "miou": r.miou,
            })
        buckets.setdefault(r.n_classes, []).append(r.miou)
    by_n = {}
    for n, vals in sorted(buckets.items()):
        v = np.asarray(vals)
        by_n[n] = {"count": len(v), "mean": float(v.mean()), "std": float(v.std()),
                   "min": float(v.min()), "max": float(v.max())}
    return {"per_class": per_class, "by_n_classes": by_n}


def write_reports(reports: Sequence[ClassIoUReport], out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    with open(out_dir / "per_image.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = mean_report(reports)
    diag = diagnostics(reports)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    plot_diagnostics(diag, out_dir)
    return summary


def plot_diagnostics(diag: dict, out_dir: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    names = CLASS_NAMES[1:]
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharey=True)
    for ax, name in zip(axes.ravel(), names):
        pts = diag["per_class"][name]
        ax.scatter([p["n_pixels"] for p in pts], [p["miou"] for p in pts], s=12)
        ax.set_xscale("log")
        ax.set_title(name)
        ax.set_xlabel("n_pixels")
    axes[0, 0].set_ylabel("mIoU")
    axes[1, 0].set_ylabel("mIoU")
    fig.tight_layout()
    fig.savefig(out_dir / "miou_vs_npixels.png", dpi=100)
    plt.close(fig)

    by_n = diag["by_n_classes"]
    ns = sorted(by_n, key=int)
    fig, ax = plt.subplots(figsize=(5, 4))
    means = [by_n[n]["mean"] for n in ns]
    ax.errorbar([int(n) for n in ns], means, yerr=[by_n[n]["std"] for n in ns], fmt="o", color="k", capsize=3)
    ax.fill_between([int(n) for n in ns], [by_n[n]["min"] for n in ns], [by_n[n]["max"] for n in ns],
                    color="orange", alpha=0.3)
    ax.set_xlabel("n_classes in ground truth")
    ax.set_ylabel("mIoU")
    fig.tight_layout()
    fig.savefig(out_dir / "miou_vs_nclasses.png", dpi=100)
    plt.close(fig)


def report_from_dict(d: dict) -> ClassIoUReport:
    return ClassIoUReport(**d)


def report_to_dict(r: ClassIoUReport) -> dict:
    return asdict(r)
