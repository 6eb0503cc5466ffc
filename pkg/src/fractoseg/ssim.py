"""Structural similarity between images, dataset-level SSIM matrices and SSIM-vs-quality reports."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
from scipy.ndimage import uniform_filter

from .errors import EmptyImage, EmptySelection, MissingScore, NonFiniteResult

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SsimConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0
    working_size: tuple[int, int] | None = (256, 256)
    grayscale: bool = True

    def __post_init__(self):
        for v in (self.alpha, self.beta, self.gamma):
            if not math.isfinite(v):
                raise ValueError("weighting exponents must be finite")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("stabilizer constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2


def prepare(image: np.ndarray, cfg: SsimConfig) -> np.ndarray:
    """Resize (bilinear) to the working size and convert to luminance; returns float64 HxWxC."""
    img = np.asarray(image)
    if img.size == 0:
        raise EmptyImage("empty image")
    img = img.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if cfg.working_size is not None and img.shape[:2] != tuple(cfg.working_size):
        h, w = cfg.working_size
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
        if img.ndim == 2:
            img = img[..., None]
    if cfg.grayscale and img.shape[2] == 3:
        img = (img @ LUMA)[..., None]
    elif cfg.grayscale and img.shape[2] != 1:
        img = img.mean(axis=2, keepdims=True)
    if min(img.shape[:2]) < cfg.window:
        raise EmptyImage(f"image {img.shape[:2]} smaller than the {cfg.window}px window")
    return img


def _local_stats(x: np.ndarray, y: np.ndarray, win: int):
    r = win // 2
    crop = (slice(r, x.shape[0] - r), slice(r, x.shape[1] - r))

    def mean(a):
        return uniform_filter(a, size=win, mode="constant")[crop]

    mx, my = mean(x), mean(y)
    vx = np.maximum(mean(x * x) - mx * mx, 0.0)
    vy = np.maximum(mean(y * y) - my * my, 0.0)
    cxy = mean(x * y) - mx * my
    return mx, my, vx, vy, cxy


def ssim_terms(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig()):
    """Per-window luminance, contrast and structure maps for single-channel float images.

    Inputs are used as-is (no resizing); only fully contained windows are evaluated.
    """
    mx, my, vx, vy, cxy = _local_stats(np.asarray(x, float), np.asarray(y, float), cfg.window)
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    lum = (2 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1)
    con = (2 * sx * sy + cfg.c2) / (vx + vy + cfg.c2)
    struct = (cxy + cfg.c3) / (sx * sy + cfg.c3)
    return lum, con, struct


def _signed_pow(a: np.ndarray, e: float) -> np.ndarray:
    if e == 1.0:
        return a
    return np.sign(a) * np.abs(a) ** e


def _ssim_prepared(px: np.ndarray, py: np.ndarray, cfg: SsimConfig) -> float:
    values = []
    for ch in range(px.shape[2]):
        lum, con, struct = ssim_terms(px[..., ch], py[..., ch], cfg)
        smap = _signed_pow(lum, cfg.alpha) * _signed_pow(con, cfg.beta) * _signed_pow(struct, cfg.gamma)
        values.append(smap.mean())
    value = float(np.mean(values))
    if not math.isfinite(value):
        raise NonFiniteResult("SSIM is not finite; check the stabilizer constants")
    return float(np.clip(value, -1.0, 1.0))


def ssim(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over all local windows of the prepared (resized, luminance) images."""
    px, py = prepare(x, cfg), prepare(y, cfg)
    if px.shape != py.shape:
        raise EmptyImage(f"prepared shapes differ: {px.shape} vs {py.shape}; set working_size")
    return _ssim_prepared(px, py, cfg)


@dataclass
class SsimMatrix:
    ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValueError(f"matrix shape {self.values.shape} does not match {n} ids")

    def subset(self, ids: Sequence[str]) -> "SsimMatrix":
        index = [self.ids.index(i) for i in ids]
        return SsimMatrix(list(ids), self.values[np.ix_(index, index)])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + list(self.ids))
            for i, row in zip(self.ids, self.values):
                w.writerow([i] + [f"{v:.6f}" for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SsimMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        ids = rows[0][1:]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(ids, values)


def ssim_matrix(
    images: Sequence[np.ndarray],
    cfg: SsimConfig = SsimConfig(),
    ids: Sequence[str] | None = None,
    workers: int = 1,
) -> SsimMatrix:
    """All-pairs SSIM; each unordered pair is evaluated once and mirrored."""
    if len(images) < 2:
        raise ValueError("need at least two images")
    ids = [str(i) for i in range(len(images))] if ids is None else list(ids)
    prepared = [prepare(im, cfg) for im in images]
    n = len(prepared)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def run(pair):
        i, j = pair
        try:
            return _ssim_prepared(prepared[i], prepared[j], cfg)
        except Exception as exc:
            raise type(exc)(f"pair ({ids[i]}, {ids[j]}): {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]

    values = np.eye(n)
    for (i, j), v in zip(pairs, results):
        values[i, j] = values[j, i] = v
    return SsimMatrix(ids, values)


@dataclass
class SsimStats:
    mu: float
    sigma: float
    selection: str
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def dataset_stats(matrix: SsimMatrix, selection: str = "all_pairs", subset: Sequence[str] | None = None) -> SsimStats:
    """Mean and (population) standard deviation over a selection of matrix entries.

    ``vs_first`` takes row 0 without its diagonal (each image against the first one);
    ``all_pairs`` takes the strict upper triangle. ``subset`` restricts to some ids first,
    e.g. the train+val or test ids.
    """
    m = matrix.subset(subset) if subset is not None else matrix
    v = m.values
    if selection == "vs_first":
        entries = v[0, 1:]
    elif selection == "all_pairs":
        entries = v[np.triu_indices(len(v), k=1)]
    else:
        raise ValueError(f"unknown selection {selection!r}")
    if entries.size == 0:
        raise EmptySelection(f"no entries for selection {selection!r}")
    return SsimStats(float(entries.mean()), float(entries.std()), selection, int(entries.size))


def _box(values: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo = values[values >= q1 - 1.5 * iqr].min()
    hi = values[values <= q3 + 1.5 * iqr].max()
    return {
        "q1": float(q1), "median": float(med), "q3": float(q3), "iqr": float(iqr),
        "whisker_low": float(lo), "whisker_high": float(hi),
        "min": float(values.min()), "max": float(values.max()),
    }


def per_image_ssim(matrix: SsimMatrix) -> dict[str, float]:
    """Mean SSIM of each image against all others."""
    v = matrix.values
    n = len(v)
    off = (v.sum(axis=1) - np.diag(v)) / (n - 1)
    return dict(zip(matrix.ids, map(float, off)))


def ssim_quality_report(matrix: SsimMatrix, scores: Mapping[str, float], dataset: str = "") -> dict:
    """Pair each image's mean SSIM with its segmentation score and summarise both as boxes."""
    if not scores:
        raise MissingScore("no scores given")
    missing = [i for i in matrix.ids if i not in scores]
    if missing:
        raise MissingScore(f"no score for {missing}")
    sim = per_image_ssim(matrix)
    records = [{"id": i, "ssim": sim[i], "miou": float(scores[i])} for i in matrix.ids]
    s = np.array([r["ssim"] for r in records])
    q = np.array([r["miou"] for r in records])
    box_s, box_q = _box(s), _box(q)
    return {
        "dataset": dataset,
        "records": records,
        "ssim_box": box_s,
        "miou_box": box_q,
        "miou_spread_smaller": bool(box_q["iqr"] < box_s["iqr"]),
    }


def save_heatmap(matrix: SsimMatrix, path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix.values, vmin=0, vmax=1, cmap="viridis")
    fig.colorbar(im, ax=ax, label="SSIM")
    ax.set_title(title)
    ax.set_xlabel("image")
    ax.set_ylabel("image")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
