"""Initial crack size a0 from segmentation masks (area average and 5-point average) and error statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BRITTLE, DUCTILE, EROSION_NOTCH, FATIGUE_PRECRACK, OTHER, class_histogram
from .errors import DegenerateWidth, EmptyInput, FrontNotFound, NoCrackPixels

FRACTURE_CLASSES = (EROSION_NOTCH, FATIGUE_PRECRACK, DUCTILE, BRITTLE, OTHER)
STATIONS = tuple(i / 6 for i in range(1, 6))


@dataclass
class SpecimenGeometry:
    W: float | None = None
    B: float | None = None
    B_N: float | None = None
    a_k: float | None = None
    orientation: str = "rows"  # crack grows along the row index

    def __post_init__(self):
        if self.W is not None and self.W <= 0:
            raise ValueError("W must be positive")
        if self.B_N is not None and (self.B_N <= 0 or (self.B is not None and self.B_N > self.B)):
            raise ValueError("need 0 < B_N <= B")
        if self.orientation not in ("rows", "cols"):
            raise ValueError("orientation must be 'rows' or 'cols'")


@dataclass
class MeasurementResult:
    a0_px: float
    a0: float  # in `unit`
    unit: str
    B_N_px: float
    scale: float | None
    a0_5pa: float | None = None
    crack_pixel_counts: dict = field(default_factory=dict)


def _canonical(mask: np.ndarray, geom: SpecimenGeometry) -> np.ndarray:
    """View the mask so the crack grows towards increasing row index."""
    m = np.asarray(mask)
    if geom.orientation == "cols":
        m = m.T
    notch_rows = np.nonzero((m == EROSION_NOTCH).any(axis=1))[0]
    pre_rows = np.nonzero((m == FATIGUE_PRECRACK).any(axis=1))[0]
    if len(notch_rows) and len(pre_rows) and notch_rows.mean() > pre_rows.mean():
        m = m[::-1]
    return m


def _longest_run(row: np.ndarray) -> tuple[int, int]:
    """(start, length) of the longest run of True values."""
    padded = np.concatenate([[False], row, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    if len(starts) == 0:
        return 0, 0
    lengths = ends - starts
    i = int(np.argmax(lengths))
    return int(starts[i]), int(lengths[i])


def _net_section(m: np.ndarray) -> tuple[float, int]:
    """Median net-thickness extent (px) and median start column over rows crossing the precrack."""
    rows = np.nonzero((m == FATIGUE_PRECRACK).any(axis=1))[0]
    if len(rows) == 0:
        rows = np.nonzero((m == EROSION_NOTCH).any(axis=1))[0]
    if len(rows) == 0:
        return 0.0, 0
    fracture = np.isin(m[rows], FRACTURE_CLASSES)
    runs = [_longest_run(r) for r in fracture]
    return float(np.median([l for _, l in runs])), int(np.median([s for s, _ in runs]))


def net_thickness_px(mask: np.ndarray, geom: SpecimenGeometry = SpecimenGeometry()) -> float:
    return _net_section(_canonical(mask, geom))[0]


def area_average_a0(mask: np.ndarray, geom: SpecimenGeometry = SpecimenGeometry(), scale: float | None = None,
                    with_5pa: bool = False) -> MeasurementResult:
    """a0 = (notch pixels + precrack pixels) / B_N in pixels, times ``scale`` (mm/px) if given.

    B_N comes from ``geom.B_N / scale`` when both are known, otherwise from the mask.
    Without a scale the result stays in pixels (``unit == 'px'``).
    """
    m = _canonical(mask, geom)
    hist = class_histogram(m)
    n_notch, n_pre = int(hist[EROSION_NOTCH]), int(hist[FATIGUE_PRECRACK])
    if n_notch + n_pre == 0:
        raise NoCrackPixels("mask has no erosion-notch or fatigue-precrack pixels")
    if geom.B_N is not None and scale is not None:
        bn_px = geom.B_N / scale
    else:
        bn_px = _net_section(m)[0]
    if bn_px <= 0:
        raise DegenerateWidth("net thickness is zero pixels")
    a0_px = (n_notch + n_pre) / bn_px
    result = MeasurementResult(
        a0_px=a0_px,
        a0=a0_px * scale if scale is not None else a0_px,
        unit="mm" if scale is not None else "px",
        B_N_px=bn_px,
        scale=scale,
        crack_pixel_counts={"erosion_notch": n_notch, "fatigue_precrack": n_pre},
    )
    if with_5pa:
        try:
            result.a0_5pa = five_point_a0(mask, geom, scale)
        except FrontNotFound:
            result.a0_5pa = None
    return result


def front_depths(mask: np.ndarray, geom: SpecimenGeometry = SpecimenGeometry(), fractions=STATIONS) -> list[int]:
    """Crack depth (px, counted from the outermost notch row) at the given fractions of B_N."""
    m = _canonical(mask, geom)
    crack = (m == EROSION_NOTCH) | (m == FATIGUE_PRECRACK)
    notch_rows = np.nonzero((m == EROSION_NOTCH).any(axis=1))[0]
    if not (m == FATIGUE_PRECRACK).any() or len(notch_rows) == 0:
        raise FrontNotFound("no precrack/notch region")
    origin = int(notch_rows.min())
    bn, c0 = _net_section(m)
    depths = []
    for f in fractions:
        col = c0 + int(math.floor(f * bn))
        hits = np.nonzero(crack[:, col])[0] if 0 <= col < m.shape[1] else []
        if len(hits) == 0:
            raise FrontNotFound(f"no crack pixels at station column {col}")
        depths.append(int(hits.max()) - origin + 1)
    return depths


def five_point_a0(mask: np.ndarray, geom: SpecimenGeometry = SpecimenGeometry(), scale: float | None = None) -> float:
    """Plain mean of the crack depth at 1/6 ... 5/6 of the net thickness."""
    d = float(np.mean(front_depths(mask, geom)))
    return d * scale if scale is not None else d


# ---------------------------------------------------------------------------
# statistics


@dataclass
class MeasurementStats:
    n: int
    delta_mean: float  # mean signed deviation measured - reference
    delta_mean_rel: float  # percent
    sigma: float
    sigma_rel: float
    mean_abs_rel: float  # percent
    mu_d: float | None
    outliers: list[str]
    deviations: list[float]
    rel_deviations: list[float]
    ids: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def measurement_stats(
    pairs: Sequence[tuple[float, float]],
    ids: Sequence[str] | None = None,
    exclude: Sequence[str] = (),
    other: Sequence[float] | None = None,
    band: float = 1.0,
) -> MeasurementStats:
    """Deviation statistics of measured vs reference a0 values.

    ``other`` is a second measured series (same order) for the mean pairwise difference
    ``mu_d = mean(measured - other)``. Ids in ``exclude`` are dropped from every aggregate.
    Outliers lie outside the +/- ``band`` percent relative deviation band.
    """
    ids = [str(i) for i in range(len(pairs))] if ids is None else [str(i) for i in ids]
    keep = [k for k, i in enumerate(ids) if i not in set(map(str, exclude))]
    if not keep:
        raise EmptyInput("no measurement pairs")
    ref = np.array([pairs[k][0] for k in keep], dtype=np.float64)
    meas = np.array([pairs[k][1] for k in keep], dtype=np.float64)
    if np.any(ref <= 0):
        raise ValueError("reference values must be positive")
    d = meas - ref
    rel = d / ref * 100.0
    ddof = 1 if len(d) > 1 else 0
    mu_d = None
    if other is not None:
        o = np.array([other[k] for k in keep], dtype=np.float64)
        mu_d = float(np.mean(meas - o))
    kept_ids = [ids[k] for k in keep]
    return MeasurementStats(
        n=len(d),
        delta_mean=float(d.mean()),
        delta_mean_rel=float(rel.mean()),
        sigma=float(d.std(ddof=ddof)),
        sigma_rel=float(rel.std(ddof=ddof)),
        mean_abs_rel=float(np.abs(rel).mean()),
        mu_d=mu_d,
        outliers=[i for i, r in zip(kept_ids, rel) if abs(r) > band],
        deviations=d.tolist(),
        rel_deviations=rel.tolist(),
        ids=kept_ids,
    )


def write_measurements(rows: Sequence[dict], stats: MeasurementStats, out_dir: str | Path, unit: str = "mm") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if rows:
        with open(out_dir / "measurements.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2))
    plot_measurements(rows, out_dir / "aa_vs_reference.png", unit)


def plot_measurements(rows: Sequence[dict], path: str | Path, unit: str = "mm", band: float = 1.0) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [r for r in rows if r.get("reference") is not None and r.get("a0_aa") is not None]
    ref = np.array([r["reference"] for r in pts], dtype=float)
    aa = np.array([r["a0_aa"] for r in pts], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if len(ref):
        lo, hi = ref.min() * 0.95, ref.max() * 1.05
        xs = np.linspace(lo, hi, 2)
        ax.plot(xs, xs, "k-", lw=1)
        ax.fill_between(xs, xs * (1 - band / 100), xs * (1 + band / 100), color="gray", alpha=0.3,
                        label=f"±{band:g} %")
        ax.scatter(ref, aa, s=14)
        ax.legend()
    ax.set_xlabel(f"reference a0 [{unit}]")
    ax.set_ylabel(f"AA a0 [{unit}]")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
