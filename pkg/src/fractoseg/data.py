"""Label taxonomy, image/mask records, annotation rasterization and dataset manifests."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadFractions,
    DegeneratePolygon,
    InsufficientLabeled,
    NoLabeledRecords,
    ShapeMismatch,
    UnknownLabel,
)

CLASS_NAMES = (
    "background",
    "side_groove",
    "erosion_notch",
    "fatigue_precrack",
    "ductile_fracture",
    "brittle_fracture",
    "other",
)
N_CLASSES = len(CLASS_NAMES)

BACKGROUND, SIDE_GROOVE, EROSION_NOTCH, FATIGUE_PRECRACK, DUCTILE, BRITTLE, OTHER = range(N_CLASSES)

# RGB colors used when exporting color-coded masks.
PALETTE = np.array(
    [
        [0, 0, 0],
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [227, 119, 194],
    ],
    dtype=np.uint8,
)


def _normalize_name(name: str) -> str:
    return "_".join(name.strip().lower().replace("-", " ").replace("_", " ").split())


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(self.names) != N_CLASSES:
            raise ValueError(f"taxonomy needs exactly {N_CLASSES} classes, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if self.names[0] != "background":
            raise ValueError("background must be class 0")

    @property
    def classes(self) -> list[tuple[int, str]]:
        return list(enumerate(self.names))

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, label: str) -> int:
        key = _normalize_name(label)
        try:
            return self.names.index(key)
        except ValueError:
            raise UnknownLabel(label) from None


TAXONOMY = ClassTaxonomy()


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    scale: float | None = None  # mm per pixel
    domain_tag: str = ""
    labeled: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ShapeMismatch(f"expected HxWx3 uint8 pixels, got {px.shape} {px.dtype}")
        if px.shape[0] < 64 or px.shape[1] < 64:
            raise ShapeMismatch(f"image {self.id} is smaller than 64x64: {px.shape[:2]}")
        if self.scale is not None and not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def validate_mask(labels: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Check a label map holds only taxonomy ids (and optionally matches ``shape``)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {labels.shape}")
    if shape is not None and labels.shape != tuple(shape):
        raise ShapeMismatch(f"mask shape {labels.shape} != image shape {tuple(shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError("mask contains ids outside 0..6")
    return labels.astype(np.uint8, copy=False)


def class_histogram(labels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(labels).ravel(), minlength=N_CLASSES)[:N_CLASSES]


# ---------------------------------------------------------------------------
# polygon annotations


@dataclass
class PolygonAnnotation:
    shapes: list[tuple[str, list[tuple[float, float]]]]
    image_height: int
    image_width: int

    @classmethod
    def from_json(cls, doc: dict | str | Path) -> "PolygonAnnotation":
        """Read a labelme-style document: ``shapes[].label/points`` plus image size."""
        if not isinstance(doc, dict):
            doc = json.loads(Path(doc).read_text())
        shapes = [(s["label"], [tuple(map(float, p)) for p in s["points"]]) for s in doc.get("shapes", [])]
        return cls(shapes=shapes, image_height=int(doc["imageHeight"]), image_width=int(doc["imageWidth"]))

    def to_json(self) -> dict:
        return {
            "shapes": [{"label": lab, "points": [list(p) for p in pts]} for lab, pts in self.shapes],
            "imageHeight": self.image_height,
            "imageWidth": self.image_width,
        }


def _polygon_contains(px: np.ndarray, py: np.ndarray, poly: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Even-odd containment of points (px, py); points on an edge count as inside."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)

        # boundary test: collinear and within the segment's bounding box
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        seg_len = math.hypot(x2 - x1, y2 - y1)
        near = np.abs(cross) <= eps * max(seg_len, 1.0)
        within = (
            (px >= min(x1, x2) - eps) & (px <= max(x1, x2) + eps)
            & (py >= min(y1, y2) - eps) & (py <= max(y1, y2) + eps)
        )
        on_edge |= near & within
    return inside | on_edge


def rasterize(annotation: PolygonAnnotation, taxonomy: ClassTaxonomy = TAXONOMY) -> np.ndarray:
    """Render polygons to a class-id mask.

    Pixel (row, col) is tested at its center (col + 0.5, row + 0.5). Later shapes
    overwrite earlier ones; uncovered pixels stay background.
    """
    h, w = annotation.image_height, annotation.image_width
    mask = np.zeros((h, w), dtype=np.uint8)
    resolved = []
    for label, points in annotation.shapes:
        cls = taxonomy.id_of(label)
        if len(points) < 3:
            raise DegeneratePolygon(f"polygon '{label}' has {len(points)} points")
        poly = np.asarray(points, dtype=float)
        poly[:, 0] = np.clip(poly[:, 0], 0, w)
        poly[:, 1] = np.clip(poly[:, 1], 0, h)
        resolved.append((cls, poly))

    for cls, poly in resolved:
        x0, y0 = np.floor(poly.min(axis=0)).astype(int)
        x1, y1 = np.ceil(poly.max(axis=0)).astype(int)
        x0, y0 = max(x0 - 1, 0), max(y0 - 1, 0)
        x1, y1 = min(x1 + 1, w), min(y1 + 1, h)
        if x1 <= x0 or y1 <= y0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        hit = _polygon_contains(xx + 0.5, yy + 0.5, poly)
        mask[y0:y1, x0:x1][hit] = cls
    return mask


# ---------------------------------------------------------------------------
# manifests and splits


@dataclass
class ManifestEntry:
    id: str
    domain_tag: str = ""
    labeled: bool = False
    image: str | None = None
    mask: str | None = None
    meta: str | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry]
    splits: dict[str, list[str]] = field(default_factory=dict)

    @property
    def records(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def n_labeled(self) -> int:
        return sum(e.labeled for e in self.entries)

    @property
    def n_unlabeled(self) -> int:
        return self.n - self.n_labeled

    def entry(self, record_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == record_id:
                return e
        raise KeyError(record_id)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "N": self.n,
            "N_labeled": self.n_labeled,
            "N_unlabeled": self.n_unlabeled,
            "records": [asdict(e) for e in self.entries],
            "splits": self.splits,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        return cls(
            name=doc["name"],
            entries=[ManifestEntry(**r) for r in doc["records"]],
            splits={k: list(v) for k, v in doc.get("splits", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SplitReport:
    method: str
    ratio: float | None
    train: list[str]
    val: list[str]
    test: list[str]
    unlabeled: list[str]
    counts: dict[str, dict[str, int]]  # domain_tag -> split -> count

    def as_splits(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test, "unlabeled": self.unlabeled}


def compute_ratio(manifest: DatasetManifest) -> Fraction:
    """Unlabeled-to-labeled ratio as an exact fraction; format with ``f"{float(r):.2f}"``."""
    if manifest.n_labeled == 0:
        raise NoLabeledRecords(f"dataset {manifest.name!r} has no labeled records")
    return Fraction(manifest.n_unlabeled, manifest.n_labeled)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _allocate(n: int, train_frac: float, val_frac: float, keep_both: bool) -> tuple[int, int]:
    n_train = min(n, _round_half_up(train_frac * n))
    n_val = min(n - n_train, _round_half_up(val_frac * n))
    if keep_both and n >= 2 and val_frac > 0 and train_frac > 0:
        n_val = max(n_val, 1)
        n_train = max(min(n_train, n - n_val), 1)
    return n_train, n_val


def split_dataset(
    manifest: DatasetManifest,
    method: str = "stratified",
    seed: int = 0,
    fractions: tuple[float, float] = (0.75, 0.25),
) -> SplitReport:
    """Partition labeled records into train/val/test; unlabeled ones go to the SSL pool.

    ``randomized`` shuffles all labeled ids under ``seed``. ``stratified`` allocates
    proportionally within every domain tag (visited in ascending tag order, members
    sorted by id before the seeded shuffle).
    """
    train_frac, val_frac = fractions
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac > 1 + 1e-9:
        raise BadFractions(f"invalid fractions {fractions}")
    if method not in ("randomized", "stratified"):
        raise ValueError(f"unknown split method {method!r}")

    labeled = sorted((e for e in manifest.entries if e.labeled), key=lambda e: e.id)
    if len(labeled) < 4:
        raise InsufficientLabeled(f"need at least 4 labeled records, got {len(labeled)}")
    unlabeled = sorted(e.id for e in manifest.entries if not e.labeled)
    rng = np.random.default_rng(seed)

    train, val, test = [], [], []
    if method == "randomized":
        ids = [e.id for e in labeled]
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        n_train, n_val = _allocate(len(ids), train_frac, val_frac, keep_both=False)
        train, val, test = ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]
    else:
        strata: dict[str, list[str]] = defaultdict(list)
        for e in labeled:
            strata[e.domain_tag].append(e.id)
        for tag in sorted(strata):
            ids = strata[tag]
            if len(ids) < 2:
                raise InsufficientLabeled(f"stratum {tag!r} has {len(ids)} labeled record(s)")
            order = rng.permutation(len(ids))
            ids = [ids[i] for i in order]
            n_train, n_val = _allocate(len(ids), train_frac, val_frac, keep_both=True)
            train += ids[:n_train]
            val += ids[n_train:n_train + n_val]
            test += ids[n_train + n_val:]

    tags = {e.id: e.domain_tag for e in manifest.entries}
    counts: dict[str, dict[str, int]] = {}
    for name, ids in (("train", train), ("val", val), ("test", test), ("unlabeled", unlabeled)):
        for tag, c in Counter(tags[i] for i in ids).items():
            counts.setdefault(tag, {"train": 0, "val": 0, "test": 0, "unlabeled": 0})[name] = c

    ratio = float(compute_ratio(manifest)) if manifest.n_labeled else None
    return SplitReport(method, ratio, train, val, test, unlabeled, counts)


# ---------------------------------------------------------------------------
# file IO


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return validate_mask(np.asarray(im.convert("L"), dtype=np.uint8))


def save_mask(path: str | Path, labels: np.ndarray) -> None:
    """Single-channel 8-bit PNG of class ids."""
    Image.fromarray(validate_mask(labels)).save(path)


def colorize(labels: np.ndarray) -> np.ndarray:
    return PALETTE[validate_mask(labels)]


def iter_entries(manifest: DatasetManifest, ids: Iterable[str] | None = None) -> Iterable[ManifestEntry]:
    if ids is None:
        yield from manifest.entries
        return
    index = {e.id: e for e in manifest.entries}
    for i in ids:
        yield index[i]


def resolve(root: str | Path, rel: str | None) -> Path | None:
    return None if rel is None else Path(root) / rel


def load_pairs(manifest: DatasetManifest, root: str | Path, ids: Sequence[str]) -> list[tuple[str, np.ndarray, np.ndarray | None]]:
    out = []
    for e in iter_entries(manifest, ids):
        img = load_image(resolve(root, e.image))
        mask = load_mask(resolve(root, e.mask)) if (e.labeled and e.mask) else None
        out.append((e.id, img, mask))
    return out
