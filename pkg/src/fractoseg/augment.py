"""Weak (geometric) and strong (photometric) augmentation pipelines.

Transforms take uint8 images (kept in [0, 255]) or float images in [0, 1]. Spatial
transforms are applied to the mask with identical parameters and nearest-neighbor
resampling. Borders are mirrored by default (``border='reflect'``), so a warped mask
only ever contains classes of its input; ``border='constant'`` fills with black /
background instead.

The Gaussian-noise ``var_limit`` is a variance bound on the [0, 1] intensity scale:
variance is drawn from U(0, var_limit) and the noise std is its square root.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import cv2
import numpy as np
import yaml

from .errors import ShapeMismatch, SpatialSpecInStrong, UnknownStrategy

SPATIAL_KINDS = ("affine", "rot90_flip", "grid_distortion")
PHOTOMETRIC_KINDS = ("brightness_contrast", "gaussian_noise", "channel_shuffle", "sharpen", "blur")
KINDS = SPATIAL_KINDS + PHOTOMETRIC_KINDS

DEFAULTS: dict[str, tuple[dict, float]] = {
    "affine": ({"shift_limit": 0.0625, "scale_limit": 0.1, "rotate_limit": 45.0, "border": "reflect"}, 0.25),
    "rot90_flip": ({}, 1.0),
    "grid_distortion": ({"num_steps": 5, "distort_limit": 0.3, "border": "reflect"}, 0.5),
    "sharpen": ({"alpha": (0.2, 0.5), "lightness": (0.5, 1.0)}, 0.25),
    "blur": ({"blur_limit": 7}, 0.2),
    "channel_shuffle": ({}, 1.0),
    "gaussian_noise": ({"var_limit": 0.05}, 0.1),
    "brightness_contrast": ({"brightness_limit": 0.2, "contrast_limit": 0.2}, 1.0),
}


@dataclass
class AugmentationSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    p: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        base, p = DEFAULTS[self.kind]
        merged = dict(base)
        merged.update(self.params)
        self.params = {k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()}
        self.p = p if self.p is None else float(self.p)
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    @property
    def spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p,
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(d["kind"], dict(d.get("params", {})), d.get("p"))


@dataclass
class StrategyConfig:
    name: str
    weak: list[AugmentationSpec]
    strong: list[AugmentationSpec]

    def __post_init__(self):
        bad = [s.kind for s in self.strong if s.spatial]
        if bad:
            raise SpatialSpecInStrong(f"strategy {self.name!r} has spatial transforms in its strong pipeline: {bad}")

    def to_dict(self) -> dict:
        return {"name": self.name,
                "weak": [s.to_dict() for s in self.weak],
                "strong": [s.to_dict() for s in self.strong]}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        return cls(d["name"],
                   [AugmentationSpec.from_dict(s) for s in d.get("weak", [])],
                   [AugmentationSpec.from_dict(s) for s in d.get("strong", [])])

    def dump(self, path: str | Path | None = None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def load(cls, source: str | Path) -> "StrategyConfig":
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        return cls.from_dict(yaml.safe_load(text))


# (affine, rot90_flip, grid) / (brightness_contrast, noise, shuffle, sharpen+blur)
_TABLE = {
    "REF":  ((0, 1, 0), (1, 0, 0, 0)),
    "HET0": ((0, 1, 0), (1, 0, 0, 0)),
    "HET1": ((1, 1, 1), (1, 0, 0, 0)),
    "HET2": ((1, 1, 1), (1, 1, 0, 0)),
    "HET3": ((1, 1, 1), (1, 1, 1, 0)),
    "HET4": ((1, 1, 1), (1, 1, 1, 1)),
    "HET5": ((1, 1, 1), (1, 0, 1, 1)),
    "HET6": ((1, 1, 1), (1, 0, 0, 1)),
    "HET7": ((1, 1, 1), (1, 1, 0, 1)),
    "HET8": ((1, 1, 1), (1, 0, 1, 0)),
}
BUILTIN_NAMES = tuple(_TABLE)


def builtin_strategy(name: str) -> StrategyConfig:
    """The augmentation grid used for the reference and HET0-HET8 models."""
    try:
        weak_flags, strong_flags = _TABLE[name]
    except KeyError:
        raise UnknownStrategy(name) from None
    weak = [AugmentationSpec(k) for k, on in zip(SPATIAL_KINDS, weak_flags) if on]
    strong_groups = (("brightness_contrast",), ("gaussian_noise",), ("channel_shuffle",), ("sharpen", "blur"))
    strong = [AugmentationSpec(k) for group, on in zip(strong_groups, strong_flags) if on for k in group]
    return StrategyConfig(name, weak, strong)


def resolve_strategy(strategy: str | dict | StrategyConfig) -> StrategyConfig:
    if isinstance(strategy, StrategyConfig):
        return strategy
    if isinstance(strategy, dict):
        return StrategyConfig.from_dict(strategy)
    return builtin_strategy(strategy)


# ---------------------------------------------------------------------------
# elementary transforms


def _finish(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return np.clip(out, 0.0, 1.0).astype(like.dtype)


def _max_value(img: np.ndarray) -> float:
    return 255.0 if img.dtype == np.uint8 else 1.0


def brightness_contrast(img: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """``img * alpha + beta * max_value``."""
    out = img.astype(np.float64) * alpha + beta * _max_value(img)
    return _finish(out, img)


def gaussian_noise(img: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = img.astype(np.float64) + noise * _max_value(img)
    return _finish(out, img)


def channel_shuffle(img: np.ndarray, perm) -> np.ndarray:
    return np.ascontiguousarray(img[..., list(perm)])


def sharpen(img: np.ndarray, alpha: float, lightness: float) -> np.ndarray:
    identity = np.zeros((3, 3))
    identity[1, 1] = 1.0
    effect = -np.ones((3, 3))
    effect[1, 1] = 8.0 + lightness
    kernel = (1 - alpha) * identity + alpha * effect
    out = cv2.filter2D(img.astype(np.float64), -1, kernel, borderType=cv2.BORDER_REFLECT_101)
    return _finish(out, img)


def box_blur(img: np.ndarray, ksize: int) -> np.ndarray:
    if ksize <= 1:
        return img.copy()
    out = cv2.blur(img.astype(np.float64), (ksize, ksize), borderType=cv2.BORDER_REFLECT_101)
    return _finish(out, img)


def rot90_flip(arr: np.ndarray, k: int, flip: int) -> np.ndarray:
    """Rotate by ``k`` quarter turns, then flip (0 none, 1 horizontal, 2 vertical)."""
    out = np.rot90(arr, k, axes=(0, 1))
    if flip == 1:
        out = out[:, ::-1]
    elif flip == 2:
        out = out[::-1]
    return np.ascontiguousarray(out)


def affine_matrix(shape, angle: float, scale: float, dx: float, dy: float) -> np.ndarray:
    h, w = shape[:2]
    m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, scale)
    m[0, 2] += dx * w
    m[1, 2] += dy * h
    return m


BORDERS = {"reflect": cv2.BORDER_REFLECT_101, "constant": cv2.BORDER_CONSTANT}


def warp_affine(arr: np.ndarray, matrix: np.ndarray, nearest: bool, border: str = "reflect") -> np.ndarray:
    h, w = arr.shape[:2]
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    src = arr if arr.dtype in (np.uint8, np.float32, np.float64) else arr.astype(np.float32)
    out = cv2.warpAffine(src, matrix, (w, h), flags=interp, borderMode=BORDERS[border], borderValue=0)
    return out.reshape(arr.shape).astype(arr.dtype)


def _grid_axis(size: int, steps: np.ndarray) -> np.ndarray:
    """Source coordinate for every destination index along one axis.

    The axis is cut into equal destination cells; the matching source cells are
    stretched by ``steps`` and renormalized to cover the full axis.
    """
    n = len(steps)
    widths = steps / steps.sum() * size
    src_edges = np.concatenate([[0.0], np.cumsum(widths)])
    dst_edges = np.linspace(0.0, size, n + 1)
    centers = np.arange(size) + 0.5
    return np.interp(centers, dst_edges, src_edges) - 0.5


def grid_distort(arr: np.ndarray, xsteps: np.ndarray, ysteps: np.ndarray, nearest: bool,
                 border: str = "reflect") -> np.ndarray:
    h, w = arr.shape[:2]
    map_x = np.tile(_grid_axis(w, np.asarray(xsteps)).astype(np.float32), (h, 1))
    map_y = np.tile(_grid_axis(h, np.asarray(ysteps)).astype(np.float32)[:, None], (1, w))
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.remap(arr, map_x, map_y, interp, borderMode=BORDERS[border], borderValue=0)
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# sampling


def _uniform(rng: np.random.Generator, bounds) -> float:
    if isinstance(bounds, (int, float)):
        return float(bounds)
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _sym(limit) -> tuple[float, float]:
    if isinstance(limit, (tuple, list)):
        return tuple(limit)
    return (-float(limit), float(limit))


def sample_params(spec: AugmentationSpec, rng: np.random.Generator, shape) -> dict:
    """Draw concrete parameters for one application. Keys already fixed in ``spec.params`` win."""
    p = spec.params
    k = spec.kind
    if k == "affine":
        out = {
            "angle": float(rng.uniform(*_sym(p["rotate_limit"]))),
            "scale": 1.0 + float(rng.uniform(*_sym(p["scale_limit"]))),
            "dx": float(rng.uniform(*_sym(p["shift_limit"]))),
            "dy": float(rng.uniform(*_sym(p["shift_limit"]))),
            "border": p["border"],
        }
    elif k == "rot90_flip":
        out = {"k": int(rng.integers(0, 4)), "flip": int(rng.integers(0, 3))}
    elif k == "grid_distortion":
        n = int(p["num_steps"])
        lo, hi = _sym(p["distort_limit"])
        out = {"xsteps": (1 + rng.uniform(lo, hi, n)).tolist(), "ysteps": (1 + rng.uniform(lo, hi, n)).tolist(),
               "border": p["border"]}
    elif k == "brightness_contrast":
        out = {"alpha": 1.0 + float(rng.uniform(*_sym(p["contrast_limit"]))),
               "beta": float(rng.uniform(*_sym(p["brightness_limit"])))}
    elif k == "gaussian_noise":
        limit = p["var_limit"]
        bounds = limit if isinstance(limit, tuple) else (0.0, float(limit))
        out = {"var": _uniform(rng, bounds), "noise_seed": int(rng.integers(0, 2**31 - 1))}
    elif k == "channel_shuffle":
        out = {"perm": rng.permutation(3).tolist()}
    elif k == "sharpen":
        out = {"alpha": _uniform(rng, p["alpha"]), "lightness": _uniform(rng, p["lightness"])}
    elif k == "blur":
        limit = p["blur_limit"]
        lo, hi = (3, int(limit)) if isinstance(limit, (int, float)) else tuple(int(v) for v in limit)
        choices = [s for s in range(lo, hi + 1) if s % 2 == 1]
        out = {"ksize": int(rng.choice(choices))}
    else:  # pragma: no cover
        raise ValueError(k)
    for key in out:
        # sharpen's alpha/lightness double as range parameters; only scalars pin them
        if key in p and not (k == "sharpen" and isinstance(p[key], tuple)):
            out[key] = p[key]
    return out


def apply_image(kind: str, img: np.ndarray, params: dict) -> np.ndarray:
    if kind == "affine":
        m = affine_matrix(img.shape, params["angle"], params["scale"], params["dx"], params["dy"])
        return warp_affine(img, m, nearest=False, border=params.get("border", "reflect"))
    if kind == "rot90_flip":
        return rot90_flip(img, params["k"], params["flip"])
    if kind == "grid_distortion":
        return grid_distort(img, params["xsteps"], params["ysteps"], nearest=False, border=params.get("border", "reflect"))
    if kind == "brightness_contrast":
        return brightness_contrast(img, params["alpha"], params["beta"])
    if kind == "gaussian_noise":
        noise = np.random.default_rng(params["noise_seed"]).normal(0.0, np.sqrt(params["var"]), img.shape)
        return gaussian_noise(img, noise)
    if kind == "channel_shuffle":
        return channel_shuffle(img, params["perm"])
    if kind == "sharpen":
        return sharpen(img, params["alpha"], params["lightness"])
    if kind == "blur":
        return box_blur(img, params["ksize"])
    raise ValueError(kind)


def apply_mask(kind: str, mask: np.ndarray, params: dict) -> np.ndarray:
    if kind == "affine":
        m = affine_matrix(mask.shape, params["angle"], params["scale"], params["dx"], params["dy"])
        return warp_affine(mask, m, nearest=True, border=params.get("border", "reflect"))
    if kind == "rot90_flip":
        return rot90_flip(mask, params["k"], params["flip"])
    if kind == "grid_distortion":
        return grid_distort(mask, params["xsteps"], params["ysteps"], nearest=True, border=params.get("border", "reflect"))
    return mask


@dataclass
class AugmentedSample:
    image: np.ndarray
    mask: np.ndarray | None
    applied: list[tuple[str, dict]] = field(default_factory=list)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def apply_weak(image: np.ndarray, mask: np.ndarray | None, strategy: StrategyConfig, seed) -> AugmentedSample:
    """Run the spatial (weak) pipeline; every spec fires independently with its p."""
    if mask is not None and mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"image {image.shape[:2]} vs mask {mask.shape}")
    rng = _rng(seed)
    img, msk, applied = image, mask, []
    for spec in strategy.weak:
        fire = rng.random() < spec.p
        if not fire:
            continue
        params = sample_params(spec, rng, img.shape)
        img = apply_image(spec.kind, img, params)
        if msk is not None:
            msk = apply_mask(spec.kind, msk, params)
        applied.append((spec.kind, params))
    if img is image:
        img = image.copy()
    if msk is not None and msk is mask:
        msk = mask.copy()
    return AugmentedSample(img, msk, applied)


def apply_strong(sample: AugmentedSample, strategy: StrategyConfig, seed) -> AugmentedSample:
    """Run the photometric (strong) pipeline on a weak view. The mask is passed through untouched."""
    bad = [s.kind for s in strategy.strong if s.spatial]
    if bad:
        raise SpatialSpecInStrong(f"spatial transforms in strong pipeline: {bad}")
    rng = _rng(seed)
    img, applied = sample.image, list(sample.applied)
    for spec in strategy.strong:
        if rng.random() >= spec.p:
            continue
        params = sample_params(spec, rng, img.shape)
        img = apply_image(spec.kind, img, params)
        applied.append((spec.kind, params))
    if img is sample.image:
        img = img.copy()
    return AugmentedSample(img, sample.mask, applied)


def sample_seed(global_seed: int, epoch: int, sample_id: int, stream: int) -> np.random.SeedSequence:
    """Independent per-sample RNG stream for (seed, epoch, sample, stream)."""
    return np.random.SeedSequence([int(global_seed), int(epoch), int(sample_id), int(stream)])


def with_probability(strategy: StrategyConfig, p: float) -> StrategyConfig:
    """Copy of ``strategy`` with every spec's probability forced to ``p``."""
    s = copy.deepcopy(strategy)
    for spec in s.weak + s.strong:
        spec.p = float(p)
    return s


def describe(sample: AugmentedSample) -> str:
    return json.dumps([[k, p] for k, p in sample.applied])
