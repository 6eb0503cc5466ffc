"""Procedural fracture-surface images with exact ground-truth masks.

A specimen is a rectangle on a background. Seen from the notch side it shows, top to
bottom: an optional "other" band (e.g. knife edges), the erosion notch, the fatigue
precrack with a (possibly curved) front, a ductile band that follows the front and
brittle fracture down to the back face. Side grooves are vertical strips on both
flanks. Artifacts (stains, engravings, scratches) change pixels but never labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (
    BRITTLE,
    DUCTILE,
    EROSION_NOTCH,
    FATIGUE_PRECRACK,
    OTHER,
    SIDE_GROOVE,
    DatasetManifest,
    ImageRecord,
    ManifestEntry,
    save_image,
    save_mask,
)
from .errors import InvalidProfile, InvalidSpec
from .measure import SpecimenGeometry

KINDS = ("SEB", "CT", "miniCT", "chevron")
BACKGROUNDS = ("flat", "gradient", "cluttered")
FRONT_SHAPES = ("flat", "thumbnail", "sine", "chevron")
ARTIFACTS = ("stain", "engraving", "scratch")


@dataclass(frozen=True)
class Lab:
    """Imaging conditions of one (virtual) laboratory."""

    name: str
    tone: float  # base metal luminance
    cast: tuple[float, float, float]
    gain: float
    gradient: float  # strength of the illumination gradient
    background: tuple[float, float, float]
    background_style: str
    contrast: float = 1.0
    blur: float = 0.0


LABS = (
    Lab("lab_a", 0.50, (0.95, 1.00, 1.08), 1.00, 0.10, (0.12, 0.25, 0.65), "flat"),
    Lab("lab_b", 0.62, (1.10, 1.00, 0.85), 1.10, 0.35, (0.85, 0.85, 0.80), "gradient", 0.8),
    Lab("lab_c", 0.38, (0.90, 1.05, 1.00), 0.85, 0.20, (0.10, 0.10, 0.10), "flat", 1.3),
    Lab("lab_d", 0.55, (1.00, 0.95, 1.00), 1.00, 0.45, (0.45, 0.30, 0.20), "cluttered", 0.9, 0.8),
    Lab("lab_e", 0.45, (1.15, 0.95, 0.80), 1.20, 0.25, (0.20, 0.45, 0.25), "gradient", 1.2),
    Lab("lab_f", 0.68, (0.85, 0.95, 1.15), 0.90, 0.30, (0.60, 0.60, 0.65), "cluttered", 0.7, 0.6),
)
LAB_INDEX = {lab.name: lab for lab in LABS}


@dataclass
class SynthSpec:
    specimen_kind: str = "SEB"
    size: tuple[int, int] = (128, 128)
    box: tuple[int, int, int, int] | None = None  # top, left, height, width of the specimen
    notch: int = 30
    precrack: int = 16
    curvature: float = 0.0
    front_shape: str = "flat"
    ductile: int = 10
    other: int = 0
    side_groove: int = 8
    background: str = "flat"
    lab: str = "lab_a"
    texture: float = 1.0
    sensor_noise: float = 0.01
    artifacts: tuple[str, ...] = ()
    scale: float = 0.2  # mm per pixel
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        if h < 64 or w < 64:
            raise InvalidSpec(f"image must be at least 64x64, got {self.size}")
        if self.specimen_kind not in KINDS:
            raise InvalidSpec(f"unknown specimen kind {self.specimen_kind!r}")
        if self.front_shape not in FRONT_SHAPES:
            raise InvalidSpec(f"unknown front shape {self.front_shape!r}")
        if self.background not in BACKGROUNDS:
            raise InvalidSpec(f"unknown background {self.background!r}")
        if self.lab not in LAB_INDEX:
            raise InvalidSpec(f"unknown lab {self.lab!r}")
        if any(a not in ARTIFACTS for a in self.artifacts):
            raise InvalidSpec(f"unknown artifacts {self.artifacts}")
        if self.specimen_kind == "chevron" and self.side_groove:
            raise InvalidSpec("chevron specimens have no side grooves")
        if min(self.notch, self.precrack) < 1 or min(self.ductile, self.other, self.side_groove) < 0:
            raise InvalidSpec("band depths must be positive (ductile/other/side_groove may be 0)")
        if self.curvature < 0 or (self.front_shape == "sine" and self.curvature >= self.precrack):
            raise InvalidSpec("curvature must be >= 0 and keep the front below the notch")
        top, left, hs, ws = self.specimen_box()
        if top < 0 or left < 0 or top + hs > h or left + ws > w:
            raise InvalidSpec("specimen box outside the image")
        if self.other + self.notch + self.precrack + math.ceil(self.curvature) + self.ductile > hs:
            raise InvalidSpec("band depths exceed the specimen height")
        if ws - 2 * self.side_groove < 8:
            raise InvalidSpec("net section narrower than 8 px")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidSpec("scale must be positive")

    def specimen_box(self) -> tuple[int, int, int, int]:
        if self.box is not None:
            return tuple(self.box)
        h, w = self.size
        mt, ml = round(h * 0.1), round(w * 0.12)
        return mt, ml, h - 2 * mt, w - 2 * ml


@dataclass
class SynthSample:
    record: ImageRecord
    mask: np.ndarray
    geometry: SpecimenGeometry
    true_a0_px: float
    spec: SynthSpec

    @property
    def true_a0(self) -> float:
        return self.true_a0_px * self.spec.scale


def front_profile(spec: SynthSpec, net_width: int) -> np.ndarray:
    """Continuous precrack depth below the notch for each net-section column."""
    x = (np.arange(net_width) + 0.5) / net_width
    u = 2 * x - 1
    a, d = spec.curvature, float(spec.precrack)
    if spec.front_shape == "flat":
        return np.full(net_width, d)
    if spec.front_shape == "thumbnail":
        return d + a * (1 - u * u)
    if spec.front_shape == "sine":
        return d + a * np.sin(2 * np.pi * x)
    return d + a * (1 - np.abs(u))


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(int)


def layout(spec: SynthSpec) -> tuple[np.ndarray, float]:
    """Exact label map and the true a0 in pixels (notch depth + mean continuous front depth)."""
    spec.validate()
    h, w = spec.size
    top, left, hs, ws = spec.specimen_box()
    g = spec.side_groove
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top:top + hs, left:left + ws] = BRITTLE
    if g:
        mask[top:top + hs, left:left + g] = SIDE_GROOVE
        mask[top:top + hs, left + ws - g:left + ws] = SIDE_GROOVE
    c0, c1 = left + g, left + ws - g
    net = c1 - c0
    profile = front_profile(spec, net)
    depth = _round_half_up(profile)
    rows = np.arange(h)[:, None]
    notch_top = top + spec.other
    notch_end = notch_top + spec.notch
    front = notch_end + depth[None, :]
    sub = mask[:, c0:c1]
    if spec.other:
        sub[(rows >= top) & (rows < notch_top) & np.ones((1, net), bool)] = OTHER
    sub[(rows >= notch_top) & (rows < notch_end) & np.ones((1, net), bool)] = EROSION_NOTCH
    sub[(rows >= notch_end) & (rows < front)] = FATIGUE_PRECRACK
    if spec.ductile:
        sub[(rows >= front) & (rows < np.minimum(front + spec.ductile, top + hs))] = DUCTILE
    return mask, spec.notch + float(profile.mean())


# ---------------------------------------------------------------------------
# rendering


def _noise(rng, shape, sigma, amp):
    if amp == 0:
        return np.zeros(shape)
    n = gaussian_filter(rng.standard_normal(shape), sigma) if sigma > 0 else rng.standard_normal(shape)
    s = n.std()
    return n / s * amp if s > 0 else n


def _background(rng, spec: SynthSpec, lab: Lab, shape) -> np.ndarray:
    h, w = shape
    base = np.array(lab.background) * rng.uniform(0.85, 1.15, 3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    if spec.background == "gradient":
        other = np.clip(base * rng.uniform(0.4, 1.6, 3), 0, 1)
        t = np.linspace(0, 1, h)[:, None, None] if rng.random() < 0.5 else np.linspace(0, 1, w)[None, :, None]
        img = img * (1 - t) + other * t
    elif spec.background == "cluttered":
        for _ in range(rng.integers(3, 7)):
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            rh, cw = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
            img[r0:r0 + rh, c0:c0 + cw] = rng.uniform(0.1, 0.9, 3)
        img += _noise(rng, (h, w), 3.0, 0.05)[..., None]
    return img + _noise(rng, (h, w), 1.0, 0.02)[..., None]


def _class_layers(rng, spec: SynthSpec, lab: Lab, shape):
    """Luminance and tint of every class region, plus its texture field."""
    h, w = shape
    t = spec.texture
    tone = lab.tone * rng.uniform(0.9, 1.1)
    yy = np.arange(h)[:, None] * np.ones((1, w))
    xx = np.ones((h, 1)) * np.arange(w)[None, :]
    machining = np.sin(yy * rng.uniform(1.2, 2.0) + rng.uniform(0, 6)) * 0.03
    streaks = _noise(rng, (1, w), 0.8, 0.04).repeat(h, 0)
    beach = np.sin(yy * 0.9 + 0.6 * np.sin(xx / 9.0)) * 0.02
    facets = np.kron(rng.uniform(-1, 1, (h // 3 + 1, w // 3 + 1)), np.ones((3, 3)))[:h, :w]
    return {
        SIDE_GROOVE: (tone * 0.55, (1.0, 1.0, 1.0), t * (streaks + _noise(rng, shape, 1.0, 0.02))),
        EROSION_NOTCH: (tone * 0.80, (1.0, 1.0, 1.0), t * (machining + _noise(rng, shape, 0.8, 0.02))),
        FATIGUE_PRECRACK: (tone * 0.68, (1.06, 0.97, 0.86), t * (beach + _noise(rng, shape, 0.7, 0.025))),
        DUCTILE: (tone * 0.88, (1.0, 0.98, 0.96), t * _noise(rng, shape, 2.2, 0.10)),
        BRITTLE: (tone * 1.18, (1.0, 1.0, 1.02), t * (0.10 * facets + _noise(rng, shape, 0.5, 0.06))),
        OTHER: (tone * 1.40, (0.98, 1.0, 1.04), t * (0.5 * machining + _noise(rng, shape, 1.2, 0.02))),
    }


def _stamp_artifacts(rng, img, spec: SynthSpec, box):
    h, w = img.shape[:2]
    top, left, hs, ws = box
    yy, xx = np.mgrid[0:h, 0:w]
    for art in spec.artifacts:
        if art == "stain":
            cy, cx = rng.uniform(top, top + hs), rng.uniform(left, left + ws)
            ry, rx = rng.uniform(3, hs / 4), rng.uniform(3, ws / 4)
            blob = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
            color = np.array(rng.choice([[0.55, 0.35, 0.15], [0.75, 0.75, 0.8], [0.3, 0.2, 0.1]]))
            a = 0.55 * blob[..., None]
            img = img * (1 - a) + color * a
        elif art == "engraving":
            for _ in range(rng.integers(3, 6)):
                r = int(rng.integers(top + hs * 2 // 3, top + hs - 2))
                c = int(rng.integers(left, left + ws - 6))
                img[r:r + 1, c:c + int(rng.integers(2, 6))] *= 0.4
                img[r - 3:r + 1, c:c + 1] *= 0.4
        elif art == "scratch":
            r0, r1 = rng.uniform(0, h, 2)
            t = np.linspace(0, 1, 4 * w)
            rows = np.clip((r0 + (r1 - r0) * t).astype(int), 0, h - 1)
            cols = np.clip((t * (w - 1)).astype(int), 0, w - 1)
            img[rows, cols] = np.minimum(img[rows, cols] + 0.35, 1.0)
    return img


def render(spec: SynthSpec, mask: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    lab = LAB_INDEX[spec.lab]
    h, w = mask.shape
    img = _background(rng, spec, lab, (h, w))
    for cls, (lum, tint, tex) in _class_layers(rng, spec, lab, (h, w)).items():
        sel = mask == cls
        if sel.any():
            val = np.clip(lum + tex, 0, 1)[..., None] * np.array(tint)
            img[sel] = val[sel]
    # illumination: gradient, gain, contrast, color cast
    direction = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = ((xx / w - 0.5) * np.cos(direction) + (yy / h - 0.5) * np.sin(direction))
    img = img * (1 + lab.gradient * rng.uniform(0.5, 1.0) * ramp)[..., None]
    img = (img - 0.5) * lab.contrast * rng.uniform(0.9, 1.1) + 0.5
    img = img * lab.gain * rng.uniform(0.92, 1.08) * np.array(lab.cast) * rng.uniform(0.95, 1.05, 3)
    img = _stamp_artifacts(rng, img, spec, spec.specimen_box())
    if lab.blur > 0:
        img = gaussian_filter(img, (lab.blur, lab.blur, 0))
    img = img + rng.normal(0, spec.sensor_noise, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def generate(spec: SynthSpec, record_id: str | None = None, labeled: bool = True) -> SynthSample:
    """Render one specimen; the mask is exact by construction."""
    mask, a0_px = layout(spec)
    pixels = render(spec, mask)
    top, left, hs, ws = spec.specimen_box()
    geom = SpecimenGeometry(
        W=hs * spec.scale,
        B=ws * spec.scale,
        B_N=(ws - 2 * spec.side_groove) * spec.scale,
        a_k=spec.notch * spec.scale,
        orientation="rows",
    )
    rid = record_id or f"synth_{spec.seed}"
    record = ImageRecord(rid, pixels, scale=spec.scale, domain_tag=f"{spec.lab}/{spec.specimen_kind}", labeled=labeled)
    return SynthSample(record, mask, geom, a0_px, spec)


# ---------------------------------------------------------------------------
# dataset profiles

PROFILES = ("HOM", "HET", "HAR")


def _profile_key(profile: str) -> str:
    key = profile.upper().replace("-LIKE", "").replace("_LIKE", "")
    if key not in PROFILES:
        raise InvalidProfile(f"unknown profile {profile!r}; expected one of {PROFILES}")
    return key


def random_spec(profile: str, rng: np.random.Generator, size: tuple[int, int] | None = None) -> SynthSpec:
    """Draw a specimen description typical for a dataset profile."""
    key = _profile_key(profile)
    if key == "HOM":
        kind, lab, background = "SEB", LABS[0], "flat"
        size = size or (128, 128)
        artifacts = tuple(a for a in ("engraving",) if rng.random() < 0.5)
    else:
        kinds = KINDS if key == "HET" else ("SEB", "CT")
        labs = LABS if key == "HET" else LABS[:3]
        kind = str(rng.choice(kinds))
        lab = labs[int(rng.integers(len(labs)))]
        background = lab.background_style if key == "HAR" else str(rng.choice(BACKGROUNDS))
        if size is None:
            side = int(rng.integers(112, 177))
            size = (side, int(side * rng.uniform(0.9, 1.2)))
        artifacts = tuple(a for a in ARTIFACTS if rng.random() < 0.3)
    h, w = size
    if kind == "miniCT":
        fh, fw = rng.uniform(0.45, 0.6), rng.uniform(0.4, 0.55)
    else:
        fh, fw = rng.uniform(0.7, 0.82), rng.uniform(0.6, 0.78)
    hs, ws = int(h * fh), int(w * fw)
    top = int(rng.integers(2, max(h - hs - 2, 3)))
    left = int(rng.integers(2, max(w - ws - 2, 3)))
    side_groove = 0 if kind == "chevron" else int(round(ws * rng.uniform(0.07, 0.12)))
    other = int(round(hs * rng.uniform(0.06, 0.1))) if kind in ("CT", "miniCT") else 0
    ratio = float(rng.choice([0.3, 0.5])) if key == "HOM" else rng.uniform(0.3, 0.6)
    a0 = ratio * hs
    notch = max(int(round(a0 * rng.uniform(0.55, 0.7))), 2)
    precrack = max(int(round(a0 - notch)), 3)
    shape = "chevron" if kind == "chevron" else "thumbnail"
    curvature = float(rng.uniform(0, 0.25) * precrack)
    ductile = int(round(hs * rng.uniform(0.0, 0.12))) if rng.random() < 0.8 else 0
    room = hs - other - notch - precrack - math.ceil(curvature)
    ductile = max(0, min(ductile, room - 2))
    return SynthSpec(
        specimen_kind=kind, size=(h, w), box=(top, left, hs, ws), notch=notch, precrack=precrack,
        curvature=curvature, front_shape=shape, ductile=ductile, other=other, side_groove=side_groove,
        background=background, lab=lab.name, artifacts=artifacts, scale=20.0 / ws,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def labeled_count(n: int, ratio: float) -> int:
    """Number of labeled items for a target unlabeled/labeled ratio (round half up, at least 1)."""
    return max(1, int(math.floor(n / (1 + ratio) + 0.5)))


def generate_dataset(profile: str, n: int, seed: int = 0, ratio: float = 5.25,
                     size: tuple[int, int] | None = None, out_dir: str | Path | None = None,
                     n_labeled: int | None = None) -> tuple[DatasetManifest, list[SynthSample]]:
    """Generate ``n`` samples of a profile; the first ``n_labeled`` (default from ``ratio``) are labeled."""
    key = _profile_key(profile)
    if n < 4:
        raise InvalidSpec("need n >= 4")
    rng = np.random.default_rng(seed)
    n_lab = labeled_count(n, ratio) if n_labeled is None else int(n_labeled)
    samples, entries = [], []
    for i in range(n):
        spec = random_spec(key, rng, size)
        rid = f"{key.lower()}_{seed}_{i:04d}"
        s = generate(spec, rid, labeled=i < n_lab)
        samples.append(s)
        entries.append(ManifestEntry(
            id=rid, domain_tag=s.record.domain_tag.split("/")[0] if key != "HOM" else s.record.domain_tag,
            labeled=i < n_lab, image=f"images/{rid}.png", mask=f"masks/{rid}.png" if i < n_lab else None,
            meta=f"meta/{rid}.json",
        ))
    manifest = DatasetManifest(f"{key}-like", entries)
    if out_dir is not None:
        write_dataset(manifest, samples, out_dir)
    return manifest, samples


def sample_meta(s: SynthSample) -> dict:
    spec = asdict(s.spec)
    return {
        "id": s.record.id,
        "scale": s.spec.scale,
        "geometry": asdict(s.geometry),
        "reference_a0": s.true_a0,
        "reference_a0_px": s.true_a0_px,
        "spec": spec,
    }


def write_dataset(manifest: DatasetManifest, samples: list[SynthSample], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    for sub in ("images", "masks", "meta"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for e, s in zip(manifest.entries, samples):
        save_image(out / e.image, s.record.pixels)
        # every mask is written so synthetic runs can be scored, but only labeled
        # entries reference theirs in the manifest
        save_mask(out / "masks" / f"{e.id}.png", s.mask)
        (out / e.meta).write_text(json.dumps(sample_meta(s), indent=2))
    manifest.save(out / "manifest.json")
    return out
