"""2x2 patch slicing with resizing, and stitching of per-patch predictions."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import GridMismatch, TooSmall


@dataclass(frozen=True)
class PatchGrid:
    original_size: tuple[int, int]
    patch_size: tuple[int, int]
    rects: tuple[tuple[int, int, int, int], ...]  # (row0, row1, col0, col1), row-major order


def make_grid(height: int, width: int, patch_size=(512, 512)) -> PatchGrid:
    if height < 2 or width < 2:
        raise TooSmall(f"need at least 2x2 pixels, got {height}x{width}")
    if isinstance(patch_size, int):
        patch_size = (patch_size, patch_size)
    rh = -(-height // 2)  # ceil
    cw = -(-width // 2)
    rects = tuple(
        (r0, r1, c0, c1)
        for r0, r1 in ((0, rh), (rh, height))
        for c0, c1 in ((0, cw), (cw, width))
    )
    return PatchGrid((height, width), tuple(patch_size), rects)


def resize_nearest(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Center-aligned nearest-neighbor resize (exact inverse for integer up/down factors)."""
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.copy()
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return arr[rows[:, None], cols[None, :]]


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.copy()
    dtype = arr.dtype
    work = arr.astype(np.float32) if dtype not in (np.uint8, np.float32) else arr
    if work.ndim == 3 and work.shape[2] > 4:
        # cv2 handles many channels, but keep the layout explicit
        out = np.stack([cv2.resize(work[..., c], (width, height), interpolation=cv2.INTER_LINEAR)
                        for c in range(work.shape[2])], axis=-1)
    else:
        out = cv2.resize(work, (width, height), interpolation=cv2.INTER_LINEAR)
        if work.ndim == 3 and out.ndim == 2:
            out = out[..., None]
    return out.astype(dtype, copy=False)


def slice_patches(arr: np.ndarray, patch_size=(512, 512), kind: str = "image") -> tuple[PatchGrid, list[np.ndarray]]:
    """Cut into 4 quadrants (ceil/floor split) and resize each to ``patch_size``.

    ``kind='image'`` resizes bilinearly, ``kind='mask'`` nearest-neighbor.
    """
    grid = make_grid(arr.shape[0], arr.shape[1], patch_size)
    ph, pw = grid.patch_size
    resize = resize_nearest if kind == "mask" else resize_bilinear
    patches = [resize(arr[r0:r1, c0:c1], ph, pw) for r0, r1, c0, c1 in grid.rects]
    return grid, patches


def stitch(grid: PatchGrid, patches, kind: str = "logits") -> np.ndarray:
    """Resize each patch back to its source rectangle and reassemble.

    ``kind='logits'`` (HxWxC scores) resizes bilinearly; ``kind='labels'`` nearest-neighbor.
    """
    patches = list(patches)
    if len(patches) != len(grid.rects):
        raise GridMismatch(f"expected {len(grid.rects)} patches, got {len(patches)}")
    for p in patches:
        if tuple(p.shape[:2]) != tuple(grid.patch_size):
            raise GridMismatch(f"patch shape {p.shape[:2]} != {grid.patch_size}")
    extra = patches[0].shape[2:]
    out = np.zeros(tuple(grid.original_size) + tuple(extra), dtype=patches[0].dtype)
    resize = resize_nearest if kind == "labels" else resize_bilinear
    for (r0, r1, c0, c1), p in zip(grid.rects, patches):
        out[r0:r1, c0:c1] = resize(p, r1 - r0, c1 - c0)
    return out
