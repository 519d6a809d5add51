"""Image store and the one real image tool (normalized-box crop)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import ToolFailure

GRID = 1000


class ImageStore:
    """Maps image references to pixel arrays.

    References are opaque strings. Arrays produced during an episode live in
    memory; when ``out_dir`` is set they are also written there as PNG so the
    references in a corpus resolve to real files.
    """

    def __init__(self, root: str | os.PathLike | None = None, out_dir: str | os.PathLike | None = None):
        self.root = Path(root) if root else None
        self.out_dir = Path(out_dir) if out_dir else None
        self._arrays: dict[str, np.ndarray] = {}

    def put(self, ref: str, array: np.ndarray) -> str:
        self._arrays[ref] = array
        if self.out_dir is not None:
            from PIL import Image

            path = self.out_dir / ref
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(array).save(path)
        return ref

    def get(self, ref: str) -> np.ndarray:
        if ref in self._arrays:
            return self._arrays[ref]
        path = Path(ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        if not path.exists():
            raise ToolFailure(f"image {ref!r} not found")
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
        self._arrays[ref] = arr
        return arr


def box_to_pixels(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Map an ``[x1, y1, x2, y2]`` box on the 0-1000 grid to pixel bounds."""
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        raise ToolFailure("param must be a bounding box [x1, y1, x2, y2]")
    try:
        x1, y1, x2, y2 = (min(max(float(v), 0.0), GRID) for v in box)
    except (TypeError, ValueError):
        raise ToolFailure("bounding box coordinates must be numbers") from None
    return (
        int(round(x1 * width / GRID)),
        int(round(y1 * height / GRID)),
        int(round(x2 * width / GRID)),
        int(round(y2 * height / GRID)),
    )


def crop_normalized(image: np.ndarray, box) -> np.ndarray:
    h, w = image.shape[:2]
    px1, py1, px2, py2 = box_to_pixels(box, w, h)
    if px2 <= px1 or py2 <= py1:
        raise ToolFailure("ZoomIn failed: the crop region is empty.")
    return image[py1:py2, px1:px2].copy()
