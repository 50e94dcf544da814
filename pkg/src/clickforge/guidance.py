"""Clicks, binary-disk guidance maps, and the simulated annotator.

The robot clicker implements the usual NoC protocol: find the largest
misclassified region (4-connected), then click the pixel of that region
farthest from its boundary. The image border counts as boundary, and all
ties break toward the smallest row-major pixel index so evaluation runs are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import _as_array

POSITIVE = "positive"
NEGATIVE = "negative"

DISK_RADIUS = 5

# 4-connectivity for error components
_STRUCT4 = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Click:
    row: int
    col: int
    polarity: str
    ordinal: int

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be positive|negative, got {self.polarity!r}")
        if self.ordinal < 1:
            raise ValueError("click ordinals are 1-based")


@dataclass(eq=False)
class GuidanceMaps:
    """Rendered click disks: positive (c_f) and negative (c_b) binary maps."""

    positive: np.ndarray
    negative: np.ndarray

    @property
    def height(self):
        return self.positive.shape[0]

    @property
    def width(self):
        return self.positive.shape[1]


def render_disks(clicks, height, width, radius: int = DISK_RADIUS) -> GuidanceMaps:
    """Rasterize clicks into per-polarity binary disk maps.

    Pixel (i, j) is set iff (i - row)^2 + (j - col)^2 <= radius^2 for some
    click of that polarity; disks clip at the image border.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    pos = np.zeros((height, width), dtype=np.uint8)
    neg = np.zeros((height, width), dtype=np.uint8)
    rows = np.arange(height)
    cols = np.arange(width)
    for click in clicks:
        if not (0 <= click.row < height and 0 <= click.col < width):
            raise ValueError(f"click at ({click.row}, {click.col}) is outside "
                             f"a {height}x{width} image")
        disk = ((rows[:, None] - click.row) ** 2
                + (cols[None, :] - click.col) ** 2) <= radius * radius
        if click.polarity == POSITIVE:
            pos |= disk
        else:
            neg |= disk
    return GuidanceMaps(pos, neg)


def _largest_component(mask):
    """(area, component mask) of the largest 4-connected component.

    Equal areas resolve to the component whose first pixel comes earliest in
    row-major order (labels are assigned in scan order, argmax picks the
    smallest label among maxima).
    """
    labels, n = ndimage.label(mask, structure=_STRUCT4)
    if n == 0:
        return 0, None
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    return int(areas[best - 1]), labels == best


def _interior_pixel(component):
    """Pixel of the component farthest from its boundary (border counts)."""
    padded = np.pad(component, 1, mode="constant")
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    flat = np.where(component, dist, -1.0).ravel()
    idx = int(np.argmax(flat))  # first max in row-major order
    return idx // component.shape[1], idx % component.shape[1]


def next_robot_click(pred, gt, ordinal: int = 1) -> Click:
    """Next corrective click for a prediction against ground truth.

    Positive click in the largest false-negative component when it is at
    least as large as the largest false-positive component, else a negative
    click in the false-positive component.
    """
    p = _as_array(pred).astype(bool)
    g = _as_array(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if np.array_equal(p, g):
        raise ValueError("prediction equals ground truth; no click needed")
    fn_area, fn_comp = _largest_component(g & ~p)
    fp_area, fp_comp = _largest_component(p & ~g)
    if fn_area >= fp_area and fn_comp is not None:
        row, col = _interior_pixel(fn_comp)
        return Click(row, col, POSITIVE, ordinal)
    row, col = _interior_pixel(fp_comp)
    return Click(row, col, NEGATIVE, ordinal)


def sample_training_clicks(gt, rng_seed) -> list:
    """Sample 1-10 clicks for a training step, deterministic per seed.

    Positive clicks come from the eroded foreground (falling back to the
    full foreground for thin objects); negative clicks from the background,
    half of them restricted to a band around the object. A full-frame
    foreground yields no negative clicks.
    """
    g = _as_array(gt).astype(bool)
    if not g.any():
        raise ValueError("cannot sample clicks for an empty mask")
    rng = np.random.default_rng(rng_seed)
    n_total = int(rng.integers(1, 11))
    n_pos = int(rng.integers(1, n_total + 1))
    n_neg = n_total - n_pos

    eroded = ndimage.binary_erosion(g, structure=_STRUCT4, iterations=2)
    pos_pool = np.flatnonzero(eroded if eroded.any() else g)
    picks = list(rng.choice(pos_pool, size=n_pos, replace=len(pos_pool) < n_pos))
    if rng.random() < 0.5:
        # anchor the first click at the interior-most pixel, mirroring how
        # an annotator (and the robot clicker) opens a session
        row, col = _interior_pixel(g)
        picks[0] = row * g.shape[1] + col

    background = ~g
    band = ndimage.binary_dilation(g, structure=_STRUCT4, iterations=10) & background
    neg_picks = []
    for _ in range(n_neg):
        pool = band if band.any() and rng.random() < 0.5 else background
        flat = np.flatnonzero(pool)
        if flat.size == 0:
            continue
        neg_picks.append(int(rng.choice(flat)))

    w = g.shape[1]
    clicks = []
    for flat_idx in picks:
        clicks.append(Click(int(flat_idx) // w, int(flat_idx) % w,
                            POSITIVE, len(clicks) + 1))
    for flat_idx in neg_picks:
        clicks.append(Click(flat_idx // w, flat_idx % w,
                            NEGATIVE, len(clicks) + 1))
    return clicks
