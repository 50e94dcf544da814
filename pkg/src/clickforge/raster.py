"""Image and mask representation, IoU, synthetic domains, dataset I/O.

Images are (H, W, 3) float32 arrays with values on the 8-bit grid k/255 so
that PNG round-trips are bit-exact. Masks are (H, W) uint8 arrays with values
in {0, 1}. Everything here is a pure function of its inputs; dataset
generation is a pure function of the DomainSpec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MIN_SIDE = 16
PROB_EPS = 1e-7

DOMAIN_KINDS = ("source", "shifted", "changed")


def _as_array(obj):
    """Accept a wrapper dataclass (with an ndarray .data) or a bare array."""
    if isinstance(obj, np.ndarray):
        return obj
    data = getattr(obj, "data", None)
    if isinstance(data, np.ndarray):
        return data
    return np.asarray(obj)


@dataclass(eq=False)
class RasterImage:
    """An RGB image, values in [0, 1], at least 16 pixels per side."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.data.shape}")
        h, w = self.data.shape[:2]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return 3


@dataclass(eq=False)
class Mask:
    """A binary (H, W) mask with values exactly {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.data.shape}")
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"mask values must be binary, found {vals[:8]}")
        self.data = self.data.astype(np.uint8)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(eq=False)
class ProbMap:
    """Per-pixel confidence, clamped into (0, 1) by PROB_EPS at construction."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"prob map must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("prob map contains non-finite values")
        self.data = np.clip(self.data, PROB_EPS, 1.0 - PROB_EPS)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def binarize(probs, threshold: float = 0.5) -> Mask:
    """Threshold a probability map into a Mask (strictly greater than)."""
    p = _as_array(probs)
    return Mask((p > threshold).astype(np.uint8))


def iou(a, b) -> float:
    """Intersection over union of two binary masks.

    Two empty masks count as a perfect match (1.0); empty vs nonempty is 0.
    """
    am = _as_array(a).astype(bool)
    bm = _as_array(b).astype(bool)
    if am.shape != bm.shape:
        raise ValueError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(am, bm).sum()
    return float(inter) / float(union)


# ---------------------------------------------------------------------------
# Synthetic domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain; the seed fully determines content.

    kind "source":  filled ellipses/convex polygons, bright on a darker
                    smooth background, light noise.
    kind "shifted": same shape family, inverted/permuted color statistics
                    and stronger texture.
    kind "changed": thin elongated dark bars on a bright textured background
                    (different topology and appearance).
    """

    kind: str = "source"
    height: int = 64
    width: int = 64
    seed: int = 0
    # Shape scale as a fraction of min(height, width); zero-area specs are
    # rejected. (lo, hi) bounds for the dominant axis.
    shape_scale: tuple = (0.18, 0.28)
    bar_width: tuple = (9.0, 14.0)
    noise: float = field(default=-1.0)  # -1 -> per-kind default
    texture: float = field(default=-1.0)
    contrast_range: tuple = ()  # per-kind default when empty
    bg_range: tuple = ()

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise ValueError("domain images must be at least 16 pixels per side")
        if min(self.shape_scale) <= 0 or min(self.bar_width) <= 0:
            raise ValueError("degenerate spec: zero-area shapes")

    def resolved_noise(self):
        if self.noise >= 0:
            return self.noise
        return {"source": 0.02, "shifted": 0.06, "changed": 0.03}[self.kind]

    def resolved_texture(self):
        if self.texture >= 0:
            return self.texture
        return {"source": 0.0, "shifted": 0.08, "changed": 0.08}[self.kind]

    def resolved_contrast(self):
        """(lo, hi) magnitude of the shape-vs-background level difference.

        Source shapes sit clearly above or below their background (random
        sign per shape); changed-domain bars are consistently darker with a
        weaker separation.
        """
        if self.contrast_range:
            return self.contrast_range
        return {"source": (0.20, 0.45), "shifted": (0.20, 0.45),
                "changed": (0.14, 0.26)}[self.kind]

    def resolved_bg(self):
        if self.bg_range:
            return self.bg_range
        return {"source": (0.20, 0.80), "shifted": (0.20, 0.80),
                "changed": (0.45, 0.78)}[self.kind]


def rasterize_ellipse(height, width, cy, cx, a, b, theta=0.0) -> np.ndarray:
    """Exact mask of ((x'/a)^2 + (y'/b)^2 <= 1) sampled at integer pixels."""
    rr, cc = np.mgrid[0:height, 0:width]
    dy = rr - cy
    dx = cc - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def rasterize_convex_polygon(height, width, vertices) -> np.ndarray:
    """Exact mask of a convex polygon given CCW (row, col) vertices."""
    rr, cc = np.mgrid[0:height, 0:width]
    inside = np.ones((height, width), dtype=bool)
    n = len(vertices)
    for k in range(n):
        r0, c0 = vertices[k]
        r1, c1 = vertices[(k + 1) % n]
        # cross product sign of edge -> point; CCW polygons keep >= 0
        cross = (c1 - c0) * (rr - r0) - (r1 - r0) * (cc - c0)
        inside &= cross >= 0
    return inside.astype(np.uint8)


def rasterize_polyline(height, width, points, half_width) -> np.ndarray:
    """Exact mask of pixels within half_width of a polyline (round caps)."""
    rr, cc = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    for k in range(len(points) - 1):
        (r0, c0), (r1, c1) = points[k], points[k + 1]
        dr, dc = r1 - r0, c1 - c0
        seg2 = dr * dr + dc * dc
        if seg2 == 0:
            t = np.zeros_like(best)
        else:
            t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0.0, 1.0)
        dist2 = (rr - (r0 + t * dr)) ** 2 + (cc - (c0 + t * dc)) ** 2
        best = np.minimum(best, dist2)
    return (best <= half_width * half_width).astype(np.uint8)


def _convex_vertices(rng, cy, cx, radius, n_sides):
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n_sides))
    radii = rng.uniform(0.6, 1.0, n_sides) * radius
    # CCW order in (row, col) coordinates
    return [(cy + r * np.sin(a), cx + r * np.cos(a)) for r, a in zip(radii, angles)]


def _one_blob(rng, h, w, spec):
    scale = min(h, w)
    cy = rng.uniform(0.22, 0.78) * h
    cx = rng.uniform(0.22, 0.78) * w
    a = rng.uniform(*spec.shape_scale) * scale
    aspect = rng.uniform(1.0, 1.8)
    b = max(a / aspect, 2.0)
    if rng.random() < 0.5:
        return rasterize_ellipse(h, w, cy, cx, a, b, rng.uniform(0, np.pi))
    verts = _convex_vertices(rng, cy, cx, a, int(rng.integers(5, 8)))
    return rasterize_convex_polygon(h, w, verts)


def _one_bar(rng, h, w, spec):
    scale = min(h, w)
    r0 = rng.uniform(0.1, 0.9) * h
    c0 = rng.uniform(0.1, 0.9) * w
    angle = rng.uniform(0.0, np.pi)
    length = rng.uniform(0.55, 0.9) * scale
    width = rng.uniform(*spec.bar_width)
    mid = (r0 + 0.5 * length * np.sin(angle), c0 + 0.5 * length * np.cos(angle))
    bend = angle + rng.uniform(-0.45, 0.45)
    end = (mid[0] + 0.5 * length * np.sin(bend), mid[1] + 0.5 * length * np.cos(bend))
    return rasterize_polyline(h, w, [(r0, c0), mid, end], width / 2.0)


def _layout(rng, h, w, spec, shape_fn, n_shapes):
    """Disjoint shape masks: the first is the annotation target, the rest are
    same-family distractors (clicks, not appearance, identify the target)."""
    masks = []
    occupied = np.zeros((h, w), dtype=bool)
    attempts = 0
    while len(masks) < n_shapes and attempts < 60:
        attempts += 1
        m = shape_fn(rng, h, w, spec).astype(bool)
        if m.sum() < 8 or (m & occupied).any():
            continue
        masks.append(m)
        occupied |= m
    return masks


def _smooth_field(rng, h, w, amplitude, cells=8):
    """Band-limited texture: bilinearly upsampled low-res noise."""
    if amplitude <= 0:
        return np.zeros((h, w))
    coarse = rng.normal(0.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    out = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
           + c10 * fy * (1 - fx) + c11 * fy * fx)
    return amplitude * out


def _paint(rng, shapes, spec):
    """Background plus one level per shape; the target and its distractors
    draw from the same palette, so appearance alone cannot identify the
    target. Source shapes contrast with the background in a random
    direction; changed-domain bars are always the darker side."""
    h, w = shapes[0].shape
    c_lo, c_hi = spec.resolved_contrast()
    bg_lo, bg_hi = spec.resolved_bg()
    bg_level = rng.uniform(bg_lo, bg_hi)
    grad = np.linspace(-1.0, 1.0, h)[:, None] * rng.uniform(-0.05, 0.05)
    texture = _smooth_field(rng, h, w, spec.resolved_texture())
    base = np.full((h, w), bg_level)
    for m in shapes:
        contrast = rng.uniform(c_lo, c_hi)
        if spec.kind == "changed":
            sign = -1.0
        else:
            sign = 1.0 if rng.random() < 0.5 else -1.0
        base[m] = np.clip(bg_level + sign * contrast, 0.03, 0.97)
    img = np.zeros((h, w, 3))
    for ch in range(3):
        img[:, :, ch] = base + rng.uniform(-0.06, 0.06) + grad + texture
    if spec.kind == "shifted":
        perm = rng.permutation(3)
        img = img[:, :, perm]
        if rng.random() < 0.5:
            img = 1.0 - img
    img += rng.normal(0.0, spec.resolved_noise(), (h, w, 3))
    img = np.clip(img, 0.0, 1.0)
    # snap to the 8-bit grid so PNG round-trips are bit-exact
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_pair(spec: DomainSpec, index: int):
    """Generate one (image, mask) pair; deterministic in (spec, index).

    The mask covers a single target shape; the image also carries 1-3
    same-palette distractor shapes, so the target is identified by clicks
    rather than by appearance.
    """
    h, w = spec.height, spec.width
    lo, hi = 0.05, 0.60
    for attempt in range(64):
        rng = np.random.default_rng([spec.seed, index, attempt])
        if spec.kind == "changed":
            shapes = _layout(rng, h, w, spec, _one_bar, 2 + int(rng.integers(0, 2)))
        else:
            shapes = _layout(rng, h, w, spec, _one_blob, 2 + int(rng.integers(0, 2)))
        if len(shapes) < 2:
            continue
        mask = shapes[0].astype(np.uint8)
        frac = mask.mean()
        if lo <= frac <= hi:
            img = _paint(rng, shapes, spec)
            return RasterImage(img), Mask(mask)
    raise ValueError(f"spec produced no mask in the {lo}-{hi} foreground band "
                     f"after 64 attempts (index {index})")


def generate_dataset(spec: DomainSpec, count: int):
    """Deterministic list of (RasterImage, Mask) pairs for a DomainSpec."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_pair(spec, i) for i in range(count)]


# ---------------------------------------------------------------------------
# Dataset I/O: <root>/images/<name>.png + <root>/masks/<name>.png
# ---------------------------------------------------------------------------

def save_dataset(dataset, root):
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for i, (img, mask) in enumerate(dataset):
        name = f"{i:04d}.png"
        arr = np.round(_as_array(img) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(os.path.join(img_dir, name))
        m = (_as_array(mask) * 255).astype(np.uint8)
        Image.fromarray(m, mode="L").save(os.path.join(mask_dir, name))


def load_image_file(path) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RasterImage((arr / 255.0).astype(np.float32))


def load_mask_file(path) -> Mask:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.uint8)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 255))):
        raise ValueError(f"mask {os.path.basename(path)} has non-binary values "
                         f"{vals[:8].tolist()} (expected exactly 0 or 255)")
    return Mask((arr == 255).astype(np.uint8))


def load_dataset(root):
    """Load image/mask pairs; stems must match one-to-one."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise FileNotFoundError(f"{root} must contain images/ and masks/")
    img_names = sorted(n for n in os.listdir(img_dir) if n.endswith(".png"))
    mask_names = set(n for n in os.listdir(mask_dir) if n.endswith(".png"))
    dataset = []
    for name in img_names:
        if name not in mask_names:
            raise FileNotFoundError(f"no mask paired with image {name!r}")
        mask_names.discard(name)
        img = load_image_file(os.path.join(img_dir, name))
        mask = load_mask_file(os.path.join(mask_dir, name))
        if (img.height, img.width) != (mask.height, mask.width):
            raise ValueError(f"{name!r}: image is {img.height}x{img.width} but "
                             f"mask is {mask.height}x{mask.width}")
        dataset.append((img, mask))
    if mask_names:
        raise FileNotFoundError(f"no image paired with mask {sorted(mask_names)[0]!r}")
    if not dataset:
        raise FileNotFoundError(f"no image/mask pairs under {root}")
    return dataset
