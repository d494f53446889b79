"""Toy shape world: renderer, caption grammar and attribute estimation.

Images are RGB on a uniform background (black by default) with a single filled shape placed in
one cell of a square grid.  Because the attributes of every image are known,
the grammar produces captions whose correspondence to the pixels is exact,
and :func:`estimate_attributes` can recover them from a rendered (or
generated) image.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

import numpy as np

DEFAULT_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (230, 25, 25),
    "green": (30, 200, 40),
    "blue": (30, 60, 235),
    "yellow": (235, 225, 30),
    "cyan": (30, 220, 225),
    "magenta": (220, 40, 220),
    "white": (240, 240, 240),
    "orange": (245, 140, 20),
}

DEFAULT_SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "diamond")

ROW_WORDS = {2: ("top", "bottom"), 3: ("top", "middle", "bottom")}
COL_WORDS = {2: ("left", "right"), 3: ("left", "center", "right")}

# Each template must name every attribute so captions stay exact descriptions.
TEMPLATES: tuple[str, ...] = (
    "a {color} {shape} in the {position}",
    "a {shape} colored {color} at the {position}",
    "there is a {color} {shape} in the {position} of the picture",
    "the {position} shows a {color} {shape}",
    "one {color} {shape} placed at the {position}",
    "a small picture of a {color} {shape} in the {position}",
    "{color} {shape} located in the {position}",
)

OPENERS: tuple[str, ...] = ("", "we can see ", "here is ", "this shows ")

N_VARIATIONS = len(TEMPLATES) * len(OPENERS)


def position_names(grid: int) -> list[str]:
    if grid not in ROW_WORDS:
        raise ValueError(f"grid must be 2 or 3, got {grid}")
    return [f"{r} {c}" for r in ROW_WORDS[grid] for c in COL_WORDS[grid]]


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Parameters of a generated shape-world corpus."""

    n_images: int = 256
    image_size: int = 32
    captions_per_image: int = 5
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    colors: tuple[str, ...] = tuple(DEFAULT_COLORS)
    grid: int = 3
    jitter: int = 1
    # visual style: gray background level in [0, 1] and shape size multiplier
    background: float = 0.0
    radius_scale: float = 1.0
    palette: dict[str, tuple[int, int, int]] = field(
        default_factory=lambda: dict(DEFAULT_COLORS)
    )

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images must be non-negative")
        if self.captions_per_image < 1:
            raise ValueError("captions_per_image must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        unknown_shapes = set(self.shapes) - set(DEFAULT_SHAPES)
        if unknown_shapes:
            raise ValueError(f"unknown shapes: {sorted(unknown_shapes)}")
        missing = [c for c in self.colors if c not in self.palette]
        if missing:
            raise ValueError(f"colors without palette entry: {missing}")
        position_names(self.grid)
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background must lie in [0, 1]")
        if not 0.25 <= self.radius_scale <= 2.0:
            raise ValueError("radius_scale must lie in [0.25, 2]")

    @property
    def positions(self) -> list[str]:
        return position_names(self.grid)

    @property
    def capacity(self) -> int:
        return len(self.shapes) * len(self.colors) * len(self.positions)

    def combinations(self) -> list[tuple[str, str, str]]:
        return list(itertools.product(self.shapes, self.colors, self.positions))

    def vocabulary(self) -> list[str]:
        """All words the grammar can emit, in a stable order."""
        words: list[str] = []
        for text in (*TEMPLATES, *OPENERS, *self.shapes, *self.colors, *self.positions):
            for word in re.sub(r"\{\w+\}", " ", text).split():
                if word not in words:
                    words.append(word)
        return words


@dataclass(frozen=True)
class ShapeAttributes:
    shape: str
    color: str
    position: str

    def as_dict(self) -> dict[str, str]:
        return {"shape": self.shape, "color": self.color, "position": self.position}


def _cell_center(position: str, grid: int, size: int) -> tuple[float, float]:
    names = position_names(grid)
    idx = names.index(position)
    row, col = divmod(idx, grid)
    cell = size / grid
    return (row + 0.5) * cell, (col + 0.5) * cell


# triangle spans [-r, 0.85r] vertically; its centroid is 2/3 of the way down
TRIANGLE_CENTROID_SHIFT = -1.0 + 2.0 / 3.0 * 1.85


def shape_mask(
    shape: str, center: tuple[float, float], radius: float, size: int
) -> np.ndarray:
    """Boolean mask of a filled shape; ``center`` is (row, col) in pixels."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = rows + 0.5 - center[0]
    dx = cols + 0.5 - center[1]
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        half = radius * 0.82
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius * 1.15
    if shape == "triangle":
        # apex up; base at +radius
        top, bottom = -radius, radius * 0.85
        inside_y = (dy >= top) & (dy <= bottom)
        half_width = (dy - top) / (bottom - top) * radius
        return inside_y & (np.abs(dx) <= half_width)
    raise ValueError(f"unknown shape {shape!r}")


def shape_radius(spec: ToyCorpusSpec) -> float:
    return spec.image_size / spec.grid * 0.4 * spec.radius_scale


def render(
    attrs: ShapeAttributes, spec: ToyCorpusSpec, offset: tuple[int, int] = (0, 0)
) -> np.ndarray:
    """Render to a uint8 array of shape (3, H, W)."""
    size = spec.image_size
    cy, cx = _cell_center(attrs.position, spec.grid, size)
    mask = shape_mask(attrs.shape, (cy + offset[0], cx + offset[1]), shape_radius(spec), size)
    img = np.full((3, size, size), int(round(spec.background * 255)), dtype=np.uint8)
    rgb = spec.palette[attrs.color]
    for ch in range(3):
        img[ch][mask] = rgb[ch]
    return img


def caption_for(attrs: ShapeAttributes, variation: int) -> str:
    """Grammar sentence number ``variation`` for the given attributes.

    Distinct variations give distinct sentences for
    ``variation < N_VARIATIONS``.
    """
    v = variation % N_VARIATIONS
    opener = OPENERS[v // len(TEMPLATES)]
    body = TEMPLATES[v % len(TEMPLATES)].format(**attrs.as_dict())
    return opener + body


def estimate_attributes(
    image: np.ndarray, spec: ToyCorpusSpec, threshold: float = 0.25
) -> ShapeAttributes | None:
    """Recover (shape, color, position) from a float image in [0, 1].

    Returns ``None`` when no foreground is found.  Works on noisy generated
    images: the color is the palette entry nearest to the mean foreground
    pixel, the position is the grid cell containing the foreground centroid,
    and the shape is the template with the highest IoU at that centroid.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        return None
    fg = np.abs(img - spec.background).max(axis=0) > threshold
    if fg.sum() < 3:
        return None
    size = img.shape[-1]
    mean_rgb = img[:, fg].mean(axis=1) * 255.0
    palette = np.array([spec.palette[c] for c in spec.colors], dtype=np.float64)
    color = spec.colors[int(np.argmin(((palette - mean_rgb) ** 2).sum(axis=1)))]

    rows, cols = np.nonzero(fg)
    cy, cx = rows.mean() + 0.5, cols.mean() + 0.5
    cell = size / spec.grid
    r = min(int(cy // cell), spec.grid - 1)
    c = min(int(cx // cell), spec.grid - 1)
    position = spec.positions[r * spec.grid + c]

    radius = shape_radius(spec) * size / spec.image_size
    best, best_iou = spec.shapes[0], -1.0
    for shape in spec.shapes:
        center_y = cy - TRIANGLE_CENTROID_SHIFT * radius if shape == "triangle" else cy
        m = shape_mask(shape, (center_y, cx), radius, size)
        iou = (m & fg).sum() / max((m | fg).sum(), 1)
        if iou > best_iou:
            best, best_iou = shape, iou
    return ShapeAttributes(best, color, position)


def parse_caption(caption: str, spec: ToyCorpusSpec) -> ShapeAttributes | None:
    """Attributes named by a grammar caption, or ``None`` if any is missing."""
    words = re.findall(r"[a-z]+", caption.lower())
    shape = next((w for w in words if w in spec.shapes), None)
    color = next((w for w in words if w in spec.colors), None)
    row = next((w for w in words if w in ROW_WORDS[spec.grid]), None)
    col = next((w for w in words if w in COL_WORDS[spec.grid]), None)
    if None in (shape, color, row, col):
        return None
    return ShapeAttributes(shape, color, f"{row} {col}")
