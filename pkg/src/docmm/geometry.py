"""OCR box arithmetic: normalisation, spatial quantisation, line grouping and pre-training labels."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

IGNORED = -100
"""Label for tokens excluded from a loss; equal to the default ``ignore_index``."""

N_BINS = 1000


@dataclass(frozen=True)
class Box:
    """Word box in normalised page coordinates, top-left ``(x1, y1)`` to bottom-right ``(x3, y3)``."""

    x1: float
    y1: float
    x3: float
    y3: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x3 <= 1.0 and 0.0 <= self.y1 <= self.y3 <= 1.0):
            raise ValueError(f"invalid normalised box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x3 - self.x1

    @property
    def height(self) -> float:
        return self.y3 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x3, self.y3)


ZERO_BOX = Box(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GridConfig:
    """Virtual ``m x n`` grid over the page: ``m`` columns, ``n`` rows, cells numbered in raster order."""

    m: int = 4
    n: int = 4

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"grid needs m, n >= 1, got {self.m}x{self.n}")

    @property
    def dx(self) -> Fraction:
        return Fraction(1, self.m)

    @property
    def dy(self) -> Fraction:
        return Fraction(1, self.n)

    @property
    def cells(self) -> int:
        return self.m * self.n

    @classmethod
    def parse(cls, text: str) -> "GridConfig":
        """Parse ``"MxN"`` (columns x rows)."""
        try:
            m, n = (int(part) for part in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like 4x4, got {text!r}") from None
        return cls(m, n)

    def __str__(self) -> str:
        return f"{self.m}x{self.n}"


@dataclass(frozen=True)
class SpatialIndices:
    x1: int
    x3: int
    y1: int
    y3: int
    h: int
    w: int

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.x1, self.x3, self.y1, self.y3, self.h, self.w)


def normalize_box(raw: Sequence[float], page_w: float, page_h: float, clamp_counter: Counter | None = None) -> Box:
    """Convert a pixel box to normalised coordinates, clamping to the page and fixing corner order."""
    if page_w <= 0 or page_h <= 0:
        raise ValueError(f"page dimensions must be positive, got {page_w}x{page_h}")
    x1, y1, x3, y3 = (float(v) for v in raw)
    x1, x3 = min(x1, x3), max(x1, x3)
    y1, y3 = min(y1, y3), max(y1, y3)
    coords = [x1 / page_w, y1 / page_h, x3 / page_w, y3 / page_h]
    clamped = [min(max(c, 0.0), 1.0) for c in coords]
    if clamped != coords:
        if clamp_counter is not None:
            clamp_counter["clamped"] += 1
        logger.debug("clamped box %s on %sx%s page", raw, page_w, page_h)
    return Box(*clamped)


def quantize(coord: float, n_bins: int) -> int:
    return min(int(math.floor(coord * n_bins)), n_bins - 1)


def quantize_spatial(box: Box, n_bins: int = N_BINS) -> SpatialIndices:
    q = lambda c: quantize(c, n_bins)  # noqa: E731
    return SpatialIndices(q(box.x1), q(box.x3), q(box.y1), q(box.y3), q(box.height), q(box.width))


def grid_label(box: Box, grid: GridConfig) -> int:
    """Raster-order grid cell of the box's top-left corner, or ``IGNORED`` on the page's far edge.

    Evaluated exactly in rationals so cell boundaries never depend on float rounding.
    """
    if box.x1 == 1.0 or box.y1 == 1.0:
        return IGNORED
    col = math.floor(Fraction(box.x1) / grid.dx)
    row = math.floor(Fraction(box.y1) / grid.dy)
    return col + row * grid.m


def assign_lines(boxes: Sequence[Box]) -> list[int]:
    """Group boxes into text lines.

    Two boxes share a line when their vertical extents overlap by more than half
    of the smaller height; grouping is the transitive closure of that relation.
    Lines are numbered from the top by mean vertical centre.
    """
    n = len(boxes)
    if n == 0:
        return []
    y1 = np.array([b.y1 for b in boxes])
    y3 = np.array([b.y3 for b in boxes])
    h = y3 - y1
    overlap = np.minimum.outer(y3, y3) - np.maximum.outer(y1, y1)
    smaller = np.minimum.outer(h, h)
    linked = (overlap > 0.5 * smaller) | ((smaller == 0) & (overlap >= 0))

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(linked, k=1))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    roots = [find(i) for i in range(n)]
    centres = (y1 + y3) / 2
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(roots):
        groups.setdefault(r, []).append(i)
    ordered = sorted(groups.values(), key=lambda members: (float(np.mean(centres[members])), min(members)))
    line_of = [0] * n
    for line, members in enumerate(ordered):
        for i in members:
            line_of[i] = line
    return line_of


def line_distance_label(line_i: int, line_j: int) -> int:
    """Quantised line distance: same line 0, adjacent 1, anything further 2."""
    return min(abs(line_i - line_j), 2)


def sample_token_pairs(
    line_ids: Sequence[int],
    k_pairs: int,
    rng: np.random.Generator,
    balanced: bool = True,
) -> list[tuple[int, int, int]]:
    """Draw distinct unordered token pairs ``(i, j, class)`` with ``i < j``.

    With ``balanced`` the draw cycles over the classes present in the document
    and picks uniformly within a class; otherwise pairs are drawn uniformly.
    """
    n = len(line_ids)
    if n < 2 or k_pairs < 1:
        return []
    lines = np.asarray(line_ids)
    ii, jj = np.triu_indices(n, k=1)
    classes = np.minimum(np.abs(lines[ii] - lines[jj]), 2)
    k = min(k_pairs, len(ii))
    if not balanced:
        chosen = np.sort(rng.choice(len(ii), size=k, replace=False))
        return [(int(ii[c]), int(jj[c]), int(classes[c])) for c in chosen]

    pools = []
    for cls in (0, 1, 2):
        members = np.nonzero(classes == cls)[0]
        if len(members):
            pools.append(list(rng.permutation(members)))
    picked: list[int] = []
    while len(picked) < k:
        for pool in pools:
            if pool and len(picked) < k:
                picked.append(int(pool.pop()))
    return [(int(ii[c]), int(jj[c]), int(classes[c])) for c in picked]
