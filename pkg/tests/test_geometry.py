import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmm.geometry import (
    IGNORED,
    Box,
    GridConfig,
    assign_lines,
    grid_label,
    line_distance_label,
    normalize_box,
    quantize,
    quantize_spatial,
    sample_token_pairs,
)

GRIDS = [GridConfig(4, 1), GridConfig(2, 2), GridConfig(4, 4), GridConfig(8, 8), GridConfig(12, 12)]


def grid_scan_oracle(box: Box, grid: GridConfig) -> int:
    """Test every cell for containment of the top-left corner (half-open cells)."""
    x, y = Fraction(box.x1), Fraction(box.y1)
    if x == 1 or y == 1:
        return IGNORED
    for row in range(grid.n):
        for col in range(grid.m):
            if Fraction(col, grid.m) <= x < Fraction(col + 1, grid.m) and Fraction(row, grid.n) <= y < Fraction(row + 1, grid.n):
                return row * grid.m + col
    raise AssertionError("corner in no cell")


def union_find_oracle(boxes):
    """Partition by the overlap rule using explicit BFS over the link graph."""
    n = len(boxes)

    def linked(a, b):
        ov = min(a.y3, b.y3) - max(a.y1, b.y1)
        small = min(a.height, b.height)
        return ov > 0.5 * small or (small == 0 and ov >= 0)

    seen, groups = set(), []
    for s in range(n):
        if s in seen:
            continue
        stack, comp = [s], set()
        while stack:
            i = stack.pop()
            if i in comp:
                continue
            comp.add(i)
            stack.extend(j for j in range(n) if j not in comp and linked(boxes[i], boxes[j]))
        seen |= comp
        groups.append(frozenset(comp))
    return set(groups)


def partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(i)
    return {frozenset(g) for g in groups.values()}


def test_normalize_box_examples():
    assert normalize_box((0, 0, 100, 50), 100, 50).as_tuple() == (0, 0, 1, 1)
    assert normalize_box((25, 10, 75, 20), 100, 100).as_tuple() == pytest.approx((0.25, 0.10, 0.75, 0.20))
    clamps = Counter()
    assert normalize_box((-5, 0, 10, 10), 100, 100, clamps).x1 == 0.0
    assert clamps["clamped"] == 1
    assert normalize_box((75, 20, 25, 10), 100, 100).as_tuple() == pytest.approx((0.25, 0.10, 0.75, 0.20))
    with pytest.raises(ValueError):
        normalize_box((0, 0, 1, 1), 0, 10)


def test_box_rejects_invalid_coordinates():
    with pytest.raises(ValueError):
        Box(0.5, 0.0, 0.4, 1.0)
    with pytest.raises(ValueError):
        Box(0.0, 0.0, 1.2, 1.0)


def test_quantize_examples():
    assert quantize(0.0, 1000) == 0
    assert quantize(1.0, 1000) == 999
    assert quantize(0.2505, 1000) == 250
    idx = quantize_spatial(Box(0.1, 0.2, 0.4, 0.25))
    assert idx.as_tuple() == (100, 400, 200, 250, quantize(0.25 - 0.2, 1000), quantize(0.4 - 0.1, 1000))


def test_grid_label_examples():
    for g in GRIDS:
        assert grid_label(Box(0, 0, 0.1, 0.1), g) == 0
    assert grid_label(Box(0.3, 0.6, 0.4, 0.7), GridConfig(4, 4)) == 9
    assert grid_label(Box(1.0, 0.5, 1.0, 0.6), GridConfig(4, 4)) == IGNORED
    assert grid_label(Box(0.5, 1.0, 0.6, 1.0), GridConfig(4, 4)) == IGNORED
    assert grid_label(Box(0.99, 0.99, 1.0, 1.0), GridConfig(2, 2)) == 3


def test_grid_label_exact_on_cell_boundaries():
    # 0.3 * 10 rounds below 3 in floats; the rational evaluation must not
    g = GridConfig(10, 10)
    assert grid_label(Box(0.5, 0.5, 0.6, 0.6), g) == 55
    for k in range(12):
        x = k / 12
        assert grid_label(Box(x, 0.0, x, 0.0), GridConfig(12, 12)) == grid_scan_oracle(Box(x, 0.0, x, 0.0), GridConfig(12, 12))


def test_grid_config_parse():
    assert GridConfig.parse("4x1") == GridConfig(4, 1)
    assert str(GridConfig.parse("12X12")) == "12x12"
    assert GridConfig(4, 4).dx * 4 == 1
    with pytest.raises(ValueError):
        GridConfig.parse("4by4")
    with pytest.raises(ValueError):
        GridConfig(0, 3)


coord = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    xs = sorted([draw(coord), draw(coord)])
    ys = sorted([draw(coord), draw(coord)])
    return Box(xs[0], ys[0], xs[1], ys[1])


@settings(max_examples=300, deadline=None)
@given(boxes(), st.sampled_from(GRIDS))
def test_grid_label_matches_cell_scan(box, grid):
    assert grid_label(box, grid) == grid_scan_oracle(box, grid)


@settings(max_examples=100, deadline=None)
@given(boxes(), coord, coord)
def test_grid_label_ignores_bottom_right(box, x3, y3):
    other = Box(box.x1, box.y1, max(box.x1, x3), max(box.y1, y3))
    for g in GRIDS:
        assert grid_label(box, g) == grid_label(other, g)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 2000))
def test_quantize_monotone(a, b, n_bins):
    lo, hi = sorted([a, b])
    assert 0 <= quantize(lo, n_bins) <= quantize(hi, n_bins) < n_bins


def test_line_distance_examples():
    assert line_distance_label(3, 3) == 0
    assert line_distance_label(3, 4) == 1
    assert line_distance_label(0, 5) == 2


@given(st.integers(0, 100), st.integers(0, 100))
def test_line_distance_symmetric_function_of_gap(a, b):
    assert line_distance_label(a, b) == line_distance_label(b, a) == min(abs(a - b), 2)


def test_assign_lines_examples():
    assert assign_lines([Box(0, 0.1, 0.1, 0.2), Box(0.5, 0.1, 0.6, 0.2)]) == [0, 0]
    assert assign_lines([Box(0, 0.5, 0.1, 0.52), Box(0, 0.1, 0.1, 0.12)]) == [1, 0]
    # each neighbour pair overlaps by 60% of the height; the ends do not overlap at all
    chain = [Box(0, 0.0, 0.1, 0.1), Box(0.2, 0.04, 0.3, 0.14), Box(0.4, 0.08, 0.5, 0.18)]
    assert assign_lines(chain) == [0, 0, 0]
    assert union_find_oracle(chain) == partition(assign_lines(chain))


@st.composite
def box_lists(draw):
    n = draw(st.integers(1, 12))
    out = []
    for _ in range(n):
        y = draw(st.floats(0, 0.9))
        h = draw(st.floats(0, 0.1))
        x = draw(st.floats(0, 0.9))
        out.append(Box(x, y, x + 0.05, y + h))
    return out


@settings(max_examples=150, deadline=None)
@given(box_lists(), st.randoms(use_true_random=False))
def test_assign_lines_partition_matches_oracle_and_is_order_invariant(bxs, rnd):
    labels = assign_lines(bxs)
    assert union_find_oracle(bxs) == partition(labels)
    order = list(range(len(bxs)))
    rnd.shuffle(order)
    shuffled = assign_lines([bxs[i] for i in order])
    back = [None] * len(bxs)
    for pos, i in enumerate(order):
        back[i] = shuffled[pos]
    assert partition(back) == partition(labels)
    assert sorted(set(labels)) == list(range(len(set(labels))))


def test_sample_token_pairs_examples():
    rng = np.random.default_rng(0)
    assert sample_token_pairs([0], 5, rng) == []
    pairs = sample_token_pairs([0] * 10, 8, rng)
    assert len(pairs) == 8 and all(c == 0 for _, _, c in pairs)
    lines = [0, 0, 1, 1, 2, 3, 5, 5]
    a = sample_token_pairs(lines, 10, np.random.default_rng(42))
    b = sample_token_pairs(lines, 10, np.random.default_rng(42))
    assert a == b


def test_sample_token_pairs_balanced_and_distinct():
    lines = [0] * 10 + [1] + [4]
    pairs = sample_token_pairs(lines, 9, np.random.default_rng(3))
    assert len({(i, j) for i, j, _ in pairs}) == 9
    assert all(i < j and c == line_distance_label(lines[i], lines[j]) for i, j, c in pairs)
    counts = Counter(c for _, _, c in pairs)
    # class 1 has only 10 candidate pairs and class 2 has 11; round robin gives 3 each
    assert counts == {0: 3, 1: 3, 2: 3}
    uniform = sample_token_pairs(lines, 9, np.random.default_rng(3), balanced=False)
    assert len(uniform) == 9


def test_sample_token_pairs_caps_at_available_pairs():
    assert len(sample_token_pairs([0, 1, 2], 50, np.random.default_rng(0))) == 3
