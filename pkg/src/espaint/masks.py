"""Damage-mask generators for training and evaluation.

Three families: the deterministic center square used for quantitative
evaluation, random axis-aligned rectangles, and free-form brush-stroke
masks. All generators are pure functions of their explicit seed.
"""

import numpy as np
from PIL import Image as PILImage, ImageDraw

from .errors import DimensionError, MaskGenerationError, ParameterError

# Free-form stroke defaults; the cited mask datasets publish no parameters,
# so these are tuned to match their visual statistics.
STROKE_COUNT_RANGE = (1, 8)
STROKE_WIDTH_RANGE = (8, 32)
STROKE_TURNS_RANGE = (10, 50)
RETRY_BUDGET = 50


def center_mask(height, width, hole):
    """Square hole of ``hole`` x ``hole`` ones centered in the mask."""
    if hole > min(height, width):
        raise DimensionError(f"hole {hole} larger than mask {height}x{width}")
    if hole < 0:
        raise ParameterError(f"hole size must be nonnegative, got {hole}")
    mask = np.zeros((1, height, width), dtype=np.float32)
    top = (height - hole) // 2
    left = (width - hole) // 2
    mask[0, top : top + hole, left : left + hole] = 1.0
    return mask


def random_rect_mask(height, width, area_range, rng_seed):
    """One random axis-aligned rectangle whose area fraction lies in ``area_range``."""
    lo, hi = float(area_range[0]), float(area_range[1])
    if not (0.0 < lo <= hi <= 1.0):
        raise ParameterError(f"area_range must satisfy 0 < lo <= hi <= 1, got {area_range}")
    rng = np.random.default_rng(rng_seed)
    total = height * width
    for _ in range(RETRY_BUDGET):
        frac = rng.uniform(lo, hi)
        target = max(1, round(frac * total))
        h_min = max(1, -(-target // width))  # ceil
        h_max = min(height, target)
        rh = int(rng.integers(h_min, h_max + 1))
        rw = min(width, max(1, round(target / rh)))
        if not (lo <= rh * rw / total <= hi):
            continue
        top = int(rng.integers(0, height - rh + 1))
        left = int(rng.integers(0, width - rw + 1))
        mask = np.zeros((1, height, width), dtype=np.float32)
        mask[0, top : top + rh, left : left + rw] = 1.0
        return mask
    raise MaskGenerationError(
        f"could not realize a rectangle with area fraction in [{lo}, {hi}] on {height}x{width}"
    )


def _draw_strokes(height, width, stroke_count_range, stroke_width_range, turns_range, rng):
    canvas = PILImage.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    n_strokes = int(rng.integers(stroke_count_range[0], stroke_count_range[1] + 1))
    for _ in range(n_strokes):
        w = int(rng.integers(stroke_width_range[0], stroke_width_range[1] + 1))
        turns = int(rng.integers(turns_range[0], turns_range[1] + 1))
        x = float(rng.uniform(0, width))
        y = float(rng.uniform(0, height))
        max_step = max(2.0, min(height, width) / 8.0)
        for _ in range(turns):
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            step = float(rng.uniform(max_step / 2.0, max_step))
            nx = float(np.clip(x + step * np.cos(angle), 0, width - 1))
            ny = float(np.clip(y + step * np.sin(angle), 0, height - 1))
            draw.line([(x, y), (nx, ny)], fill=255, width=w)
            # round caps so joints do not leave notches
            r = w / 2.0
            draw.ellipse([nx - r, ny - r, nx + r, ny + r], fill=255)
            x, y = nx, ny
    return (np.asarray(canvas, dtype=np.float32) >= 128.0).astype(np.float32)[None]


def irregular_mask(
    height,
    width,
    stroke_count_range=STROKE_COUNT_RANGE,
    stroke_width_range=STROKE_WIDTH_RANGE,
    coverage_range=(0.1, 0.4),
    rng_seed=0,
    turns_range=STROKE_TURNS_RANGE,
):
    """Union of random polyline brush strokes, redrawn until coverage lands in range."""
    if stroke_count_range[0] > stroke_count_range[1] or stroke_width_range[0] > stroke_width_range[1]:
        raise ParameterError("stroke count/width ranges must be non-empty")
    lo, hi = float(coverage_range[0]), float(coverage_range[1])
    if not (0.0 <= lo <= hi <= 1.0):
        raise ParameterError(f"coverage_range must lie inside [0, 1], got {coverage_range}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(RETRY_BUDGET):
        mask = _draw_strokes(height, width, stroke_count_range, stroke_width_range, turns_range, rng)
        if lo <= mask.mean() <= hi:
            return mask
    raise MaskGenerationError(
        f"coverage in [{lo}, {hi}] unreachable within {RETRY_BUDGET} redraws on {height}x{width}"
    )


def training_mask(height, width, rng_seed):
    """Per-sample training mask: 50/50 alternation of rectangles and free-form strokes.

    Stroke parameters scale with resolution (the published defaults are tuned
    for 256px) so small desk-scale images keep reachable coverage.
    """
    rng = np.random.default_rng(rng_seed)
    if rng.random() < 0.5:
        return random_rect_mask(height, width, (0.05, 0.35), rng.integers(2**31))
    s = min(height, width)
    width_lo = max(2, s * STROKE_WIDTH_RANGE[0] // 256)
    width_hi = max(width_lo, s * STROKE_WIDTH_RANGE[1] // 256)
    strokes_hi = int(np.clip(s * STROKE_COUNT_RANGE[1] // 256, 2, STROKE_COUNT_RANGE[1]))
    turns_lo = max(3, s * STROKE_TURNS_RANGE[0] // 256)
    turns_hi = max(6, s * STROKE_TURNS_RANGE[1] // 256)
    # a loose floor keeps per-draw acceptance high: a long run draws hundreds
    # of thousands of masks and must never exhaust the retry budget
    return irregular_mask(
        height,
        width,
        stroke_count_range=(1, strokes_hi),
        stroke_width_range=(width_lo, width_hi),
        coverage_range=(0.02, 0.45),
        rng_seed=rng.integers(2**31),
        turns_range=(turns_lo, turns_hi),
    )
