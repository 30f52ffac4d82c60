"""Random scene initializers for each primitive style."""

from __future__ import annotations

import math

import numpy as np

from .model import (
    BLACK,
    ColorRGBA,
    Path,
    Scene,
    Style,
    StyleConfig,
    StrokeStyle,
    circle_points,
    polygon_points,
    square_vertices,
)

DEFAULT_SEGMENTS = 4


def _random_color(rng: np.random.Generator, alpha=(0.6, 1.0)) -> ColorRGBA:
    r, g, b = rng.uniform(0.0, 1.0, 3)
    return ColorRGBA(float(r), float(g), float(b), float(rng.uniform(*alpha)))


def blob_points(rng, center, radius: float, segments: int = DEFAULT_SEGMENTS, jitter: float = 0.15):
    """Closed cubic chain near a circle; ``segments`` cubic pieces."""
    cx, cy = center
    if segments == 4:
        pts = circle_points(cx, cy, radius)
    else:
        angles = np.linspace(0.0, 2 * math.pi, 3 * segments, endpoint=False)
        pts = np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)
    return pts + rng.normal(0.0, jitter * radius, pts.shape)


def stroke_points(rng, start, step: float, segments: int = DEFAULT_SEGMENTS):
    """Open cubic chain as a short random walk from ``start``."""
    n = 3 * segments + 1
    steps = rng.normal(0.0, step, (n - 1, 2))
    return np.vstack([np.asarray(start, dtype=np.float64), np.asarray(start) + np.cumsum(steps, axis=0)])


def rotated_square(rng, center, size: float) -> np.ndarray:
    angle = rng.uniform(0.0, math.pi / 2)
    c, s = math.cos(angle), math.sin(angle)
    half = size / 2
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.asarray(center)


def pixel_grid(n_paths: int, width: int, height: int):
    """Top-left corners and cell size of a grid holding ``n_paths`` squares."""
    cols = max(1, math.ceil(math.sqrt(n_paths)))
    rows = max(1, math.ceil(n_paths / cols))
    size = min(width / cols, height / rows)
    corners = [((i % cols) * size, (i // cols) * size) for i in range(n_paths)]
    return corners, size


def init_scene(
    style,
    n_paths: int,
    width: int,
    height: int,
    rng: np.random.Generator,
    radius_frac=(0.05, 0.2),
    alpha=(0.6, 1.0),
) -> Scene:
    """Fresh random scene whose paths satisfy the style's shape constraints."""
    style = StyleConfig.for_style(style).style
    short = min(width, height)
    paths = []
    if style is Style.PIXEL_ART:
        corners, size = pixel_grid(n_paths, width, height)
        for x, y in corners:
            verts = square_vertices(x, y, size)
            paths.append(Path(polygon_points(verts), True, fill=_random_color(rng, alpha)))
        return Scene(width, height, paths)
    for _ in range(n_paths):
        center = rng.uniform([0.0, 0.0], [width, height])
        radius = rng.uniform(*radius_frac) * short
        if style is Style.ICONOGRAPHY:
            pts = blob_points(rng, center, radius)
            paths.append(Path(pts, True, fill=_random_color(rng, alpha)))
        elif style is Style.LOW_POLY:
            verts = rotated_square(rng, center, 2 * radius)
            paths.append(Path(polygon_points(verts), True, fill=_random_color(rng, alpha)))
        else:
            pts = stroke_points(rng, center, radius / 2)
            if style is Style.SKETCH:
                stroke = StrokeStyle(ColorRGBA(0.0, 0.0, 0.0, float(rng.uniform(*alpha))), 1.5)
            elif style is Style.INK_WASH:
                stroke = StrokeStyle(
                    ColorRGBA(BLACK.r, BLACK.g, BLACK.b, float(rng.uniform(*alpha))),
                    float(rng.uniform(1.0, 4.0)),
                )
            else:
                stroke = StrokeStyle(_random_color(rng, alpha), float(rng.uniform(1.0, 4.0)))
            paths.append(Path(pts, False, stroke=stroke))
    return Scene(width, height, paths)
