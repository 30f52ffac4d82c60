"""Vector scene types, the six primitive styles and parameter packing.

A scene is an ordered list of cubic Bezier chains painted bottom to top.
Every primitive (squares, polygons, degree-elevated lines) is stored as a
cubic chain; the style decides which parameter families an optimizer may
touch and which shape constraints a path must keep.

Point layout of a chain with ``m`` points:

* open:   ``p0 p1 p2 p3 p4 p5 p6 ...`` with ``m % 3 == 1``; segment ``s`` uses
  points ``3s .. 3s+3``.
* closed: ``m % 3 == 0``; the last segment wraps around to ``p0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

KAPPA = 4.0 * (math.sqrt(2.0) - 1.0) / 3.0

FAMILIES = ("points", "fill", "stroke_color", "stroke_width", "opacity")
MAX_SUBDIVISIONS = 1024


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class ControlPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class ColorRGBA:
    r: float
    g: float
    b: float
    a: float = 1.0

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ColorRGBA":
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b, self.a], dtype=np.float64)

    def clamped(self) -> "ColorRGBA":
        return ColorRGBA(*(min(1.0, max(0.0, v)) for v in (self.r, self.g, self.b, self.a)))

    def in_range(self) -> bool:
        return all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in (self.r, self.g, self.b, self.a))


WHITE = ColorRGBA(1.0, 1.0, 1.0, 1.0)
BLACK = ColorRGBA(0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class StrokeStyle:
    color: ColorRGBA
    width: float


@dataclass(frozen=True, eq=False)
class Path:
    points: np.ndarray
    closed: bool
    fill: Optional[ColorRGBA] = None
    stroke: Optional[StrokeStyle] = None
    region_tag: Optional[str] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n_segments(self) -> int:
        m = len(self.points)
        return m // 3

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        return (
            self.closed == other.closed
            and self.fill == other.fill
            and self.stroke == other.stroke
            and self.region_tag == other.region_tag
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    __hash__ = None


@dataclass(frozen=True)
class Scene:
    canvas_w: int
    canvas_h: int
    paths: tuple = ()
    background: ColorRGBA = WHITE

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))

    def with_paths(self, paths) -> "Scene":
        return replace(self, paths=tuple(paths))


class Style(str, Enum):
    ICONOGRAPHY = "iconography"
    SKETCH = "sketch"
    PIXEL_ART = "pixel_art"
    LOW_POLY = "low_poly"
    PAINTING = "painting"
    INK_WASH = "ink_wash"


@dataclass(frozen=True)
class StyleConfig:
    style: Style
    trainable: frozenset
    shape: str

    @classmethod
    def for_style(cls, style) -> "StyleConfig":
        style = Style(style)
        return _STYLE_TABLE[style]

    @property
    def closed_fill(self) -> bool:
        return self.shape in ("closed-cubic", "polygon", "axis-aligned-square")


_STYLE_TABLE = {
    Style.ICONOGRAPHY: StyleConfig(Style.ICONOGRAPHY, frozenset({"points", "fill"}), "closed-cubic"),
    Style.SKETCH: StyleConfig(Style.SKETCH, frozenset({"points", "opacity"}), "open-cubic"),
    Style.PIXEL_ART: StyleConfig(Style.PIXEL_ART, frozenset({"fill"}), "axis-aligned-square"),
    Style.LOW_POLY: StyleConfig(Style.LOW_POLY, frozenset({"points", "fill"}), "polygon"),
    Style.PAINTING: StyleConfig(
        Style.PAINTING, frozenset({"points", "stroke_color", "stroke_width"}), "open-cubic"
    ),
    Style.INK_WASH: StyleConfig(
        Style.INK_WASH, frozenset({"points", "opacity", "stroke_width"}), "open-cubic"
    ),
}


# ---------------------------------------------------------------------------
# Bezier geometry
# ---------------------------------------------------------------------------


def bezier_point(seg, t: float) -> ControlPoint:
    """Evaluate a cubic Bezier segment given as four points at ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t={t} outside [0, 1]")
    p = np.asarray(seg, dtype=np.float64).reshape(4, 2)
    u = 1.0 - t
    xy = u**3 * p[0] + 3 * u**2 * t * p[1] + 3 * u * t**2 * p[2] + t**3 * p[3]
    return ControlPoint(float(xy[0]), float(xy[1]))


def segment_indices(m: int, closed: bool) -> np.ndarray:
    """Point indices of each cubic segment, shape ``(S, 4)``."""
    if closed:
        n = m // 3
        return np.array([[3 * s, 3 * s + 1, 3 * s + 2, (3 * s + 3) % m] for s in range(n)])
    n = (m - 1) // 3
    return np.array([[3 * s, 3 * s + 1, 3 * s + 2, 3 * s + 3] for s in range(n)])


def _is_straight(seg: np.ndarray) -> bool:
    # handles exactly on the chord, between its endpoints
    chord = seg[3] - seg[0]
    cc = float(chord @ chord)
    if cc == 0.0:
        return bool(np.all(seg == seg[0]))
    for h in (seg[1], seg[2]):
        d = h - seg[0]
        if chord[0] * d[1] - chord[1] * d[0] != 0.0:
            return False
        proj = float(chord @ d)
        if proj < 0.0 or proj > cc:
            return False
    return True


def subdivisions(seg: np.ndarray, tol: float) -> int:
    """Power-of-two count of uniform pieces keeping the chord error below ``tol``.

    Uses ``max |B''| <= 6 * max second difference``; the sag of a chord over
    a parameter interval ``dt`` is at most ``|B''| dt^2 / 8``.
    """
    if _is_straight(seg):
        return 1
    d1 = seg[0] - 2 * seg[1] + seg[2]
    d2 = seg[1] - 2 * seg[2] + seg[3]
    lmax = max(math.hypot(*d1), math.hypot(*d2))
    if lmax == 0.0:
        return 1
    need = math.sqrt(0.75 * lmax / tol)
    n = 1
    while n < need and n < MAX_SUBDIVISIONS:
        n *= 2
    return n


def flatten_matrix(points: np.ndarray, closed: bool, tol: float) -> np.ndarray:
    """Linear map from control points to polyline vertices.

    ``flatten_matrix(P) @ P`` gives the vertices; closed polylines repeat the
    first vertex at the end.  The subdivision counts depend on ``P`` but the
    map itself is linear, which is what the rasterizer differentiates through.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    segs = segment_indices(m, closed)
    counts = [subdivisions(points[idx], tol) for idx in segs]
    total = sum(counts)
    out = np.zeros((total + 1, m))
    row = 0
    for idx, n in zip(segs, counts):
        t = np.arange(n) / n
        u = 1.0 - t
        w = np.stack([u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t], axis=1)
        rows = np.arange(row, row + n)
        for k, pi in enumerate(idx):
            out[rows, pi] += w[:, k]
        row += n
    out[total, 0 if closed else m - 1] = 1.0
    return out


def flatten_path(path: Path, tol: float) -> np.ndarray:
    """Polyline approximation of ``path`` with chord error at most ``tol``."""
    if not tol > 0:
        raise ContractError("tol must be positive")
    return flatten_matrix(path.points, path.closed, tol) @ path.points


def polyline_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]) + x[-1] * y[0] - x[0] * y[-1])


def path_signed_area(path: Path, tol: float = 0.01) -> float:
    """Shoelace area of the flattened closed path; positive when counter-clockwise."""
    if not path.closed:
        raise ContractError("signed area requires a closed path")
    return polyline_area(flatten_path(path, tol))


# ---------------------------------------------------------------------------
# Primitive constructors
# ---------------------------------------------------------------------------


def polygon_points(vertices) -> np.ndarray:
    """Closed cubic chain with handles at one and two thirds of each edge."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    return polygon_expansion(len(v)) @ v


def polygon_expansion(n: int) -> np.ndarray:
    """Matrix ``E`` with ``E @ vertices`` = closed cubic control points."""
    e = np.zeros((3 * n, n))
    for i in range(n):
        j = (i + 1) % n
        e[3 * i, i] = 1.0
        e[3 * i + 1, i] = 2.0 / 3.0
        e[3 * i + 1, j] = 1.0 / 3.0
        e[3 * i + 2, i] = 1.0 / 3.0
        e[3 * i + 2, j] = 2.0 / 3.0
    return e


def line_points(p0, p1) -> np.ndarray:
    """Degree-elevated straight segment ``p0 -> p1``."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    return np.array([p0, (2 * p0 + p1) / 3, (p0 + 2 * p1) / 3, p1])


def circle_points(cx: float, cy: float, r: float) -> np.ndarray:
    """Four-segment cubic circle, counter-clockwise in x-right/y-up axes."""
    k = KAPPA * r
    return np.array(
        [
            [cx + r, cy], [cx + r, cy + k], [cx + k, cy + r],
            [cx, cy + r], [cx - k, cy + r], [cx - r, cy + k],
            [cx - r, cy], [cx - r, cy - k], [cx - k, cy - r],
            [cx, cy - r], [cx + k, cy - r], [cx + r, cy - k],
        ]
    )


def square_vertices(x: float, y: float, size: float) -> np.ndarray:
    return np.array([[x, y], [x + size, y], [x + size, y + size], [x, y + size]], dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------


class Slot(NamedTuple):
    path: int
    family: str
    start: int
    stop: int


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple = field(default=())

    def __len__(self):
        return len(self.values)

    def slots_for(self, family: str):
        return [s for s in self.layout if s.family == family]


def _path_families(path: Path, style: StyleConfig):
    for fam in FAMILIES:
        if fam not in style.trainable:
            continue
        if fam == "points":
            n = len(path.points) // 3 if style.shape == "polygon" else len(path.points)
            yield fam, 2 * n
        elif fam == "fill" and path.fill is not None:
            yield fam, 4
        elif fam in ("stroke_color", "stroke_width") and path.stroke is not None:
            yield fam, 4 if fam == "stroke_color" else 1
        elif fam == "opacity" and (path.stroke is not None or path.fill is not None):
            yield fam, 1


def param_layout(scene: Scene, style: StyleConfig) -> tuple:
    slots = []
    pos = 0
    for i, path in enumerate(scene.paths):
        for fam, size in _path_families(path, style):
            slots.append(Slot(i, fam, pos, pos + size))
            pos += size
    return tuple(slots)


def pack_params(scene: Scene, style: StyleConfig) -> ParamVector:
    layout = param_layout(scene, style)
    size = layout[-1].stop if layout else 0
    values = np.empty(size, dtype=np.float64)
    for slot in layout:
        path = scene.paths[slot.path]
        if slot.family == "points":
            pts = path.points[0::3] if style.shape == "polygon" else path.points
            values[slot.start:slot.stop] = pts.reshape(-1)
        elif slot.family == "fill":
            values[slot.start:slot.stop] = path.fill.as_array()
        elif slot.family == "stroke_color":
            values[slot.start:slot.stop] = path.stroke.color.as_array()
        elif slot.family == "stroke_width":
            values[slot.start] = path.stroke.width
        else:
            values[slot.start] = (path.stroke.color if path.stroke is not None else path.fill).a
    return ParamVector(values, layout)


def unpack_params(vec: ParamVector, scene: Scene, style: StyleConfig) -> Scene:
    """Write trainable values back into ``scene``; colors and widths are clamped."""
    layout = param_layout(scene, style)
    if tuple(vec.layout) != layout or len(vec.values) != (layout[-1].stop if layout else 0):
        raise ContractError("parameter layout does not match scene/style")
    values = np.asarray(vec.values, dtype=np.float64)
    by_path: dict = {}
    for slot in layout:
        by_path.setdefault(slot.path, []).append(slot)
    paths = list(scene.paths)
    for i, slots in by_path.items():
        path = paths[i]
        changes = {}
        stroke = path.stroke
        fill = path.fill
        for slot in slots:
            chunk = values[slot.start:slot.stop]
            if slot.family == "points":
                pts = chunk.reshape(-1, 2)
                changes["points"] = polygon_points(pts) if style.shape == "polygon" else pts.copy()
            elif slot.family == "fill":
                fill = ColorRGBA.from_array(chunk).clamped()
            elif slot.family == "stroke_color":
                stroke = replace(stroke, color=ColorRGBA.from_array(chunk).clamped())
            elif slot.family == "stroke_width":
                stroke = replace(stroke, width=max(0.0, float(chunk[0])))
            else:
                alpha = min(1.0, max(0.0, float(chunk[0])))
                if stroke is not None:
                    stroke = replace(stroke, color=replace(stroke.color, a=alpha))
                else:
                    fill = replace(fill, a=alpha)
        paths[i] = replace(path, fill=fill, stroke=stroke, **changes)
    return scene.with_paths(paths)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


# shape checks tolerate coordinates rounded to the 4 decimals that SVG output keeps
SHAPE_TOL = 1e-4


def _is_polygon(points: np.ndarray, tol: float = SHAPE_TOL) -> bool:
    if len(points) % 3:
        return False
    expected = polygon_points(points[0::3])
    return bool(np.allclose(points, expected, rtol=0.0, atol=tol))


def _is_axis_square(points: np.ndarray, tol: float = SHAPE_TOL) -> bool:
    if len(points) != 12 or not _is_polygon(points, tol):
        return False
    v = points[0::3]
    # consecutive vertices must share one coordinate (no diagonals)
    for i in range(4):
        a, b = v[i], v[(i + 1) % 4]
        if not (abs(a[0] - b[0]) <= tol or abs(a[1] - b[1]) <= tol):
            return False
    w = float(v[:, 0].max() - v[:, 0].min())
    h = float(v[:, 1].max() - v[:, 1].min())
    xs_ok = all(min(abs(x - v[:, 0].min()), abs(x - v[:, 0].max())) <= tol for x in v[:, 0])
    ys_ok = all(min(abs(y - v[:, 1].min()), abs(y - v[:, 1].max())) <= tol for y in v[:, 1])
    return xs_ok and ys_ok and w > tol and abs(w - h) <= 2 * tol


def validate_scene(scene: Scene, style: Optional[StyleConfig] = None, regions=None) -> list:
    """Return every invariant violation found; an empty list means valid."""
    out = []
    if scene.canvas_w < 1 or scene.canvas_h < 1:
        out.append(f"canvas {scene.canvas_w}x{scene.canvas_h} must be at least 1x1")
    if not scene.background.in_range():
        out.append("background color outside [0, 1]")
    for i, path in enumerate(scene.paths):
        where = f"path {i}"
        pts = path.points
        m = len(pts)
        if not np.all(np.isfinite(pts)):
            out.append(f"{where}: non-finite control point")
        if m < 4:
            out.append(f"{where}: {m} control points, need at least 4")
        elif path.closed and m % 3 != 0:
            out.append(f"{where}: closed chain needs m % 3 == 0, got m={m}")
        elif not path.closed and m % 3 != 1:
            out.append(f"{where}: open chain needs m % 3 == 1, got m={m}")
        if path.closed and path.fill is None and path.stroke is None:
            out.append(f"{where}: closed path has neither fill nor stroke")
        if not path.closed:
            if path.fill is not None:
                out.append(f"{where}: open path carries a fill")
            if path.stroke is None:
                out.append(f"{where}: open path has no stroke")
        if path.fill is not None and not path.fill.in_range():
            out.append(f"{where}: fill color outside [0, 1]")
        if path.stroke is not None:
            if not path.stroke.color.in_range():
                out.append(f"{where}: stroke color outside [0, 1]")
            if not (math.isfinite(path.stroke.width) and path.stroke.width >= 0):
                out.append(f"{where}: stroke width {path.stroke.width} invalid")
        if regions is not None and path.region_tag is not None and path.region_tag not in regions:
            out.append(f"{where}: undeclared region {path.region_tag!r}")
        if style is not None:
            out.extend(f"{where}: {msg}" for msg in _style_violations(path, style))
    return out


def _style_violations(path: Path, style: StyleConfig):
    shape = style.shape
    if shape == "open-cubic" and path.closed:
        yield f"{style.style.value} requires open paths"
    if shape != "open-cubic" and not path.closed:
        yield f"{style.style.value} requires closed paths"
    if shape == "polygon" and path.closed and not _is_polygon(path.points):
        yield "low_poly path is not a polygon"
    if shape == "axis-aligned-square" and path.closed and not _is_axis_square(path.points):
        yield "pixel_art path is not an axis-aligned square"
    if style.closed_fill and path.fill is None:
        yield f"{style.style.value} requires a fill"
    if shape == "open-cubic" and path.stroke is None:
        yield f"{style.style.value} requires a stroke"
    if style.style is Style.INK_WASH and path.stroke is not None:
        c = path.stroke.color
        if (c.r, c.g, c.b) != (0.0, 0.0, 0.0):
            yield "ink_wash stroke color must be black"
