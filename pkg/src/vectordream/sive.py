"""Attention-guided vectorization into region-tagged layers.

Each region (one background, any number of foreground objects) owns an
attention map.  Maps become sampling distributions for path initialization
and binary masks for a masked reconstruction loss, so every layer is fit
only where its object lives.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    BLACK,
    ColorRGBA,
    ContractError,
    Path,
    Scene,
    Style,
    StyleConfig,
    StrokeStyle,
    pack_params,
    polygon_points,
    square_vertices,
)
from .optim import AdamConfig, LrSchedule, Moments, adam_step, apply_update, check_finite, family_lr
from .raster import RasterImage, RenderOptions, render, render_vjp


@dataclass(frozen=True, eq=False)
class AttentionMap:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractError("attention map must be two-dimensional")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ContractError(f"attention map {self.label!r} must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or not np.all((v == 0) | (v == 1)):
            raise ContractError("mask must be a 2-D grid of 0/1 values")
        object.__setattr__(self, "values", v.astype(np.float64))

    def contains(self, x: float, y: float) -> bool:
        """Whether the pixel holding canvas point ``(x, y)`` is set."""
        h, w = self.values.shape
        if not (0.0 <= x <= w and 0.0 <= y <= h):
            return False
        # the canvas is the closed box, so the far edges belong to the last cells
        row, col = min(int(math.floor(y)), h - 1), min(int(math.floor(x)), w - 1)
        return self.values[row, col] == 1


@dataclass
class RegionSpec:
    label: str
    map: AttentionMap
    n_paths: int
    m_points: Optional[int] = None
    kind: str = "foreground"
    tau: float = 0.5

    def __post_init__(self):
        if self.kind not in ("foreground", "background"):
            raise ContractError(f"region kind must be foreground or background, got {self.kind!r}")
        if self.n_paths < 0:
            raise ContractError("n_paths must be >= 0")


def background_map(fg_maps: Sequence[AttentionMap], label: str = "background") -> AttentionMap:
    """Per-pixel ``max(0, 1 - sum of foreground maps)``."""
    if not fg_maps:
        raise ContractError("at least one foreground map is required")
    shape = fg_maps[0].shape
    if any(m.shape != shape for m in fg_maps):
        raise ContractError("foreground maps differ in size")
    total = np.sum([m.values for m in fg_maps], axis=0)
    return AttentionMap(np.maximum(0.0, 1.0 - total), label)


def softmax_grid(amap: AttentionMap, temperature: float = 0.5) -> np.ndarray:
    """Spatial softmax of ``values / temperature``; sums to one."""
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    logits = amap.values / temperature
    if not np.all(np.isfinite(logits)):
        raise ContractError("attention map produces non-finite logits")
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


def _normalized(values: np.ndarray) -> Optional[np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return None
    return (values - lo) / (hi - lo)


def threshold_mask(amap: AttentionMap, tau: float = 0.5) -> BinaryMask:
    """Mask of cells whose min-max normalized value exceeds ``tau``.

    A constant map has no contrast to threshold and yields an all-ones mask.
    """
    norm = _normalized(amap.values)
    if norm is None:
        warnings.warn(f"attention map {amap.label!r} is constant; using an all-ones mask", stacklevel=2)
        return BinaryMask(np.ones(amap.shape), amap.label)
    return BinaryMask((norm > tau).astype(np.float64), amap.label)


def region_masks(regions: Sequence[RegionSpec]) -> list:
    """Thresholded masks made disjoint: a contested pixel goes to the highest normalized score."""
    masks = [threshold_mask(r.map, r.tau).values for r in regions]
    scores = []
    for r in regions:
        norm = _normalized(r.map.values)
        scores.append(np.ones(r.map.shape) if norm is None else norm)
    scores = np.stack(scores)
    stacked = np.stack(masks)
    contested = stacked.sum(axis=0) > 1
    if np.any(contested):
        ranked = np.where(stacked == 1, scores, -np.inf)
        winner = np.argmax(ranked, axis=0)
        for i in range(len(masks)):
            masks[i] = np.where(contested, (winner == i).astype(np.float64), masks[i])
    return [BinaryMask(m, r.label) for m, r in zip(masks, regions)]


def default_points(style: StyleConfig) -> int:
    return {"closed-cubic": 12, "polygon": 12, "axis-aligned-square": 12, "open-cubic": 13}[style.shape]


def _disc(rng: np.random.Generator, center, radius: float, n: int) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    a = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)], axis=1)


def _fan(first: np.ndarray, others: np.ndarray) -> np.ndarray:
    # order by angle around the first point so closed outlines rarely self-cross
    ang = np.arctan2(others[:, 1] - first[1], others[:, 0] - first[0])
    return np.vstack([first, others[np.argsort(ang, kind="stable")]])


def _color_at(target: Optional[RasterImage], x: float, y: float, rng) -> ColorRGBA:
    if target is None:
        r, g, b = rng.uniform(0.0, 1.0, 3)
        return ColorRGBA(float(r), float(g), float(b), 1.0)
    row = min(max(int(math.floor(y)), 0), target.height - 1)
    col = min(max(int(math.floor(x)), 0), target.width - 1)
    r, g, b = target.rgb[row, col]
    return ColorRGBA(float(r), float(g), float(b), 1.0)


def init_region_paths(
    grid: np.ndarray,
    mask: BinaryMask,
    spec: RegionSpec,
    style: StyleConfig,
    rng: np.random.Generator,
    radius_frac: float = 0.05,
    target: Optional[RasterImage] = None,
) -> list:
    """Sample ``spec.n_paths`` paths whose first point is drawn from ``grid`` on the mask.

    The first point sits at the sampled cell's integer coordinate ``(col, row)``;
    the remaining points are uniform in the disc of radius
    ``radius_frac * min(W, H)`` around it.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != mask.values.shape:
        raise ContractError("probability grid and mask differ in size")
    if spec.n_paths == 0:
        return []
    support = grid * mask.values
    if support.sum() <= 0:
        if mask.values.sum() == 0:
            raise ContractError(f"mask for region {spec.label!r} is empty")
        support = mask.values.copy()
    p = (support / support.sum()).ravel()
    h, w = grid.shape
    radius = radius_frac * min(w, h)
    m = spec.m_points or default_points(style)
    cells = rng.choice(p.size, size=spec.n_paths, p=p)
    paths = []
    for cell in cells:
        row, col = divmod(int(cell), w)
        first = np.array([float(col), float(row)])
        color = _color_at(target, first[0], first[1], rng)
        tag = spec.label
        if style.shape == "axis-aligned-square":
            size = max(radius, 1.0)
            paths.append(Path(polygon_points(square_vertices(first[0], first[1], size)), True, fill=color, region_tag=tag))
        elif style.shape == "polygon":
            n = max(3, m // 3)
            verts = _fan(first, _disc(rng, first, radius, n - 1))
            paths.append(Path(polygon_points(verts), True, fill=color, region_tag=tag))
        elif style.shape == "closed-cubic":
            pts = _fan(first, _disc(rng, first, radius, m - 1))
            paths.append(Path(pts, True, fill=color, region_tag=tag))
        else:
            pts = np.vstack([first, _disc(rng, first, radius, m - 1)])
            paths.append(Path(pts, False, stroke=_stroke_for(style, color, rng), region_tag=tag))
    return paths


def _stroke_for(style: StyleConfig, color: ColorRGBA, rng) -> StrokeStyle:
    if style.style is Style.SKETCH:
        return StrokeStyle(BLACK, 1.5)
    if style.style is Style.INK_WASH:
        return StrokeStyle(ColorRGBA(0.0, 0.0, 0.0, float(rng.uniform(0.6, 1.0))), float(rng.uniform(1.0, 4.0)))
    return StrokeStyle(color, float(rng.uniform(1.0, 4.0)))


def sive_loss(target: RasterImage, rendered: RasterImage, masks: Sequence[BinaryMask]):
    """Masked squared error over RGB and its adjoint with respect to the render."""
    if target.data.shape != rendered.data.shape:
        raise ContractError("target and render differ in size")
    diff = rendered.rgb - target.rgb
    loss = 0.0
    adj = np.zeros_like(rendered.data)
    for mask in masks:
        if mask.values.shape != diff.shape[:2]:
            raise ContractError(f"mask {mask.label!r} does not match image size")
        m = mask.values[..., None]
        loss += float(np.sum((m * diff) ** 2))
        adj[..., :3] += 2.0 * m * m * diff
    return loss, adj


@dataclass(frozen=True)
class SiveConfig:
    iters: int = 500
    temperature: float = 0.5
    radius_frac: float = 0.05
    schedule: LrSchedule = LrSchedule()
    adam: AdamConfig = AdamConfig()
    render: RenderOptions = RenderOptions()
    routing: str = "joint"
    clamp_points: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0:
            raise ContractError("iters must be >= 0")
        if self.routing not in ("joint", "per_region"):
            raise ContractError(f"routing must be joint or per_region, got {self.routing!r}")


@dataclass
class SiveResult:
    scene: Scene
    initial: Scene
    masks: list
    losses: list = field(default_factory=list)


def order_regions(regions: Sequence[RegionSpec]) -> list:
    bgs = [r for r in regions if r.kind == "background"]
    if len(bgs) != 1:
        raise ContractError(f"exactly one background region is required, got {len(bgs)}")
    labels = [r.label for r in regions]
    if len(set(labels)) != len(labels):
        raise ContractError("region labels must be unique")
    shape = regions[0].map.shape
    if any(r.map.shape != shape for r in regions):
        raise ContractError("region maps differ in size")
    return bgs + [r for r in regions if r.kind == "foreground"]


def sive_init(target: RasterImage, regions: Sequence[RegionSpec], style: StyleConfig, cfg: SiveConfig, rng=None):
    """Initial region-tagged scene (background paths bottom) and disjoint masks."""
    ordered = order_regions(regions)
    if ordered[0].map.shape != (target.height, target.width):
        raise ContractError("attention maps do not match the target size")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    masks = region_masks(ordered)
    paths = []
    for spec, mask in zip(ordered, masks):
        grid = softmax_grid(spec.map, cfg.temperature)
        paths.extend(init_region_paths(grid, mask, spec, style, rng, cfg.radius_frac, target))
    return Scene(target.width, target.height, paths), masks


def _region_adjoints(target, rendered, masks, scene: Scene, routing: str):
    loss, adj = sive_loss(target, rendered, masks)
    if routing == "joint":
        return loss, [(adj, None)]
    parts = []
    for mask in masks:
        _, a = sive_loss(target, rendered, [mask])
        parts.append((a, mask.label))
    return loss, parts


def sive_optimize(
    target: RasterImage,
    regions: Sequence[RegionSpec],
    style: StyleConfig,
    cfg: SiveConfig = SiveConfig(),
    init: Optional[Scene] = None,
    frozen: Sequence[str] = (),
) -> SiveResult:
    """Fit region layers to ``target`` under the masked loss.

    ``init`` resumes from an existing scene; paths whose region is listed in
    ``frozen`` receive no updates.  With ``routing="per_region"`` each path is
    driven only by its own region's mask term.
    """
    ordered = order_regions(regions)
    masks = region_masks(ordered)
    scene = init if init is not None else sive_init(target, ordered, style, cfg)[0]
    initial = scene
    frozen = set(frozen)
    vec = pack_params(scene, style)
    moments = Moments.zeros(len(vec.values))
    losses = []
    for it in range(cfg.iters):
        rendered = render(scene, cfg.render)
        loss, parts = _region_adjoints(target, rendered, masks, scene, cfg.routing)
        check_finite("loss", loss, it)
        losses.append(loss)
        vec = pack_params(scene, style)
        grad = np.zeros_like(vec.values)
        for adj, label in parts:
            g = render_vjp(scene, cfg.render, adj, style).values
            for slot in vec.layout:
                if label is None or scene.paths[slot.path].region_tag == label:
                    grad[slot.start:slot.stop] += g[slot.start:slot.stop]
        for slot in vec.layout:
            if scene.paths[slot.path].region_tag in frozen:
                grad[slot.start:slot.stop] = 0.0
        check_finite("gradient", grad, it)
        lr = family_lr(vec.layout, cfg.schedule, it)
        values, moments = adam_step(vec, type(vec)(grad, vec.layout), moments, cfg.adam, lr)
        for slot in vec.layout:
            if scene.paths[slot.path].region_tag in frozen:
                values[slot.start:slot.stop] = vec.values[slot.start:slot.stop]
            elif cfg.clamp_points and slot.family == "points":
                pts = values[slot.start:slot.stop].reshape(-1, 2)
                np.clip(pts[:, 0], 0.0, scene.canvas_w, out=pts[:, 0])
                np.clip(pts[:, 1], 0.0, scene.canvas_h, out=pts[:, 1])
        scene = apply_update(scene, style, values, vec.layout)
    if cfg.iters:
        losses.append(sive_loss(target, render(scene, cfg.render), masks)[0])
    return SiveResult(scene, initial, masks, losses)


def first_point_containment(scene: Scene, masks: Sequence[BinaryMask]) -> float:
    """Fraction of tagged paths whose first control point lies in its region mask."""
    by_label = {m.label: m for m in masks}
    tagged = [p for p in scene.paths if p.region_tag in by_label]
    if not tagged:
        return 1.0
    inside = sum(by_label[p.region_tag].contains(*p.points[0]) for p in tagged)
    return inside / len(tagged)


def two_region_fixture(size: int = 64):
    """Synthetic target and attention maps for an object over a backdrop.

    A red disc of radius ``r`` sits in a white halo of radius ``1.5 r`` on a
    sand backdrop.  The object's attention is a Gaussian bump whose half-level
    falls at ``1.25 r``, inside the halo, so the thresholded masks are disjoint
    and each region's content stays clear of the other's mask.

    Returns ``(target, scene, maps)`` with ``maps`` keyed ``"object"`` and ``"background"``.
    """
    from .model import WHITE, circle_points

    c = size / 2.0
    r = 0.25 * size
    backdrop = ColorRGBA(0.9, 0.85, 0.6, 1.0)
    red = ColorRGBA(0.85, 0.15, 0.1, 1.0)
    paths = [
        Path(polygon_points(square_vertices(0.0, 0.0, float(size))), True, fill=backdrop, region_tag="background"),
        Path(circle_points(c, c, 1.5 * r), True, fill=WHITE, region_tag="background"),
        Path(circle_points(c, c, r), True, fill=red, region_tag="object"),
    ]
    scene = Scene(size, size, paths)
    target = render(scene)
    y, x = np.mgrid[0:size, 0:size] + 0.5
    sigma = 1.25 * r / math.sqrt(2.0 * math.log(2.0))
    bump = np.exp(-((x - c) ** 2 + (y - c) ** 2) / (2.0 * sigma**2))
    obj = AttentionMap(bump, "object")
    return target, scene, {"object": obj, "background": background_map([obj])}
