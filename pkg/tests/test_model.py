import math

import numpy as np
import pytest

from vectordream.model import (
    ColorRGBA,
    ContractError,
    ParamVector,
    Path,
    Scene,
    StrokeStyle,
    Style,
    StyleConfig,
    bezier_point,
    circle_points,
    flatten_path,
    line_points,
    pack_params,
    path_signed_area,
    polygon_points,
    square_vertices,
    unpack_params,
    validate_scene,
)
from vectordream.scenes import init_scene

RED = ColorRGBA(1.0, 0.0, 0.0, 1.0)


def test_bezier_endpoints_and_midpoint():
    seg = [(0, 0), (0, 0), (3, 3), (3, 3)]
    assert bezier_point(seg, 0.0) == (0.0, 0.0)
    assert bezier_point(seg, 1.0) == (3.0, 3.0)
    p = bezier_point(seg, 0.5)
    assert p.x == pytest.approx(1.5) and p.y == pytest.approx(1.5)


@pytest.mark.parametrize("t", [-0.01, 1.01])
def test_bezier_domain(t):
    with pytest.raises(ContractError):
        bezier_point([(0, 0)] * 4, t)


def test_straight_segment_flattens_to_two_points():
    path = Path(line_points((0, 0), (10, 3)), False, stroke=StrokeStyle(RED, 1.0))
    for tol in (1.0, 1e-3, 1e-6):
        assert len(flatten_path(path, tol)) == 2


def test_flatten_refinement_is_monotone():
    path = Path(circle_points(20, 20, 10), True, fill=RED)
    counts = [len(flatten_path(path, tol)) for tol in (1.0, 0.5, 0.25, 0.125, 0.01)]
    assert counts == sorted(counts)


def test_quarter_circle_flattening_within_tolerance():
    pts = circle_points(0, 0, 10)[:4]
    path = Path(pts, False, stroke=StrokeStyle(RED, 1.0))
    poly = flatten_path(path, 1e-3)
    ts = np.linspace(0, 1, 2001)
    samples = np.array([bezier_point(pts, t) for t in ts])
    a, b = poly[:-1], poly[1:]
    d = b - a
    rel = samples[:, None, :] - a[None]
    u = np.clip(np.sum(rel * d, -1) / np.sum(d * d, -1), 0, 1)
    dist = np.linalg.norm(rel - u[..., None] * d, axis=-1).min(axis=1)
    assert dist.max() <= 1e-3


def test_signed_area_of_unit_square():
    sq = Path(polygon_points(square_vertices(0, 0, 1)), True, fill=RED)
    assert path_signed_area(sq) == pytest.approx(1.0)
    rev = Path(polygon_points(square_vertices(0, 0, 1)[::-1]), True, fill=RED)
    assert path_signed_area(rev) == pytest.approx(-1.0)


def test_circle_area_within_one_percent():
    area = abs(path_signed_area(Path(circle_points(0, 0, 10), True, fill=RED), 1e-3))
    assert area == pytest.approx(100 * math.pi, rel=0.01)


def test_signed_area_open_path_rejected():
    with pytest.raises(ContractError):
        path_signed_area(Path(line_points((0, 0), (1, 1)), False, stroke=StrokeStyle(RED, 1.0)))


@pytest.mark.parametrize("factor", [2.0, 3.0])
def test_signed_area_translation_and_scaling(factor):
    rng = np.random.default_rng(7)
    pts = circle_points(5, 5, 4) + rng.normal(0, 0.3, (12, 2))
    base = path_signed_area(Path(pts, True, fill=RED), 1e-3)
    moved = path_signed_area(Path(pts + [13.0, -7.5], True, fill=RED), 1e-3)
    scaled = path_signed_area(Path(pts * factor, True, fill=RED), 1e-3 * factor)
    assert moved == pytest.approx(base, rel=1e-6)
    assert scaled == pytest.approx(base * factor**2, rel=1e-6)


def test_iconography_vector_length():
    scene = init_scene(Style.ICONOGRAPHY, 5, 64, 64, np.random.default_rng(0))
    vec = pack_params(scene, StyleConfig.for_style("iconography"))
    assert len(vec) == sum(2 * len(p.points) for p in scene.paths) + 4 * len(scene.paths)


def test_pixel_art_vector_has_no_points():
    style = StyleConfig.for_style("pixel_art")
    scene = init_scene(Style.PIXEL_ART, 9, 48, 48, np.random.default_rng(0))
    vec = pack_params(scene, style)
    assert {s.family for s in vec.layout} == {"fill"}
    assert len(vec) == 4 * 9


@pytest.mark.parametrize("style", list(Style))
def test_pack_unpack_round_trip(style):
    cfg = StyleConfig.for_style(style)
    scene = init_scene(style, 4, 40, 30, np.random.default_rng(3))
    back = unpack_params(pack_params(scene, cfg), scene, cfg)
    assert back.paths == scene.paths


def test_unpack_is_local_and_clamps():
    cfg = StyleConfig.for_style("iconography")
    scene = init_scene(Style.ICONOGRAPHY, 3, 32, 32, np.random.default_rng(1))
    vec = pack_params(scene, cfg)
    slot = vec.slots_for("fill")[1]
    values = vec.values.copy()
    values[slot.start] += 0.2
    out = unpack_params(ParamVector(values, vec.layout), scene, cfg)
    assert out.paths[0] == scene.paths[0] and out.paths[2] == scene.paths[2]
    assert out.paths[1].fill.r == pytest.approx(min(1.0, scene.paths[1].fill.r + 0.2))
    values[slot.start] = 1.7
    values[slot.start + 1] = -0.4
    out = unpack_params(ParamVector(values, vec.layout), scene, cfg)
    assert (out.paths[1].fill.r, out.paths[1].fill.g) == (1.0, 0.0)


def test_unpack_layout_mismatch():
    cfg = StyleConfig.for_style("iconography")
    scene = init_scene(Style.ICONOGRAPHY, 2, 32, 32, np.random.default_rng(1))
    vec = pack_params(scene, cfg)
    with pytest.raises(ContractError):
        unpack_params(ParamVector(vec.values[:-1], vec.layout), scene, cfg)
    with pytest.raises(ContractError):
        unpack_params(vec, scene.with_paths(scene.paths[:1]), cfg)


def test_low_poly_packs_vertices_only():
    cfg = StyleConfig.for_style("low_poly")
    scene = init_scene(Style.LOW_POLY, 2, 32, 32, np.random.default_rng(4))
    vec = pack_params(scene, cfg)
    values = vec.values.copy()
    values[vec.slots_for("points")[0].start] += 1.5
    out = unpack_params(ParamVector(values, vec.layout), scene, cfg)
    assert validate_scene(out, cfg) == []


@pytest.mark.parametrize("style", list(Style))
def test_fresh_init_is_valid(style):
    scene = init_scene(style, 6, 64, 64, np.random.default_rng(11))
    assert validate_scene(scene, StyleConfig.for_style(style)) == []


def test_validation_reports_violations():
    sketch = StyleConfig.for_style("sketch")
    filled_open = Path(line_points((0, 0), (5, 5)), False, fill=RED)
    problems = validate_scene(Scene(16, 16, [filled_open]), sketch)
    assert any("open path carries a fill" in p for p in problems)
    assert any("requires a stroke" in p for p in problems)
    bad = Path(circle_points(8, 8, 3), True, fill=ColorRGBA(1.3, 0, 0, 1))
    assert any("outside [0, 1]" in p for p in validate_scene(Scene(16, 16, [bad])))
    short = Path(np.zeros((5, 2)), True, fill=RED)
    assert any("m % 3" in p for p in validate_scene(Scene(16, 16, [short])))


def test_pixel_art_rejects_rotated_square():
    theta = 0.3
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    verts = (square_vertices(0, 0, 4) - 2) @ rot.T + 8
    scene = Scene(16, 16, [Path(polygon_points(verts), True, fill=RED)])
    assert validate_scene(scene, StyleConfig.for_style("pixel_art"))
    assert validate_scene(scene, StyleConfig.for_style("low_poly")) == []


def test_style_table_trainability():
    expect = {
        "iconography": {"points", "fill"},
        "sketch": {"points", "opacity"},
        "pixel_art": {"fill"},
        "low_poly": {"points", "fill"},
        "painting": {"points", "stroke_color", "stroke_width"},
        "ink_wash": {"points", "opacity", "stroke_width"},
    }
    for name, families in expect.items():
        assert StyleConfig.for_style(name).trainable == families


def test_serialized_precision_keeps_shapes_valid():
    pts = np.round(polygon_points(square_vertices(1.0, 2.0, 4.0 / 3.0)), 4)
    scene = Scene(8, 8, [Path(pts, True, fill=RED)])
    assert validate_scene(scene, StyleConfig.for_style("pixel_art")) == []
    bent = pts.copy()
    bent[1] += 0.01
    assert validate_scene(Scene(8, 8, [Path(bent, True, fill=RED)]), StyleConfig.for_style("low_poly"))
