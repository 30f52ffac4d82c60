import os

import numpy as np
import pytest

from vectordream.model import ColorRGBA, Path, Scene, StrokeStyle, Style, circle_points, line_points
from vectordream.raster import render
from vectordream.scenes import init_scene
from vectordream.svgio import (
    SvgDocument,
    SvgError,
    TransformOp,
    compose,
    doc_to_scene,
    parse_path_data,
    parse_svg,
    read_svg,
    scene_to_doc,
    write_svg,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
RED = ColorRGBA(1.0, 0.0, 0.0, 1.0)


def random_scene(seed):
    rng = np.random.default_rng(seed)
    style = list(Style)[seed % len(Style)]
    size = int(rng.integers(16, 80))
    scene = init_scene(style, int(rng.integers(0, 7)), size, size + 3, rng)
    labels = [None, "background", "object", "sky"]
    tagged = [Path(p.points, p.closed, p.fill, p.stroke, labels[int(rng.integers(0, 4))]) for p in scene.paths]
    return scene.with_paths(tagged)


def test_round_trip_on_generated_documents():
    for seed in range(100):
        doc = scene_to_doc(random_scene(seed))
        text = write_svg(doc)
        assert parse_svg(text) == doc, seed
        assert write_svg(parse_svg(text)) == text


def test_render_survives_serialization():
    for seed in range(10):
        scene = random_scene(seed)
        back = doc_to_scene(parse_svg(write_svg(scene_to_doc(scene))))
        assert np.max(np.abs(render(scene).data - render(back).data)) <= 1 / 255


def test_grouping_rules():
    untagged = Scene(8, 8, [Path(circle_points(4, 4, 2), True, fill=RED) for _ in range(3)])
    doc = scene_to_doc(untagged)
    assert [g.id for g in doc.groups] == ["main"] and len(doc.groups[0].paths) == 3
    two = Scene(8, 8, [Path(circle_points(4, 4, 2), True, fill=RED, region_tag=t) for t in ("background", "object")])
    assert [g.id for g in scene_to_doc(two).groups] == ["background", "object"]
    assert scene_to_doc(Scene(8, 8)).groups == ()
    split = Scene(8, 8, [Path(circle_points(4, 4, 2), True, fill=RED, region_tag=t) for t in ("a", "b", "a")])
    assert [g.id for g in scene_to_doc(split).groups] == ["a", "b", "a_2"]
    assert [p.region_tag for p in doc_to_scene(scene_to_doc(split)).paths] == ["a", "b", "a"]


def test_golden_unit_square():
    from vectordream.model import polygon_points, square_vertices

    scene = Scene(1, 1, [Path(polygon_points(square_vertices(0, 0, 1)), True, fill=RED)])
    with open(os.path.join(FIXTURES, "unit_square.svg"), encoding="utf-8") as fh:
        golden = fh.read()
    text = write_svg(scene_to_doc(scene))
    assert text == golden
    assert text == write_svg(scene_to_doc(scene))
    assert read_svg(os.path.join(FIXTURES, "unit_square.svg")) == scene_to_doc(scene)


def test_single_cubic_with_close():
    pts, closed = parse_path_data("M 0 0 C 1 1 2 2 3 3 Z")
    assert closed
    # the stored outline keeps the cubic's four points and closes with a straight segment
    assert pts[:4] == [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
    assert len(pts) == 6
    assert pts[4:] == [(2.0, 2.0), (1.0, 1.0)]


def test_path_data_variants():
    pts, closed = parse_path_data("M0,0 L3,0 L3,3 Z")
    assert closed and len(pts) == 9
    pts, closed = parse_path_data("M 0 0 C 1 0 2 0 3 0 C 3 1 3 2 0 0 Z")
    assert closed and len(pts) == 6
    pts, closed = parse_path_data("M 1 1 2 2")
    assert not closed and pts[-1] == (2.0, 2.0) and len(pts) == 4


@pytest.mark.parametrize(
    "d,kind",
    [
        ("M 0 0 Q 1 1 2 2", "unsupported-command"),
        ("M 0 0 A 1 1 0 0 1 2 2", "unsupported-command"),
        ("m 0 0 l 1 1", "unsupported-command"),
        ("M 0 0 C 1 1 2", "malformed-path-data"),
        ("M 0 0", "malformed-path-data"),
        ("0 0 L 1 1", "malformed-path-data"),
        ("M 0 0 L 1 1 Z L 2 2", "malformed-path-data"),
        ("M 0 0 L 1 1 M 2 2 L 3 3", "malformed-path-data"),
        ("M 0 0 L 1 # 2", "malformed-path-data"),
    ],
)
def test_path_data_errors(d, kind):
    with pytest.raises(SvgError) as err:
        parse_path_data(d)
    assert err.value.kind == kind


def doc_text(body, head='width="10" height="10"'):
    return f'<svg xmlns="http://www.w3.org/2000/svg" {head}>\n{body}\n</svg>\n'


def test_parse_errors_carry_kind_and_position():
    with pytest.raises(SvgError) as err:
        parse_svg(doc_text('<rect x="0"/>'))
    assert err.value.kind == "unsupported-element" and "rect" in str(err.value)
    assert err.value.line == 2
    with pytest.raises(SvgError) as err:
        parse_svg('<svg xmlns="http://www.w3.org/2000/svg"></svg>')
    assert err.value.kind == "missing-dimensions"
    with pytest.raises(SvgError) as err:
        parse_svg(doc_text('<path d="M 0 0 L 1 1" stroke="#000000" style="x"/>'))
    assert err.value.kind == "unsupported-attribute"
    with pytest.raises(SvgError) as err:
        parse_svg(doc_text('<path d="M 0 0 L 1 1" fill="blue"/>'))
    assert err.value.kind == "invalid-value"
    with pytest.raises(SvgError) as err:
        parse_svg("<svg width='3'")
    assert err.value.kind == "malformed-xml"
    with pytest.raises(SvgError) as err:
        parse_svg(doc_text('<g id="a"></g>\n<g id="a"></g>'))
    assert err.value.kind == "invalid-value"
    with pytest.raises(SvgError) as err:
        parse_svg(doc_text('<path d="M 0 0 L 1 1" fill="#ff0000" fill-opacity="nan"/>'))
    assert err.value.kind == "invalid-value"


def test_parse_accepts_subset_inputs():
    text = doc_text(
        '<path d="M 0 0 L 4 0 L 4 4 Z" fill="rgb(255, 0, 0)"/>\n'
        '<g id="fg" data-region="fg"><path d="M 1 1 C 2 2 3 3 4 4" fill="none" stroke="#0000ff" stroke-width="2"/></g>',
        'width="10px" height="10" viewBox="0 0 10 10"',
    )
    doc = parse_svg(text)
    assert [g.id for g in doc.groups] == ["main", "fg"]
    assert doc.groups[0].paths[0].fill == (255, 0, 0)
    assert doc.groups[1].paths[0].stroke_width == 2.0
    normalized = write_svg(doc)
    assert write_svg(parse_svg(normalized)) == normalized


def fg_doc(size=40):
    scene = Scene(size, size, [Path(circle_points(12, 20, 6), True, fill=RED, region_tag="fg")])
    return scene_to_doc(scene)


def bg_doc(size=40):
    scene = Scene(size, size, [
        Path(circle_points(20, 20, 30), True, fill=ColorRGBA(0.2, 0.6, 0.3, 1.0), region_tag="bg"),
        Path(line_points((2, 2), (38, 5)), False, stroke=StrokeStyle(ColorRGBA(0, 0, 0, 1), 1.5), region_tag="bg"),
    ])
    return scene_to_doc(scene)


def test_compose_identity_and_counts():
    bg, fg = bg_doc(), fg_doc()
    assert compose([bg]) == bg
    assert compose([(bg, [])]) == bg
    both = compose([bg, fg])
    assert len(both.groups) == len(bg.groups) + len(fg.groups)
    assert [len(g.paths) for g in both.groups] == [len(g.paths) for g in bg.groups + fg.groups]
    again = compose([bg, bg])
    assert [g.id for g in again.groups] == ["bg", "bg_2"]


def test_compose_translate_shifts_pixels():
    fg = fg_doc()
    base = render(doc_to_scene(fg)).data
    moved = render(doc_to_scene(compose([(fg, [TransformOp("translate", 10, 0)])]))).data
    assert np.max(np.abs(moved[:, 12:] - base[:, 2:-10])) <= 1 / 255
    assert not np.allclose(moved, base)


def test_compose_scale_and_group_target():
    fg = fg_doc()
    out = compose([(fg, [TransformOp("scale", 2, 2, group="fg"), TransformOp("translate", 1, 0, group="other")])], 80, 80)
    assert (out.width, out.height) == (80, 80)
    assert out.groups[0].paths[0].points[0] == tuple(2 * v for v in fg.groups[0].paths[0].points[0])


def test_compose_size_mismatch():
    from vectordream.model import ContractError

    with pytest.raises(ContractError):
        compose([bg_doc(40), fg_doc(30)])
    assert compose([bg_doc(40), fg_doc(30)], 50, 50).width == 50
    with pytest.raises(ContractError):
        TransformOp("rotate", 1, 0)


def test_background_color_round_trip():
    scene = Scene(6, 6, [], ColorRGBA(0.2, 0.4, 0.6, 1.0))
    doc = scene_to_doc(scene)
    assert parse_svg(write_svg(doc)) == doc
    assert isinstance(doc, SvgDocument) and doc.background is not None
