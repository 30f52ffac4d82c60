"""Reading, writing and composing the SVG subset used for scenes.

Supported: a root ``svg`` with ``width``/``height``/``viewBox``, ``g``
groups with an ``id``, and ``path`` elements whose ``d`` uses absolute
``M``/``L``/``C``/``Z`` commands.  Documents are kept canonical (coordinates
rounded to four decimals, colors to 8-bit channels) so that writing and
parsing are exact inverses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence
from xml.parsers import expat

import numpy as np

from .model import WHITE, ColorRGBA, ContractError, Path, Scene, StrokeStyle

DECIMALS = 4
SVG_NS = "http://www.w3.org/2000/svg"

ROOT_ATTRS = {"xmlns", "width", "height", "viewBox", "version", "data-background", "data-background-opacity"}
GROUP_ATTRS = {"id", "data-region"}
PATH_ATTRS = {
    "d", "fill", "fill-opacity", "stroke", "stroke-width", "stroke-opacity", "stroke-linecap", "stroke-linejoin",
}


class SvgError(ValueError):
    """Parse failure with a kind and a 1-based source position."""

    KINDS = (
        "malformed-xml",
        "malformed-path-data",
        "unsupported-command",
        "unsupported-element",
        "unsupported-attribute",
        "missing-dimensions",
        "invalid-value",
    )

    def __init__(self, kind: str, message: str, line: int = 0, column: int = 0):
        assert kind in self.KINDS
        self.kind = kind
        self.line = line
        self.column = column
        super().__init__(f"{line}:{column}: {kind}: {message}")


# ---------------------------------------------------------------------------
# Document model
# ---------------------------------------------------------------------------


def q(value: float) -> float:
    """Canonical coordinate: rounded to the serialized precision, negative zero removed."""
    return round(float(value), DECIMALS) + 0.0


def q8(value: float) -> int:
    return int(round(min(max(float(value), 0.0), 1.0) * 255.0))


@dataclass(frozen=True)
class SvgPath:
    points: tuple
    closed: bool
    fill: Optional[tuple] = None
    fill_opacity: float = 1.0
    stroke: Optional[tuple] = None
    stroke_width: float = 0.0
    stroke_opacity: float = 1.0


@dataclass(frozen=True)
class SvgGroup:
    id: str
    paths: tuple = ()
    region: Optional[str] = None


@dataclass(frozen=True)
class SvgDocument:
    width: int
    height: int
    groups: tuple = ()
    view_box: Optional[tuple] = None
    background: Optional[tuple] = None

    def __post_init__(self):
        if self.view_box is None:
            object.__setattr__(self, "view_box", (0.0, 0.0, float(self.width), float(self.height)))
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def n_paths(self) -> int:
        return sum(len(g.paths) for g in self.groups)


@dataclass(frozen=True)
class TransformOp:
    """``translate`` by ``(a, b)`` or ``scale`` by ``(a, b)`` about the origin; ``group=None`` targets all."""

    kind: str
    a: float
    b: float
    group: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("translate", "scale"):
            raise ContractError(f"unknown transform {self.kind!r}")


def _svg_path(path: Path) -> SvgPath:
    pts = tuple((q(x), q(y)) for x, y in path.points)
    fill = fill_op = None
    if path.fill is not None:
        fill = (q8(path.fill.r), q8(path.fill.g), q8(path.fill.b))
        fill_op = q(path.fill.a)
    stroke = None
    width = 0.0
    stroke_op = 1.0
    if path.stroke is not None:
        c = path.stroke.color
        stroke = (q8(c.r), q8(c.g), q8(c.b))
        stroke_op = q(c.a)
        width = q(path.stroke.width)
    return SvgPath(pts, path.closed, fill, 1.0 if fill_op is None else fill_op, stroke, width, stroke_op)


def scene_to_doc(scene: Scene) -> SvgDocument:
    """Group consecutive paths sharing a region tag; untagged paths go to ``main``."""
    groups = []
    used: dict = {}
    run: list = []
    run_tag = None

    def flush():
        if not run:
            return
        base = run_tag if run_tag is not None else "main"
        n = used.get(base, 0) + 1
        used[base] = n
        gid = base if n == 1 else f"{base}_{n}"
        groups.append(SvgGroup(gid, tuple(run), run_tag))

    for path in scene.paths:
        if run and path.region_tag != run_tag:
            flush()
            run = []
        run_tag = path.region_tag
        run.append(_svg_path(path))
    flush()
    bg = scene.background
    background = None
    if bg != WHITE:
        background = (q8(bg.r), q8(bg.g), q8(bg.b), q(bg.a))
    return SvgDocument(scene.canvas_w, scene.canvas_h, groups, background=background)


def _color(rgb: tuple, alpha: float) -> ColorRGBA:
    return ColorRGBA(rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0, float(alpha))


def doc_to_scene(doc: SvgDocument) -> Scene:
    paths = []
    for group in doc.groups:
        for sp in group.paths:
            fill = _color(sp.fill, sp.fill_opacity) if sp.fill is not None else None
            stroke = None
            if sp.stroke is not None:
                stroke = StrokeStyle(_color(sp.stroke, sp.stroke_opacity), float(sp.stroke_width))
            paths.append(Path(np.array(sp.points, dtype=np.float64), sp.closed, fill, stroke, group.region))
    bg = WHITE if doc.background is None else _color(doc.background[:3], doc.background[3])
    return Scene(doc.width, doc.height, paths, bg)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    return f"{v:.{DECIMALS}f}"


def _hex(rgb: tuple) -> str:
    return "#%02x%02x%02x" % rgb


def path_data(points, closed: bool) -> str:
    pts = list(points)
    parts = [f"M {_num(pts[0][0])} {_num(pts[0][1])}"]
    chain = pts[1:] + ([pts[0]] if closed else [])
    for i in range(0, len(chain) - 2, 3):
        a, b, c = chain[i:i + 3]
        parts.append(f"C {_num(a[0])} {_num(a[1])} {_num(b[0])} {_num(b[1])} {_num(c[0])} {_num(c[1])}")
    if closed:
        parts.append("Z")
    return " ".join(parts)


def _path_line(sp: SvgPath) -> str:
    attrs = [f'd="{path_data(sp.points, sp.closed)}"']
    if sp.fill is not None:
        attrs.append(f'fill="{_hex(sp.fill)}" fill-opacity="{_num(sp.fill_opacity)}"')
    else:
        attrs.append('fill="none"')
    if sp.stroke is not None:
        attrs.append(
            f'stroke="{_hex(sp.stroke)}" stroke-width="{_num(sp.stroke_width)}" '
            f'stroke-opacity="{_num(sp.stroke_opacity)}" stroke-linecap="round" stroke-linejoin="round"'
        )
    else:
        attrs.append('stroke="none"')
    return "<path " + " ".join(attrs) + "/>"


def write_svg(doc: SvgDocument) -> str:
    """Deterministic text: fixed attribute order, one path per line."""
    vb = " ".join(_num(v) if v != int(v) else str(int(v)) for v in doc.view_box)
    head = f'<svg xmlns="{SVG_NS}" width="{doc.width}" height="{doc.height}" viewBox="{vb}"'
    if doc.background is not None:
        head += f' data-background="{_hex(doc.background[:3])}" data-background-opacity="{_num(doc.background[3])}"'
    lines = [head + ">"]
    for group in doc.groups:
        region = f' data-region="{_escape(group.region)}"' if group.region is not None else ""
        lines.append(f'<g id="{_escape(group.id)}"{region}>')
        lines.extend(_path_line(sp) for sp in group.paths)
        lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace('"', "&quot;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


_TOKEN = re.compile(r"\s*(?:([A-Za-z])|([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))\s*,?")
_UNSUPPORTED = set("AaQqSsTtHhVv") | set("mlcz")


def _line_handles(p0, p1) -> list:
    """Inner control points that make a cubic segment trace the line ``p0 -> p1``."""
    return [
        ((2 * p0[0] + p1[0]) / 3, (2 * p0[1] + p1[1]) / 3),
        ((p0[0] + 2 * p1[0]) / 3, (p0[1] + 2 * p1[1]) / 3),
    ]


def parse_path_data(d: str, line: int = 0, column: int = 0):
    """Control points and closed flag of a single-subpath ``d`` string.

    ``L`` and a closing ``Z`` that does not return to the start point become
    straight cubic segments, so a closed result always has a multiple of
    three points.
    """
    tokens = []
    pos = 0
    d = d.strip()
    while pos < len(d):
        m = _TOKEN.match(d, pos)
        if not m or m.end() == pos:
            raise SvgError("malformed-path-data", f"unexpected {d[pos:pos + 10]!r} at offset {pos}", line, column)
        tokens.append((m.group(1), m.group(2), pos))
        pos = m.end()
    if not tokens or tokens[0][0] != "M":
        if tokens and tokens[0][0] in _UNSUPPORTED:
            raise SvgError("unsupported-command", f"command {tokens[0][0]!r} is not supported", line, column)
        raise SvgError("malformed-path-data", "path data must start with an absolute M", line, column)
    pts: list = []
    closed = False
    i = 0
    cmd = None
    while i < len(tokens):
        letter, number, off = tokens[i]
        if letter is not None:
            if letter in _UNSUPPORTED:
                raise SvgError("unsupported-command", f"command {letter!r} at offset {off} is not supported", line, column)
            if letter not in "MLCZ":
                raise SvgError("malformed-path-data", f"unknown command {letter!r} at offset {off}", line, column)
            if closed:
                raise SvgError("malformed-path-data", f"data after Z at offset {off}", line, column)
            if letter == "M" and pts:
                raise SvgError("malformed-path-data", f"multiple subpaths (M at offset {off})", line, column)
            cmd = letter
            i += 1
            if letter == "Z":
                closed = True
                continue
        elif cmd is None or cmd == "Z":
            raise SvgError("malformed-path-data", f"number without command at offset {off}", line, column)
        arity = {"M": 2, "L": 2, "C": 6}[cmd]
        chunk = tokens[i:i + arity]
        if len(chunk) < arity or any(t[1] is None for t in chunk):
            raise SvgError("malformed-path-data", f"{cmd} needs {arity} numbers at offset {off}", line, column)
        vals = [float(t[1]) for t in chunk]
        i += arity
        if cmd == "M":
            pts.append((vals[0], vals[1]))
            cmd = "L"  # extra coordinate pairs after M are implicit lines
        elif cmd == "L":
            pts.extend(_line_handles(pts[-1], (vals[0], vals[1])) + [(vals[0], vals[1])])
        else:
            pts.extend([(vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5])])
    if len(pts) < 4:
        raise SvgError("malformed-path-data", "path needs at least one segment", line, column)
    if closed:
        if pts[-1] == pts[0]:
            pts = pts[:-1]
        else:
            pts.extend(_line_handles(pts[-1], pts[0]))
    return pts, closed


_RGB = re.compile(r"^rgb\(\s*(\d{1,3})\s*,\s*(\d{1,3})\s*,\s*(\d{1,3})\s*\)$")
_HEX = re.compile(r"^#([0-9a-fA-F]{6})$")


def _parse_color(value: str, line: int, column: int):
    value = value.strip()
    if value == "none":
        return None
    m = _HEX.match(value)
    if m:
        h = m.group(1)
        return (int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16))
    m = _RGB.match(value)
    if m:
        rgb = tuple(int(g) for g in m.groups())
        if max(rgb) > 255:
            raise SvgError("invalid-value", f"color channel above 255 in {value!r}", line, column)
        return rgb
    raise SvgError("invalid-value", f"unsupported color {value!r}", line, column)


def _parse_number(value: str, name: str, line: int, column: int, lo: Optional[float] = None, hi: Optional[float] = None):
    text = value.strip()
    if text.endswith("px"):
        text = text[:-2]
    try:
        v = float(text)
    except ValueError:
        raise SvgError("invalid-value", f"{name}={value!r} is not a number", line, column) from None
    if not np.isfinite(v) or (lo is not None and v < lo) or (hi is not None and v > hi):
        raise SvgError("invalid-value", f"{name}={value!r} out of range", line, column)
    return v


class _Builder:
    def __init__(self, parser):
        self.parser = parser
        self.depth = 0
        self.root = None
        self.groups: list = []
        self.current: Optional[dict] = None
        self.loose: Optional[dict] = None

    def pos(self):
        return self.parser.CurrentLineNumber, self.parser.CurrentColumnNumber + 1

    def check_attrs(self, tag: str, attrs: dict, allowed: set):
        line, col = self.pos()
        for name in attrs:
            if name not in allowed:
                raise SvgError("unsupported-attribute", f"attribute {name!r} on <{tag}>", line, col)

    def start(self, tag, attrs):
        line, col = self.pos()
        self.depth += 1
        if self.depth == 1:
            if tag != "svg":
                raise SvgError("unsupported-element", f"root element <{tag}> (expected <svg>)", line, col)
            self.check_attrs(tag, attrs, ROOT_ATTRS)
            self.root = self.read_root(attrs, line, col)
            return
        if tag == "g":
            if self.depth != 2:
                raise SvgError("unsupported-element", "nested <g>", line, col)
            self.check_attrs(tag, attrs, GROUP_ATTRS)
            self.loose = None
            self.current = {"id": attrs.get("id"), "region": attrs.get("data-region"), "paths": []}
            if self.current["id"] is None:
                raise SvgError("invalid-value", "<g> needs an id", line, col)
            self.groups.append(self.current)
            return
        if tag == "path":
            self.check_attrs(tag, attrs, PATH_ATTRS)
            sp = self.read_path(attrs, line, col)
            if self.depth == 2:
                if self.loose is None:
                    self.loose = {"id": "main", "region": None, "paths": []}
                    self.groups.append(self.loose)
                self.loose["paths"].append(sp)
            elif self.depth == 3 and self.current is not None:
                self.current["paths"].append(sp)
            else:
                raise SvgError("unsupported-element", "<path> nested too deeply", line, col)
            return
        raise SvgError("unsupported-element", f"element <{tag}> is not supported", line, col)

    def end(self, tag):
        if tag == "g":
            self.current = None
        self.depth -= 1

    def read_root(self, attrs, line, col):
        if "width" not in attrs or "height" not in attrs:
            raise SvgError("missing-dimensions", "<svg> needs width and height", line, col)
        w = _parse_number(attrs["width"], "width", line, col, lo=1)
        h = _parse_number(attrs["height"], "height", line, col, lo=1)
        if w != int(w) or h != int(h):
            raise SvgError("invalid-value", "width and height must be whole pixels", line, col)
        vb = None
        if "viewBox" in attrs:
            parts = attrs["viewBox"].replace(",", " ").split()
            if len(parts) != 4:
                raise SvgError("invalid-value", f"viewBox {attrs['viewBox']!r} needs four numbers", line, col)
            vb = tuple(_parse_number(p, "viewBox", line, col) for p in parts)
        bg = None
        if "data-background" in attrs:
            rgb = _parse_color(attrs["data-background"], line, col)
            if rgb is None:
                raise SvgError("invalid-value", "data-background cannot be none", line, col)
            alpha = _parse_number(attrs.get("data-background-opacity", "1"), "data-background-opacity", line, col, 0, 1)
            bg = (*rgb, alpha)
        return int(w), int(h), vb, bg

    def read_path(self, attrs, line, col):
        if "d" not in attrs:
            raise SvgError("malformed-path-data", "<path> without d", line, col)
        pts, closed = parse_path_data(attrs["d"], line, col)
        for name in ("stroke-linecap", "stroke-linejoin"):
            if name in attrs and attrs[name] != "round":
                raise SvgError("unsupported-attribute", f"{name}={attrs[name]!r} (only round)", line, col)
        fill = _parse_color(attrs.get("fill", "none"), line, col)
        stroke = _parse_color(attrs.get("stroke", "none"), line, col)
        fill_op = _parse_number(attrs.get("fill-opacity", "1"), "fill-opacity", line, col, 0, 1)
        stroke_op = _parse_number(attrs.get("stroke-opacity", "1"), "stroke-opacity", line, col, 0, 1)
        width = _parse_number(attrs.get("stroke-width", "1" if stroke is not None else "0"), "stroke-width", line, col, 0)
        if fill is None and stroke is None:
            raise SvgError("invalid-value", "path has neither fill nor stroke", line, col)
        if stroke is None:
            width, stroke_op = 0.0, 1.0
        if fill is None:
            fill_op = 1.0
        return SvgPath(tuple(pts), closed, fill, fill_op, stroke, width, stroke_op)


def parse_svg(text: str) -> SvgDocument:
    parser = expat.ParserCreate()
    builder = _Builder(parser)
    parser.StartElementHandler = builder.start
    parser.EndElementHandler = builder.end
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise SvgError("malformed-xml", expat.ErrorString(exc.code), exc.lineno, exc.offset + 1) from None
    if builder.root is None:
        raise SvgError("missing-dimensions", "document has no <svg> root", 1, 1)
    w, h, vb, bg = builder.root
    groups = [SvgGroup(g["id"], tuple(g["paths"]), g["region"]) for g in builder.groups]
    ids = [g.id for g in groups]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise SvgError("invalid-value", f"duplicate group id {dup!r}", 1, 1)
    return SvgDocument(w, h, groups, vb, bg)


def read_svg(path: str) -> SvgDocument:
    with open(path, encoding="utf-8") as fh:
        return parse_svg(fh.read())


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def _apply(sp: SvgPath, ops: Sequence[TransformOp]) -> SvgPath:
    pts = np.array(sp.points, dtype=np.float64)
    width = sp.stroke_width
    for op in ops:
        if op.kind == "translate":
            pts = pts + np.array([op.a, op.b])
        else:
            pts = pts * np.array([op.a, op.b])
            width = width * float(np.sqrt(abs(op.a * op.b)))
    return replace(sp, points=tuple((q(x), q(y)) for x, y in pts), stroke_width=q(width))


def compose(items: Sequence, width: Optional[int] = None, height: Optional[int] = None) -> SvgDocument:
    """Stack documents (later on top), baking each one's transforms into its coordinates.

    ``items`` holds documents or ``(doc, ops)`` pairs.  Colliding group ids
    get a numeric suffix.
    """
    if not items:
        raise ContractError("nothing to compose")
    items = [(it, ()) if isinstance(it, SvgDocument) else (it[0], tuple(it[1])) for it in items]
    dims = {(doc.width, doc.height) for doc, _ in items}
    if width is None or height is None:
        if len(dims) != 1:
            raise ContractError(f"documents have different sizes {sorted(dims)}; pass width and height")
        width, height = dims.pop()
    groups = []
    taken: set = set()
    for doc, ops in items:
        for group in doc.groups:
            mine = [op for op in ops if op.group is None or op.group == group.id]
            paths = tuple(_apply(sp, mine) for sp in group.paths) if mine else group.paths
            gid = group.id
            n = 1
            while gid in taken:
                n += 1
                gid = f"{group.id}_{n}"
            taken.add(gid)
            groups.append(SvgGroup(gid, paths, group.region))
    background = items[0][0].background
    return SvgDocument(width, height, groups, None, background)
