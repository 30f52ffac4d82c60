"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from typing import Optional, Sequence

import numpy as np

from .images import read_attention, read_image, write_png
from .manifest import Manifest, ManifestError, load_manifest
from .model import ContractError, StyleConfig, validate_scene
from .optim import NumericalAbort
from .raster import psnr, render
from .svgio import SvgError, TransformOp, compose, doc_to_scene, read_svg, scene_to_doc, write_svg

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

MANIFEST_NAME = "manifest.txt"


class InputError(Exception):
    pass


def _configure_threads() -> None:
    raw = os.environ.get("VECTORDREAM_THREADS")
    if raw:
        import torch

        try:
            n = int(raw)
        except ValueError:
            raise InputError(f"VECTORDREAM_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise InputError("VECTORDREAM_THREADS must be >= 1")
        torch.set_num_threads(n)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _prepare(args, keys: dict) -> Manifest:
    """Load the manifest and apply command-line overrides (flag -> manifest key)."""
    man = load_manifest(args.manifest)
    for key in ("oracle", "reward"):
        man.values[key] = _absolute_spec(man[key], man.base_dir)
    for flag, key in keys.items():
        value = getattr(args, flag, None)
        if value is not None:
            if key in ("oracle", "reward"):
                value = _absolute_spec(value, os.getcwd())
            man.override(key, value)
    return man


def _absolute_spec(spec: str, base: str) -> str:
    """Resolve file references in an oracle or reward spec against ``base``."""
    kind, _, rest = spec.partition(":")
    if not rest:
        return spec
    return kind + ":" + ",".join(os.path.abspath(os.path.join(base, p)) for p in rest.split(","))


def _spec_paths(spec: str):
    kind, _, rest = spec.partition(":")
    return kind, (rest.split(",") if rest else [])


def _rgb_file(path: str, width: int, height: int) -> np.ndarray:
    img = read_image(path)
    if (img.width, img.height) != (width, height):
        raise InputError(f"{path}: image is {img.width}x{img.height}, canvas is {width}x{height}")
    return np.asarray(img.rgb)


def read_gmm_file(path: str):
    """``means = a.png, b.png`` / ``weights = 0.5, 0.5`` / ``spread = 0.05``; paths relative to the file."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fields = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            key, sep, value = (s.strip() for s in body.partition("="))
            if not sep or key not in ("means", "weights", "spread") or key in fields:
                raise InputError(f"{path}:{n}: expected one of means/weights/spread = value, each once")
            fields[key] = value
    if "means" not in fields:
        raise InputError(f"{path}: means is required")
    base = os.path.dirname(os.path.abspath(path))
    means = [os.path.join(base, p.strip()) for p in fields["means"].split(",")]
    try:
        weights = [float(w) for w in fields["weights"].split(",")] if "weights" in fields else [1.0 / len(means)] * len(means)
        spread = float(fields.get("spread", "0.05"))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return means, weights, spread


def build_oracle(man: Manifest):
    """Oracle from ``delta:<png>`` or ``gmm:<file>`` plus a mid-gray unconditional branch.

    Also returns the delta target (or ``None``), which seeds reinitialized colors.
    """
    from .score import delta_oracle, gmm_oracle, with_gray_uncond

    spec = man["oracle"]
    if not spec:
        raise InputError("no oracle given; pass --oracle delta:<png> or gmm:<file>")
    kind, paths = _spec_paths(spec)
    w, h = man["width"], man["height"]
    if kind == "delta" and len(paths) == 1:
        target = _rgb_file(paths[0], w, h)
        oracle = delta_oracle(target)
    elif kind == "gmm" and len(paths) == 1:
        mean_paths, weights, spread = read_gmm_file(paths[0])
        target = None
        oracle = gmm_oracle([_rgb_file(p, w, h) for p in mean_paths], weights, spread)
    else:
        raise InputError(f"bad oracle spec {spec!r}; expected delta:<png> or gmm:<file>")
    return with_gray_uncond(oracle, (h, w, 3)), target


def build_reward(man: Manifest):
    from .vpsd import StubReward

    spec = man["reward"]
    kind, paths = _spec_paths(spec)
    if kind == "none":
        return None
    if kind == "colorfulness" and not paths:
        return StubReward("colorfulness")
    if kind == "affinity" and len(paths) == 1:
        return StubReward("target-affinity", _rgb_file(paths[0], man["width"], man["height"]))
    raise InputError(f"bad reward spec {spec!r}; expected none, colorfulness or affinity:<png>")


def _validate(scenes, style: StyleConfig) -> list:
    problems = []
    for i, scene in enumerate(scenes):
        problems.extend(f"scene {i}: {p}" for p in validate_scene(scene, style))
    return problems


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    from .vpsd import vpsd_run

    man = _prepare(args, {"seed": "seed", "style": "style", "iters": "total_iters", "k": "k", "oracle": "oracle", "reward": "reward"})
    cfg = man.run_config()
    oracle, target = build_oracle(man)
    reward = build_reward(man)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, MANIFEST_NAME), man.text())
    result = vpsd_run(cfg, oracle, reward, out_dir=args.out, target=None if target is None else _as_image(target))
    for p in result.particles.particles:
        _write_text(os.path.join(args.out, f"particle_{p.id}.svg"), write_svg(scene_to_doc(p.scene)))
    _write_text(os.path.join(args.out, "report.txt"), result.report_text())
    problems = _validate(result.particles.scenes, cfg.style_config)
    if problems:
        print("\n".join(problems), file=sys.stderr)
        return EXIT_VALIDATION
    print(f"wrote {len(result.particles)} particles to {args.out}")
    return EXIT_OK


def _as_image(rgb: np.ndarray):
    from .raster import RasterImage

    h, w, _ = rgb.shape
    return RasterImage(np.concatenate([rgb, np.ones((h, w, 1))], axis=-1))


def _load_regions(man: Manifest, maps_dir: str, shape):
    from .sive import AttentionMap, RegionSpec, background_map

    if not os.path.isdir(maps_dir):
        raise InputError(f"maps directory not found: {maps_dir}")
    found = {os.path.splitext(f)[0]: os.path.join(maps_dir, f) for f in sorted(os.listdir(maps_dir)) if f.lower().endswith(".png")}
    labels = sorted(set(found) | set(man.regions))
    kinds = {}
    for label in labels:
        kind = man.regions.get(label, {}).get("kind") or ("background" if label == "background" else "foreground")
        kinds[label] = kind
    maps = {}
    for label in labels:
        if label in found:
            values = read_attention(found[label])
        elif kinds[label] == "background":
            continue
        else:
            raise InputError(f"missing attention map {os.path.join(maps_dir, label + '.png')}")
        if values.shape != shape:
            raise InputError(f"{found[label]}: map is {values.shape[1]}x{values.shape[0]}, target is {shape[1]}x{shape[0]}")
        maps[label] = AttentionMap(values, label)
    fg = [maps[lb] for lb in labels if kinds[lb] == "foreground"]
    if not fg:
        raise InputError(f"no foreground attention maps in {maps_dir}")
    bg_labels = [lb for lb in labels if kinds[lb] == "background"]
    if not bg_labels:
        bg_labels = ["background"]
        kinds["background"] = "background"
    if len(bg_labels) != 1:
        raise InputError(f"exactly one background region is required, got {bg_labels}")
    if bg_labels[0] not in maps:
        maps[bg_labels[0]] = background_map(fg, bg_labels[0])
    regions = []
    for label in sorted(maps):
        conf = man.regions.get(label, {})
        regions.append(
            RegionSpec(
                label,
                maps[label],
                conf.get("n_paths") if conf.get("n_paths") is not None else man["region_paths"],
                conf.get("m_points") or None,
                kinds[label],
                conf.get("tau", 0.5),
            )
        )
    return regions


def cmd_vectorize(args) -> int:
    from .sive import first_point_containment, sive_optimize

    man = _prepare(args, {"seed": "seed", "style": "style", "iters": "sive_iters"})
    target = read_image(args.target)
    regions = _load_regions(man, args.maps, (target.height, target.width))
    style = StyleConfig.for_style(man["style"])
    cfg = man.sive_config()
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, MANIFEST_NAME), man.text())
    result = sive_optimize(target, regions, style, cfg)
    _write_text(os.path.join(args.out, "sive.svg"), write_svg(scene_to_doc(result.scene)))
    write_png(render(result.scene, cfg.render), os.path.join(args.out, "render.png"))
    lines = [
        f"regions {' '.join(m.label for m in result.masks)}",
        f"paths {len(result.scene.paths)}",
        f"containment_initial {first_point_containment(result.initial, result.masks):.17g}",
        f"containment_final {first_point_containment(result.scene, result.masks):.17g}",
    ]
    lines += [f"iter {i} loss {v:.17g}" for i, v in enumerate(result.losses)]
    _write_text(os.path.join(args.out, "report.txt"), "\n".join(lines) + "\n")
    problems = _validate([result.scene], style)
    if problems:
        print("\n".join(problems), file=sys.stderr)
        return EXIT_VALIDATION
    print(f"wrote {os.path.join(args.out, 'sive.svg')}")
    return EXIT_OK


def cmd_render(args) -> int:
    man = load_manifest(args.manifest)
    scene = doc_to_scene(read_svg(args.svg))
    write_png(render(scene, man.render_options()), args.out)
    return EXIT_OK


_ITEM_OP = re.compile(r"^(translate|scale)=([-+0-9.eE]+),([-+0-9.eE]+)$")


def parse_compose_item(item: str):
    """``file.svg[:translate=dx,dy][:scale=sx,sy]`` -> ``(path, ops)``; ops apply left to right."""
    parts = item.split(":")
    ops = []
    for part in parts[1:]:
        m = _ITEM_OP.match(part)
        if not m:
            raise InputError(f"bad transform {part!r} in {item!r}; expected translate=dx,dy or scale=sx,sy")
        try:
            ops.append(TransformOp(m.group(1), float(m.group(2)), float(m.group(3))))
        except ValueError:
            raise InputError(f"bad number in {part!r}") from None
    return parts[0], ops


def cmd_compose(args) -> int:
    items = []
    for item in args.items:
        path, ops = parse_compose_item(item)
        items.append((read_svg(path), ops))
    doc = compose(items, args.width, args.height)
    _write_text(args.out, write_svg(doc))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.seed, args.n_scenes, corrupt=args.corrupt_gradient)
    text = "".join(r.line() + "\n" for r in results)
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "gradcheck.txt"), text)
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err)
        print(f"worst offender: {worst.line()}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_psnr(args) -> int:
    print(f"{psnr(read_image(args.a), read_image(args.b)):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vectordream", description="Vector graphics by score distillation with oracle denoisers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_flags=True):
        p.add_argument("--manifest", help="key = value run manifest")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--style")
        p.add_argument("--iters", type=int)
        if run_flags:
            p.add_argument("--k", type=int)
            p.add_argument("--oracle", help="delta:<png> or gmm:<file listing means, weights, spread>")
            p.add_argument("--reward", help="none, colorfulness or affinity:<png>")

    p = sub.add_parser("vectorize", help="layered vectorization of an image guided by attention maps")
    p.add_argument("target", help="target PNG or PPM")
    p.add_argument("--maps", required=True, help="directory of <label>.png attention maps")
    common(p, run_flags=False)
    p.set_defaults(func=cmd_vectorize)

    p = sub.add_parser("synthesize", help="optimize k particles against an oracle")
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("render", help="rasterize an SVG")
    p.add_argument("svg")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--manifest", help="render options")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compose", help="stack SVGs, baking transforms into coordinates")
    p.add_argument("items", nargs="+", help="file.svg[:translate=dx,dy][:scale=sx,sy], bottom first")
    p.add_argument("--out", required=True, help="output SVG")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("gradcheck", help="compare rasterizer gradients to finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=20)
    p.add_argument("--out", help="also write gradcheck.txt here")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("psnr", help="PSNR in dB between two images")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_psnr)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_threads()
        if getattr(args, "n_scenes", 0) < 0:
            raise InputError("--n-scenes must be >= 0")
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"input error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ManifestError, SvgError, ContractError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
