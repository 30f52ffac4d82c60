"""Finite-difference harness for the rasterizer adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Scene, Style, StyleConfig
from .raster import RenderOptions, finite_diff_grad, relative_errors, render_vjp
from .scenes import init_scene

STYLE_CYCLE = (
    Style.ICONOGRAPHY,
    Style.SKETCH,
    Style.PAINTING,
    Style.LOW_POLY,
    Style.INK_WASH,
    Style.PIXEL_ART,
)


@dataclass
class GradcheckCase:
    seed: int
    scene: Scene
    style: StyleConfig
    adjoint: np.ndarray


@dataclass
class GradcheckResult:
    seed: int
    style: str
    n_params: int
    max_rel_err: float
    worst_index: int
    worst_family: str
    analytic: float
    numeric: float
    passed: bool

    def line(self) -> str:
        return (
            f"seed={self.seed} style={self.style} params={self.n_params} "
            f"max_rel_err={self.max_rel_err:.3e} worst={self.worst_family}[{self.worst_index}] "
            f"analytic={self.analytic:.6e} numeric={self.numeric:.6e} "
            f"{'PASS' if self.passed else 'FAIL'}"
        )


def smooth_field(rng: np.random.Generator, height: int, width: int, channels: int = 4, terms: int = 6):
    """Sum of random low-frequency cosines, a loss-like adjoint."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width, channels))
    for c in range(channels):
        for _ in range(terms):
            kx, ky = rng.uniform(-3, 3, 2) * 2 * np.pi / np.array([width, height])
            out[..., c] += rng.normal() * np.cos(kx * x + ky * y + rng.uniform(0, 2 * np.pi))
    return out


def random_case(seed: int, size: int = 64, max_paths: int = 8) -> GradcheckCase:
    rng = np.random.default_rng(seed)
    style = StyleConfig.for_style(STYLE_CYCLE[seed % len(STYLE_CYCLE)])
    n_paths = int(rng.integers(1, max_paths + 1))
    scene = init_scene(style.style, n_paths, size, size, rng, radius_frac=(0.08, 0.25), alpha=(0.5, 0.95))
    return GradcheckCase(seed, scene, style, smooth_field(rng, size, size))


def check_case(
    case: GradcheckCase,
    opts: RenderOptions = RenderOptions(),
    h: float = 1e-3,
    rtol: float = 2e-2,
    floor: float = 1e-6,
    corrupt: bool = False,
) -> GradcheckResult:
    analytic = render_vjp(case.scene, opts, case.adjoint, case.style)
    numeric = finite_diff_grad(case.scene, opts, case.adjoint, case.style, h)
    a = analytic.values.copy()
    if corrupt and len(a):
        a[0] = 2.0 * a[0] + 1.0
    err = relative_errors(a, numeric.values, floor)
    worst = int(np.argmax(err)) if len(err) else 0
    family = next((s.family for s in analytic.layout if s.start <= worst < s.stop), "-")
    return GradcheckResult(
        seed=case.seed,
        style=case.style.style.value,
        n_params=len(a),
        max_rel_err=float(err.max()) if len(err) else 0.0,
        worst_index=worst,
        worst_family=family,
        analytic=float(a[worst]) if len(a) else 0.0,
        numeric=float(numeric.values[worst]) if len(a) else 0.0,
        passed=bool(np.all(err <= rtol)),
    )


def run_gradcheck(seed: int, n_scenes: int, corrupt: bool = False, **kwargs) -> list:
    return [check_case(random_case(seed + i), corrupt=corrupt, **kwargs) for i in range(n_scenes)]
