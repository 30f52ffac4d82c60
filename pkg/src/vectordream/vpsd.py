"""Particle-based score distillation: the run loop and its pieces.

A run keeps ``k`` scenes (particles).  Each iteration one particle takes an
Adam step along the residual between the guided oracle and the estimator,
the estimator is refit on renders of every particle, reward feedback nudges
the estimator early in the run, and faded or collapsed paths are periodically
recreated.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .model import (
    ColorRGBA,
    ContractError,
    Path,
    Scene,
    Style,
    StyleConfig,
    circle_points,
    pack_params,
    path_signed_area,
    polygon_points,
    validate_scene,
)
from .optim import (
    AdamConfig,
    LrSchedule,
    Moments,
    adam_step,
    apply_update,
    check_finite,
    clamp_lr,
    family_lr,
    remap_moments,
)
from .raster import RasterImage, RenderOptions, render
from .scenes import init_scene
from .score import (
    DeskEstimator,
    GuidanceConfig,
    IdentityCodec,
    NoiseSchedule,
    ddim_run,
    estimator_fit_step,
    perturb,
    sds_step,
    vpsd_step,
    weight_at,
    crop_resize,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReinitPolicy:
    opacity_floor: float = 0.05
    area_floor_frac: float = 1e-4
    period: int = 50
    new_radius_frac: tuple = (0.01, 0.05)

    def __post_init__(self):
        if self.opacity_floor < 0 or self.area_floor_frac < 0:
            raise ContractError("reinit floors must be >= 0")
        if self.period < 1:
            raise ContractError("reinit period must be >= 1")
        lo, hi = self.new_radius_frac
        if not 0 < lo <= hi:
            raise ContractError("new_radius_frac must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class ReFLConfig:
    lambda_inner: float = 1e-3
    lambda_r: float = 1.0
    samples_w: Optional[int] = None
    keep_fraction: float = 0.5
    ddim_steps: int = 20
    margin: float = 0.0
    active_until_iter: int = 350
    period: int = 1

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ContractError("keep_fraction must lie in (0, 1]")
        if self.ddim_steps < 1 or self.period < 1:
            raise ContractError("ddim_steps and period must be >= 1")
        if self.samples_w is not None and self.samples_w < 1:
            raise ContractError("samples_w must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    k: int = 6
    total_iters: int = 700
    cfg_scale: float = 7.5
    t_range: tuple = (0.05, 0.95)
    style: Style = Style.ICONOGRAPHY
    n_paths: int = 16
    width: int = 64
    height: int = 64
    seed: int = 0
    condition: str = "prompt"
    mode: str = "vpsd"
    weighting: str = "constant"
    augment: bool = False
    estimator_lr: float = 1.0
    estimator_samples: int = 4
    schedule: LrSchedule = LrSchedule()
    adam: AdamConfig = AdamConfig()
    reinit: ReinitPolicy = ReinitPolicy()
    refl: ReFLConfig = ReFLConfig()
    render: RenderOptions = RenderOptions()
    checkpoint_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "style", Style(self.style))
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.total_iters < 0:
            problems.append("total_iters must be >= 0")
        if self.cfg_scale < 0:
            problems.append("cfg_scale must be >= 0")
        lo, hi = self.t_range
        if not 0 < lo <= hi < 1:
            problems.append("t_range must satisfy 0 < lo <= hi < 1")
        if self.n_paths < 0 or self.width < 1 or self.height < 1:
            problems.append("n_paths >= 0 and canvas >= 1x1 required")
        if self.mode not in ("vpsd", "sds"):
            problems.append(f"mode must be vpsd or sds, got {self.mode!r}")
        if self.weighting not in ("constant", "sigma2"):
            problems.append(f"weighting must be constant or sigma2, got {self.weighting!r}")
        if not 0 < self.estimator_lr <= 1:
            problems.append("estimator_lr must lie in (0, 1]")
        if self.estimator_samples < 1:
            problems.append("estimator_samples must be >= 1")
        if self.refl.samples_w is not None and self.refl.samples_w > self.k:
            problems.append("refl samples_w must not exceed k")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every must be >= 1")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def style_config(self) -> StyleConfig:
        return StyleConfig.for_style(self.style)

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.cfg_scale)


# ---------------------------------------------------------------------------
# Particles and sampling
# ---------------------------------------------------------------------------


@dataclass
class Particle:
    scene: Scene
    moments: Moments
    id: int


@dataclass
class ParticleSet:
    particles: list

    def __post_init__(self):
        if not self.particles:
            raise ContractError("a particle set needs at least one particle")
        dims = {(p.scene.canvas_w, p.scene.canvas_h) for p in self.particles}
        if len(dims) != 1:
            raise ContractError("particles must share canvas dimensions")

    def __len__(self):
        return len(self.particles)

    @property
    def scenes(self):
        return [p.scene for p in self.particles]

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], style: StyleConfig) -> "ParticleSet":
        return cls([Particle(s, Moments.zeros(len(pack_params(s, style).values)), i) for i, s in enumerate(scenes)])


def sample_timestep(rng: np.random.Generator, t_range=(0.05, 0.95)) -> float:
    lo, hi = t_range
    if not 0 < lo <= hi < 1:
        raise ContractError("t_range must satisfy 0 < lo <= hi < 1")
    return float(rng.uniform(lo, hi))


def select_particle(rng: np.random.Generator, particles: ParticleSet) -> int:
    if len(particles) < 1:
        raise ContractError("empty particle set")
    return int(rng.integers(0, len(particles)))


# ---------------------------------------------------------------------------
# Reward feedback
# ---------------------------------------------------------------------------


def _rgb(image) -> np.ndarray:
    data = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    return data[..., :3]


class StubReward:
    """Deterministic reward: ``-MSE`` to a reference, or mean per-channel std."""

    def __init__(self, mode: str = "target-affinity", reference=None):
        if mode not in ("target-affinity", "colorfulness"):
            raise ContractError(f"unknown reward mode {mode!r}")
        if mode == "target-affinity":
            if reference is None:
                raise ContractError("target-affinity reward needs a reference image")
            reference = _rgb(reference).astype(np.float64)
        self.mode = mode
        self.reference = reference

    def score(self, condition: str, image) -> float:
        x = _rgb(image)
        if self.mode == "target-affinity":
            return -float(np.mean((x - self.reference) ** 2))
        return float(np.mean(x.reshape(-1, 3).std(axis=0)))

    def grad(self, condition: str, image) -> np.ndarray:
        """Gradient of :meth:`score` with respect to the RGB channels."""
        x = _rgb(image)
        if self.mode == "target-affinity":
            return -2.0 * (x - self.reference) / x.size
        flat = x.reshape(-1, 3)
        mu = flat.mean(axis=0)
        std = flat.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        g = (flat - mu) / (len(flat) * safe) / 3.0
        g[:, std == 0] = 0.0
        return g.reshape(x.shape)


@dataclass
class ReflOutcome:
    reward_loss: float
    mean_reward: float
    kept_mean_reward: float
    rewards: list
    kept: list
    fit_loss: float = 0.0
    skipped: Optional[str] = None


def keep_top(rewards: Sequence[float], keep_fraction: float) -> list:
    """Indices of the best ``ceil(keep_fraction * n)`` rewards (ties keep the earlier sample)."""
    n = len(rewards)
    n_keep = max(1, math.ceil(keep_fraction * n - 1e-12))
    order = sorted(range(n), key=lambda i: (-rewards[i], i))
    return sorted(order[:n_keep])


def reward_loss_value(rewards: Sequence[float], kept: Sequence[int], lam: float, margin: float) -> float:
    """``lam * mean over kept of relu(margin - r)``."""
    if not kept:
        return 0.0
    return lam * float(np.mean([max(0.0, margin - rewards[i]) for i in kept]))


def refl_update(
    estimator: DeskEstimator,
    reward,
    cfg: ReFLConfig,
    condition: str,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    shape,
    n_samples: int,
    lr: float,
    codec=None,
    t_range=(0.05, 0.95),
) -> ReflOutcome:
    """Sample from the estimator, keep the best-rewarded samples, and step the estimator.

    The step descends the noise-regression loss on the kept samples plus the
    hinge reward loss, whose gradient flows back through the DDIM chain.
    """
    codec = codec or IdentityCodec()
    bias0, gain0 = estimator.state(condition)
    bias = torch.from_numpy(bias0).requires_grad_(True)
    gain = torch.tensor(gain0, dtype=torch.float64, requires_grad=True)
    samples = []
    for _ in range(n_samples):
        z = torch.from_numpy(rng.standard_normal(tuple(shape)))
        samples.append(ddim_run(lambda z_t, t: estimator.predict_torch(bias, gain, z_t, t), sched, z, cfg.ddim_steps))
    try:
        images = [codec.decode(x.detach().numpy()) for x in samples]
        rewards = [float(reward.score(condition, img)) for img in images]
        grads = [np.asarray(reward.grad(condition, img), dtype=np.float64) for img in images]
    except Exception as exc:  # reward oracle failure skips the update
        return ReflOutcome(0.0, float("nan"), float("nan"), [], [], skipped=str(exc))
    if not all(math.isfinite(r) for r in rewards):
        return ReflOutcome(0.0, float("nan"), float("nan"), rewards, [], skipped="non-finite reward")
    kept = keep_top(rewards, cfg.keep_fraction)
    loss = reward_loss_value(rewards, kept, cfg.lambda_inner, cfg.margin)

    surrogate = torch.zeros((), dtype=torch.float64)
    for i in kept:
        if cfg.margin - rewards[i] > 0:
            coef = -cfg.lambda_inner / len(kept)
            surrogate = surrogate + coef * (torch.from_numpy(grads[i]) * samples[i]).sum()
    g_bias_r = np.zeros_like(bias0)
    g_gain_r = 0.0
    if surrogate.requires_grad:
        gb, gg = torch.autograd.grad(surrogate, (bias, gain), allow_unused=True)
        g_bias_r = np.zeros_like(bias0) if gb is None else gb.numpy()
        g_gain_r = 0.0 if gg is None else float(gg)

    latents = [samples[i].detach().numpy() for i in kept]
    ts = np.array([rng.uniform(*t_range) for _ in latents])
    eps = np.stack([rng.standard_normal(x.shape) for x in latents])
    z_t = np.stack([perturb(x, e, t, sched) for x, e, t in zip(latents, eps, ts)])
    fit, g_bias, g_gain, h_bias, h_gain = estimator.squared_error(z_t, ts, condition, eps)
    estimator.apply(condition, g_bias + g_bias_r, g_gain + g_gain_r, h_bias, h_gain, lr)
    return ReflOutcome(
        reward_loss=loss,
        mean_reward=float(np.mean(rewards)),
        kept_mean_reward=float(np.mean([rewards[i] for i in kept])),
        rewards=rewards,
        kept=kept,
        fit_loss=fit,
    )


# ---------------------------------------------------------------------------
# Path reinitialization
# ---------------------------------------------------------------------------


def _regular_polygon(cx: float, cy: float, r: float, n: int) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(n) / n
    return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)


def needs_reinit(path: Path, policy: ReinitPolicy, canvas_area: float) -> bool:
    if not path.closed or path.fill is None:
        return False
    if path.fill.a < policy.opacity_floor:
        return True
    return abs(path_signed_area(path, 0.05)) < policy.area_floor_frac * canvas_area


def reinit_paths(scene: Scene, policy: ReinitPolicy, style: StyleConfig, rng: np.random.Generator, target: Optional[RasterImage] = None):
    """Replace faded or collapsed filled paths by fresh shapes on top of the stack.

    Returns ``(scene, n_replaced, path_map)`` where ``path_map`` sends every
    surviving path's old index to its new one.  Iconography gets a cubic
    circle, low-poly a regular polygon with the old vertex count; other
    styles are left alone.
    """
    identity = {i: i for i in range(len(scene.paths))}
    if style.shape not in ("closed-cubic", "polygon"):
        return scene, 0, identity
    area = float(scene.canvas_w * scene.canvas_h)
    bad = [i for i, p in enumerate(scene.paths) if needs_reinit(p, policy, area)]
    if not bad:
        return scene, 0, identity
    short = min(scene.canvas_w, scene.canvas_h)
    keep = [i for i in range(len(scene.paths)) if i not in set(bad)]
    path_map = {old: new for new, old in enumerate(keep)}
    fresh = []
    for i in bad:
        old = scene.paths[i]
        r = float(rng.uniform(*policy.new_radius_frac)) * short
        cx = float(rng.uniform(0.0, scene.canvas_w))
        cy = float(rng.uniform(0.0, scene.canvas_h))
        if target is not None:
            row = min(int(cy), target.height - 1)
            col = min(int(cx), target.width - 1)
            rgb = target.rgb[row, col]
        else:
            rgb = rng.uniform(0.0, 1.0, 3)
        fill = ColorRGBA(float(rgb[0]), float(rgb[1]), float(rgb[2]), 1.0)
        if style.shape == "polygon":
            pts = polygon_points(_regular_polygon(cx, cy, r, max(3, len(old.points) // 3)))
        else:
            pts = circle_points(cx, cy, r)
        fresh.append(Path(pts, True, fill=fill, stroke=None, region_tag=old.region_tag))
    return scene.with_paths([scene.paths[i] for i in keep] + fresh), len(bad), path_map


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    iter: int
    vpsd_loss: float
    lora_loss: float
    reward_loss: float
    mean_reward: float
    lr: float
    reinit_count: int
    total: float

    def line(self) -> str:
        vals = (self.vpsd_loss, self.lora_loss, self.reward_loss, self.mean_reward, self.lr)
        body = " ".join("%.17g" % v for v in vals)
        return f"{self.iter} {body} {self.reinit_count} {'%.17g' % self.total}"


def total_objective(vpsd_loss: float, lora_loss: float, reward_loss: float, lambda_r: float) -> float:
    return vpsd_loss + lora_loss + lambda_r * reward_loss


@dataclass
class RunResult:
    particles: ParticleSet
    report: list = field(default_factory=list)
    estimator: Optional[DeskEstimator] = None
    refl: list = field(default_factory=list)

    def report_text(self) -> str:
        return "".join(row.line() + "\n" for row in self.report)


def fresh_particles(cfg: RunConfig) -> ParticleSet:
    seeds = np.random.SeedSequence([cfg.seed, 1]).spawn(cfg.k)
    scenes = [init_scene(cfg.style, cfg.n_paths, cfg.width, cfg.height, np.random.default_rng(s)) for s in seeds]
    return ParticleSet.from_scenes(scenes, cfg.style_config)


def write_checkpoint(out_dir: str, particles: ParticleSet, it: int):
    from .svgio import scene_to_doc, write_svg

    for p in particles.particles:
        folder = os.path.join(out_dir, f"particle_{p.id}")
        os.makedirs(folder, exist_ok=True)
        with open(os.path.join(folder, f"iter_{it}.svg"), "w", encoding="utf-8") as fh:
            fh.write(write_svg(scene_to_doc(p.scene)))


def vpsd_run(
    cfg: RunConfig,
    oracle,
    reward=None,
    init: Optional[ParticleSet] = None,
    estimator=None,
    codec=None,
    out_dir: Optional[str] = None,
    target: Optional[RasterImage] = None,
    callback: Optional[Callable] = None,
) -> RunResult:
    """Optimize a particle set against ``oracle`` for ``cfg.total_iters`` iterations.

    ``mode="sds"`` replaces the estimator by the injected noise, which turns
    the update into plain score distillation and skips estimator training
    and reward feedback.  ``callback(it, particles)`` runs after every
    iteration and must not modify the particles.
    """
    style = cfg.style_config
    codec = codec or IdentityCodec()
    sched = NoiseSchedule()
    particles = init if init is not None else fresh_particles(cfg)
    particles = ParticleSet([Particle(p.scene, p.moments.copy(), p.id) for p in particles.particles])
    for p in particles.particles:
        problems = validate_scene(p.scene, style)
        if problems:
            raise ContractError(f"particle {p.id} invalid: {problems[0]}")
    shape = (cfg.height, cfg.width, getattr(codec, "channels", 3))
    if particles.particles[0].scene.canvas_h != cfg.height or particles.particles[0].scene.canvas_w != cfg.width:
        raise ContractError("particle canvas does not match the run configuration")
    if cfg.mode == "vpsd" and estimator is None:
        estimator = DeskEstimator(shape, sched)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    result = RunResult(particles, estimator=estimator)
    guidance = cfg.guidance
    n_refl = cfg.refl.samples_w or cfg.k

    for it in range(cfg.total_iters):
        idx = select_particle(rng, particles)
        part = particles.particles[idx]
        t = sample_timestep(rng, cfg.t_range)
        eps = rng.standard_normal(shape)
        w_t = weight_at(sched, t, cfg.weighting)
        augment = (lambda img: crop_resize(img, rng)) if cfg.augment else None
        if cfg.mode == "sds":
            step = sds_step(part.scene, style, codec, oracle, guidance, t, eps, w_t, cfg.render, sched, cfg.condition, augment)
        else:
            step = vpsd_step(part.scene, style, codec, oracle, estimator, guidance, t, eps, w_t, cfg.render, sched, cfg.condition, augment)
        check_finite("gradient", step.grad.values, it)
        vec = pack_params(part.scene, style)
        values, moments = adam_step(vec, step.grad, part.moments, cfg.adam, family_lr(vec.layout, cfg.schedule, it))
        check_finite("parameters", values, it)
        part.scene = apply_update(part.scene, style, values, vec.layout)
        part.moments = moments

        lora_loss = 0.0
        reward_loss = 0.0
        mean_reward = 0.0
        if cfg.mode == "vpsd":
            with torch.no_grad():
                latents = [np.asarray(codec.encode(render(p.scene, cfg.render).data)) for p in particles.particles]
            lora_loss = estimator_fit_step(
                estimator, latents, cfg.condition, sched, rng, cfg.estimator_lr, cfg.t_range, cfg.estimator_samples
            )
            refl_on = reward is not None and hasattr(estimator, "predict_torch")
            if refl_on and it < cfg.refl.active_until_iter and it % cfg.refl.period == 0:
                out = refl_update(estimator, reward, cfg.refl, cfg.condition, sched, rng, shape, n_refl, cfg.estimator_lr, codec, cfg.t_range)
                result.refl.append(out)
                if out.skipped is None:
                    reward_loss = out.reward_loss
                    mean_reward = out.mean_reward

        reinit_count = 0
        # a path reinitialized on the final iteration would never be optimized
        if (it + 1) % cfg.reinit.period == 0 and it + 1 < cfg.total_iters:
            for p in particles.particles:
                old_layout = pack_params(p.scene, style).layout
                scene, n, path_map = reinit_paths(p.scene, cfg.reinit, style, rng, target)
                if n:
                    p.moments = remap_moments(p.moments, old_layout, pack_params(scene, style).layout, path_map)
                    p.scene = scene
                    reinit_count += n

        vpsd_loss = step.loss
        total = total_objective(vpsd_loss, lora_loss, reward_loss, cfg.refl.lambda_r)
        check_finite("losses", [vpsd_loss, lora_loss, reward_loss, total], it)
        result.report.append(
            ReportRow(it, vpsd_loss, lora_loss, reward_loss, mean_reward, clamp_lr(cfg.schedule, it), reinit_count, total)
        )
        if out_dir is not None and (it + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(out_dir, particles, it + 1)
        if callback is not None:
            callback(it, particles)
    return result


def jitter_scene(scene: Scene, style: StyleConfig, rng: np.random.Generator, sigma: float = 1.0) -> Scene:
    """Perturb trainable control points by ``N(0, sigma)`` pixels."""
    if sigma == 0 or "points" not in style.trainable:
        return scene
    vec = pack_params(scene, style)
    values = vec.values.copy()
    for slot in vec.slots_for("points"):
        values[slot.start:slot.stop] += rng.normal(0.0, sigma, slot.stop - slot.start)
    return apply_update(scene, style, values, vec.layout)


@dataclass
class CompositeResult:
    sive: object
    run: RunResult


def sive_then_vpsd(
    target: RasterImage,
    regions,
    sive_cfg,
    cfg: RunConfig,
    oracle,
    reward=None,
    jitter: float = 1.0,
    out_dir: Optional[str] = None,
) -> CompositeResult:
    """Vectorize ``target`` by region, clone the result into ``k`` jittered particles, then refine."""
    from .sive import sive_optimize

    style = cfg.style_config
    sive = sive_optimize(target, regions, style, sive_cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    scenes = [jitter_scene(sive.scene, style, rng, jitter) for _ in range(cfg.k)]
    cfg = replace(cfg, width=target.width, height=target.height)
    run = vpsd_run(cfg, oracle, reward, ParticleSet.from_scenes(scenes, style), out_dir=out_dir, target=target)
    return CompositeResult(sive, run)
