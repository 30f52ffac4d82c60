"""Learning-rate schedule and Adam for packed scene parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ContractError, ParamVector, Scene, StyleConfig, pack_params, unpack_params


class NumericalAbort(RuntimeError):
    """A gradient, parameter or loss became non-finite."""


def check_finite(name: str, values, it: int) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NumericalAbort(f"iteration {it}: {bad} non-finite entries in {name}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup of the point learning rate followed by exponential decay."""

    warmup_start: float = 0.01
    warmup_end: float = 0.9
    warmup_iters: int = 50
    decay_start: float = 0.8
    decay_end: float = 0.4
    decay_iters: int = 650
    color_lr: float = 0.1
    width_lr: float = 0.01

    def __post_init__(self):
        rates = (self.warmup_start, self.warmup_end, self.decay_start, self.decay_end, self.color_lr, self.width_lr)
        if min(rates) <= 0:
            raise ContractError("learning rates must be positive")
        if self.warmup_iters < 0 or self.decay_iters < 1:
            raise ContractError("warmup_iters must be >= 0 and decay_iters >= 1")

    @property
    def total_iters(self) -> int:
        return self.warmup_iters + self.decay_iters


def lr_at(sched: LrSchedule, it: int) -> float:
    """Point learning rate at iteration ``it`` in ``[0, warmup + decay]``."""
    if not 0 <= it <= sched.total_iters:
        raise ContractError(f"iteration {it} outside [0, {sched.total_iters}]")
    if it <= sched.warmup_iters:
        if sched.warmup_iters == 0:
            return sched.warmup_end
        f = it / sched.warmup_iters
        return (1.0 - f) * sched.warmup_start + f * sched.warmup_end
    if it == sched.total_iters:
        return sched.decay_end
    f = (it - sched.warmup_iters) / sched.decay_iters
    return sched.decay_start * (sched.decay_end / sched.decay_start) ** f


def clamp_lr(sched: LrSchedule, it: int) -> float:
    """``lr_at`` with iterations past the schedule held at the final rate."""
    return lr_at(sched, min(max(it, 0), sched.total_iters))


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-6

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ContractError("Adam eps must be positive")


@dataclass
class Moments:
    """First and second moments aligned with a parameter layout."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "Moments":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "Moments":
        return Moments(self.m.copy(), self.v.copy(), self.step)


def adam_step(params: ParamVector, grad: ParamVector, moments: Moments, cfg: AdamConfig, lr):
    """One bias-corrected Adam update; ``lr`` is a scalar or per-coordinate array.

    Returns ``(new_values, new_moments)``; clamping is left to the caller.
    """
    g = np.asarray(grad.values, dtype=np.float64)
    if g.shape != params.values.shape or moments.m.shape != g.shape:
        raise ContractError("parameter, gradient and moment shapes differ")
    step = moments.step + 1
    m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**step)
    v_hat = v / (1.0 - cfg.beta2**step)
    values = params.values - np.asarray(lr) * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return values, Moments(m, v, step)


def family_lr(layout, sched: LrSchedule, it: int) -> np.ndarray:
    """Per-coordinate learning rates: points follow the schedule, colors and widths are fixed."""
    size = layout[-1].stop if layout else 0
    out = np.empty(size)
    point_lr = clamp_lr(sched, it)
    for slot in layout:
        if slot.family == "points":
            out[slot.start:slot.stop] = point_lr
        elif slot.family == "stroke_width":
            out[slot.start:slot.stop] = sched.width_lr
        else:
            out[slot.start:slot.stop] = sched.color_lr
    return out


def apply_update(scene: Scene, style: StyleConfig, values: np.ndarray, layout) -> Scene:
    """Write raw values into the scene, clamping colors and widths."""
    return unpack_params(ParamVector(values, layout), scene, style)


def remap_moments(moments: Moments, old_layout, new_layout, path_map: dict) -> Moments:
    """Carry moments across a layout change; ``path_map`` sends old path index to new.

    Slots of paths absent from ``path_map`` start from zero.
    """
    size = new_layout[-1].stop if new_layout else 0
    out = Moments.zeros(size)
    out.step = moments.step
    index = {(s.path, s.family): s for s in new_layout}
    for slot in old_layout:
        if slot.path not in path_map:
            continue
        dst = index.get((path_map[slot.path], slot.family))
        if dst is None or dst.stop - dst.start != slot.stop - slot.start:
            continue
        out.m[dst.start:dst.stop] = moments.m[slot.start:slot.stop]
        out.v[dst.start:dst.stop] = moments.v[slot.start:slot.stop]
    return out


def descend(scene: Scene, style: StyleConfig, grad: ParamVector, moments: Moments, cfg: AdamConfig, lr):
    """Adam step on a scene; returns the clamped scene and new moments."""
    params = pack_params(scene, style)
    values, moments = adam_step(params, grad, moments, cfg, lr)
    return apply_update(scene, style, values, params.layout), moments
