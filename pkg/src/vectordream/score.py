"""Noise schedule, desk-scale score oracles, and distillation gradients.

Latents are ``(H, W, C)`` float64 arrays.  Oracles and estimators predict the
noise that produced a perturbed latent ``z_t = alpha_t * x + sigma_t * eps``.
Gradients are pushed from latent space back to scene parameters through the
differentiable renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .model import ContractError, ParamVector, Scene, StyleConfig, pack_params
from .raster import RenderOptions, render_tensor

# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Scaled-linear discrete schedule, read at continuous ``t`` by log-linear interpolation."""

    beta_start: float = 0.00085
    beta_end: float = 0.012
    train_steps: int = 1000
    _log_abar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ContractError("need 0 < beta_start <= beta_end < 1")
        if self.train_steps < 2:
            raise ContractError("train_steps must be >= 2")
        betas = np.linspace(math.sqrt(self.beta_start), math.sqrt(self.beta_end), self.train_steps) ** 2
        object.__setattr__(self, "_log_abar", np.cumsum(np.log1p(-betas)))

    def alpha_bar(self, t: float) -> float:
        u = t * (self.train_steps - 1)
        i = min(int(math.floor(u)), self.train_steps - 2)
        f = u - i
        return math.exp((1.0 - f) * self._log_abar[i] + f * self._log_abar[i + 1])


def noise_coeffs(sched: NoiseSchedule, t: float):
    """``(alpha_t, sigma_t)`` with ``alpha^2 + sigma^2 = 1``."""
    if not 0.0 < t < 1.0:
        raise ContractError(f"t={t} outside (0, 1)")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar), math.sqrt(1.0 - abar)


def perturb(x, eps, t: float, sched: NoiseSchedule):
    if np.shape(x) != np.shape(eps):
        raise ContractError("latent and noise shapes differ")
    alpha, sigma = noise_coeffs(sched, t)
    return alpha * x + sigma * eps


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance ``u + s (c - u)``, written to be exact at ``s`` = 0 and 1."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ContractError("conditional and unconditional predictions differ in shape")
    return (1.0 - scale) * eps_uncond + scale * eps_cond


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


class LatentCodec(Protocol):
    factor: int

    def encode(self, image): ...

    def decode(self, latent): ...


class IdentityCodec:
    """Pixel-space latents: RGB channels of the image, alpha dropped."""

    factor = 1
    channels = 3

    def encode(self, image):
        return image[..., :3]

    def decode(self, latent):
        if isinstance(latent, torch.Tensor):
            ones = torch.ones(latent.shape[:-1] + (1,), dtype=latent.dtype)
            return torch.cat([latent, ones], dim=-1)
        latent = np.asarray(latent)
        return np.concatenate([latent, np.ones(latent.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


class ScoreOracle(Protocol):
    def predict(self, z_t, t: float, condition: str): ...


def _coeffs(sched: NoiseSchedule, t: float):
    return noise_coeffs(sched, float(t))


class DeltaOracle:
    """Exact noise prediction for a point-mass data distribution at ``target``."""

    def __init__(self, target, sched: Optional[NoiseSchedule] = None):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched or NoiseSchedule()

    def predict(self, z_t, t: float, condition: str = ""):
        alpha, sigma = _coeffs(self.sched, t)
        return (z_t - alpha * self.target) / sigma


def delta_oracle(target, sched: Optional[NoiseSchedule] = None) -> DeltaOracle:
    return DeltaOracle(target, sched)


class GmmOracle:
    """Exact noise prediction for an isotropic Gaussian mixture around ``means``."""

    def __init__(self, means: Sequence, weights: Sequence[float], spread: float, sched: Optional[NoiseSchedule] = None):
        self.means = np.stack([np.asarray(m, dtype=np.float64) for m in means])
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != len(self.means) or len(w) == 0:
            raise ContractError("one weight per mean is required")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractError("weights must be non-negative and sum to 1")
        if not spread > 0:
            raise ContractError("spread must be positive")
        self.weights = w
        self.spread = float(spread)
        self.sched = sched or NoiseSchedule()

    def responsibilities(self, z_t, t: float) -> np.ndarray:
        alpha, sigma = _coeffs(self.sched, t)
        var = sigma**2 + alpha**2 * self.spread**2
        diff = z_t[None] - alpha * self.means
        sq = np.sum(diff.reshape(len(self.means), -1) ** 2, axis=1)
        with np.errstate(divide="ignore"):
            logits = np.log(self.weights) - sq / (2.0 * var)
        logits -= logits.max()
        gamma = np.exp(logits)
        return gamma / gamma.sum()

    def posterior_mean(self, z_t, t: float):
        gamma = self.responsibilities(z_t, t)
        return np.tensordot(gamma, self.means, axes=1)

    def predict(self, z_t, t: float, condition: str = ""):
        alpha, sigma = _coeffs(self.sched, t)
        return (z_t - alpha * self.posterior_mean(z_t, t)) / sigma


def gmm_oracle(means, weights, spread: float, sched: Optional[NoiseSchedule] = None) -> GmmOracle:
    return GmmOracle(means, weights, spread, sched)


class ConditionalOracle:
    """Routes the unconditional label to a separate oracle for guidance."""

    def __init__(self, cond: ScoreOracle, uncond: ScoreOracle, uncond_condition: str = ""):
        self.cond = cond
        self.uncond = uncond
        self.uncond_condition = uncond_condition

    def predict(self, z_t, t: float, condition: str = ""):
        if condition == self.uncond_condition:
            return self.uncond.predict(z_t, t, condition)
        return self.cond.predict(z_t, t, condition)


def with_gray_uncond(oracle: ScoreOracle, shape, sched: Optional[NoiseSchedule] = None, uncond_condition: str = ""):
    """Pair ``oracle`` with a mid-gray point mass as its unconditional branch."""
    return ConditionalOracle(oracle, DeltaOracle(np.full(shape, 0.5), sched), uncond_condition)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 7.5
    uncond_condition: str = ""

    def __post_init__(self):
        if not self.scale >= 0:
            raise ContractError("guidance scale must be >= 0")


def guided_predict(oracle: ScoreOracle, guidance: GuidanceConfig, z_t, t: float, condition: str):
    cond = oracle.predict(z_t, t, condition)
    if guidance.scale == 1.0:
        return cond
    uncond = oracle.predict(z_t, t, guidance.uncond_condition)
    return cfg_combine(cond, uncond, guidance.scale)


# ---------------------------------------------------------------------------
# Residual estimators
# ---------------------------------------------------------------------------


class ResidualEstimator(Protocol):
    def predict(self, z_t, t: float, condition: str): ...

    def fit_step(self, z_t, t, condition: str, target, lr: float) -> float: ...


class DeskEstimator:
    """Noise predictor ``(g * z_t - alpha_t * b) / sigma_t`` per condition.

    ``b`` is a bias grid (the implied clean-image estimate) and ``g`` a scalar
    gain on the noisy input.  With ``g = 1`` and ``b`` equal to a point-mass
    target it coincides with :class:`DeltaOracle`.

    Updates are gradient steps preconditioned by the diagonal of the
    squared-error Hessian, which keeps every step with ``lr <= 1``
    non-increasing on a fixed batch.  On a batch of samples at mixed times
    the full step (``lr = 1``) moves ``b`` to the mean of the per-sample
    estimates weighted by ``(alpha/sigma)**2``.
    """

    def __init__(self, shape, sched: Optional[NoiseSchedule] = None, init_bias: float = 0.5, init_gain: float = 1.0):
        self.shape = tuple(shape)
        self.sched = sched or NoiseSchedule()
        self.init_bias = float(init_bias)
        self.init_gain = float(init_gain)
        self.params: dict = {}

    def _get(self, condition: str):
        if condition not in self.params:
            self.params[condition] = (np.full(self.shape, self.init_bias), self.init_gain)
        return self.params[condition]

    def state(self, condition: str):
        bias, gain = self._get(condition)
        return bias.copy(), gain

    def set_state(self, condition: str, bias, gain: float):
        self.params[condition] = (np.array(bias, dtype=np.float64), float(gain))

    def predict(self, z_t, t: float, condition: str = ""):
        bias, gain = self._get(condition)
        alpha, sigma = _coeffs(self.sched, t)
        return (gain * z_t - alpha * bias) / sigma

    def predict_torch(self, bias: torch.Tensor, gain: torch.Tensor, z_t, t: float):
        alpha, sigma = _coeffs(self.sched, t)
        return (gain * z_t - alpha * bias) / sigma

    def squared_error(self, z_t, t, condition: str, target):
        """Mean squared error over a batch plus its gradient and Hessian diagonal.

        ``z_t`` and ``target`` carry a leading batch axis; ``t`` holds one time per item.
        """
        bias, gain = self._get(condition)
        z_t = np.asarray(z_t, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        n = target.size
        loss = 0.0
        g_bias = np.zeros(self.shape)
        h_bias = 0.0
        g_gain = 0.0
        h_gain = 0.0
        for z, tt, eps in zip(z_t, np.atleast_1d(t), target):
            alpha, sigma = _coeffs(self.sched, tt)
            r = (gain * z - alpha * bias) / sigma - eps
            loss += float(np.sum(r * r))
            g_bias += -2.0 * (alpha / sigma) * r
            h_bias += 2.0 * (alpha / sigma) ** 2
            g_gain += 2.0 * float(np.sum(r * z)) / sigma
            h_gain += 2.0 * float(np.sum(z * z)) / sigma**2
        return loss / n, g_bias / n, g_gain / n, h_bias / n, h_gain / n

    def apply(self, condition: str, g_bias, g_gain: float, h_bias: float, h_gain: float, lr: float):
        bias, gain = self._get(condition)
        bias = bias - lr * g_bias / h_bias if h_bias > 0 else bias
        gain = gain - lr * g_gain / h_gain if h_gain > 0 else gain
        self.params[condition] = (bias, gain)

    def fit_step(self, z_t, t, condition: str, target, lr: float) -> float:
        """One descent step on the batch; returns the pre-update mean squared error."""
        loss, g_bias, g_gain, h_bias, h_gain = self.squared_error(z_t, t, condition, target)
        self.apply(condition, g_bias, g_gain, h_bias, h_gain, lr)
        return loss


class InjectedNoiseEstimator:
    """Test double that always returns the noise it was built with."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)

    def predict(self, z_t, t: float, condition: str = ""):
        return self.eps

    def fit_step(self, z_t, t, condition: str, target, lr: float) -> float:
        return 0.0


class OracleEstimator:
    """Frozen estimator that mirrors an oracle's guided prediction."""

    def __init__(self, oracle: ScoreOracle, guidance: "GuidanceConfig"):
        self.oracle = oracle
        self.guidance = guidance

    def predict(self, z_t, t: float, condition: str = ""):
        return guided_predict(self.oracle, self.guidance, z_t, t, condition)

    def fit_step(self, z_t, t, condition: str, target, lr: float) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# Distillation gradients
# ---------------------------------------------------------------------------


def weight_at(sched: NoiseSchedule, t: float, weighting: str = "constant") -> float:
    if weighting == "constant":
        return 1.0
    if weighting == "sigma2":
        return noise_coeffs(sched, t)[1] ** 2
    raise ContractError(f"unknown weighting {weighting!r}")


def crop_resize(image: torch.Tensor, rng: np.random.Generator, scale=(0.7, 1.0)) -> torch.Tensor:
    """Random square-ratio crop of relative size in ``scale`` resized back to full size."""
    H, W = image.shape[:2]
    s = float(rng.uniform(*scale))
    h, w = max(1, int(round(s * H))), max(1, int(round(s * W)))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    crop = image[y0:y0 + h, x0:x0 + w].permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0)


_ROUNDING_SLACK = 16.0 * np.finfo(np.float64).eps


def _difference(pred, base, z_t, sigma: float) -> np.ndarray:
    """``pred - base`` with entries inside the rounding error of forming and inverting ``z_t`` set to zero.

    Without this a prediction that agrees with the baseline in exact
    arithmetic leaves residuals of order 1e-16 behind.
    """
    pred = np.asarray(pred, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    diff = pred - base
    bound = _ROUNDING_SLACK * (np.abs(z_t) / sigma + np.abs(pred) + np.abs(base))
    return np.where(np.abs(diff) <= bound, 0.0, diff)


@dataclass
class DistillResult:
    grad: ParamVector
    residual: np.ndarray
    z_t: np.ndarray

    @property
    def loss(self) -> float:
        """``0.5 * mean(residual^2)``, a scalar summary of the residual."""
        return 0.5 * float(np.mean(self.residual**2))


def distill(
    scene: Scene,
    style: StyleConfig,
    codec,
    predict: Callable,
    baseline: Callable,
    t: float,
    eps,
    w_t: float,
    opts: RenderOptions,
    sched: NoiseSchedule,
    augment: Optional[Callable] = None,
) -> DistillResult:
    """Shared pipeline: render, encode, perturb, residual ``w (predict - baseline)``, pull back."""
    eps = np.asarray(eps, dtype=np.float64)
    vec = pack_params(scene, style)
    theta = torch.from_numpy(vec.values.copy()).requires_grad_(True)
    image = render_tensor(scene, opts, style, theta)
    if augment is not None:
        image = augment(image)
    z = codec.encode(image)
    if tuple(z.shape) != eps.shape:
        raise ContractError(f"noise shape {eps.shape} does not match latent {tuple(z.shape)}")
    z_t = perturb(z.detach().numpy(), eps, t, sched)
    residual = w_t * _difference(predict(z_t), baseline(z_t), z_t, noise_coeffs(sched, t)[1])
    if theta.numel() == 0 or not z.requires_grad:
        return DistillResult(ParamVector(np.zeros_like(vec.values), vec.layout), residual, z_t)
    (grad,) = torch.autograd.grad((z * torch.from_numpy(residual)).sum(), theta, allow_unused=True)
    g = np.zeros_like(vec.values) if grad is None else grad.numpy().copy()
    return DistillResult(ParamVector(g, vec.layout), residual, z_t)


def sds_step(scene, style, codec, oracle, guidance, t, eps, w_t, opts, sched=None, condition="", augment=None):
    sched = sched or NoiseSchedule()
    eps = np.asarray(eps, dtype=np.float64)
    return distill(
        scene, style, codec,
        lambda z_t: guided_predict(oracle, guidance, z_t, t, condition),
        lambda z_t: eps,
        t, eps, w_t, opts, sched, augment,
    )


def vpsd_step(scene, style, codec, oracle, estimator, guidance, t, eps, w_t, opts, sched=None, condition="", augment=None):
    sched = sched or NoiseSchedule()
    return distill(
        scene, style, codec,
        lambda z_t: guided_predict(oracle, guidance, z_t, t, condition),
        lambda z_t: estimator.predict(z_t, t, condition),
        t, eps, w_t, opts, sched, augment,
    )


def sds_grad(scene, style, codec, oracle, guidance, t, eps, w_t, opts, sched=None, condition="", augment=None) -> ParamVector:
    """Single-sample score distillation gradient ``w (eps_hat - eps) dz/dtheta``."""
    return sds_step(scene, style, codec, oracle, guidance, t, eps, w_t, opts, sched, condition, augment).grad


def vpsd_grad(scene, style, codec, oracle, estimator, guidance, t, eps, w_t, opts, sched=None, condition="", augment=None) -> ParamVector:
    """Particle distillation gradient ``w (eps_hat - eps_est) dz/dtheta``."""
    return vpsd_step(scene, style, codec, oracle, estimator, guidance, t, eps, w_t, opts, sched, condition, augment).grad


def estimator_fit_step(
    estimator,
    latents,
    condition: str,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    lr: float,
    t_range=(0.05, 0.95),
    samples: int = 1,
) -> float:
    """Noise-regression step on a batch of clean latents; returns the pre-update loss.

    Each latent is noised ``samples`` times with independent times and noise.
    """
    if samples < 1:
        raise ContractError("samples must be >= 1")
    latents = [np.asarray(x, dtype=np.float64) for x in latents for _ in range(samples)]
    if not latents:
        raise ContractError("estimator batch is empty")
    ts = np.array([rng.uniform(*t_range) for _ in latents])
    eps = np.stack([rng.standard_normal(x.shape) for x in latents])
    z_t = np.stack([perturb(x, e, t, sched) for x, e, t in zip(latents, eps, ts)])
    return float(estimator.fit_step(z_t, ts, condition, eps, lr))


# ---------------------------------------------------------------------------
# DDIM
# ---------------------------------------------------------------------------


def ddim_times(steps: int, t_max: float = 0.95, t_min: float = 0.05) -> np.ndarray:
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if steps == 1:
        return np.array([t_max])
    return np.linspace(t_max, t_min, steps)


def ddim_run(predict: Callable, sched: NoiseSchedule, z, steps: int):
    """Deterministic DDIM from ``z``; works on numpy arrays or torch tensors."""
    ts = ddim_times(steps)
    x_hat = z
    for i, t in enumerate(ts):
        alpha, sigma = noise_coeffs(sched, float(t))
        eps_hat = predict(z, float(t))
        x_hat = (z - sigma * eps_hat) / alpha
        if i + 1 < len(ts):
            a_next, s_next = noise_coeffs(sched, float(ts[i + 1]))
            z = a_next * x_hat + s_next * eps_hat
    return x_hat


def ddim_sample(predictor, sched: NoiseSchedule, steps: int, shape, condition: str, rng: np.random.Generator):
    """Draw ``z_T ~ N(0, I)`` and denoise with ``predictor.predict``."""
    z = rng.standard_normal(tuple(shape))
    return ddim_run(lambda z_t, t: predictor.predict(z_t, t, condition), sched, z, steps)
