"""Score distillation gradients against injectable denoisers.

No real diffusion model lives here. A denoiser is any callable
``denoiser(z_t, cond, t, poses=None) -> predicted noise`` with ``t`` an
integer step of a variance-preserving schedule. The Gaussian toys below have
closed-form noise predictions, which is what the tests check against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol

import numpy as np

from .errors import NumericalError, ValidationError


class Denoiser(Protocol):
    def __call__(self, z_t: np.ndarray, cond: Any, t: int, poses: Any = None) -> np.ndarray: ...


def unit_weight(t: float) -> float:
    return 1.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta variance-preserving schedule."""

    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alphas_cumprod: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.n_steps)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - betas))

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_cumprod[t])

    def add_noise(self, x: np.ndarray, noise: np.ndarray, t: int) -> np.ndarray:
        ab = self.alpha_bar(t)
        return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * noise

    def step_range(self, t_range: tuple[float, float]) -> tuple[int, int]:
        lo = int(round(t_range[0] * self.n_steps))
        hi = min(int(round(t_range[1] * self.n_steps)), self.n_steps - 1)
        return max(lo, 0), max(hi, lo)


DEFAULT_SCHEDULE = DiffusionSchedule()


@dataclass(frozen=True)
class DistillConfig:
    """``weight_fn`` maps the diffusion time as a fraction of the schedule to ``w(t)``."""

    weight_fn: Callable[[float], float] = unit_weight
    t_range: tuple[float, float] = (0.02, 0.98)
    guidance_scale: float = 1.0
    finetune_lr: float = 1e-3
    schedule: DiffusionSchedule = DEFAULT_SCHEDULE

    def __post_init__(self):
        lo, hi = self.t_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValidationError(f"t_range must satisfy 0 <= t_min < t_max <= 1, got {self.t_range}")

    def weight(self, t: int) -> float:
        w = float(self.weight_fn(t / self.schedule.n_steps))
        if not np.isfinite(w):
            raise NumericalError(f"w(t) is not finite at step {t}")
        return w


@dataclass(frozen=True)
class NoiseDraw:
    t: int
    noise: np.ndarray


def draw_noise(rng: np.random.Generator, shape, cfg: DistillConfig) -> NoiseDraw:
    """Diffusion step uniform on the configured range, then standard normal noise."""
    lo, hi = cfg.schedule.step_range(cfg.t_range)
    t = int(rng.integers(lo, hi + 1))
    return NoiseDraw(t, rng.standard_normal(shape))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _finite(x, name="render"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite values")
    return x


def _predict(denoiser, z, cond, t, poses, out_shape):
    eps = np.asarray(denoiser(z, cond, t, poses), dtype=np.float64)
    if eps.shape != out_shape:
        raise ValidationError(f"denoiser returned shape {eps.shape}, expected {out_shape}")
    return eps


def guided_prediction(denoiser, z, cond, t, poses, cfg: DistillConfig) -> np.ndarray:
    """Classifier-free guidance; the unconditional pass is skipped at scale 1."""
    eps_c = _predict(denoiser, z, cond, t, poses, z.shape)
    if cfg.guidance_scale == 1.0:
        return eps_c
    eps_u = _predict(denoiser, z, None, t, poses, z.shape)
    return eps_u + cfg.guidance_scale * (eps_c - eps_u)


def sds_gradient(render, denoiser, cond, cfg: DistillConfig, rng, return_draw: bool = False):
    """``w(t) * (eps_hat(z_t, cond, t) - eps)`` for one random (t, eps) draw.

    The result is the gradient w.r.t. the render; chaining through the
    renderer is up to the caller.
    """
    x = _finite(render)
    rng = _rng(rng)
    draw = draw_noise(rng, x.shape, cfg)
    z = cfg.schedule.add_noise(x, draw.noise, draw.t)
    eps_hat = guided_prediction(denoiser, z, cond, draw.t, None, cfg)
    grad = cfg.weight(draw.t) * (eps_hat - draw.noise)
    return (grad, draw) if return_draw else grad


def mv_sds_gradient(renders, denoiser, cond, poses, cfg: DistillConfig, rng, return_draw: bool = False):
    """Multiview SDS: one (t, eps) draw shared by all views, each view's pose passed to the denoiser."""
    xs = _finite(renders, "renders")
    if len(poses) != len(xs):
        raise ValidationError(f"{len(poses)} poses for {len(xs)} views")
    rng = _rng(rng)
    draw = draw_noise(rng, xs.shape[1:], cfg)
    w = cfg.weight(draw.t)
    grads = np.empty_like(xs)
    for v in range(len(xs)):
        z = cfg.schedule.add_noise(xs[v], draw.noise, draw.t)
        grads[v] = w * (guided_prediction(denoiser, z, cond, draw.t, poses[v], cfg) - draw.noise)
    return (grads, draw) if return_draw else grads


def vsd_gradient(render, pretrained, finetuned, cond, poses, cfg: DistillConfig, rng, return_draw: bool = False):
    """``w(t) * (eps_pretrained(z_t) - eps_finetuned(z_t, poses))`` with one shared ``z_t``."""
    x = _finite(render)
    rng = _rng(rng)
    draw = draw_noise(rng, x.shape, cfg)
    z = cfg.schedule.add_noise(x, draw.noise, draw.t)
    eps_hat = guided_prediction(pretrained, z, cond, draw.t, None, cfg)
    eps_ft = _predict(finetuned, z, cond, draw.t, poses, x.shape)
    grad = cfg.weight(draw.t) * (eps_hat - eps_ft)
    return (grad, draw) if return_draw else grad


# ------------------------------------------------------------ toy denoisers


class ExactNoiseDenoiser:
    """Recovers the injected noise by inverting the forward process for a known clean sample."""

    def __init__(self, clean, schedule: DiffusionSchedule = DEFAULT_SCHEDULE):
        self.clean = np.asarray(clean, dtype=np.float64)
        self.schedule = schedule

    def __call__(self, z_t, cond, t, poses=None):
        ab = self.schedule.alpha_bar(t)
        return (z_t - np.sqrt(ab) * self.clean) / np.sqrt(1.0 - ab)


class ReplayNoiseDenoiser:
    """Returns exactly the noise a gradient call seeded identically will inject.

    Holds its own generator with the same seed as the caller's and replays the
    same draw on every call, so one call must correspond to one draw.
    """

    def __init__(self, seed, cfg: DistillConfig):
        self.rng = np.random.default_rng(seed)
        self.cfg = cfg

    def __call__(self, z_t, cond, t, poses=None):
        draw = draw_noise(self.rng, np.shape(z_t), self.cfg)
        if draw.t != t:
            raise ValidationError("replay denoiser fell out of step with the caller's rng")
        return draw.noise


class GaussianToyDenoiser:
    """Posterior-mean noise prediction for data ``~ N(mean, sigma^2 I)``.

    For ``z_t = a x0 + s eps`` the optimal prediction is
    ``E[eps | z_t] = s (z_t - a mean) / (a^2 sigma^2 + s^2)``. ``pose_bias``
    shifts the mean per camera pose; ``uncond_mean`` is used when ``cond`` is
    None (classifier-free guidance).
    """

    def __init__(self, mean, sigma: float, schedule: DiffusionSchedule = DEFAULT_SCHEDULE,
                 pose_bias: Callable[[Any], Any] | None = None, uncond_mean=None):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sigma = float(sigma)
        self.schedule = schedule
        self.pose_bias = pose_bias
        self.uncond_mean = None if uncond_mean is None else np.asarray(uncond_mean, dtype=np.float64)

    def effective_mean(self, cond, poses):
        mu = self.mean if (cond is not None or self.uncond_mean is None) else self.uncond_mean
        if poses is not None and self.pose_bias is not None:
            mu = mu + np.asarray(self.pose_bias(poses), dtype=np.float64)
        return mu

    def __call__(self, z_t, cond, t, poses=None):
        ab = self.schedule.alpha_bar(t)
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        mu = self.effective_mean(cond, poses)
        return s * (z_t - a * mu) / (ab * self.sigma ** 2 + (1.0 - ab))

    def expected_sds_gradient(self, x, cfg: DistillConfig, poses=None) -> np.ndarray:
        """Exact ``E_{t, eps}`` of the conditional SDS gradient (guidance scale 1).

        The noise term averages out analytically; the step range is enumerated.
        """
        lo, hi = cfg.schedule.step_range(cfg.t_range)
        mu = self.mean if poses is None or self.pose_bias is None else self.mean + self.pose_bias(poses)
        coef = 0.0
        for t in range(lo, hi + 1):
            ab = self.schedule.alpha_bar(t)
            coef += cfg.weight(t) * np.sqrt(ab) * np.sqrt(1.0 - ab) / (ab * self.sigma ** 2 + (1.0 - ab))
        coef /= hi - lo + 1
        return coef * (np.asarray(x, dtype=np.float64) - mu)


@dataclass(frozen=True)
class LinearDenoiser:
    """Trainable toy ``eps'(z) = weight * z + bias`` (scalar parameters)."""

    weight: float = 0.0
    bias: float = 0.0

    def __call__(self, z_t, cond, t, poses=None):
        return self.weight * np.asarray(z_t, dtype=np.float64) + self.bias

    @property
    def params(self) -> np.ndarray:
        return np.array([self.weight, self.bias])


@dataclass(frozen=True)
class FinetuneBatch:
    z: np.ndarray
    t: np.ndarray
    noise: np.ndarray


def make_finetune_batch(samples, rng, cfg: DistillConfig) -> FinetuneBatch:
    x = _finite(samples, "samples")
    rng = _rng(rng)
    zs, ts, ns = [], [], []
    for xb in x:
        d = draw_noise(rng, xb.shape, cfg)
        zs.append(cfg.schedule.add_noise(xb, d.noise, d.t))
        ts.append(d.t)
        ns.append(d.noise)
    return FinetuneBatch(np.stack(zs), np.array(ts), np.stack(ns))


def finetune_objective(state: LinearDenoiser, batch: FinetuneBatch, cond=None, poses=None) -> float:
    r = np.stack([state(batch.z[b], cond, int(batch.t[b]), poses) for b in range(len(batch.z))]) - batch.noise
    return float(np.mean(np.sum(r.reshape(len(r), -1) ** 2, axis=1)))


def lora_finetune_step(state: LinearDenoiser, batch: FinetuneBatch, cond, poses,
                       cfg: DistillConfig) -> tuple[LinearDenoiser, float]:
    """One gradient step on the batch mean of ``|eps'(z_t) - eps|^2``.

    Returns the updated denoiser and the objective before the step.
    """
    z = batch.z.reshape(len(batch.z), -1)
    eps = batch.noise.reshape(len(batch.noise), -1)
    r = state.weight * z + state.bias - eps
    obj = float(np.mean(np.sum(r * r, axis=1)))
    if not np.isfinite(obj):
        raise NumericalError("finetune objective is not finite")
    g_w = float(np.mean(np.sum(2.0 * r * z, axis=1)))
    g_b = float(np.mean(np.sum(2.0 * r, axis=1)))
    lr = cfg.finetune_lr
    return replace(state, weight=state.weight - lr * g_w, bias=state.bias - lr * g_b), obj
