"""Flow-matching process math and the stochastic reverse sampler.

Conventions: time runs from ``t = 1`` (pure noise) to ``t = 0`` (data), the
noising path is ``x_t = (1 - t) x0 + t eps`` and the network predicts the
velocity ``v = eps - x0``. Every sampler step is Gaussian, so the step
log-density is available in closed form and is what the RL losses use.

All math is carried out in float64 torch tensors so that recomputed
log-probabilities stay differentiable with respect to the policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class SamplerError(ValueError):
    """Raised for inputs outside the sampler's domain."""


class DeterministicStepError(SamplerError):
    """A zero-variance (ODE) step has no density."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class SdeConfig:
    noise_scale: float = 0.7
    sigma_one_guard: float = 0.9931

    def __post_init__(self):
        if not self.noise_scale >= 0:
            raise SamplerError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0.0 < self.sigma_one_guard < 1.0:
            raise SamplerError("sigma_one_guard must lie in (0, 1)")

    @property
    def half_eta_sq(self) -> float:
        return 0.5 * self.noise_scale**2

    def guarded(self, sigma: float) -> float:
        return self.sigma_one_guard if sigma == 1.0 else sigma


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing times from exactly 1 down to exactly 0."""

    times: tuple[float, ...]

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2:
            raise SamplerError("a time grid needs at least one step")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise SamplerError("time grid must start at 1 and end at 0")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise SamplerError("time grid must be strictly decreasing")

    @classmethod
    def uniform(cls, num_steps: int) -> "TimeGrid":
        if num_steps < 1:
            raise SamplerError("num_steps must be positive")
        return cls(tuple(1.0 - i / num_steps for i in range(num_steps)) + (0.0,))

    @property
    def num_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dts(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.times, self.times[1:]))


@dataclass
class StepDistribution:
    mean: torch.Tensor
    std: float


def step_logprob(next_state, dist: StepDistribution, event_ndim: int = 1) -> torch.Tensor:
    """Gaussian log-density of ``next_state``, averaged over the event axes."""
    if dist.std <= 0.0:
        raise DeterministicStepError("deterministic step has no density")
    z = (as_tensor(next_state) - dist.mean) / dist.std
    lp = -0.5 * z**2 - math.log(dist.std) - HALF_LOG_2PI
    return lp.mean(dim=tuple(range(-event_ndim, 0)))


def add_noise(x_t, t: float, Dt: float, noise) -> torch.Tensor:
    """Forward re-noising from time ``t`` to ``t + Dt`` (first order in ``Dt``).

    ``Dt == 0`` is accepted and returns ``x_t`` unchanged.
    """
    if Dt < 0:
        raise SamplerError("Dt must be nonnegative")
    if t + Dt >= 1.0:
        raise SamplerError("t + Dt must stay below 1")
    x_t = as_tensor(x_t)
    if Dt == 0:
        return x_t.clone()
    return (1.0 - Dt / (1.0 - t)) * x_t + math.sqrt(2.0 * Dt * t / (1.0 - t)) * as_tensor(noise)


def _check_step_args(sigma: float, dt: float):
    if not dt < 0:
        raise SamplerError(f"dt must be negative, got {dt}")
    if not 0.0 < sigma <= 1.0:
        raise SamplerError(f"sigma must lie in (0, 1], got {sigma}")


def sde_step(v_t, sigma: float, dt: float, x_t, cfg: SdeConfig, noise, event_ndim: int = 1):
    """One reverse SDE step: re-noise by ``Dt`` then Euler over ``dt - Dt``.

    Returns ``(next_state, log_prob, StepDistribution)``. ``log_prob`` is
    ``None`` when the step is deterministic (``noise_scale == 0``).
    """
    _check_step_args(sigma, dt)
    v_t, x_t = as_tensor(v_t), as_tensor(x_t)
    Dt = -dt * cfg.half_eta_sq
    denom = 1.0 - cfg.guarded(sigma)
    mean = x_t * (1.0 - Dt / denom) + v_t * (dt - Dt)
    var = 2.0 * Dt * sigma / denom
    assert var >= 0.0, "negative step variance"
    std = math.sqrt(var)
    dist = StepDistribution(mean, std)
    if std == 0.0:
        return mean, None, dist
    nxt = mean + std * as_tensor(noise)
    return nxt, step_logprob(nxt.detach(), dist, event_ndim), dist


def sde_step_reference(v_t, sigma: float, dt: float, x_t, cfg: SdeConfig, noise, event_ndim: int = 1):
    """The same step written in the alternative ``std_dev`` parameterisation.

    Coefficients are kept exactly as that form writes them; note the
    ``(1 - sigma)`` factor on the velocity term is *not* guarded.
    """
    _check_step_args(sigma, dt)
    v_t, x_t = as_tensor(v_t), as_tensor(x_t)
    std_dev = math.sqrt(sigma / (1.0 - cfg.guarded(sigma))) * cfg.noise_scale
    mean = x_t * (1.0 + std_dev**2 / (2.0 * sigma) * dt) + v_t * (
        1.0 + std_dev**2 * (1.0 - sigma) / (2.0 * sigma)
    ) * dt
    std = std_dev * math.sqrt(-dt)
    dist = StepDistribution(mean, std)
    if std == 0.0:
        return mean, None, dist
    nxt = mean + std * as_tensor(noise)
    return nxt, step_logprob(nxt.detach(), dist, event_ndim), dist


@dataclass
class DenoisingTrajectory:
    """A batch of ``B`` sampler runs on one time grid.

    Shapes: ``states`` (B, N+1, *event); ``velocities``/``means`` (B, N, *event);
    ``stds`` (N,); ``log_probs`` (B, N), or ``None`` for ODE runs. The event
    is either a plain vector or a (points, channels) sample set.
    """

    grid: TimeGrid
    states: torch.Tensor
    velocities: torch.Tensor
    means: torch.Tensor
    stds: tuple[float, ...]
    log_probs: torch.Tensor | None
    condition: torch.Tensor
    seeds: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def event_ndim(self) -> int:
        return self.states.ndim - 2

    @property
    def final(self) -> torch.Tensor:
        return self.states[:, -1]

    def select(self, idx) -> "DenoisingTrajectory":
        idx = [idx] if isinstance(idx, int) else list(idx)
        return DenoisingTrajectory(
            self.grid,
            self.states[idx],
            self.velocities[idx],
            self.means[idx],
            self.stds,
            None if self.log_probs is None else self.log_probs[idx],
            self.condition[idx],
            [self.seeds[i] for i in idx],
        )


def seeded_rng(seed) -> np.random.Generator:
    """Counter-based stream keyed by ``seed`` (an int or a tuple of ints)."""
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def draw_noise(seed, event_shape, num_steps: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Initial state and per-step unit normals for one trajectory."""
    event_shape = (event_shape,) if isinstance(event_shape, int) else tuple(event_shape)
    rng = seeded_rng(seed)
    x1 = rng.standard_normal(event_shape)
    eps = rng.standard_normal((num_steps, *event_shape))
    return torch.from_numpy(x1), torch.from_numpy(eps)


def _times(t: float, B: int) -> torch.Tensor:
    return torch.full((B,), t, dtype=DTYPE)


@torch.no_grad()
def rollout_batch(
    policy: VelocityFn,
    conditions,
    grid: TimeGrid,
    cfg: SdeConfig,
    seeds: Sequence,
    event_shape,
    step=sde_step,
) -> DenoisingTrajectory:
    """Sample ``len(seeds)`` trajectories; trajectory ``i`` draws only from ``seeds[i]``.

    ``conditions`` has a leading batch axis (or none, to broadcast one
    condition to every trajectory).
    """
    conditions = as_tensor(conditions)
    B, N = len(seeds), grid.num_steps
    draws = [draw_noise(s, event_shape, N) for s in seeds]
    x = torch.stack([d[0] for d in draws])
    if conditions.shape[0] != B or conditions.ndim == 1:
        conditions = conditions.expand(B, *conditions.shape)
    ev = x.ndim - 1
    eps = torch.stack([d[1] for d in draws], dim=1)
    states, vels, means, stds, lps = [x], [], [], [], []
    for k, (t, dt) in enumerate(zip(grid.times, grid.dts)):
        v = policy(x, _times(t, B), conditions)
        x, lp, dist = step(v, t, dt, x, cfg, eps[k], ev)
        states.append(x)
        vels.append(v)
        means.append(dist.mean)
        stds.append(dist.std)
        lps.append(lp)
    log_probs = None if any(lp is None for lp in lps) else torch.stack(lps, dim=1)
    return DenoisingTrajectory(
        grid,
        torch.stack(states, dim=1),
        torch.stack(vels, dim=1),
        torch.stack(means, dim=1),
        tuple(stds),
        log_probs,
        conditions.clone(),
        list(seeds),
    )


def rollout(policy: VelocityFn, condition, grid: TimeGrid, cfg: SdeConfig, seed, event_shape):
    """Single-trajectory rollout (batch of one)."""
    return rollout_batch(policy, as_tensor(condition)[None], grid, cfg, [seed], event_shape)


def recompute_step_means(policy: VelocityFn, traj: DenoisingTrajectory, conditions, cfg: SdeConfig):
    """Differentiable step means of the stored states under ``policy``.

    ``conditions`` may itself carry gradient (it usually comes from the
    connector). Returns a tensor shaped like ``traj.means``.
    """
    B = traj.batch_size
    means = []
    for k, (t, dt) in enumerate(zip(traj.grid.times, traj.grid.dts)):
        x = traj.states[:, k]
        v = policy(x, _times(t, B), conditions)
        Dt = -dt * cfg.half_eta_sq
        means.append(x * (1.0 - Dt / (1.0 - cfg.guarded(t))) + v * (dt - Dt))
    return torch.stack(means, dim=1)


def trajectory_logprobs(means: torch.Tensor, traj: DenoisingTrajectory) -> torch.Tensor:
    """(B, N) log-densities of the stored next states under ``means``."""
    out = [
        step_logprob(traj.states[:, k + 1], StepDistribution(means[:, k], std), traj.event_ndim)
        for k, std in enumerate(traj.stds)
    ]
    return torch.stack(out, dim=1)


def flow_matching_loss(model: VelocityFn, x0, noise, t, condition=None) -> torch.Tensor:
    """Mean squared error of the velocity prediction on the linear path."""
    x0, noise = as_tensor(x0), as_tensor(noise)
    t = as_tensor(t)
    single = x0.ndim == 1
    if single:
        x0, noise = x0[None], noise[None]
    t = t.reshape(-1).expand(x0.shape[0]) if t.numel() == 1 else t.reshape(-1)
    if condition is None:
        condition = torch.zeros(x0.shape[0], 0, dtype=DTYPE)
    else:
        condition = as_tensor(condition)
        if condition.ndim == 1:
            condition = condition.expand(x0.shape[0], -1)
    tt = t.reshape(-1, *([1] * (x0.ndim - 1)))
    x_t = (1.0 - tt) * x0 + tt * noise
    pred = model(x_t, t, condition)
    return ((pred - (noise - x0)) ** 2).mean()


def sample_time_logit_normal(seed, size=None):
    """``sigmoid(z)`` with ``z`` standard normal from ``seed``."""
    z = seeded_rng(seed).standard_normal(size)
    return 1.0 / (1.0 + np.exp(-z))


def energy_distance(a, b) -> float:
    """Squared energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic)."""
    a, b = as_tensor(a), as_tensor(b)
    return float(
        2.0 * torch.cdist(a, b).mean() - torch.cdist(a, a).mean() - torch.cdist(b, b).mean()
    )
