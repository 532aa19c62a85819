"""Self-checks: sampler equivalence grid, finite-difference gradient gate, SDE marginals."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .flow import (
    DTYPE, SdeConfig, TimeGrid, energy_distance, flow_matching_loss, rollout_batch, sde_step,
    sde_step_reference, seeded_rng,
)
from .grpo import GrpoConfig, grpo_loss, evaluate_policy, make_group
from .models import GROUPS, ModelConfig, UnifiedModel, VelocityNet, freeze, snapshot, trainable_named_parameters
from .scenarios import ScenarioConfig, ScenarioKind, queries_for, rollout_cot

# ---------------------------------------------------------------- sampler equivalence


@dataclass
class SdeCase:
    sigma: float
    dt: float
    eta: float
    d_next: float
    d_mean: float
    d_std: float
    d_logprob: float

    @property
    def worst(self) -> float:
        return max(self.d_next, self.d_mean, self.d_std, self.d_logprob)


@dataclass
class SdeReport:
    tol: float
    cases: list[SdeCase] = field(default_factory=list)
    ode_ok: bool = True

    def subset(self, pred) -> list[SdeCase]:
        return [c for c in self.cases if pred(c)]

    @property
    def failures(self) -> list[SdeCase]:
        return [c for c in self.cases if c.worst > self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures and self.ode_ok

    def max_dev(self, cases=None) -> dict:
        cases = self.cases if cases is None else cases
        if not cases:
            return {"next": 0.0, "mean": 0.0, "std": 0.0, "log_prob": 0.0}
        return {
            "next": max(c.d_next for c in cases),
            "mean": max(c.d_mean for c in cases),
            "std": max(c.d_std for c in cases),
            "log_prob": max(c.d_logprob for c in cases),
        }

    def lines(self) -> list[str]:
        out = [f"cases: {len(self.cases)}  tolerance: {self.tol:g}"]
        groups = {
            "interior sigma in (0,1)": lambda c: c.sigma < 1.0,
            "guard path sigma = 1": lambda c: c.sigma == 1.0,
            "tiny |dt| <= 1e-3": lambda c: abs(c.dt) <= 1e-3,
            "eta = 0": lambda c: c.eta == 0.0,
        }
        for name, pred in groups.items():
            sub = self.subset(pred)
            dev = self.max_dev(sub)
            bad = sum(c.worst > self.tol for c in sub)
            out.append(f"{name:26s} n={len(sub):6d}  " + "  ".join(f"{k}={v:.3e}" for k, v in dev.items()) + f"  failing={bad}")
        out.append(f"ODE limit (eta=0 is x + v dt, std 0): {'ok' if self.ode_ok else 'FAILED'}")
        for c in self.failures[:5]:
            out.append(f"  offending sigma={c.sigma:g} dt={c.dt:g} eta={c.eta:g} worst={c.worst:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def _wrong_dt_step(v, sigma, dt, x, cfg, noise, event_ndim=1):
    """Negative control: the step with ``Dt = eta * |dt|`` instead of ``eta^2 / 2 * |dt|``."""
    return sde_step(v, sigma, dt, x, SdeConfig(math.sqrt(2.0 * cfg.noise_scale), cfg.sigma_one_guard), noise, event_ndim)


def default_sde_grid():
    sigmas = [1e-4, 0.01] + [round(0.1 * i, 1) for i in range(1, 10)] + [0.99, 0.999, 1.0]
    dts = [-0.2, -0.1, -0.05, -0.02, -0.01, -1e-3, -1e-4]
    etas = [0.0, 0.3, 0.7, 1.0]
    return sigmas, dts, etas


def verify_sde(seed: int = 0, dim: int = 8, repeats: int = 30, tol: float = 1e-6, wrong_dt: bool = False, sigmas=None, dts=None, etas=None) -> SdeReport:
    """Compare the two step parameterisations over a seeded grid of inputs."""
    g_s, g_d, g_e = default_sde_grid()
    sigmas, dts, etas = sigmas or g_s, dts or g_d, etas or g_e
    ours = _wrong_dt_step if wrong_dt else sde_step
    rng = seeded_rng((seed, 0))
    report = SdeReport(tol)
    for (sigma, dt, eta), _ in itertools.product(itertools.product(sigmas, dts, etas), range(repeats)):
        if sigma + dt < -1e-12:
            continue
        cfg = SdeConfig(eta)
        x, v, z = (torch.from_numpy(rng.standard_normal(dim)) for _ in range(3))
        n1, lp1, d1 = ours(v, sigma, dt, x, cfg, z)
        n2, lp2, d2 = sde_step_reference(v, sigma, dt, x, cfg, z)
        if (lp1 is None) != (lp2 is None):
            dlp = math.inf
        else:
            dlp = 0.0 if lp1 is None else float((lp1 - lp2).abs())
        report.cases.append(SdeCase(
            sigma, dt, eta, float((n1 - n2).abs().max()), float((d1.mean - d2.mean).abs().max()), abs(d1.std - d2.std), dlp,
        ))
        if eta == 0.0:
            euler = x + v * dt
            if not (torch.equal(n1, euler) and d1.std == 0.0 and lp1 is None):
                report.ode_ok = False
    return report


# ---------------------------------------------------------------- gradient gate


SMALL_MODEL = ModelConfig(lm_width=8, lm_depth=1, context_length=32, num_queries=2, connector_width=6, cond_dim=4, dm_width=8, dm_depth=2, seed=3)


@dataclass
class GradReport:
    h: float
    tol: float
    worst: dict = field(default_factory=dict)  # group -> worst per-tensor relative error
    worst_param: dict = field(default_factory=dict)
    worst_entry: dict = field(default_factory=dict)  # group -> worst elementwise error (diagnostic)
    checked: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.worst.values())

    @property
    def failing_groups(self) -> list[str]:
        return [g for g, v in self.worst.items() if v > self.tol]

    def lines(self) -> list[str]:
        out = [f"central differences h={self.h:g}, tolerance {self.tol:g} (relative, per tensor)"]
        for g in GROUPS:
            if g in self.excluded:
                out.append(f"{g:10s} frozen: excluded from the sweep")
            elif g in self.worst:
                flag = "ok" if self.worst[g] <= self.tol else "FAIL"
                out.append(
                    f"{g:10s} entries={self.checked[g]:5d}  worst={self.worst[g]:.3e} at {self.worst_param[g]}"
                    f"  (elementwise {self.worst_entry[g]:.1e})  {flag}"
                )
        out.append("PASS" if self.passed else "FAIL: " + ", ".join(self.failing_groups))
        return out


def gradient_batch(model: UnifiedModel, seed: int = 0, num_steps: int = 4, num_points: int = 4):
    """A two-trajectory reasoning-then-generation group (both token and denoising actions)."""
    cfg = ScenarioConfig(num_points=num_points, num_steps=num_steps, max_reason_len=4)
    q = queries_for(ScenarioKind.S5_COT, seeded_rng((seed, 1)), 1, cfg)[0]
    trajs = rollout_cot(model, q, cfg, [(seed, 2, 0), (seed, 2, 1)])
    for t, r in zip(trajs, (0.0, 1.0)):
        t.rewards.components = {"compose": r}
    make_group(q, trajs)
    return trajs, cfg


def _perturbed(model: UnifiedModel, scale: float, seed) -> UnifiedModel:
    snap = snapshot(model)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in snap.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=DTYPE))
    return snap


def gradient_test_model(seed: int = 3, scale: float = 0.3) -> UnifiedModel:
    """Small model with every weight moved off its initial value.

    Zero-initialised output layers would otherwise give exactly zero
    gradients upstream, which a finite-difference check cannot tell apart
    from a correct zero.
    """
    model = UnifiedModel(SMALL_MODEL)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=DTYPE))
    return model


def verify_grad(
    model: UnifiedModel | None = None,
    h: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
    kl_coeff: float = 0.1,
    max_entries: int | None = None,
    floor: float = 1e-6,
) -> GradReport:
    """Compare autograd against central differences of the full GRPO loss.

    The loss is the clipped LM and generator surrogates plus the KL term, on
    a two-trajectory group whose old policy is a slight perturbation of the
    current one (so ratios differ from 1 but stay inside the clip window)
    and whose reference is a larger perturbation (so the KL is active).
    Relative error is taken per parameter tensor,
    ``||fd - ad|| / max(||fd||, ||ad||, floor)``; isolated high-curvature
    entries make the per-entry ratio a statement about the truncation
    error of the stencil rather than about the gradient.
    """
    model = model or gradient_test_model()
    trajs, cfg = gradient_batch(model, seed)
    gcfg = GrpoConfig(group_size=2, clip_lm=0.2, clip_dm=0.2, kl_coeff=kl_coeff)
    with torch.no_grad():
        old = evaluate_policy(_perturbed(model, 1e-3, seed + 11), trajs, cfg.sde)
        ref = evaluate_policy(_perturbed(model, 3e-2, seed + 12), trajs, cfg.sde)

    def loss_value() -> torch.Tensor:
        return grpo_loss(model, trajs, gcfg, cfg.sde, old, ref)[0]

    params = dict(trainable_named_parameters(model))
    for p in model.parameters():
        p.grad = None
    loss_value().backward()
    report = GradReport(h, tol, excluded=sorted(model.frozen))
    with torch.no_grad():
        for name, p in params.items():
            group = name.split(".", 1)[0]
            analytic = torch.zeros_like(p).view(-1) if p.grad is None else p.grad.clone().view(-1)
            flat = p.view(-1)
            n = flat.numel() if max_entries is None else min(max_entries, flat.numel())
            fd = torch.zeros(n, dtype=DTYPE)
            for i in range(n):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_value())
                flat[i] = orig - h
                down = float(loss_value())
                flat[i] = orig
                fd[i] = (up - down) / (2 * h)
            ad = analytic[:n]
            rel = float((fd - ad).norm()) / max(float(fd.norm()), float(ad.norm()), floor)
            rel = rel if math.isfinite(rel) else math.inf
            entry = ((fd - ad).abs() / torch.maximum(torch.maximum(fd.abs(), ad.abs()), torch.tensor(floor, dtype=DTYPE))).max()
            entry = float(entry) if bool(torch.isfinite(entry)) else math.inf
            report.checked[group] = report.checked.get(group, 0) + n
            report.worst_entry[group] = max(report.worst_entry.get(group, 0.0), entry)
            if rel > report.worst.get(group, -1.0):
                report.worst[group] = rel
                report.worst_param[group] = name
    for p in model.parameters():
        p.grad = None
    return report


def verify_grad_controls(h: float = 1e-3, tol: float = 1e-4) -> dict:
    """Fresh pass, detached-connector failure, and frozen-LM exclusion."""
    fresh = verify_grad(h=h, tol=tol)
    broken_model = gradient_test_model()
    broken_model.connector.detach_params = True
    broken = verify_grad(broken_model, h=h, tol=tol)
    frozen_model = freeze(gradient_test_model(), "lm")
    frozen = verify_grad(frozen_model, h=h, tol=tol)
    return {"fresh": fresh, "detached_connector": broken, "frozen_lm": frozen}


def report_digest(rep) -> dict:
    if isinstance(rep, SdeReport):
        return {"passed": rep.passed, "cases": len(rep.cases), "max_dev": rep.max_dev(), "ode_ok": rep.ode_ok, "failures": len(rep.failures)}
    return {"passed": rep.passed, "worst": rep.worst, "excluded": rep.excluded}


__all__ = ["verify_sde", "verify_grad", "verify_grad_controls", "SdeReport", "GradReport", "np"]


# ---------------------------------------------------------------- marginals


@dataclass
class MarginalReport:
    steps: int
    final_loss: float
    distances: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(d < self.tol for d in self.distances.values())

    def lines(self) -> list[str]:
        out = [f"flow matching: {self.steps} steps, final loss {self.final_loss:.4f}"]
        for eta, d in self.distances.items():
            out.append(f"  eta={eta:<4} energy distance {d:.4f}  {'ok' if d < self.tol else 'FAIL'}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def two_gaussian_mixture(rng: np.random.Generator, n: int, sep: float = 1.5, scale: float = 0.4) -> np.ndarray:
    """Equal-weight mixture of N((+-sep, 0), scale^2 I) in the plane."""
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    centres = np.stack([sign * sep, np.zeros(n)], axis=1)
    return centres + scale * rng.standard_normal((n, 2))


def verify_marginals(
    steps: int = 5000,
    etas=(0.0, 0.7, 1.0),
    num_steps: int = 32,
    num_samples: int = 4000,
    tol: float = 0.05,
    seed: int = 0,
    batch: int = 256,
    lr: float = 2e-3,
) -> MarginalReport:
    """Fit a velocity field by flow matching, then sample it with the SDE at each ``eta``.

    The SDE only redistributes noise along the path, so every ``eta`` should
    land on the same data marginal as the ODE.
    """
    net = VelocityNet(2, 0, width=64, depth=3, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    rng = seeded_rng((seed, 0))
    loss = torch.zeros(())
    for _ in range(steps):
        x0 = torch.from_numpy(two_gaussian_mixture(rng, batch))
        noise = torch.from_numpy(rng.standard_normal((batch, 2)))
        t = torch.from_numpy(rng.random(batch))
        opt.zero_grad()
        loss = flow_matching_loss(lambda x, tt, c: net(x, tt, c), x0, noise, t)
        loss.backward()
        opt.step()
        sched.step()
    net.requires_grad_(False)
    truth = torch.from_numpy(two_gaussian_mixture(seeded_rng((seed, 1)), num_samples))
    cond = torch.zeros(num_samples, 0, dtype=DTYPE)
    grid = TimeGrid.uniform(num_steps)
    distances = {}
    for eta in etas:
        traj = rollout_batch(net, cond, grid, SdeConfig(noise_scale=eta), [(seed, 2, i) for i in range(num_samples)], (2,))
        distances[eta] = energy_distance(traj.states[:, -1], truth)
    return MarginalReport(steps, float(loss.detach()), distances, tol)
