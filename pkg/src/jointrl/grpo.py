"""Group-relative policy optimisation over joint token + denoising trajectories.

Every action of a composite trajectory (each sampled token and each
denoising step) carries the trajectory's single group-normalised advantage.
The LM and generator surrogates are clipped separately and summed with an
exact KL penalty against a fixed reference policy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .flow import DTYPE, DenoisingTrajectory, SdeConfig, recompute_step_means, trajectory_logprobs
from .models import TokenTrajectory, UnifiedModel, allowed_mask, masked_log_softmax, pad_batch
from .rewards import RewardBreakdown


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_lm: float = 0.2
    clip_dm: float = 0.2
    kl_coeff: float = 0.01
    kl_lm: bool = True
    kl_dm: bool = True
    std_guard: float = 1e-8
    lr: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 1
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        for name in ("clip_lm", "clip_dm"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.kl_coeff < 0 or self.std_guard < 0 or self.lr <= 0:
            raise ValueError("kl_coeff and std_guard must be >= 0, lr > 0")
        if not 1 <= self.epochs <= 4:
            raise ValueError("epochs must lie in [1, 4]")


def compute_advantages(rewards, std_guard: float = 1e-8) -> np.ndarray:
    """``(R - mean) / (population std + std_guard)`` within one group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centred = r - r.mean()
    std = np.sqrt((centred**2).mean())
    if std + std_guard == 0.0:
        return np.zeros_like(r)
    return centred / (std + std_guard)


def clipped_surrogate(new_logprobs: torch.Tensor, old_logprobs, advantage, eps: float) -> torch.Tensor:
    """``-mean_t min(r A, clip(r) A)``; an empty action list contributes 0."""
    if new_logprobs.numel() == 0:
        return new_logprobs.sum() * 0.0
    old = torch.as_tensor(old_logprobs, dtype=DTYPE)
    adv = torch.as_tensor(advantage, dtype=DTYPE)
    ratio = torch.exp(new_logprobs - old)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * adv
    return -torch.minimum(unclipped, clipped).mean()


def lm_clip_loss(new_logprobs, old_logprobs, advantage, eps_lm: float) -> torch.Tensor:
    """Per-token clipped surrogate averaged over the ``T`` sampled tokens."""
    return clipped_surrogate(torch.as_tensor(new_logprobs, dtype=DTYPE), old_logprobs, advantage, eps_lm)


def dm_clip_loss(new_logprobs, old_logprobs, advantage, eps_dm: float) -> torch.Tensor:
    """Per-step clipped surrogate averaged over the ``N`` denoising steps."""
    return clipped_surrogate(torch.as_tensor(new_logprobs, dtype=DTYPE), old_logprobs, advantage, eps_dm)


def clip_fraction(new_logprobs, old_logprobs, eps: float) -> float:
    new = torch.as_tensor(new_logprobs, dtype=DTYPE).detach()
    if new.numel() == 0:
        return 0.0
    ratio = torch.exp(new - torch.as_tensor(old_logprobs, dtype=DTYPE))
    return float(((ratio - 1.0).abs() > eps).to(DTYPE).mean())


def kl_categorical(logp: torch.Tensor, logq: torch.Tensor) -> torch.Tensor:
    """Exact ``KL(p || q)`` along the last axis from log-probabilities; 0 log 0 = 0."""
    p = logp.exp()
    live = p > 0
    # sanitise before multiplying: -inf - -inf would poison the backward pass
    zero = torch.zeros_like(p)
    diff = torch.where(live, logp, zero) - torch.where(live, logq, zero)
    return (p * diff).sum(dim=-1)


def kl_discrete(policy, reference, contexts, allowed=None) -> torch.Tensor:
    """Mean exact categorical KL over the next-token distributions after each context."""
    from .models import token_logits

    mask = allowed_mask(allowed, policy.vocab_size)
    vals = []
    for ctx in contexts:
        lp = masked_log_softmax(token_logits(policy, ctx), mask)
        lq = masked_log_softmax(token_logits(reference, ctx), mask)
        vals.append(kl_categorical(lp, lq))
    return torch.stack(vals).mean()


def kl_continuous(mean_new, mean_ref, std) -> torch.Tensor:
    """Sum over steps of ``|mu_new - mu_ref|^2 / (2 std^2 d)`` for shared per-step stds.

    ``mean_*`` are (N, *event); ``std`` has one entry per step.
    """
    mean_new = torch.as_tensor(mean_new, dtype=DTYPE)
    mean_ref = torch.as_tensor(mean_ref, dtype=DTYPE)
    std = torch.as_tensor(std, dtype=DTYPE).reshape(-1)
    if bool((std <= 0).any()):
        raise ValueError("KL between Gaussians needs std > 0")
    if mean_new.ndim == 1:
        mean_new, mean_ref = mean_new[None], mean_ref[None]
    sq = ((mean_new - mean_ref) ** 2).flatten(1)
    return (sq.mean(dim=1) / (2.0 * std**2)).sum()


# ---------------------------------------------------------------- trajectories


@dataclass
class DenoiseSegment:
    """One generator run inside a composite trajectory, with what it was conditioned on."""

    traj: DenoisingTrajectory  # batch of one
    context_tokens: list[int]
    context_vis: np.ndarray
    reference: torch.Tensor | None = None  # (P, C) reference conditioning, already noised
    guidance: float = 1.0  # text guidance the segment was sampled with

    @property
    def final(self) -> np.ndarray:
        return self.traj.final[0].numpy()


@dataclass
class CompositeTrajectory:
    """Ordered token/denoise segments produced for one query."""

    query: object
    segments: list = field(default_factory=list)
    rewards: RewardBreakdown = field(default_factory=RewardBreakdown)
    advantage: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def grammar(self) -> str:
        return "".join("T" if isinstance(s, TokenTrajectory) else "D" for s in self.segments)

    @property
    def token_segments(self) -> list[TokenTrajectory]:
        return [s for s in self.segments if isinstance(s, TokenTrajectory)]

    @property
    def denoise_segments(self) -> list[DenoiseSegment]:
        return [s for s in self.segments if isinstance(s, DenoiseSegment)]

    @property
    def num_token_actions(self) -> int:
        return sum(len(s) for s in self.token_segments)

    @property
    def num_denoise_steps(self) -> int:
        return sum(s.traj.grid.num_steps for s in self.denoise_segments)

    def action_advantages(self) -> list[float]:
        return [self.advantage] * (self.num_token_actions + self.num_denoise_steps)


@dataclass
class GroupBatch:
    query: object
    trajectories: list[CompositeTrajectory]
    rewards: np.ndarray
    advantages: np.ndarray


def make_group(query, trajectories: list[CompositeTrajectory], std_guard: float = 1e-8) -> GroupBatch:
    rewards = np.array([t.rewards.total for t in trajectories])
    adv = compute_advantages(rewards, std_guard)
    for t, a in zip(trajectories, adv):
        t.advantage = float(a)
    return GroupBatch(query, trajectories, rewards, adv)


@dataclass
class PolicyTerms:
    """Differentiable per-trajectory quantities under one parameter setting."""

    lm_logprobs: list[torch.Tensor]  # per trajectory, (T_i,)
    lm_logp_full: list[torch.Tensor]  # per trajectory, (T_i, V) masked log-probs
    dm_logprobs: list[torch.Tensor]  # per trajectory, (N_i,)
    dm_means: list[list[torch.Tensor]]  # per trajectory, per segment, (N, *event)


def evaluate_policy(model: UnifiedModel, trajs: list[CompositeTrajectory], sde: SdeConfig) -> PolicyTerms:
    """Recompute token log-probs and step means for stored trajectories under ``model``."""
    lm_lp, lm_full = [torch.zeros(0, dtype=DTYPE)] * len(trajs), [None] * len(trajs)
    with_tokens = [i for i, t in enumerate(trajs) if t.num_token_actions]
    if with_tokens:
        seqs, vis, pos, masks = [], [], [], []
        for i in with_tokens:
            last = trajs[i].token_segments[-1]
            seqs.append(last.seq)
            vis.append(last.vis)
            pos.append([p for s in trajs[i].token_segments for p in s.positions])
            masks.append(torch.stack([allowed_mask(s.allowed) for s in trajs[i].token_segments for _ in s.positions]))
        tok, vt, m = pad_batch(seqs, vis)
        logits = model.lm(tok, vt, m)
        for row, i in enumerate(with_tokens):
            p = torch.as_tensor(pos[row], dtype=torch.long)
            full = masked_log_softmax(logits[row, p - 1], masks[row])
            lm_full[i] = full
            lm_lp[i] = full.gather(1, tok[row, p][:, None])[:, 0]

    segs = [(i, s) for i, t in enumerate(trajs) for s in t.denoise_segments]
    dm_means = [[] for _ in trajs]
    dm_lp = [[] for _ in trajs]
    if segs:
        tok, vt, m = pad_batch([s.context_tokens for _, s in segs], [s.context_vis for _, s in segs])
        ctx = model.context(tok, vt, m)
        P = segs[0][1].traj.states.shape[2]
        refs = [s.reference for _, s in segs]
        ref = None
        if any(r is not None for r in refs):
            ref = torch.stack([torch.zeros(P, model.config.channels, dtype=DTYPE) if r is None else r for r in refs])
        cond = model.dm_condition(ctx, ref, P)
        states = torch.cat([s.traj.states for _, s in segs])
        stacked = DenoisingTrajectory(segs[0][1].traj.grid, states, states[:, 1:], states[:, 1:], segs[0][1].traj.stds, None, cond)
        w = [s.guidance for _, s in segs]
        policy = model.velocity if all(x == 1.0 for x in w) else model.guided_velocity(torch.tensor(w, dtype=DTYPE))
        means = recompute_step_means(policy, stacked, cond, sde)
        lps = trajectory_logprobs(means, stacked)
        for k, (i, _) in enumerate(segs):
            dm_means[i].append(means[k])
            dm_lp[i].append(lps[k])
    dm_lp = [torch.cat(x) if x else torch.zeros(0, dtype=DTYPE) for x in dm_lp]
    return PolicyTerms(lm_lp, lm_full, dm_lp, dm_means)


@dataclass
class UpdateReport:
    loss: float = 0.0
    loss_lm: float = 0.0
    loss_dm: float = 0.0
    kl_lm: float = 0.0
    kl_dm: float = 0.0
    clip_fraction_lm: float = 0.0
    clip_fraction_dm: float = 0.0
    grad_norm: float = 0.0
    skipped: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def grpo_loss(model, trajs, cfg: GrpoConfig, sde: SdeConfig, old: PolicyTerms, ref_terms: PolicyTerms | None):
    """Total loss plus detached diagnostics for one pass over ``trajs``."""
    new = evaluate_policy(model, trajs, sde)
    lm_terms, dm_terms, cf_lm, cf_dm, kl_lm, kl_dm = [], [], [], [], [], []
    for i, t in enumerate(trajs):
        lm_terms.append(lm_clip_loss(new.lm_logprobs[i], old.lm_logprobs[i].detach(), t.advantage, cfg.clip_lm))
        dm_terms.append(dm_clip_loss(new.dm_logprobs[i], old.dm_logprobs[i].detach(), t.advantage, cfg.clip_dm))
        if new.lm_logprobs[i].numel():
            cf_lm.append(clip_fraction(new.lm_logprobs[i], old.lm_logprobs[i], cfg.clip_lm))
        if new.dm_logprobs[i].numel():
            cf_dm.append(clip_fraction(new.dm_logprobs[i], old.dm_logprobs[i], cfg.clip_dm))
        if ref_terms is not None:
            if new.lm_logp_full[i] is not None:
                kl_lm.append(kl_categorical(new.lm_logp_full[i], ref_terms.lm_logp_full[i].detach()))
            for seg, mu_new, mu_ref in zip(t.denoise_segments, new.dm_means[i], ref_terms.dm_means[i]):
                kl_dm.append(kl_continuous(mu_new, mu_ref.detach(), seg.traj.stds))
    loss_lm = torch.stack(lm_terms).mean()
    loss_dm = torch.stack(dm_terms).mean()
    zero = loss_lm * 0.0
    klv_lm = torch.cat(kl_lm).mean() if kl_lm else zero
    klv_dm = torch.stack(kl_dm).sum() / len(trajs) if kl_dm else zero
    total = loss_lm + loss_dm
    if cfg.kl_lm:
        total = total + cfg.kl_coeff * klv_lm
    if cfg.kl_dm:
        total = total + cfg.kl_coeff * klv_dm
    report = UpdateReport(
        float(total.detach()), float(loss_lm.detach()), float(loss_dm.detach()), float(klv_lm.detach()), float(klv_dm.detach()),
        float(np.mean(cf_lm)) if cf_lm else 0.0, float(np.mean(cf_dm)) if cf_dm else 0.0,
    )
    return total, report


def grpo_update(batch, cfg: GrpoConfig, model: UnifiedModel, old_snapshot, ref_snapshot, optimizer, sde: SdeConfig) -> UpdateReport:
    """Clipped-surrogate update over one or more groups.

    Old-policy terms are recomputed from ``old_snapshot`` along the same path
    as the new ones, so at the first epoch every ratio is exactly one.
    """
    groups = batch if isinstance(batch, (list, tuple)) else [batch]
    trajs = [t for g in groups for t in g.trajectories]
    with torch.no_grad():
        old = evaluate_policy(old_snapshot, trajs, sde)
        ref_terms = evaluate_policy(ref_snapshot, trajs, sde) if ref_snapshot is not None and cfg.kl_coeff > 0 else None
    params = [p for g in optimizer.param_groups for p in g["params"]]
    report = UpdateReport()
    for _ in range(cfg.epochs):
        # tensors outside the optimizer still collect gradients; drop them too
        model.zero_grad(set_to_none=True)
        optimizer.zero_grad(set_to_none=True)
        total, report = grpo_loss(model, trajs, cfg, sde, old, ref_terms)
        if not math.isfinite(float(total.detach())):
            report.skipped, report.reason = True, "non-finite loss"
            return report
        total.backward()
        grads = [p.grad for p in params if p.grad is not None]
        gnorm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads]))) if grads else 0.0
        report.grad_norm = gnorm
        if not math.isfinite(gnorm):
            report.skipped, report.reason = True, "non-finite gradient"
            optimizer.zero_grad(set_to_none=True)
            return report
        if cfg.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
        optimizer.step()
    return report
