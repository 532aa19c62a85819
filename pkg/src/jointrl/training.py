"""Experiment driver: base-model construction, the GRPO loop, metrics and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import vocab
from .config import RunConfig
from .flow import seeded_rng
from .grpo import GrpoConfig, make_group, grpo_update
from .models import (
    ModelConfig,
    TokenTrajectory,
    freeze,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    snapshot,
    unfreeze,
    UnifiedModel,
)
from .rewards import CompositionConfig, RasterSpec
from .scenarios import (
    ColdStartConfig,
    Query,
    ScenarioConfig,
    ScenarioKind,
    concat_data,
    cold_start_finetune,
    correction_rate,
    cot_dataset,
    edit_dataset,
    judge_accuracy,
    judge_pairs,
    pretrain_judge_format,
    queries_for,
    reflect_dataset,
    reflect_group_samples,
    rollout_edit,
    rollout_group,
    t2i_dataset,
)

METRICS_SCHEMA = "jointrl-metrics"
METRICS_VERSION = 1
RECORD_FIELDS = (
    "step", "scenario", "mean_reward", "components", "loss", "loss_lm", "loss_dm", "kl", "kl_lm", "kl_dm",
    "clip_fraction_lm", "clip_fraction_dm", "grad_norm", "mean_reasoning_length", "mean_compressed_size",
    "judge_accuracy", "correction_rate", "skipped", "eval", "wall_ms",
)


def scenario_config(config: RunConfig) -> ScenarioConfig:
    s, r, o = config.sampler, config.reward, config.scenario_opts
    return ScenarioConfig(
        num_points=s.num_points, num_steps=s.num_steps, noise_scale=s.noise_scale,
        temperature=o.temperature, max_reason_len=o.max_reason_len,
        max_expand_len=o.max_expand_len, max_reflect_len=o.max_reflect_len,
        max_iters=o.max_iters, reward_threshold=r.reward_threshold, edit_weights=tuple(r.edit_weights),
        compress_sign=r.compress_sign, guidance=o.guidance, composition=CompositionConfig(), raster=RasterSpec(),
    )


def grpo_config(config: RunConfig) -> GrpoConfig:
    g = config.grpo
    return GrpoConfig(
        group_size=g.group_size, clip_lm=g.clip_lm, clip_dm=g.clip_dm, kl_coeff=g.kl_coeff, kl_lm=g.kl_lm,
        kl_dm=g.kl_dm, std_guard=g.std_guard, lr=g.lr, optimizer=g.optimizer, epochs=g.epochs,
        max_grad_norm=g.max_grad_norm or None,
    )


def model_config(config: RunConfig) -> ModelConfig:
    m = config.model
    return ModelConfig(
        lm_width=m.lm_width, lm_depth=m.lm_depth, context_length=m.context_length, num_queries=m.num_queries,
        connector_width=m.connector_width, cond_dim=m.cond_dim, dm_width=m.dm_width, dm_depth=m.dm_depth,
        seed=config.seed,
    )


# ---------------------------------------------------------------- base models


def build_base_model(config: RunConfig) -> tuple[UnifiedModel, dict]:
    """Fresh model plus the scenario's supervised warm-up (LM frozen for the generator part)."""
    kind, d = config.kind, config.data
    cfg = scenario_config(config)
    model = UnifiedModel(model_config(config))
    rng = seeded_rng((d.seed, 0))
    info = {}
    cs = ColdStartConfig(steps=d.pretrain_steps, batch_size=d.pretrain_batch, seed=d.seed)
    if kind == ScenarioKind.S6_REFLECT and d.lm_pretrain_steps:
        pairs = judge_pairs(seeded_rng((d.seed, 1)), max(d.pretrain_size // 2, 2), cfg)
        info["lm_pretrain_loss"] = pretrain_judge_format(model, pairs, d.lm_pretrain_steps, seed=d.seed)[-1:]
    freeze(model, "lm")
    data = None
    if kind == ScenarioKind.S3_T2I:
        data = t2i_dataset(rng, d.pretrain_size, cfg, scatter=d.pretrain_scatter)
    elif kind == ScenarioKind.S5_COT:
        data = cot_dataset(rng, d.pretrain_size, cfg)
    elif kind == ScenarioKind.S4_EDIT:
        data = edit_dataset(rng, d.pretrain_size, cfg)
        cs = ColdStartConfig(cs.steps, cs.batch_size, cs.lr, 0.05, 0.05, 0.05, cs.seed)
    elif kind == ScenarioKind.S6_REFLECT:
        half = max(d.pretrain_size // 2, 1)
        data = concat_data(t2i_dataset(rng, half, cfg, scatter=d.pretrain_scatter), reflect_dataset(rng, half, cfg))
    if data is not None and cs.steps:
        curve = cold_start_finetune(model, data, cs)
        info["cold_start_loss"] = [curve[0], curve[-1]]
    unfreeze(model, "lm")
    return model, info


# ---------------------------------------------------------------- queries and evaluation


class QuerySource:
    """Deterministic per-step queries.

    The first ``labelled_fraction`` of each step's reflection queries carry
    one labelled first sample per group member, half of them satisfying the
    prompt; the rest judge what the generator produces.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.cfg = scenario_config(config)

    def queries(self, step: int, n: int) -> list[Query]:
        rng = seeded_rng((self.config.seed, step, 0))
        qs = queries_for(self.config.kind, rng, n, self.cfg)
        if self.config.kind != ScenarioKind.S6_REFLECT:
            return qs
        G, k = self.config.grpo.group_size, round(self.config.scenario_opts.labelled_fraction * n)
        return [Query(q.kind, q.prompt, spec=q.spec, initial=reflect_group_samples(q.spec, rng, G, self.cfg)) for q in qs[:k]] + qs[k:]


@dataclass
class EvalSet:
    queries: list
    seeds: list
    pairs: object = None


def eval_set(config: RunConfig, size: int | None = None) -> EvalSet:
    size = config.data.eval_size if size is None else size
    cfg = scenario_config(config)
    rng = seeded_rng((config.data.seed, 3))
    qs = queries_for(config.kind, rng, size, cfg)
    seeds = [(config.data.seed, 3, i) for i in range(size)]
    pairs = judge_pairs(seeded_rng((config.data.seed, 4)), 500, cfg) if config.kind == ScenarioKind.S6_REFLECT else None
    return EvalSet(qs, seeds, pairs)


def evaluate(model: UnifiedModel, config: RunConfig, es: EvalSet | None = None, per_query: int = 4, guidance=None) -> dict:
    """Fixed-seed evaluation of the scenario's headline quantities."""
    es = es or eval_set(config)
    cfg = scenario_config(config)
    kind = config.kind
    out: dict = {}
    if kind == ScenarioKind.S6_REFLECT:
        out["judge_accuracy"] = judge_accuracy(model, es.pairs, cfg)
        out["correction_rate"] = correction_rate(model, es.queries, cfg, es.seeds)
        return out
    trajs = []
    for q, s in zip(es.queries, es.seeds):
        seeds = [s + (j,) for j in range(per_query)]
        if kind == ScenarioKind.S4_EDIT:
            trajs += rollout_edit(model, q, cfg, seeds, guidance)
        else:
            trajs += rollout_group(model, q, cfg, seeds)
    if not trajs:
        return out
    out["mean_reward"] = float(np.mean([t.rewards.total for t in trajs]))
    for k in trajs[0].rewards.components:
        out[k] = float(np.mean([t.rewards.components[k] for t in trajs]))
    if kind == ScenarioKind.S3_T2I:
        out["mean_compressed_size"] = float(np.mean([t.info["compressed_size"] for t in trajs]))
    if kind == ScenarioKind.S5_COT:
        out["mean_reasoning_length"] = float(np.mean([t.info["reasoning_length"] for t in trajs]))
    return out


# ---------------------------------------------------------------- metrics


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    return v


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w")
        self.timings = open(self.path.with_name("timings.jsonl"), "w")

    def write(self, record: dict):
        self.fh.write(json.dumps(_clean(record), sort_keys=True) + "\n")
        self.fh.flush()

    def timing(self, step: int, wall_ms: float):
        self.timings.write(json.dumps({"step": step, "wall_ms": round(wall_ms, 3)}) + "\n")
        self.timings.flush()

    def close(self):
        self.fh.close()
        self.timings.close()


def read_metrics(path) -> list[dict]:
    recs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            recs.append(json.loads(line))
    return recs


def batch_record(step: int, config: RunConfig, trajs, report) -> dict:
    rec = dict.fromkeys(RECORD_FIELDS)
    rec.update(kind="update", step=step, scenario=config.scenario, wall_ms=None, eval=None)
    rec["mean_reward"] = float(np.mean([t.rewards.total for t in trajs]))
    comps = {}
    for t in trajs:
        for k, v in t.rewards.components.items():
            comps.setdefault(k, []).append(v)
    rec["components"] = {k: float(np.mean(v)) for k, v in sorted(comps.items())}
    r = report.to_dict()
    for k in ("loss", "loss_lm", "loss_dm", "kl_lm", "kl_dm", "clip_fraction_lm", "clip_fraction_dm", "grad_norm", "skipped"):
        rec[k] = r[k]
    rec["kl"] = r["kl_lm"] + r["kl_dm"]
    if report.reason:
        rec["reason"] = report.reason
    if config.kind == ScenarioKind.S5_COT:
        rec["mean_reasoning_length"] = float(np.mean([t.info["reasoning_length"] for t in trajs]))
    if config.kind == ScenarioKind.S3_T2I:
        rec["mean_compressed_size"] = float(np.mean([t.info["compressed_size"] for t in trajs]))
    if config.kind == ScenarioKind.S6_REFLECT:
        verdicts = [c for t in trajs for c in t.info["judge_correct"]]
        rec["judge_accuracy"] = float(np.mean(verdicts))
        wrong = [t for t in trajs if not t.info["first_truth"]]
        rec["correction_rate"] = float(np.mean([t.info["final_truth"] for t in wrong])) if wrong else None
    return rec


# ---------------------------------------------------------------- traces


def trajectory_trace(traj) -> dict:
    segs = []
    for s in traj.segments:
        if isinstance(s, TokenTrajectory):
            segs.append({"type": "tokens", "tokens": vocab.decode(s.tokens), "log_probs": s.log_probs, "truncated": s.truncated})
        else:
            segs.append({
                "type": "denoise",
                "context": vocab.decode(s.context_tokens),
                "final": s.final.round(6).tolist(),
                "log_probs": s.traj.log_probs[0].tolist(),
                "stds": list(s.traj.stds),
            })
    info = {k: v for k, v in traj.info.items() if k != "state"}
    return {"grammar": traj.grammar, "advantage": traj.advantage, "rewards": traj.rewards.to_dict(), "info": info, "segments": segs}


def dump_trace(trajs, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(_clean(trajectory_trace(t)), sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    status: int
    model: UnifiedModel
    metrics_path: Path
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _setup_groups(model: UnifiedModel, config: RunConfig):
    o = config.scenario_opts
    model.frozen = set()
    freeze(model, *o.freeze)
    return make_optimizer(model, tuple(o.train_groups), config.grpo.optimizer, config.grpo.lr)


def save_training_state(path, model, ref, optimizer, step: int, config: RunConfig) -> Path:
    path = Path(path)
    save_checkpoint(model, path / "model", {"step": step, "config": config.to_dict()})
    save_checkpoint(ref, path / "reference")
    torch.save(optimizer.state_dict(), path / "optimizer.pt")
    return path


def train(config: RunConfig, resume_from=None, metrics_path=None, base_model: UnifiedModel | None = None) -> TrainResult:
    """GRPO loop: snapshot, roll out groups, score, normalise, update, log.

    ``resume_from`` points at a directory written by a periodic checkpoint;
    the continued run reproduces the uninterrupted run's records.
    """
    torch.set_num_threads(1)
    out = Path(config.output_dir)
    metrics_path = Path(metrics_path) if metrics_path else out / "metrics.jsonl"
    writer = MetricsWriter(metrics_path)
    cfg, gcfg = scenario_config(config), grpo_config(config)
    writer.write({"kind": "header", "schema": METRICS_SCHEMA, "version": METRICS_VERSION, "scenario": config.scenario, "config": config.to_dict()})
    start = 0
    if resume_from is not None:
        model, extra = load_checkpoint(Path(resume_from) / "model")
        ref, _ = load_checkpoint(Path(resume_from) / "reference")
        ref = snapshot(ref)
        opt = _setup_groups(model, config)
        opt.load_state_dict(torch.load(Path(resume_from) / "optimizer.pt", weights_only=True))
        start = int(extra["step"])
        writer.write({"kind": "resume", "step": start})
    else:
        if base_model is not None:
            model, info = base_model, {}
        else:
            model, info = build_base_model(config)
        opt = _setup_groups(model, config)
        ref = snapshot(model)
        es = eval_set(config) if config.data.eval_size else None
        initial = {"kind": "initial", "step": 0, "scenario": config.scenario, "warmup": info}
        initial["eval"] = evaluate(model, config, es) if es else None
        writer.write(initial)
    es = eval_set(config) if config.data.eval_size and config.eval_every else None
    source = QuerySource(config)
    records, ckpts, status = [], [], 0
    G, n = config.grpo.group_size, config.grpo.groups_per_step
    strengths = config.scenario_opts.train_guidance
    for step in range(start + 1, config.budget + 1):
        t0 = time.perf_counter()
        old = snapshot(model)
        queries = source.queries(step, n)
        # groups cycle through the training guidance strengths, if any
        ws = [strengths[(step * n + g) % len(strengths)] if strengths else None for g in range(n)]
        groups = [
            make_group(q, rollout_group(old, q, cfg, [(config.seed, step, g, j) for j in range(G)], w), gcfg.std_guard)
            for g, (q, w) in enumerate(zip(queries, ws))
        ]
        report = grpo_update(groups, gcfg, model, old, ref, opt, cfg.sde)
        trajs = [t for g in groups for t in g.trajectories]
        rec = batch_record(step, config, trajs, report)
        if es is not None and step % config.eval_every == 0:
            rec["eval"] = evaluate(model, config, es)
        if report.skipped:
            rec["kind"] = "halt"
            writer.write(rec)
            records.append(rec)
            ckpts.append(save_training_state(out / "checkpoints" / f"halt-{step:06d}", model, ref, opt, step, config))
            status = 1
            break
        writer.write(rec)
        writer.timing(step, 1000 * (time.perf_counter() - t0))
        records.append(rec)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            ckpts.append(save_training_state(out / "checkpoints" / f"step-{step:06d}", model, ref, opt, step, config))
    if status == 0:
        final = {"kind": "final", "step": config.budget}
        final["eval"] = evaluate(model, config, eval_set(config)) if config.data.eval_size else None
        writer.write(final)
        ckpts.append(save_training_state(out / "checkpoints" / "final", model, ref, opt, config.budget, config))
    writer.close()
    return TrainResult(status, model, metrics_path, records, ckpts)
