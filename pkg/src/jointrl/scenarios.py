"""The six interaction protocols as composite-trajectory rollouts.

Each ``rollout_*`` function samples a whole GRPO group in lock-step for one
query; trajectory ``i`` only ever draws from sub-streams of ``seeds[i]``, so a
group of one reproduces the single-run entry points (``run_s3_t2i`` etc.).

Sub-stream layout per trajectory seed ``s``:
  0 first token segment, 1 first generation, 2/3 reference noise (forward /
  reverse edit), 4 reverse generation, 10+2k / 11+2k reflection tokens and
  regeneration of cycle k, 20+k judge verdict k.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from . import vocab
from .flow import (
    DTYPE,
    SdeConfig,
    TimeGrid,
    flow_matching_loss,
    rollout_batch,
    seeded_rng,
)
from .grpo import CompositeTrajectory, DenoiseSegment
from .models import (
    VIS_FEATURES,
    FrozenParameterError,
    UnifiedModel,
    make_optimizer,
    pad_batch,
    sample_tokens_batch,
)
from .rewards import (
    ATTRIBUTE_TARGET,
    EDIT_CATALOG,
    CompositionConfig,
    EditInstruction,
    PromptSpec,
    RasterSpec,
    RewardBreakdown,
    compressed_size,
    compressibility_reward,
    composition_reward,
    cycle_reward,
    edit_reward,
    judge_reward,
    parse_verdict,
    quality_reward,
    random_prompt,
    render_raster,
    sample_summary,
    satisfies,
    total_edit_reward,
)

CHANNELS = 3
SUMMARY_ROWS = 3


class ScenarioKind(str, Enum):
    S1_TEXT = "S1_text"
    S2_MULTIMODAL = "S2_multimodal"
    S3_T2I = "S3_t2i"
    S4_EDIT = "S4_edit"
    S5_COT = "S5_cot_t2i"
    S6_REFLECT = "S6_reflect"


GRAMMARS = {
    ScenarioKind.S1_TEXT: "T",
    ScenarioKind.S2_MULTIMODAL: "T",
    ScenarioKind.S3_T2I: "D",
    ScenarioKind.S4_EDIT: "DD",
    ScenarioKind.S5_COT: "TTD",
    ScenarioKind.S6_REFLECT: "D?T(TDT)*",
}
NEEDS_REFERENCE = {ScenarioKind.S2_MULTIMODAL, ScenarioKind.S4_EDIT}

THINK_VOCAB = tuple(vocab.THOUGHT_WORDS) + (vocab.END_THINK,)
EXPAND_VOCAB = tuple(vocab.SPEC_WORDS) + (vocab.GEN,)
REFLECT_VOCAB = THINK_VOCAB
JUDGE_VOCAB = vocab.ANSWER_PROTOCOL


class GrammarError(ValueError):
    pass


def validate_grammar(traj: CompositeTrajectory, kind: ScenarioKind) -> None:
    kind = ScenarioKind(kind)
    if not re.fullmatch(GRAMMARS[kind], traj.grammar):
        raise GrammarError(f"{kind.value} trajectory has segment pattern {traj.grammar!r}, expected {GRAMMARS[kind]!r}")


@dataclass(frozen=True, eq=False)
class Query:
    """One prompt. ``reference`` is a (P, 3) sample set, present iff the scenario needs it."""

    kind: ScenarioKind
    prompt: tuple[int, ...]
    spec: PromptSpec | None = None
    reference: np.ndarray | None = None
    instruction: EditInstruction | None = None
    answer: int | None = None  # oracle answer token for the text tasks
    initial: np.ndarray | None = None  # pre-generated first sample for reflection: (P, 3) shared or (G, P, 3) per trajectory

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if (self.reference is not None) != (self.kind in NEEDS_REFERENCE):
            raise ValueError(f"{self.kind.value} {'needs' if self.kind in NEEDS_REFERENCE else 'takes no'} reference sample")
        if self.kind == ScenarioKind.S4_EDIT and self.instruction is None:
            raise ValueError("edit queries need an instruction")
        if self.kind in (ScenarioKind.S3_T2I, ScenarioKind.S5_COT, ScenarioKind.S6_REFLECT) and self.spec is None:
            raise ValueError(f"{self.kind.value} queries need a prompt spec")


@dataclass(frozen=True)
class ScenarioConfig:
    num_points: int = 32
    num_steps: int = 10
    noise_scale: float = 0.7
    temperature: float = 1.0
    max_reason_len: int = 4
    max_expand_len: int = 8
    max_reflect_len: int = 4
    max_iters: int = 3
    reward_threshold: float = 1.0
    edit_weights: tuple[float, float, float] = (1.0, 1.0, 0.5)
    compress_sign: int = 0  # 0: composition reward; +1 / -1: (in)compressibility
    ref_keep: float = 0.8
    guidance: float = 1.0
    composition: CompositionConfig = CompositionConfig()
    raster: RasterSpec = RasterSpec()

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.num_steps)

    @property
    def sde(self) -> SdeConfig:
        return SdeConfig(self.noise_scale)


def stream(seed, k: int) -> tuple:
    return (tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)) + (k,)


# ---------------------------------------------------------------- context building


def summary_vis(seq_len: int, rows_at: dict[int, np.ndarray]) -> np.ndarray:
    vis = np.zeros((seq_len, VIS_FEATURES))
    for pos, row in rows_at.items():
        vis[pos] = row
    return vis


def with_summary(tokens: list[int], vis: np.ndarray, sample, cfg: ScenarioConfig) -> tuple[list[int], np.ndarray]:
    """Append ``<vis>`` pseudo-tokens carrying the sample's summary rows."""
    rows = sample_summary(sample, cfg.composition, VIS_FEATURES)
    return list(tokens) + [vocab.VIS] * SUMMARY_ROWS, np.vstack([vis, rows])


def t2i_context(spec: PromptSpec) -> list[int]:
    return [vocab.BOS, *spec.tokens(), vocab.GEN]


def noised_reference(ref, seed, keep: float = 0.8) -> torch.Tensor:
    ref = np.asarray(ref, dtype=np.float64)
    eps = seeded_rng(seed).standard_normal(ref.shape)
    return torch.from_numpy(keep * ref + (1.0 - keep) * eps)


@torch.no_grad()
def denoise_segments(model: UnifiedModel, contexts, vis_list, references, cfg: ScenarioConfig, seeds, guidance=None):
    """One generator run per context, batched; returns ``DenoiseSegment`` records."""
    P = cfg.num_points
    vis_list = [np.zeros((len(c), VIS_FEATURES)) if v is None else v for c, v in zip(contexts, vis_list)]
    tok, vt, m = pad_batch(contexts, vis_list)
    ctx = model.context(tok, vt, m)
    ref = None
    if references is not None and any(r is not None for r in references):
        ref = torch.stack([torch.zeros(P, CHANNELS, dtype=DTYPE) if r is None else r for r in references])
    cond = model.dm_condition(ctx, ref, P)
    w = cfg.guidance if guidance is None else guidance
    policy = model.velocity if w == 1.0 else model.guided_velocity(w)
    traj = rollout_batch(policy, cond, cfg.grid, cfg.sde, list(seeds), (P, CHANNELS))
    refs = references or [None] * len(contexts)
    return [DenoiseSegment(traj.select(i), list(contexts[i]), vis_list[i], refs[i], float(w)) for i in range(len(contexts))]


# ---------------------------------------------------------------- text tasks (S1 / S2)


def text_task_query(rng: np.random.Generator) -> Query:
    """Parity or count-of-ones over a few bits; the answer is one token."""
    bits = rng.integers(0, 2, size=int(rng.integers(2, 7)))
    if rng.random() < 0.5:
        return Query(ScenarioKind.S1_TEXT, (vocab.BOS, vocab.ID["parity"], *(vocab.BIT_WORDS[b] for b in bits)), answer=vocab.BIT_WORDS[int(bits.sum() % 2)])
    return Query(ScenarioKind.S1_TEXT, (vocab.BOS, vocab.ID["count"], *(vocab.BIT_WORDS[b] for b in bits)), answer=vocab.DIGIT_WORDS[int(bits.sum())])


def multimodal_query(rng: np.random.Generator, cfg: ScenarioConfig = ScenarioConfig()) -> Query:
    """Count the clusters of a reference sample shown as a summary."""
    spec = random_prompt(rng)
    ref = target_sample(spec, rng, cfg.num_points)
    n = int(sample_summary(ref, cfg.composition)[0, :4].argmax())
    prompt = (vocab.BOS, vocab.ID["count"], *([vocab.VIS] * SUMMARY_ROWS))
    return Query(ScenarioKind.S2_MULTIMODAL, prompt, reference=ref, answer=vocab.DIGIT_WORDS[n])


def _prompt_vis(query: Query, cfg: ScenarioConfig, zero_summary: bool) -> np.ndarray:
    vis = np.zeros((len(query.prompt), VIS_FEATURES))
    if query.reference is not None and not zero_summary:
        rows = sample_summary(query.reference, cfg.composition, VIS_FEATURES)
        slots = [i for i, t in enumerate(query.prompt) if t == vocab.VIS]
        for slot, row in zip(slots, rows):
            vis[slot] = row
    return vis


def rollout_text(model: UnifiedModel, query: Query, cfg: ScenarioConfig, seeds, zero_summary: bool = False):
    vis = _prompt_vis(query, cfg, zero_summary)
    segs = sample_tokens_batch(model.lm, [list(query.prompt)] * len(seeds), [stream(s, 0) for s in seeds], 2, cfg.temperature, vis_list=[vis] * len(seeds))
    out = []
    for seg in segs:
        correct = float(seg.tokens == [query.answer, vocab.EOS])
        out.append(CompositeTrajectory(query, [seg], RewardBreakdown({"correct": correct})))
    return out


def run_s1_s2(model, query: Query, cfg: ScenarioConfig = ScenarioConfig(), seed=0, zero_summary: bool = False):
    return rollout_text(model, query, cfg, [seed], zero_summary)[0]


# ---------------------------------------------------------------- text-to-point-set (S3)


def t2i_reward(sample, spec: PromptSpec, cfg: ScenarioConfig) -> RewardBreakdown:
    if cfg.compress_sign:
        return RewardBreakdown({"compress": compressibility_reward(sample, cfg.raster, cfg.compress_sign)})
    return RewardBreakdown({"compose": composition_reward(sample, spec, cfg.composition)})


def rollout_t2i(model: UnifiedModel, query: Query, cfg: ScenarioConfig, seeds):
    ctx = t2i_context(query.spec)
    segs = denoise_segments(model, [ctx] * len(seeds), [None] * len(seeds), None, cfg, [stream(s, 1) for s in seeds])
    out = []
    for seg in segs:
        x = seg.final
        info = {"compressed_size": compressed_size(render_raster(x, cfg.raster))}
        out.append(CompositeTrajectory(query, [seg], t2i_reward(x, query.spec, cfg), info=info))
    return out


def run_s3_t2i(model, query: Query, cfg: ScenarioConfig = ScenarioConfig(), seed=0):
    return rollout_t2i(model, query, cfg, [seed])[0]


# ---------------------------------------------------------------- reasoning then generation (S5)


def rollout_cot(model: UnifiedModel, query: Query, cfg: ScenarioConfig, seeds):
    """Think, then write an expanded prompt, then generate from prompt + expansion.

    The thoughts stay in the LM's scratchpad; the generator context is
    ``[BOS, prompt, expansion, GEN]``, so an empty reasoning gives exactly
    the S3 context and seed streams.
    """
    prompt = [vocab.BOS, *query.spec.tokens(), vocab.THINK]
    think = sample_tokens_batch(
        model.lm, [prompt] * len(seeds), [stream(s, 0) for s in seeds], cfg.max_reason_len, cfg.temperature,
        allowed=THINK_VOCAB, stop=(vocab.END_THINK,),
    )
    # a truncated think segment is closed by force; the closing token is not an action
    heads = [t.seq + ([vocab.END_THINK] if t.truncated or cfg.max_reason_len == 0 else []) for t in think]
    expand = sample_tokens_batch(
        model.lm, heads, [stream(s, 5) for s in seeds], cfg.max_expand_len, cfg.temperature,
        allowed=EXPAND_VOCAB, stop=(vocab.GEN,),
    )
    contexts = [[vocab.BOS, *query.spec.tokens(), *reasoning_content(e.tokens), vocab.GEN] for e in expand]
    segs = denoise_segments(model, contexts, [None] * len(seeds), None, cfg, [stream(s, 1) for s in seeds])
    out = []
    for t, e, seg in zip(think, expand, segs):
        info = {
            "reasoning_length": len(reasoning_content(t.tokens)) + len(reasoning_content(e.tokens)),
            "expansion": reasoning_content(e.tokens),
            "truncated": t.truncated or e.truncated,
        }
        out.append(CompositeTrajectory(query, [t, e, seg], t2i_reward(seg.final, query.spec, cfg), info=info))
    return out


def reasoning_content(tokens) -> list[int]:
    return [t for t in tokens if t not in (vocab.END_THINK, vocab.GEN)]


def run_s5_cot(model, query: Query, cfg: ScenarioConfig = ScenarioConfig(), seed=0):
    return rollout_cot(model, query, cfg, [seed])[0]


# ---------------------------------------------------------------- cycle edit (S4)


def edit_context(instr: EditInstruction, sample, cfg: ScenarioConfig):
    tokens = [vocab.BOS, *instr.tokens()]
    return with_summary(tokens, np.zeros((len(tokens), VIS_FEATURES)), sample, cfg)


def edit_breakdown(x_ref, x_edit, x_cycle, instr: EditInstruction, weights=(1.0, 1.0, 0.5)) -> RewardBreakdown:
    return total_edit_reward(edit_reward(x_ref, x_edit, instr), cycle_reward(x_ref, x_cycle), quality_reward(x_edit), weights)


def rollout_edit(model: UnifiedModel, query: Query, cfg: ScenarioConfig, seeds, guidance=None):
    instr, ref = query.instruction, np.asarray(query.reference)
    inv = instr.inverse()
    G = len(seeds)
    fwd_tok, fwd_vis = edit_context(instr, ref, cfg)
    fwd_ref = [noised_reference(ref, stream(s, 2), cfg.ref_keep) for s in seeds]
    fwd = denoise_segments(model, [fwd_tok] * G, [fwd_vis] * G, fwd_ref, cfg, [stream(s, 1) for s in seeds], guidance)
    rev_ctx = [edit_context(inv, seg.final, cfg) for seg in fwd]
    rev_ref = [noised_reference(seg.final, stream(s, 3), cfg.ref_keep) for seg, s in zip(fwd, seeds)]
    rev = denoise_segments(model, [c[0] for c in rev_ctx], [c[1] for c in rev_ctx], rev_ref, cfg, [stream(s, 4) for s in seeds], guidance)
    return [
        CompositeTrajectory(query, [a, b], edit_breakdown(ref, a.final, b.final, instr, cfg.edit_weights))
        for a, b in zip(fwd, rev)
    ]


def run_s4_cycle_edit(model, query: Query, cfg: ScenarioConfig = ScenarioConfig(), seed=0, guidance=None):
    return rollout_edit(model, query, cfg, [seed], guidance)[0]


def edit_query(rng: np.random.Generator, cfg: ScenarioConfig = ScenarioConfig(), instr: EditInstruction | None = None) -> Query:
    spec = random_prompt(rng)
    ref = target_sample(spec, rng, cfg.num_points)
    instr = instr or EDIT_CATALOG[int(rng.integers(len(EDIT_CATALOG)))]
    return Query(ScenarioKind.S4_EDIT, tuple(instr.tokens()), reference=ref, instruction=instr)


# ---------------------------------------------------------------- reflection (S6)


class Termination(str, Enum):
    JUDGED_CORRECT = "judged-correct"
    MAX_ITERATIONS = "max-iterations"
    REWARD_THRESHOLD = "reward-threshold"


@dataclass
class ReflectionState:
    iteration: int = 0
    sample: np.ndarray | None = None
    verdict: bool | None = None
    cause: Termination | None = None
    history: list = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.cause is not None

    def record_sample(self, sample, max_iters: int):
        if self.terminal:
            raise RuntimeError("reflection already terminated")
        if self.iteration >= max_iters:
            raise RuntimeError("generation budget exhausted")
        self.iteration += 1
        self.sample = sample

    def finish(self, cause: Termination):
        if self.terminal:
            raise RuntimeError("reflection already terminated")
        self.cause = cause


def rollout_reflect(model: UnifiedModel, query: Query, cfg: ScenarioConfig, seeds, max_iters=None, greedy_judge: bool = False):
    """Generate, judge, and (on "No") reflect and regenerate, batched over the group."""
    max_iters = cfg.max_iters if max_iters is None else max_iters
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    spec, G = query.spec, len(seeds)
    trajs = [CompositeTrajectory(query, info={"generations": 0}) for _ in seeds]
    states = [ReflectionState() for _ in seeds]
    seqs = [[vocab.BOS, *spec.tokens()] for _ in seeds]
    vis = [np.zeros((len(s), VIS_FEATURES)) for s in seqs]
    verdicts = [[] for _ in seeds]

    def generate(idx, k):
        if k == 0 and query.initial is not None:
            init = np.asarray(query.initial, dtype=np.float64)
            if init.ndim == 3 and len(init) != G:
                raise ValueError(f"{len(init)} initial samples for a group of {G}")
            samples = [init[i] if init.ndim == 3 else init for i in idx]
        else:
            ctx = [seqs[i] + [vocab.GEN] for i in idx]
            cvis = [np.vstack([vis[i], np.zeros((1, VIS_FEATURES))]) for i in idx]
            sub = 1 if k == 0 else 11 + 2 * (k - 1)
            segs = denoise_segments(model, ctx, cvis, None, cfg, [stream(seeds[i], sub) for i in idx])
            for i, seg in zip(idx, segs):
                trajs[i].segments.append(seg)
            samples = [seg.final for seg in segs]
        for i, x in zip(idx, samples):
            states[i].record_sample(x, max_iters)
            seqs[i], vis[i] = with_summary(seqs[i] + [vocab.GEN], np.vstack([vis[i], np.zeros((1, VIS_FEATURES))]), x, cfg)

    live = list(range(G))
    generate(live, 0)
    k = 0
    while live:
        judged = sample_tokens_batch(
            model.lm, [seqs[i] for i in live], [stream(seeds[i], 20 + k) for i in live], 3, cfg.temperature,
            allowed=JUDGE_VOCAB, stop=(vocab.END_ANSWER, vocab.EOS), vis_list=[vis[i] for i in live], greedy=greedy_judge,
        )
        nxt = []
        for i, seg in zip(live, judged):
            trajs[i].segments.append(seg)
            seqs[i], vis[i] = seg.seq, seg.vis
            st = states[i]
            truth = satisfies(st.sample, spec, cfg.composition)
            verdict = parse_verdict(seg.tokens)
            st.verdict = bool(verdict)
            verdicts[i].append((judge_reward(seg.tokens, truth), truth))
            st.history.append({"truth": truth, "verdict": verdict})
            if verdict:
                st.finish(Termination.JUDGED_CORRECT)
            elif st.iteration >= max_iters:
                st.finish(Termination.MAX_ITERATIONS)
            elif composition_reward(st.sample, spec, cfg.composition) >= cfg.reward_threshold:
                st.finish(Termination.REWARD_THRESHOLD)
            else:
                nxt.append(i)
        if not nxt:
            break
        refl = sample_tokens_batch(
            model.lm, [seqs[i] + [vocab.REFLECT] for i in nxt], [stream(seeds[i], 10 + 2 * k) for i in nxt],
            cfg.max_reflect_len, cfg.temperature, allowed=REFLECT_VOCAB, stop=(vocab.END_THINK,),
            vis_list=[np.vstack([vis[i], np.zeros((1, VIS_FEATURES))]) for i in nxt],
        )
        for i, seg in zip(nxt, refl):
            trajs[i].segments.append(seg)
            seqs[i], vis[i] = seg.seq, seg.vis
        k += 1
        generate(nxt, k)
        live = nxt

    for t, st, v in zip(trajs, states, verdicts):
        correct = float(np.mean([c for (c, _), _ in v]))
        fmt = float(np.mean([f for (_, f), _ in v]))
        compose = composition_reward(st.sample, spec, cfg.composition)
        t.rewards = RewardBreakdown({"correct": correct, "format": fmt, "compose": compose})
        t.info = {
            "generations": st.iteration,
            "cause": st.cause.value,
            "first_truth": v[0][1],
            "final_truth": satisfies(st.sample, spec, cfg.composition),
            "judge_correct": [c for (c, _), _ in v],
            "state": st,
        }
    return trajs


def run_s6_reflect(model, query: Query, cfg: ScenarioConfig = ScenarioConfig(), seed=0, max_iters=None, greedy_judge=False):
    return rollout_reflect(model, query, cfg, [seed], max_iters, greedy_judge)[0]


# ---------------------------------------------------------------- dispatch


def rollout_group(model, query: Query, cfg: ScenarioConfig, seeds, guidance=None):
    """Dispatch on the query's scenario; ``guidance`` only affects the edit protocol."""
    kind = query.kind
    if kind in (ScenarioKind.S1_TEXT, ScenarioKind.S2_MULTIMODAL):
        return rollout_text(model, query, cfg, seeds)
    if kind == ScenarioKind.S3_T2I:
        return rollout_t2i(model, query, cfg, seeds)
    if kind == ScenarioKind.S4_EDIT:
        return rollout_edit(model, query, cfg, seeds, guidance)
    if kind == ScenarioKind.S5_COT:
        return rollout_cot(model, query, cfg, seeds)
    return rollout_reflect(model, query, cfg, seeds)


# ---------------------------------------------------------------- synthetic data


REGION_CENTRES = {
    "anywhere": (0.0, 0.0),
    "left": (-0.5, 0.0),
    "right": (0.5, 0.0),
    "top": (0.0, 0.5),
    "bottom": (0.0, -0.5),
}
RELATION_CENTRES = {"left-of": ((-0.4, 0.0), (0.4, 0.0)), "above": ((0.0, 0.4), (0.0, -0.4))}


def mode_centres(spec: PromptSpec) -> np.ndarray:
    """Canonical blob centres for a prompt.

    The generator draws points independently given the condition, so each
    prompt maps to fixed centres and only the per-point scatter is random.
    """
    if spec.relation is not None:
        return np.array(RELATION_CENTRES[spec.relation])
    return np.array([REGION_CENTRES[r] for r in spec.regions])


def target_sample(spec: PromptSpec, rng: np.random.Generator, num_points: int = 32, scatter: float = 0.06) -> np.ndarray:
    """A (P, 3) point set that satisfies ``spec``: one tight blob per mode."""
    centres = mode_centres(spec)
    sizes = [num_points // spec.n_modes + (1 if i < num_points % spec.n_modes else 0) for i in range(spec.n_modes)]
    parts = []
    for c, attr, n in zip(centres, spec.attributes, sizes):
        xy = c + scatter * rng.standard_normal((n, 2))
        a = ATTRIBUTE_TARGET.get(attr, 0.0) + 0.1 * rng.standard_normal((n, 1))
        parts.append(np.hstack([xy, a]))
    return np.vstack(parts)


@dataclass
class ConditionalData:
    """Supervised (context, optional reference condition, target sample set) triples."""

    contexts: list[list[int]]
    vis: list[np.ndarray]
    references: list[np.ndarray | None]
    targets: np.ndarray  # (M, P, C)

    def __len__(self) -> int:
        return len(self.contexts)


def t2i_dataset(rng, size: int, cfg: ScenarioConfig = ScenarioConfig(), scatter: float = 0.06, spec_fn=random_prompt) -> ConditionalData:
    specs = [spec_fn(rng) for _ in range(size)]
    ctx = [t2i_context(s) for s in specs]
    return ConditionalData(ctx, [np.zeros((len(c), VIS_FEATURES)) for c in ctx], [None] * size,
                           np.stack([target_sample(s, rng, cfg.num_points, scatter) for s in specs]))


def cot_dataset(rng, size: int, cfg: ScenarioConfig = ScenarioConfig(), prompt_dropout: float = 0.5) -> ConditionalData:
    """Contexts carry an expansion that restates the prompt; the prompt itself is sometimes dropped.

    Dropping the prompt teaches the generator to read the expansion, which is
    what gives the reasoning policy something to improve.
    """
    specs = [random_prompt(rng) for _ in range(size)]
    keep = rng.random(size) >= prompt_dropout
    ctx = [[vocab.BOS, *(s.tokens() if k else []), *s.tokens(), vocab.GEN] for s, k in zip(specs, keep)]
    return ConditionalData(ctx, [np.zeros((len(c), VIS_FEATURES)) for c in ctx], [None] * size,
                           np.stack([target_sample(s, rng, cfg.num_points) for s in specs]))


def edit_dataset(rng, size: int, cfg: ScenarioConfig = ScenarioConfig()) -> ConditionalData:
    ctx, vis, refs, targets = [], [], [], []
    for _ in range(size):
        q = edit_query(rng, cfg)
        tok, v = edit_context(q.instruction, q.reference, cfg)
        ctx.append(tok)
        vis.append(v)
        refs.append(noised_reference(q.reference, (int(rng.integers(2**31)),), cfg.ref_keep))
        targets.append(q.instruction.apply(q.reference))
    return ConditionalData(ctx, vis, refs, np.stack(targets))


def wrong_sample(spec: PromptSpec, rng, cfg: ScenarioConfig = ScenarioConfig()) -> np.ndarray:
    """A target sample of some other prompt that fails ``spec``."""
    for _ in range(200):
        x = target_sample(random_prompt(rng), rng, cfg.num_points)
        if not satisfies(x, spec, cfg.composition):
            return x
    raise RuntimeError("could not draw a failing sample")


def reflection_context(spec: PromptSpec, first, thoughts, cfg: ScenarioConfig = ScenarioConfig()):
    """LM context after one rejected generation and a reflection segment, ending at ``<gen>``."""
    base = [vocab.BOS, *spec.tokens(), vocab.GEN]
    tok, v = with_summary(base, np.zeros((len(base), VIS_FEATURES)), first, cfg)
    tail = [vocab.ANSWER, vocab.NO, vocab.END_ANSWER, vocab.REFLECT, *thoughts, vocab.END_THINK, vocab.GEN]
    return tok + tail, np.vstack([v, np.zeros((len(tail), VIS_FEATURES))])


def reflect_dataset(rng, size: int, cfg: ScenarioConfig = ScenarioConfig()) -> ConditionalData:
    ctx, vis, targets = [], [], []
    for _ in range(size):
        spec = random_prompt(rng)
        thoughts = list(rng.choice(vocab.THOUGHT_WORDS, size=int(rng.integers(0, cfg.max_reflect_len))))
        tok, v = reflection_context(spec, wrong_sample(spec, rng, cfg), [int(t) for t in thoughts], cfg)
        ctx.append(tok)
        vis.append(v)
        targets.append(target_sample(spec, rng, cfg.num_points))
    return ConditionalData(ctx, vis, [None] * size, np.stack(targets))


def concat_data(*parts: ConditionalData) -> ConditionalData:
    return ConditionalData(
        [c for p in parts for c in p.contexts],
        [v for p in parts for v in p.vis],
        [r for p in parts for r in p.references],
        np.concatenate([p.targets for p in parts]),
    )


@dataclass
class JudgePairs:
    specs: list[PromptSpec]
    samples: np.ndarray
    labels: np.ndarray  # bool


def judge_pairs(rng, size: int, cfg: ScenarioConfig = ScenarioConfig()) -> JudgePairs:
    """Balanced (prompt, sample) pairs labelled by the composition oracle."""
    specs, samples, labels = [], [], []
    for i in range(size):
        spec = random_prompt(rng)
        want = i % 2 == 0
        x = target_sample(spec, rng, cfg.num_points) if want else wrong_sample(spec, rng, cfg)
        specs.append(spec)
        samples.append(x)
        labels.append(satisfies(x, spec, cfg.composition))
    return JudgePairs(specs, np.stack(samples), np.array(labels))


def reflect_group_samples(spec: PromptSpec, rng, size: int, cfg: ScenarioConfig = ScenarioConfig()) -> np.ndarray:
    """(size, P, 3) first samples for one prompt, alternating satisfying and failing ones.

    A group that judges a single shared sample gets one bit of label signal;
    mixing both outcomes under one prompt lets the group advantage tell a
    right verdict from a wrong one.
    """
    return np.stack([target_sample(spec, rng, cfg.num_points) if i % 2 == 0 else wrong_sample(spec, rng, cfg) for i in range(size)])


def judge_context(spec: PromptSpec, sample, cfg: ScenarioConfig = ScenarioConfig()):
    base = [vocab.BOS, *spec.tokens(), vocab.GEN]
    return with_summary(base, np.zeros((len(base), VIS_FEATURES)), sample, cfg)


# ---------------------------------------------------------------- supervised stages


class _ContextCache:
    """LM hidden states are fixed while the LM is frozen, so compute them once."""

    def __init__(self, model: UnifiedModel, data: ConditionalData, chunk: int = 256):
        self.states, self.masks = [], []
        with torch.no_grad():
            for lo in range(0, len(data), chunk):
                tok, vt, m = pad_batch(data.contexts[lo : lo + chunk], data.vis[lo : lo + chunk])
                h = model.lm.hidden(tok, vt, m)
                L = model.config.context_length
                pad = L - h.shape[1]
                self.states.append(torch.nn.functional.pad(h, (0, 0, 0, pad)))
                self.masks.append(torch.nn.functional.pad(m, (0, pad)))
        self.states = torch.cat(self.states)
        self.masks = torch.cat(self.masks)
        width = max(len(c) for c in data.contexts)
        self.states, self.masks = self.states[:, :width], self.masks[:, :width]


@dataclass(frozen=True)
class ColdStartConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    text_dropout: float = 0.1
    reference_dropout: float = 0.0
    both_dropout: float = 0.0
    seed: int = 0


def _fm_batch_loss(model, cache, data, idx, t, noise, drop_text=None, drop_ref=None):
    ctx = model.connector(cache.states[idx], cache.masks[idx])
    P = data.targets.shape[1]
    refs = [data.references[i] for i in idx]
    ref = None
    if any(r is not None for r in refs):
        ref = torch.stack([torch.zeros(P, CHANNELS, dtype=DTYPE) if r is None else r for r in refs])
        if drop_ref is not None:
            ref = ref * (~drop_ref).to(DTYPE)[:, None, None]
    if drop_text is not None:
        ctx = ctx * (~drop_text).to(DTYPE)[:, None]
    cond = model.dm_condition(ctx, ref, P)
    x0 = torch.from_numpy(data.targets[idx])
    return flow_matching_loss(model.velocity, x0, noise, t, cond)


def dataset_loss(model: UnifiedModel, data: ConditionalData, seed=0, chunk: int = 256) -> float:
    """Flow-matching loss over the whole set with fixed times and noise."""
    rng = seeded_rng(stream(seed, 99))
    t = torch.from_numpy(1.0 / (1.0 + np.exp(-rng.standard_normal(len(data)))))
    noise = torch.from_numpy(rng.standard_normal(data.targets.shape))
    cache = _ContextCache(model, data)
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(data), chunk):
            idx = np.arange(lo, min(lo + chunk, len(data)))
            total += float(_fm_batch_loss(model, cache, data, idx, t[idx], noise[idx])) * len(idx)
    return total / len(data)


def cold_start_finetune(model: UnifiedModel, data: ConditionalData, cfg: ColdStartConfig = ColdStartConfig(), groups=("connector", "dm")):
    """Flow-matching fine-tuning of connector + generator with the LM frozen.

    Returns the per-step minibatch loss curve. Condition dropout zeroes the
    text context, the reference slot, or both, for classifier-free guidance.
    """
    if "lm" not in model.frozen:
        raise FrozenParameterError("cold start requires a frozen LM")
    if cfg.steps == 0:
        return []
    opt = make_optimizer(model, groups, "adam", cfg.lr)
    cache = _ContextCache(model, data)
    losses = []
    for step in range(cfg.steps):
        rng = seeded_rng(stream(cfg.seed, step))
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        t = torch.from_numpy(1.0 / (1.0 + np.exp(-rng.standard_normal(len(idx)))))
        noise = torch.from_numpy(rng.standard_normal((len(idx), *data.targets.shape[1:])))
        u = rng.random(len(idx))
        p_text, p_ref, p_both = cfg.text_dropout, cfg.reference_dropout, cfg.both_dropout
        drop_text = torch.from_numpy((u < p_text) | ((u >= p_text + p_ref) & (u < p_text + p_ref + p_both)))
        drop_ref = torch.from_numpy((u >= p_text) & (u < p_text + p_ref + p_both))
        opt.zero_grad(set_to_none=True)
        loss = _fm_batch_loss(model, cache, data, idx, t, noise, drop_text, drop_ref)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def pretrain_judge_format(model: UnifiedModel, pairs: JudgePairs, steps: int = 200, lr: float = 3e-3, seed: int = 0, batch_size: int = 32):
    """Teach the answer protocol with coin-flip Yes/No labels (format only, no judgement)."""
    if "lm" in model.frozen:
        raise FrozenParameterError("protocol pretraining updates the LM")
    opt = make_optimizer(model, ("lm",), "adam", lr)
    mask = torch.zeros(vocab.VOCAB_SIZE, dtype=torch.bool)
    mask[list(JUDGE_VOCAB)] = True
    cfg = ScenarioConfig()
    ctxs = [judge_context(s, x, cfg) for s, x in zip(pairs.specs, pairs.samples)]
    losses = []
    for step in range(steps):
        rng = seeded_rng(stream(seed, step))
        idx = rng.integers(0, len(ctxs), size=batch_size)
        seqs, vis, targets = [], [], []
        for i in idx:
            tok, v = ctxs[i]
            ans = [vocab.ANSWER, vocab.YES if rng.random() < 0.5 else vocab.NO, vocab.END_ANSWER]
            seqs.append(tok + ans)
            vis.append(np.vstack([v, np.zeros((3, VIS_FEATURES))]))
            targets.append((len(tok), ans))
        tok, vt, m = pad_batch(seqs, vis)
        logits = model.lm(tok, vt, m).masked_fill(~mask, float("-inf"))
        logp = torch.log_softmax(logits, dim=-1)
        terms = [logp[b, start - 1 + j, a] for b, (start, ans) in enumerate(targets) for j, a in enumerate(ans)]
        loss = -torch.stack(terms).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def judge_accuracy(model: UnifiedModel, pairs: JudgePairs, cfg: ScenarioConfig = ScenarioConfig(), chunk: int = 250) -> float:
    """Greedy verdict accuracy; malformed answers count as wrong."""
    hits = 0
    for lo in range(0, len(pairs.labels), chunk):
        ctxs = [judge_context(s, x, cfg) for s, x in zip(pairs.specs[lo : lo + chunk], pairs.samples[lo : lo + chunk])]
        outs = sample_tokens_batch(
            model.lm, [c[0] for c in ctxs], [0] * len(ctxs), 3, 1.0, allowed=JUDGE_VOCAB,
            stop=(vocab.END_ANSWER, vocab.EOS), vis_list=[c[1] for c in ctxs], greedy=True,
        )
        hits += sum(judge_reward(o.tokens, bool(y))[0] for o, y in zip(outs, pairs.labels[lo : lo + chunk]))
    return hits / len(pairs.labels)


def correction_rate(model: UnifiedModel, queries, cfg: ScenarioConfig, seeds) -> float:
    """Among initially wrong samples, the fraction right after one reflection cycle."""
    wrong = fixed = 0
    for q, s in zip(queries, seeds):
        t = run_s6_reflect(model, q, cfg, s, max_iters=2, greedy_judge=True)
        if not t.info["first_truth"]:
            wrong += 1
            fixed += int(t.info["final_truth"])
    return fixed / wrong if wrong else float("nan")


def queries_for(kind: ScenarioKind, rng, n: int, cfg: ScenarioConfig = ScenarioConfig(), spec_fn=random_prompt):
    kind = ScenarioKind(kind)
    out = []
    for _ in range(n):
        if kind == ScenarioKind.S1_TEXT:
            out.append(text_task_query(rng))
        elif kind == ScenarioKind.S2_MULTIMODAL:
            out.append(multimodal_query(rng, cfg))
        elif kind == ScenarioKind.S4_EDIT:
            out.append(edit_query(rng, cfg))
        else:
            spec = spec_fn(rng)
            out.append(Query(kind, tuple(spec.tokens()), spec=spec))
    return out
