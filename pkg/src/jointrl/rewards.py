"""Reward functions over generated sample sets.

A generated "image" is a set of points with channels ``(x, y, attribute)``.
Rewards here are pure functions of their inputs plus fixed configuration.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import vocab

REGIONS = ("anywhere", "left", "right", "top", "bottom")
ATTRIBUTES = (None, "red", "blue")
RELATIONS = (None, "left-of", "above")
ATTRIBUTE_TARGET = {"red": 1.0, "blue": -1.0}


def _points(samples) -> np.ndarray:
    pts = np.asarray(samples, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None]
    if pts.shape[0] == 0:
        raise ValueError("empty sample set")
    return pts


# ---------------------------------------------------------------- raster + compression


@dataclass(frozen=True)
class RasterSpec:
    height: int = 32
    width: int = 32
    low: tuple[float, float] = (-1.0, -1.0)
    high: tuple[float, float] = (1.0, 1.0)


def render_raster(samples, spec: RasterSpec = RasterSpec()) -> np.ndarray:
    """8-bit histogram of the first two channels; out-of-range points land on the border.

    Non-finite points are not drawn.
    """
    pts = _points(samples)
    pts = pts[np.isfinite(pts[:, :2]).all(axis=1)]
    lo, hi = np.asarray(spec.low), np.asarray(spec.high)
    frac = (pts[:, :2] - lo) / (hi - lo)
    cols = np.clip(np.floor(frac[:, 0] * spec.width), 0, spec.width - 1).astype(int)
    rows = np.clip(np.floor(frac[:, 1] * spec.height), 0, spec.height - 1).astype(int)
    counts = np.zeros((spec.height, spec.width), dtype=np.int64)
    np.add.at(counts, (spec.height - 1 - rows, cols), 1)
    return np.minimum(counts, 255).astype(np.uint8)


@dataclass(frozen=True)
class CompressionConfig:
    codec: str = "zlib"
    level: int = 9


def compressed_size(raster: np.ndarray, cfg: CompressionConfig = CompressionConfig()) -> int:
    if cfg.codec != "zlib":
        raise ValueError(f"unsupported codec {cfg.codec!r}")
    return len(zlib.compress(np.ascontiguousarray(raster, dtype=np.uint8).tobytes(), cfg.level))


def compression_ratio(samples, spec: RasterSpec = RasterSpec(), cfg: CompressionConfig = CompressionConfig()):
    raster = render_raster(samples, spec)
    return compressed_size(raster, cfg) / raster.size


def compressibility_reward(samples, spec: RasterSpec = RasterSpec(), sign: int = 1, cfg=CompressionConfig()) -> float:
    """``sign=+1`` rewards small compressed size (``-ratio``); ``sign=-1`` rewards large (``+ratio``)."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return -sign * compression_ratio(samples, spec, cfg)


# ---------------------------------------------------------------- prompt specs


@dataclass(frozen=True)
class PromptSpec:
    """Checkable toy prompt: how many modes, where, what attribute, how related."""

    n_modes: int
    regions: tuple[str, ...]
    attributes: tuple[str | None, ...]
    relation: str | None = None

    def __post_init__(self):
        if self.n_modes not in (1, 2):
            raise ValueError("n_modes must be 1 or 2")
        if len(self.regions) != self.n_modes or len(self.attributes) != self.n_modes:
            raise ValueError("one region and one attribute per mode")
        if any(r not in REGIONS for r in self.regions) or any(a not in ATTRIBUTES for a in self.attributes):
            raise ValueError("unknown region or attribute")
        if self.relation not in RELATIONS or (self.relation and self.n_modes != 2):
            raise ValueError("relations need exactly two modes")

    def tokens(self) -> list[int]:
        out = [vocab.COUNT_WORDS[self.n_modes]]
        for r, a in zip(self.regions, self.attributes):
            out += [vocab.REGION_WORDS[r], vocab.ATTR_WORDS[a]]
        return out + [vocab.RELATION_WORDS[self.relation]]

    @classmethod
    def from_tokens(cls, ids) -> "PromptSpec":
        words = vocab.decode(ids)
        n = {"one": 1, "two": 2}[words[0]]
        regions = tuple(words[1 + 2 * i] for i in range(n))
        attrs = tuple(None if w == "plain" else w for w in (words[2 + 2 * i] for i in range(n)))
        rel = words[1 + 2 * n]
        return cls(n, regions, attrs, None if rel == "norel" else rel)

    @property
    def constraints(self) -> tuple[str, ...]:
        out = ["count"]
        if any(r != "anywhere" for r in self.regions):
            out.append("region")
        if any(a is not None for a in self.attributes):
            out.append("attribute")
        if self.relation is not None:
            out.append("relation")
        return tuple(out)


def _region_box_ok(region: str, xy: np.ndarray) -> bool:
    if region == "anywhere":
        return True
    x, y = xy[:, 0], xy[:, 1]
    inside = {"left": x < 0, "right": x > 0, "top": y > 0, "bottom": y < 0}[region]
    return bool(inside.sum() * 2 > len(xy))


def random_prompt(rng: np.random.Generator, relation_rate: float = 0.3) -> PromptSpec:
    """Random satisfiable spec; the two modes of a pair always sit in distinct places."""
    n = int(rng.integers(1, 3))
    if n == 1:
        return PromptSpec(1, (REGIONS[rng.integers(5)],), (ATTRIBUTES[rng.integers(3)],))
    attrs = (ATTRIBUTES[rng.integers(3)], ATTRIBUTES[rng.integers(3)])
    if rng.random() < relation_rate:
        return PromptSpec(2, ("anywhere", "anywhere"), attrs, ("left-of", "above")[rng.integers(2)])
    pair = [("left", "right"), ("right", "left"), ("top", "bottom"), ("bottom", "top")][rng.integers(4)]
    return PromptSpec(2, pair, attrs)


# ---------------------------------------------------------------- clustering + composition


@dataclass(frozen=True)
class CompositionConfig:
    radius: float = 0.25
    min_cluster_size: int = 2
    attribute_tolerance: float = 0.5
    relation_margin: float = 0.1
    max_clusters_matched: int = 6


def cluster_points(xy, radius: float, min_size: int = 1) -> list[np.ndarray]:
    """Connected components of the ``dist <= radius`` graph.

    Components are listed by their lowest member index; those smaller than
    ``min_size`` are dropped.
    """
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    adj = np.linalg.norm(xy[:, None] - xy[None], axis=-1) <= radius
    label = -np.ones(n, dtype=int)
    comps = []
    for seed in range(n):
        if label[seed] >= 0:
            continue
        label[seed] = len(comps)
        stack, members = [seed], [seed]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i] & (label < 0)):
                label[j] = label[seed]
                stack.append(j)
                members.append(j)
        comps.append(np.sort(np.asarray(members)))
    return [c for c in comps if len(c) >= min_size]


@dataclass
class ClusterStats:
    members: np.ndarray
    centroid: np.ndarray
    attribute: float


def _stats(pts: np.ndarray, clusters) -> list[ClusterStats]:
    out = []
    for c in clusters:
        attr = float(pts[c, 2].mean()) if pts.shape[1] > 2 else 0.0
        out.append(ClusterStats(c, pts[c, :2].mean(axis=0), attr))
    out.sort(key=lambda s: (-len(s.members), int(s.members[0])))
    return out


def _mode_checks(pts, st: ClusterStats, prompt: PromptSpec, mode: int, cfg: CompositionConfig):
    region_ok = _region_box_ok(prompt.regions[mode], pts[st.members, :2])
    target = prompt.attributes[mode]
    attr_ok = target is None or abs(st.attribute - ATTRIBUTE_TARGET[target]) <= cfg.attribute_tolerance
    return region_ok, attr_ok


def _relation_ok(a: ClusterStats, b: ClusterStats, relation: str, margin: float) -> bool:
    if relation == "left-of":
        return bool(a.centroid[0] + margin < b.centroid[0])
    return bool(a.centroid[1] > b.centroid[1] + margin)


def judge_clusters(pts: np.ndarray, stats: list[ClusterStats], prompt: PromptSpec, cfg: CompositionConfig) -> dict:
    """Verdicts given already-computed clusters; shared with the brute-force oracle."""
    K = prompt.n_modes
    verdict = {"count": len(stats) == K}
    stats = stats[: cfg.max_clusters_matched]
    m = min(len(stats), K)
    best, best_score = None, -1
    for modes in itertools.combinations(range(K), m):
        for clus in itertools.permutations(range(len(stats)), m):
            checks = {md: _mode_checks(pts, stats[c], prompt, md, cfg) for md, c in zip(modes, clus)}
            assign = dict(zip(modes, clus))
            rel = None
            if prompt.relation and 0 in assign and 1 in assign:
                rel = _relation_ok(stats[assign[0]], stats[assign[1]], prompt.relation, cfg.relation_margin)
            score = sum(r + a for r, a in checks.values()) + bool(rel)
            if score > best_score:
                best, best_score = (checks, rel), score
    checks, rel = best if best is not None else ({}, None)
    if "region" in prompt.constraints:
        verdict["region"] = bool(checks) and all(r for r, _ in checks.values())
    if "attribute" in prompt.constraints:
        verdict["attribute"] = bool(checks) and all(a for _, a in checks.values())
    if prompt.relation:
        verdict["relation"] = bool(rel)
    return verdict


def composition_check(samples, prompt: PromptSpec, cfg: CompositionConfig = CompositionConfig()) -> dict:
    pts = _points(samples)
    clusters = cluster_points(pts[:, :2], cfg.radius, cfg.min_cluster_size)
    return judge_clusters(pts, _stats(pts, clusters), prompt, cfg)


def composition_reward(samples, prompt: PromptSpec, cfg: CompositionConfig = CompositionConfig()) -> float:
    """Fraction of the prompt's constraints the sample set satisfies, in [0, 1]."""
    verdict = composition_check(samples, prompt, cfg)
    return sum(verdict.values()) / len(verdict)


def satisfies(samples, prompt: PromptSpec, cfg: CompositionConfig = CompositionConfig()) -> bool:
    return all(composition_check(samples, prompt, cfg).values())


def sample_summary(samples, cfg: CompositionConfig = CompositionConfig(), width: int = 8) -> np.ndarray:
    """Three pseudo-token feature rows describing a sample set (the LM's view of an image).

    Row 0: cluster-count one-hot (0, 1, 2, 3+), global mean of x, y, attribute,
    and the clustered fraction. Rows 1-2: the two largest clusters as
    (present, cx, cy, attribute mean, size fraction, spread).
    """
    pts = _points(samples)
    stats = _stats(pts, cluster_points(pts[:, :2], cfg.radius, cfg.min_cluster_size))
    out = np.zeros((3, width))
    out[0, min(len(stats), 3)] = 1.0
    out[0, 4:7] = pts[:, :3].mean(axis=0)
    out[0, 7] = sum(len(s.members) for s in stats) / len(pts)
    for row, st in enumerate(stats[:2], start=1):
        spread = float(np.linalg.norm(pts[st.members, :2] - st.centroid, axis=1).mean())
        out[row, :6] = [1.0, *st.centroid, st.attribute, len(st.members) / len(pts), spread]
    return out


# ---------------------------------------------------------------- edits


@dataclass(frozen=True)
class EditInstruction:
    kind: str  # translate | rotate | scale | identity
    param: str | None = None

    SHIFT = 0.4
    ANGLE = math.pi / 4
    FACTOR = 1.5

    def __post_init__(self):
        allowed = {
            "translate": ("+x", "-x", "+y", "-y"),
            "rotate": ("ccw", "cw"),
            "scale": ("grow", "shrink"),
            "identity": (None,),
        }
        if self.kind not in allowed or self.param not in allowed[self.kind]:
            raise ValueError(f"unregistered instruction {self.kind} {self.param}")

    def tokens(self) -> list[int]:
        out = [vocab.EDIT, vocab.ID[self.kind]]
        return out + ([vocab.ID[self.param]] if self.param else [])

    def inverse(self) -> "EditInstruction":
        flip = {"+x": "-x", "-x": "+x", "+y": "-y", "-y": "+y", "ccw": "cw", "cw": "ccw", "grow": "shrink", "shrink": "grow"}
        return EditInstruction(self.kind, flip.get(self.param))

    def apply(self, samples) -> np.ndarray:
        pts = np.array(samples, dtype=np.float64, copy=True)
        xy = pts[..., :2]
        if self.kind == "translate":
            axis = 0 if self.param[1] == "x" else 1
            xy[..., axis] += self.SHIFT if self.param[0] == "+" else -self.SHIFT
        elif self.kind == "rotate":
            a = self.ANGLE if self.param == "ccw" else -self.ANGLE
            c, s = math.cos(a), math.sin(a)
            pts[..., :2] = xy @ np.array([[c, s], [-s, c]])
        elif self.kind == "scale":
            pts[..., :2] = xy * (self.FACTOR if self.param == "grow" else 1.0 / self.FACTOR)
        return pts


EDIT_CATALOG = (
    EditInstruction("translate", "+x"),
    EditInstruction("translate", "-x"),
    EditInstruction("translate", "+y"),
    EditInstruction("translate", "-y"),
    EditInstruction("rotate", "ccw"),
    EditInstruction("rotate", "cw"),
    EditInstruction("scale", "grow"),
    EditInstruction("scale", "shrink"),
)


class FeatureMap:
    """Fixed seeded random projection of a flattened sample set to ``dim`` features."""

    CANONICAL_SEED = 20240601

    def __init__(self, dim: int = 64, seed: int = CANONICAL_SEED):
        self.dim, self.seed = dim, seed
        self._mats: dict[int, np.ndarray] = {}

    def __call__(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64).reshape(-1)
        R = self._mats.get(x.size)
        if R is None:
            R = np.random.default_rng([self.seed, x.size]).standard_normal((self.dim, x.size)) / math.sqrt(self.dim)
            self._mats[x.size] = R
        return R @ x


DEFAULT_FEATURES = FeatureMap()


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def edit_reward(x_ref, x_edit, instr: EditInstruction, phi: FeatureMap = DEFAULT_FEATURES, with_flag: bool = False):
    """Cosine between achieved and instructed feature displacement, in [-1, 1].

    A zero-norm displacement scores 0; ``with_flag`` also returns whether that happened.
    """
    x_ref, x_edit = np.asarray(x_ref, dtype=np.float64), np.asarray(x_edit, dtype=np.float64)
    if x_ref.shape != x_edit.shape:
        raise ValueError("reference and edit must have equal size")
    base = phi(x_ref)
    cos = _cosine(phi(x_edit) - base, phi(instr.apply(x_ref)) - base)
    value = 0.0 if cos is None else cos
    return (value, cos is None) if with_flag else value


def cycle_reward(x_ref, x_cycle, phi: FeatureMap = DEFAULT_FEATURES) -> float:
    x_ref, x_cycle = np.asarray(x_ref, dtype=np.float64), np.asarray(x_cycle, dtype=np.float64)
    if x_ref.shape != x_cycle.shape:
        raise ValueError("reference and cycle must have equal size")
    cos = _cosine(phi(x_ref), phi(x_cycle))
    return 0.0 if cos is None else cos


@dataclass(frozen=True)
class QualityConfig:
    low: float = -1.5
    high: float = 1.5


def quality_reward(x_edit, cfg: QualityConfig = QualityConfig()) -> float:
    """Minus the fraction of points with any channel outside the valid box."""
    pts = _points(x_edit)
    bad = ((pts < cfg.low) | (pts > cfg.high)).any(axis=-1)
    return -float(bad.mean())


@dataclass
class RewardBreakdown:
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.components.items()))

    def to_dict(self) -> dict:
        return {"components": dict(self.components), "weights": dict(self.weights), "total": self.total}


def total_edit_reward(r_edit: float, r_cycle: float, r_quality: float, weights=(1.0, 1.0, 0.5)) -> RewardBreakdown:
    if any(w < 0 for w in weights):
        raise ValueError("reward weights must be nonnegative")
    l1, l2, l3 = weights
    return RewardBreakdown(
        {"edit": float(r_edit), "cycle": float(r_cycle), "quality": float(r_quality)},
        {"edit": l1, "cycle": l2, "quality": l3},
    )


# ---------------------------------------------------------------- judge


def judge_reward(answer_tokens, ground_truth: bool) -> tuple[int, int]:
    """``(correct, format)``; format is exactly ``<answer> Yes|No </answer>`` (one trailing ``<eos>`` allowed)."""
    toks = [int(t) for t in answer_tokens]
    if toks and toks[-1] == vocab.EOS:
        toks = toks[:-1]
    well_formed = len(toks) == 3 and toks[0] == vocab.ANSWER and toks[2] == vocab.END_ANSWER and toks[1] in (vocab.YES, vocab.NO)
    if not well_formed:
        return 0, 0
    said_yes = toks[1] == vocab.YES
    return int(said_yes == bool(ground_truth)), 1


def parse_verdict(answer_tokens) -> bool | None:
    """True/False for a well-formed Yes/No answer, ``None`` when malformed."""
    _, fmt = judge_reward(answer_tokens, True)
    if not fmt:
        return None
    return int(answer_tokens[1]) == vocab.YES
