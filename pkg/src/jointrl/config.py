"""Run configuration: a TOML file with a few nested sections, strictly validated."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .scenarios import ScenarioKind

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _check(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


@dataclass
class ModelSection:
    lm_width: int = 64
    lm_depth: int = 2
    context_length: int = 64
    num_queries: int = 4
    connector_width: int = 32
    cond_dim: int = 16
    dm_width: int = 128
    dm_depth: int = 3

    def validate(self):
        for f in fields(self):
            _check(getattr(self, f.name) >= 1, f"model.{f.name}", "must be a positive integer")


@dataclass
class SamplerSection:
    num_steps: int = 10
    noise_scale: float = 0.7
    num_points: int = 32

    def validate(self):
        _check(self.num_steps >= 1, "sampler.num_steps", "must be >= 1")
        _check(self.noise_scale > 0, "sampler.noise_scale", "must be > 0 for RL (log-probs need noise)")
        _check(2 <= self.num_points <= 256, "sampler.num_points", "must lie in [2, 256]")


@dataclass
class GrpoSection:
    group_size: int = 8
    groups_per_step: int = 4
    clip_lm: float = 0.2
    clip_dm: float = 0.2
    kl_coeff: float = 0.0
    kl_lm: bool = True
    kl_dm: bool = True
    std_guard: float = 1e-8
    lr: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 1
    max_grad_norm: float = 0.0  # 0 disables clipping

    def validate(self):
        _check(self.group_size >= 2, "grpo.group_size", "must be >= 2")
        _check(self.groups_per_step >= 1, "grpo.groups_per_step", "must be >= 1")
        _check(0 < self.clip_lm < 1, "grpo.clip_lm", "must lie in (0, 1)")
        _check(0 < self.clip_dm < 1, "grpo.clip_dm", "must lie in (0, 1)")
        _check(self.kl_coeff >= 0, "grpo.kl_coeff", "must be >= 0")
        _check(self.std_guard >= 0, "grpo.std_guard", "must be >= 0")
        _check(self.lr > 0, "grpo.lr", "must be > 0")
        _check(self.optimizer in ("adam", "sgd"), "grpo.optimizer", "must be 'adam' or 'sgd'")
        _check(1 <= self.epochs <= 4, "grpo.epochs", "must lie in [1, 4]")
        _check(self.max_grad_norm >= 0, "grpo.max_grad_norm", "must be >= 0")


@dataclass
class RewardSection:
    edit_weights: list = field(default_factory=lambda: [1.0, 1.0, 0.5])
    compress_sign: int = 0
    reward_threshold: float = 1.0

    def validate(self):
        _check(len(self.edit_weights) == 3 and all(w >= 0 for w in self.edit_weights), "reward.edit_weights", "needs three nonnegative weights")
        _check(self.compress_sign in (-1, 0, 1), "reward.compress_sign", "must be -1, 0 or 1")
        _check(0 <= self.reward_threshold <= 1, "reward.reward_threshold", "must lie in [0, 1]")


@dataclass
class ScenarioSection:
    temperature: float = 1.0
    max_reason_len: int = 4
    max_expand_len: int = 8
    max_reflect_len: int = 4
    max_iters: int = 3
    guidance: float = 1.0
    train_guidance: list = field(default_factory=list)
    labelled_fraction: float = 0.5  # reflection groups judging labelled samples; the rest generate their own
    train_groups: list = field(default_factory=lambda: ["lm", "connector", "dm"])
    freeze: list = field(default_factory=list)

    def validate(self):
        _check(self.temperature > 0, "scenario_options.temperature", "must be > 0")
        _check(self.max_reason_len >= 0, "scenario_options.max_reason_len", "must be >= 0")
        _check(self.max_expand_len >= 0, "scenario_options.max_expand_len", "must be >= 0")
        _check(self.max_reflect_len >= 0, "scenario_options.max_reflect_len", "must be >= 0")
        _check(self.max_iters >= 1, "scenario_options.max_iters", "must be >= 1")
        _check(self.guidance > 0, "scenario_options.guidance", "must be > 0")
        _check(0.0 <= self.labelled_fraction <= 1.0, "scenario_options.labelled_fraction", "must lie in [0, 1]")
        _check(all(isinstance(w, (int, float)) and w > 0 for w in self.train_guidance), "scenario_options.train_guidance", "strengths must be > 0")
        groups = ("lm", "connector", "dm")
        _check(all(g in groups for g in self.freeze), "scenario_options.freeze", "groups are lm, connector, dm")
        _check(
            all(isinstance(g, str) and g.split(".", 1)[0] in groups for g in self.train_groups),
            "scenario_options.train_groups",
            "entries are lm, connector, dm or a submodule such as lm.head",
        )


@dataclass
class DataSection:
    seed: int = 1
    pretrain_size: int = 1000
    pretrain_steps: int = 3000
    pretrain_batch: int = 32
    pretrain_scatter: float = 0.04
    lm_pretrain_steps: int = 200
    eval_size: int = 16

    def validate(self):
        _check(self.pretrain_size >= 1, "data.pretrain_size", "must be >= 1")
        _check(self.pretrain_steps >= 0, "data.pretrain_steps", "must be >= 0")
        _check(self.pretrain_batch >= 1, "data.pretrain_batch", "must be >= 1")
        _check(self.pretrain_scatter > 0, "data.pretrain_scatter", "must be > 0")
        _check(self.lm_pretrain_steps >= 0, "data.lm_pretrain_steps", "must be >= 0")
        _check(self.eval_size >= 0, "data.eval_size", "must be >= 0")


SECTIONS = {
    "model": ModelSection,
    "sampler": SamplerSection,
    "grpo": GrpoSection,
    "reward": RewardSection,
    "scenario_options": ScenarioSection,
    "data": DataSection,
}
FIELD_OF = {"scenario_options": "scenario_opts"}


@dataclass
class RunConfig:
    scenario: str
    seed: int = 0
    budget: int = 200
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    eval_every: int = 0
    version: int = SCHEMA_VERSION
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    reward: RewardSection = field(default_factory=RewardSection)
    scenario_opts: ScenarioSection = field(default_factory=ScenarioSection)
    data: DataSection = field(default_factory=DataSection)

    @property
    def kind(self) -> ScenarioKind:
        return ScenarioKind(self.scenario)

    def validate(self) -> "RunConfig":
        _check(self.version == SCHEMA_VERSION, "version", f"unsupported schema version {self.version}")
        try:
            ScenarioKind(self.scenario)
        except ValueError:
            raise ConfigError(f"scenario: unknown kind {self.scenario!r}; choose from {[k.value for k in ScenarioKind]}") from None
        _check(self.budget >= 0, "budget", "must be >= 0")
        _check(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        _check(self.eval_every >= 0, "eval_every", "must be >= 0")
        for sec in (self.model, self.sampler, self.grpo, self.reward, self.scenario_opts, self.data):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            name = "scenario_options" if f.name == "scenario_opts" else f.name
            out[name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level fields or ``section__field`` keys changed."""
        data = self.to_dict()
        for key, value in changes.items():
            if "__" in key:
                sec, sub = key.split("__", 1)
                data.setdefault(sec, {})[sub] = value
            else:
                data[key] = value
        return from_dict(data)


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    _check("scenario" in raw, "scenario", "missing required key")
    top = {f.name for f in fields(RunConfig)} - set(SECTIONS) - set(FIELD_OF.values())
    kwargs = {}
    for key, value in raw.items():
        if key in SECTIONS:
            cls = SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            known = {f.name for f in fields(cls)}
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"{key}.{sub}: unknown key")
            kwargs[FIELD_OF.get(key, key)] = cls(**value)
        elif key in top:
            kwargs[key] = value
        else:
            raise ConfigError(f"{key}: unknown key")
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return from_dict(tomli.load(fh))


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tomli_w.dumps(config.to_dict()).encode())
    return path
