"""
Judge, reflect, regenerate
==========================

A reflection trajectory starts from a generated sample, shows its summary to
the language model, and asks for an ``<answer> Yes|No </answer>`` verdict. On
"No" the model writes a reflection and the generator tries again, up to the
iteration budget. The whole loop is one composite trajectory.
"""

import json

from jointrl.config import load_config
from jointrl.flow import seeded_rng
from jointrl.scenarios import Query, ScenarioKind, judge_pairs, run_s6_reflect
from jointrl.training import build_base_model, scenario_config, trajectory_trace

config = load_config("configs/s6_reflect.toml").replace(data__pretrain_steps=300, data__lm_pretrain_steps=100)
model, _ = build_base_model(config)
cfg = scenario_config(config)

pairs = judge_pairs(seeded_rng(5), 4, cfg)
for i, (spec, sample, label) in enumerate(zip(pairs.specs, pairs.samples, pairs.labels)):
    q = Query(ScenarioKind.S6_REFLECT, tuple(spec.tokens()), spec=spec, initial=sample)
    t = run_s6_reflect(model, q, cfg, seed=i)
    trace = trajectory_trace(t)
    print(f"pair {i}: satisfies={bool(label)}  grammar={t.grammar}  cause={t.info['cause']}")
    for seg in trace["segments"]:
        if seg["type"] == "tokens":
            print("   tokens:", " ".join(seg["tokens"]))
        else:
            print("   generate from:", " ".join(seg["context"][-6:]))
    print("   rewards:", json.dumps(trace["rewards"]["components"]))
