"""
Reasoning before generation
===========================

The language model thinks, writes an expanded prompt, and the generator
draws a point set from the prompt plus that expansion. Reward is the
composition score of the sample; every token and every denoising step of a
trajectory shares its group-normalised advantage.
"""

import numpy as np

from jointrl import vocab
from jointrl.config import load_config
from jointrl.flow import seeded_rng
from jointrl.grpo import make_group
from jointrl.scenarios import ScenarioKind, queries_for, rollout_cot
from jointrl.training import build_base_model, scenario_config

# a shortened warm-up so the demo finishes in well under a minute
config = load_config("configs/s5_cot.toml").replace(data__pretrain_steps=600)
model, info = build_base_model(config)
cfg = scenario_config(config)
print("cold-start loss:", [round(x, 4) for x in info["cold_start_loss"]])

query = queries_for(ScenarioKind.S5_COT, seeded_rng(3), 1, cfg)[0]
print("prompt:", " ".join(vocab.decode(query.spec.tokens())))
group = make_group(query, rollout_cot(model, query, cfg, [(0, j) for j in range(8)]))
for t in group.trajectories:
    think, expand = t.token_segments
    print(
        f"reward {t.rewards.total:.2f}  adv {t.advantage:+.2f}  "
        f"think {' '.join(vocab.decode(think.tokens)):28s} expand {' '.join(vocab.decode(expand.tokens))}"
    )
print("mean reasoning length:", np.mean([t.info["reasoning_length"] for t in group.trajectories]))
