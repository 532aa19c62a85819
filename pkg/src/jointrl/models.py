"""Tiny differentiable stand-ins for the language model, connector and generator.

Everything is float64 ``torch.nn`` so finite-difference checks are meaningful.
The unified model owns three parameter groups, addressed by prefix:
``lm``, ``connector`` and ``dm``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import vocab
from .flow import DTYPE, seeded_rng

GROUPS = ("lm", "connector", "dm")
VIS_FEATURES = 8
CHECKPOINT_FORMAT = "jointrl-checkpoint"
CHECKPOINT_VERSION = 1


class FrozenParameterError(RuntimeError):
    """An update was requested for a frozen tensor."""


class GradientError(RuntimeError):
    pass


def _init_linear(layer: nn.Linear, gen: torch.Generator, scale: float = 1.0):
    bound = scale / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.zero_()


def _linear(n_in, n_out, gen, scale=1.0, bias=True):
    layer = nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)
    _init_linear(layer, gen, scale)
    return layer


class TokenPolicy(nn.Module):
    """Causal categorical policy over the toy vocabulary.

    Each layer mixes a position's activation with the running mean of all
    earlier positions, so position ``i`` never sees the future. Positions
    holding ``<vis>`` additionally receive a projected summary vector, the
    stand-in for image tokens.
    """

    def __init__(self, vocab_size=vocab.VOCAB_SIZE, context_length=64, width=64, depth=2, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.vocab_size, self.context_length, self.width = vocab_size, context_length, width
        self.embed = nn.Parameter(torch.empty(vocab_size, width, dtype=DTYPE).uniform_(-1, 1, generator=gen))
        self.pos = nn.Parameter(torch.empty(context_length, width, dtype=DTYPE).uniform_(-0.3, 0.3, generator=gen))
        self.vis_proj = _linear(VIS_FEATURES, width, gen, math.sqrt(3.0), bias=False)  # zero summary adds nothing
        self.layers = nn.ModuleList(_linear(2 * width, width, gen, math.sqrt(3.0)) for _ in range(depth))
        self.head = _linear(width, vocab_size, gen, 0.3)

    def hidden(self, tokens: torch.Tensor, vis: torch.Tensor | None = None, mask: torch.Tensor | None = None):
        """Final-layer per-token activations, (B, L, width); padding rows are zero."""
        B, L = tokens.shape
        if L > self.context_length:
            raise ValueError(f"context of length {L} exceeds {self.context_length}")
        if int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id out of vocabulary")
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.bool)
        m = mask.to(DTYPE)[..., None]
        h = self.embed[tokens] + self.pos[:L]
        if vis is not None:
            h = h + (tokens == vocab.VIS).to(DTYPE)[..., None] * self.vis_proj(vis)
        denom = torch.cumsum(m, dim=1).clamp(min=1.0)
        for layer in self.layers:
            h = h * m
            running = torch.cumsum(h, dim=1) / denom
            h = torch.tanh(layer(torch.cat([h, running], dim=-1)))
        return h * m

    def forward(self, tokens, vis=None, mask=None):
        """Next-token logits at every position, (B, L, V)."""
        return self.head(self.hidden(tokens, vis, mask))


class MetaQueryConnector(nn.Module):
    """Learned queries cross-attend to LM states, then mix bidirectionally."""

    def __init__(self, hidden_dim=64, num_queries=4, width=32, out_dim=16, seed=1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.queries = nn.Parameter(torch.empty(num_queries, hidden_dim, dtype=DTYPE).uniform_(-1, 1, generator=gen))
        self.key = _linear(hidden_dim, hidden_dim, gen, bias=False)
        self.value = _linear(hidden_dim, width, gen, math.sqrt(3.0))
        self.mix = _linear(2 * width, width, gen, math.sqrt(3.0))
        self.out = _linear(num_queries * width, out_dim, gen, math.sqrt(3.0))
        self.out_dim = out_dim
        self.detach_params = False  # negative control for the gradient gate

    def _p(self, p):
        return p.detach() if self.detach_params else p

    def forward(self, states: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        B, L, H = states.shape
        if L == 0:
            raise ValueError("cannot extract context from an empty sequence")
        P = self._p
        keys = states @ P(self.key.weight).T
        scores = torch.einsum("kh,blh->bkl", P(self.queries), keys) / math.sqrt(H)
        if mask is not None:
            if not bool(mask.any(dim=1).all()):
                raise ValueError("cannot extract context from an empty sequence")
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        vals = states @ P(self.value.weight).T + P(self.value.bias)
        f = attn @ vals
        both = torch.cat([f, f.mean(dim=1, keepdim=True).expand_as(f)], dim=-1)
        g = f + torch.tanh(both @ P(self.mix.weight).T + P(self.mix.bias))
        return g.flatten(1) @ P(self.out.weight).T + P(self.out.bias)


def time_features(t: torch.Tensor, n_freq: int = 4) -> torch.Tensor:
    freqs = math.pi * 2.0 ** torch.arange(n_freq, dtype=DTYPE)
    ang = t[..., None] * freqs
    return torch.cat([t[..., None], torch.sin(ang), torch.cos(ang)], dim=-1)


TIME_FEATURES = 9


class VelocityNet(nn.Module):
    """Pointwise MLP velocity field ``v(x, t, c)``; output layer starts at zero.

    ``x`` is (B, *event, d). The condition is (B, c) and broadcast over the
    event axes, or already (B, *event, c) for per-point conditioning.
    """

    def __init__(self, state_dim: int, cond_dim: int = 0, width: int = 128, depth: int = 3, seed: int = 2):
        super().__init__()
        self.state_dim, self.cond_dim = state_dim, cond_dim
        gen = torch.Generator().manual_seed(seed)
        dims = [state_dim + TIME_FEATURES + cond_dim] + [width] * depth
        self.hidden = nn.ModuleList(_linear(a, b, gen, math.sqrt(3.0)) for a, b in zip(dims, dims[1:]))
        self.out = nn.Linear(width, state_dim, dtype=DTYPE)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        ev = x.shape[1:-1]
        if t.ndim == 0:
            t = t.expand(B)
        tf = time_features(t).reshape(B, *([1] * len(ev)), TIME_FEATURES).expand(B, *ev, TIME_FEATURES)
        if cond.ndim == 2:
            cond = cond.reshape(B, *([1] * len(ev)), cond.shape[-1]).expand(B, *ev, cond.shape[-1])
        h = torch.cat([x, tf, cond], dim=-1)
        for layer in self.hidden:
            h = nn.functional.silu(layer(h))
        return self.out(h)


@dataclass(frozen=True)
class ModelConfig:
    lm_width: int = 64
    lm_depth: int = 2
    context_length: int = 64
    num_queries: int = 4
    connector_width: int = 32
    cond_dim: int = 16
    dm_width: int = 128
    dm_depth: int = 3
    channels: int = 3
    seed: int = 0


class UnifiedModel(nn.Module):
    """LM + meta-query connector + generator, trained jointly or in part.

    The generator sees, per point, ``[connector context, reference point]``;
    the reference slot is zero for plain generation.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        s = config.seed
        self.lm = TokenPolicy(vocab.VOCAB_SIZE, config.context_length, config.lm_width, config.lm_depth, seed=s)
        self.connector = MetaQueryConnector(
            config.lm_width, config.num_queries, config.connector_width, config.cond_dim, seed=s + 1
        )
        self.dm = VelocityNet(config.channels, config.cond_dim + config.channels, config.dm_width, config.dm_depth, seed=s + 2)
        self.frozen: set[str] = set()

    def context(self, tokens, vis=None, mask=None) -> torch.Tensor:
        return self.connector(self.lm.hidden(tokens, vis, mask), mask)

    def dm_condition(self, context: torch.Tensor, reference: torch.Tensor | None, num_points: int):
        """Per-point generator condition (B, P, cond_dim + channels)."""
        B = context.shape[0]
        ctx = context[:, None, :].expand(B, num_points, context.shape[-1])
        if reference is None:
            reference = torch.zeros(B, num_points, self.config.channels, dtype=DTYPE)
        return torch.cat([ctx, reference], dim=-1)

    def velocity(self, x, t, cond):
        return self.dm(x, t, cond)

    def guided_velocity(self, scale):
        """Classifier-free guidance on the text context; the reference slot is kept.

        ``scale`` is a float or a per-row (B,) tensor.
        """
        k = self.config.cond_dim

        def velocity(x, t, cond):
            null = cond.clone()
            null[..., :k] = 0.0
            v_null = self.dm(x, t, null)
            w = torch.as_tensor(scale, dtype=DTYPE)
            if w.ndim:
                w = w.reshape(-1, *([1] * (x.ndim - 1)))
            return v_null + w * (self.dm(x, t, cond) - v_null)

        return velocity


# ---------------------------------------------------------------- parameter sets


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def freeze(model: UnifiedModel, *groups: str) -> UnifiedModel:
    for g in groups:
        if g not in GROUPS:
            raise KeyError(f"unknown parameter group {g!r}")
        model.frozen.add(g)
    return model


def unfreeze(model: UnifiedModel, *groups: str) -> UnifiedModel:
    model.frozen.difference_update(groups)
    return model


def _selected(name: str, groups) -> bool:
    return any(name == g or name.startswith(g + ".") for g in groups)


def trainable_named_parameters(model: UnifiedModel, groups=GROUPS):
    """Unfrozen parameters under ``groups``.

    An entry is a whole group (``"lm"``) or a dotted submodule inside one
    (``"lm.head"``).
    """
    for name, p in model.named_parameters():
        if _selected(name, groups) and group_of(name) not in model.frozen:
            yield name, p


def make_optimizer(model: UnifiedModel, groups=GROUPS, kind: str = "adam", lr: float = 1e-3):
    """Optimizer over the requested groups; asking for a frozen group is an error."""
    bad = [g for g in groups if group_of(g) in model.frozen]
    if bad:
        raise FrozenParameterError(f"cannot update frozen parameter group(s): {', '.join(bad)}")
    params = [p for _, p in trainable_named_parameters(model, groups)]
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def snapshot(model: UnifiedModel) -> UnifiedModel:
    """Detached deep copy; used as the old and the reference policy."""
    snap = copy.deepcopy(model)
    for p in snap.parameters():
        p.requires_grad_(False)
    snap.frozen = set(GROUPS)
    return snap


def checksum(model: nn.Module, groups=GROUPS) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if group_of(name) in groups:
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


def backward(loss: torch.Tensor, retain_graph: bool = True):
    """Accumulate d(loss)/d(params) into ``.grad``; repeated calls add up."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise GradientError("loss must be a scalar tensor")
    if not loss.requires_grad:
        raise GradientError("loss is not connected to any parameter (detached value)")
    loss.backward(retain_graph=retain_graph)


def zero_grad(model: nn.Module):
    for p in model.parameters():
        p.grad = None


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: UnifiedModel, path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus raw little-endian float64 ``tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        raw = p.detach().cpu().numpy().astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": "float64-le", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    (path / "tensors.bin").write_bytes(b"".join(blobs))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "frozen": sorted(model.frozen),
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, model: UnifiedModel | None = None) -> tuple[UnifiedModel, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint format")
    if model is None:
        model = UnifiedModel(ModelConfig(**manifest["model_config"]))
    blob = (path / "tensors.bin").read_bytes()
    params = dict(model.named_parameters())
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in params:
            raise ValueError(f"checkpoint tensor {name!r} not in model")
        if list(params[name].shape) != e["shape"]:
            raise ValueError(f"shape mismatch for {name}: {e['shape']} vs {list(params[name].shape)}")
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr.reshape(e["shape"]).copy()))
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.frozen = set(manifest.get("frozen", []))
    return model, manifest.get("extra", {})


# ---------------------------------------------------------------- token sampling


@dataclass
class TokenTrajectory:
    """Sampled tokens appended to ``seq``; ``positions`` index them inside ``seq``.

    ``log_probs[i]`` is the behaviour log-probability of ``seq[positions[i]]``
    given ``seq[:positions[i]]`` under the ``allowed`` vocabulary subset.
    """

    seq: list[int]
    vis: np.ndarray
    positions: list[int]
    log_probs: list[float]
    allowed: tuple[int, ...] | None = None
    truncated: bool = False

    @property
    def tokens(self) -> list[int]:
        return [self.seq[p] for p in self.positions]

    def __len__(self) -> int:
        return len(self.positions)


def allowed_mask(allowed, vocab_size: int = vocab.VOCAB_SIZE) -> torch.Tensor:
    mask = torch.zeros(vocab_size, dtype=torch.bool)
    if allowed is None:
        mask[:] = True
    else:
        mask[list(allowed)] = True
    return mask


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def pad_batch(seqs, vis_list, width: int = VIS_FEATURES):
    """Right-pad token lists (and their vis rows) into tensors plus a validity mask."""
    L = max(len(s) for s in seqs)
    B = len(seqs)
    tok = torch.full((B, L), vocab.PAD, dtype=torch.long)
    vis = torch.zeros(B, L, width, dtype=DTYPE)
    mask = torch.zeros(B, L, dtype=torch.bool)
    for i, (s, v) in enumerate(zip(seqs, vis_list)):
        tok[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
        if v is not None and len(v):
            vis[i, : len(s)] = torch.as_tensor(np.asarray(v)[: len(s)], dtype=DTYPE)
    return tok, vis, mask


def token_logits(policy: TokenPolicy, context, vis=None) -> torch.Tensor:
    """Next-token logits after ``context`` (a 1-D token sequence)."""
    tok = torch.as_tensor(list(context), dtype=torch.long)[None]
    v = None if vis is None else torch.as_tensor(np.asarray(vis), dtype=DTYPE)[None]
    return policy(tok, v)[0, -1]


@torch.no_grad()
def sample_tokens_batch(
    policy: TokenPolicy,
    prompts,
    seeds,
    max_len: int,
    temperature: float = 1.0,
    allowed=None,
    stop=(vocab.EOS,),
    vis_list=None,
    greedy: bool = False,
) -> list[TokenTrajectory]:
    """Sample continuations for several prompts in lock-step, one seed each."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    B = len(prompts)
    seqs = [list(p) for p in prompts]
    vis = [
        np.zeros((len(p), VIS_FEATURES)) if vis_list is None or vis_list[i] is None else np.asarray(vis_list[i], dtype=np.float64)
        for i, p in enumerate(prompts)
    ]
    rngs = [seeded_rng(s) for s in seeds]
    positions = [[] for _ in range(B)]
    lps = [[] for _ in range(B)]
    done = [max_len <= 0] * B
    mask_v = allowed_mask(allowed, policy.vocab_size)
    stop = set(stop)
    for _ in range(max(max_len, 0)):
        live = [i for i in range(B) if not done[i]]
        if not live:
            break
        tok, vt, m = pad_batch([seqs[i] for i in live], [vis[i] for i in live])
        logits = policy(tok, vt, m)
        last = m.sum(dim=1) - 1
        step_logits = logits[torch.arange(len(live)), last] / temperature
        logp = masked_log_softmax(step_logits, mask_v)
        probs = logp.exp().numpy()
        for row, i in enumerate(live):
            if greedy:
                a = int(np.argmax(probs[row]))
            else:
                u = rngs[i].random()
                a = int(np.searchsorted(np.cumsum(probs[row]), u * probs[row].sum(), side="right"))
                a = min(a, policy.vocab_size - 1)
                while not mask_v[a]:
                    a -= 1
            positions[i].append(len(seqs[i]))
            lps[i].append(float(logp[row, a]))
            seqs[i].append(a)
            vis[i] = np.vstack([vis[i], np.zeros((1, VIS_FEATURES))])
            if a in stop:
                done[i] = True
    out = []
    for i in range(B):
        truncated = max_len > 0 and not (positions[i] and seqs[i][positions[i][-1]] in stop)
        out.append(TokenTrajectory(seqs[i], vis[i], positions[i], lps[i], None if allowed is None else tuple(allowed), truncated))
    return out


def sample_tokens(policy: TokenPolicy, prompt, max_len: int, temperature: float = 1.0, seed=0, **kw) -> TokenTrajectory:
    return sample_tokens_batch(policy, [prompt], [seed], max_len, temperature, **kw)[0]


def extract_context(connector: MetaQueryConnector, lm_states, mask=None) -> torch.Tensor:
    """Condition vector from per-token LM states (L, H) or a batch (B, L, H)."""
    states = torch.as_tensor(lm_states, dtype=DTYPE)
    single = states.ndim == 2
    if single:
        states = states[None]
    if states.shape[1] == 0:
        raise ValueError("cannot extract context from an empty sequence")
    c = connector(states, mask)
    return c[0] if single else c
