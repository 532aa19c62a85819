import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrl import vocab
from jointrl.models import (
    FrozenParameterError,
    GradientError,
    MetaQueryConnector,
    ModelConfig,
    TokenPolicy,
    UnifiedModel,
    VelocityNet,
    backward,
    checksum,
    extract_context,
    freeze,
    load_checkpoint,
    make_optimizer,
    masked_log_softmax,
    allowed_mask,
    sample_tokens,
    sample_tokens_batch,
    save_checkpoint,
    snapshot,
    trainable_named_parameters,
    token_logits,
    zero_grad,
)

SMALL = ModelConfig(lm_width=8, lm_depth=1, context_length=24, num_queries=2, connector_width=6, cond_dim=4, dm_width=8, dm_depth=2)
PROMPT = [vocab.BOS, vocab.ID["two"], vocab.ID["left"], vocab.ID["red"], vocab.THINK]


def central_rel_error(fn, param: torch.Tensor, h: float = 1e-3) -> float:
    """Norm-wise relative error between autograd and central differences of scalar ``fn()``."""
    param.grad = None
    fn().backward()
    ad = param.grad.detach().clone().reshape(-1)
    fd = torch.zeros_like(ad)
    flat = param.data.view(-1)
    for i in range(flat.numel()):
        o = float(flat[i])
        flat[i] = o + h
        up = float(fn())
        flat[i] = o - h
        down = float(fn())
        flat[i] = o
        fd[i] = (up - down) / (2 * h)
    return float((fd - ad).norm() / max(fd.norm(), ad.norm(), 1e-12))


def zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# ---------------------------------------------------------------- token policy


def test_zero_parameters_give_uniform_distribution():
    pol = zeroed(TokenPolicy(context_length=16, width=8, depth=1))
    logits = token_logits(pol, PROMPT)
    assert torch.all(logits == logits[0])


def test_logits_deterministic_and_normalised():
    pol = TokenPolicy(context_length=16, width=8, depth=2)
    with torch.no_grad():
        a, b = token_logits(pol, PROMPT), token_logits(pol, PROMPT)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
    assert float(torch.softmax(a, -1).sum()) == pytest.approx(1.0, abs=1e-12)


def test_out_of_vocab_and_overlong_contexts_rejected():
    pol = TokenPolicy(context_length=4, width=8, depth=1)
    with pytest.raises(ValueError):
        token_logits(pol, [vocab.BOS, vocab.VOCAB_SIZE])
    with pytest.raises(ValueError):
        token_logits(pol, [vocab.BOS] * 5)


def test_policy_is_causal():
    pol = TokenPolicy(context_length=16, width=8, depth=2)
    tok = torch.tensor([PROMPT + [vocab.ID["r1"]], PROMPT + [vocab.ID["r5"]]])
    out = pol(tok)
    assert torch.equal(out[0, : len(PROMPT)], out[1, : len(PROMPT)])


def test_token_logit_gradient_matches_finite_differences():
    pol = TokenPolicy(context_length=16, width=6, depth=1)
    for p in (pol.head.weight, pol.layers[0].weight):
        assert central_rel_error(lambda: token_logits(pol, PROMPT)[7], p) <= 1e-4


def test_vis_summary_enters_only_at_vis_positions():
    pol = TokenPolicy(context_length=16, width=8, depth=1)
    seq = [vocab.BOS, vocab.GEN, vocab.VIS, vocab.VIS]
    v1 = torch.zeros(1, 4, 8, dtype=torch.float64)
    v2 = v1.clone()
    v2[0, 1] = 5.0  # a non-vis row: ignored
    t = torch.tensor([seq])
    assert torch.equal(pol(t, v1), pol(t, v2))
    v2[0, 2] = 1.0
    assert not torch.equal(pol(t, v1), pol(t, v2))


# ---------------------------------------------------------------- sampling


def test_sample_max_len_zero_is_empty():
    pol = TokenPolicy(context_length=16, width=8, depth=1)
    tr = sample_tokens(pol, PROMPT, 0, seed=1)
    assert len(tr) == 0 and tr.tokens == []


def test_sample_deterministic_and_log_probs_consistent():
    pol = TokenPolicy(context_length=32, width=8, depth=1)
    a = sample_tokens(pol, PROMPT, 8, seed=(4, 2))
    b = sample_tokens(pol, PROMPT, 8, seed=(4, 2))
    assert a.tokens == b.tokens and a.log_probs == b.log_probs
    for pos, lp in zip(a.positions, a.log_probs):
        ref = torch.log_softmax(token_logits(pol, a.seq[:pos]), -1)[a.seq[pos]]
        assert lp == pytest.approx(float(ref), abs=1e-12)


def test_sample_stops_at_end_marker_or_budget():
    pol = TokenPolicy(context_length=40, width=8, depth=1)
    for s in range(10):
        tr = sample_tokens(pol, PROMPT, 6, seed=s)
        assert len(tr) <= 6
        if len(tr) < 6:
            assert tr.tokens[-1] == vocab.EOS and not tr.truncated
        assert vocab.EOS not in tr.tokens[:-1]


def test_two_token_hand_softmax():
    lp = masked_log_softmax(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64), torch.tensor([True, True]))
    assert float(lp[0]) == pytest.approx(math.log(0.75), abs=1e-15)
    assert float(lp[0]) == pytest.approx(-0.2877, abs=5e-5)


def test_two_token_sampler_frequency_and_log_prob():
    # a head that only scores tokens 0 and 1, with logits (ln 3, 0)
    pol = zeroed(TokenPolicy(context_length=8, width=4, depth=1))
    with torch.no_grad():
        pol.head.bias[0] = math.log(3.0)
    allowed = (0, 1)
    trs = sample_tokens_batch(pol, [[vocab.BOS]] * 4000, list(range(4000)), 1, allowed=allowed, stop=())
    first = np.array([t.tokens[0] for t in trs])
    zero_lp = [t.log_probs[0] for t in trs if t.tokens[0] == 0]
    assert max(abs(z - math.log(0.75)) for z in zero_lp) < 1e-12
    assert abs((first == 0).mean() - 0.75) < 0.03


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(vocab.SPEC_WORDS), min_size=1, max_size=10))
def test_masked_log_probs_normalise(ctx):
    pol = TokenPolicy(context_length=16, width=8, depth=1)
    mask = allowed_mask(vocab.THOUGHT_WORDS)
    lp = masked_log_softmax(token_logits(pol, [vocab.BOS, *ctx]), mask)
    assert float(lp.exp().sum()) == pytest.approx(1.0, abs=1e-10)
    assert torch.isneginf(lp[~mask]).all()


# ---------------------------------------------------------------- connector


def test_connector_zero_params_zero_states():
    con = zeroed(MetaQueryConnector(hidden_dim=6, num_queries=3, width=5, out_dim=4))
    c = extract_context(con, torch.zeros(1, 5, 6, dtype=torch.float64))
    assert torch.equal(c, torch.zeros(1, 4, dtype=torch.float64))


def test_connector_sees_whole_sequence_and_is_order_free():
    con = MetaQueryConnector(hidden_dim=6, num_queries=3, width=5, out_dim=4)
    rng = np.random.default_rng(0)
    s = torch.from_numpy(rng.standard_normal((1, 5, 6)))
    swapped = s[:, [0, 3, 2, 1, 4]]
    assert torch.allclose(extract_context(con, s), extract_context(con, swapped), atol=1e-14)
    changed = s.clone()
    changed[0, 0] += 1.0  # the first token, not only the last, matters
    assert not torch.allclose(extract_context(con, s), extract_context(con, changed))


def test_connector_rejects_empty():
    con = MetaQueryConnector(hidden_dim=6, num_queries=3, width=5, out_dim=4)
    with pytest.raises(ValueError):
        extract_context(con, torch.zeros(1, 0, 6, dtype=torch.float64))


def test_connector_query_gradient_matches_finite_differences():
    con = MetaQueryConnector(hidden_dim=6, num_queries=3, width=5, out_dim=4)
    s = torch.from_numpy(np.random.default_rng(1).standard_normal((2, 5, 6)))
    assert central_rel_error(lambda: (extract_context(con, s) ** 2).sum(), con.queries) <= 1e-4


def test_gradient_reaches_lm_through_connector():
    m = UnifiedModel(SMALL)
    tok = torch.tensor([PROMPT])
    (m.context(tok) ** 2).sum().backward()
    assert m.lm.embed.grad is not None and float(m.lm.embed.grad.abs().sum()) > 0


# ---------------------------------------------------------------- velocity net


def test_velocity_net_starts_at_zero_and_keeps_shape():
    net = VelocityNet(3, 4, width=8, depth=2)
    x = torch.randn(2, 5, 3, dtype=torch.float64)
    v = net(x, torch.tensor([0.3, 0.7], dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64))
    assert v.shape == x.shape
    assert torch.equal(v, torch.zeros_like(x))


# ---------------------------------------------------------------- gradient contract


def test_backward_quadratic_zero_and_accumulation():
    m = UnifiedModel(SMALL)
    p = m.dm.out.bias
    with torch.no_grad():
        p.copy_(torch.tensor([0.5, -1.0, 2.0]))
    backward((p**2).sum())
    assert torch.equal(p.grad, 2 * p.detach())
    backward((p**2).sum())
    assert torch.equal(p.grad, 4 * p.detach())
    zero_grad(m)
    assert p.grad is None
    backward(0.0 * (m.lm.embed.sum() + p.sum()))
    assert float(m.lm.embed.grad.abs().sum()) == 0.0


def test_backward_rejects_detached_and_non_scalar():
    m = UnifiedModel(SMALL)
    with pytest.raises(GradientError):
        backward(m.dm.out.bias.detach().sum())
    with pytest.raises(GradientError):
        backward(m.dm.out.bias * 2)


# ---------------------------------------------------------------- freeze / snapshot


def test_freeze_rejects_updates_and_preserves_checksum():
    m = freeze(UnifiedModel(SMALL), "lm")
    before = checksum(m, ("lm",))
    with pytest.raises(FrozenParameterError):
        make_optimizer(m, ("lm", "dm"))
    opt = make_optimizer(m, ("connector", "dm"))
    for _ in range(3):
        opt.zero_grad()
        (m.context(torch.tensor([PROMPT])) ** 2).sum().backward()
        opt.step()
    assert checksum(m, ("lm",)) == before
    assert m.lm.embed.grad is not None  # gradients may be computed, never applied


def test_submodule_training_groups():
    m = UnifiedModel(SMALL)
    names = {n for n, _ in trainable_named_parameters(m, ("lm.head", "dm"))}
    assert names and all(n.startswith(("lm.head.", "dm.")) for n in names)
    assert any(n.startswith("lm.head.") for n in names)
    freeze(m, "lm")
    with pytest.raises(FrozenParameterError):
        make_optimizer(m, ("lm.head",))


def test_snapshot_is_immutable_copy():
    m = UnifiedModel(SMALL)
    snap = snapshot(m)
    assert checksum(snap) == checksum(m)
    with torch.no_grad():
        m.lm.embed.add_(1.0)
    assert checksum(snap) != checksum(m)
    assert all(not p.requires_grad for p in snap.parameters())


def test_identity_ratio_against_own_snapshot():
    m = UnifiedModel(SMALL)
    old = snapshot(m)
    tr = sample_tokens(m.lm, PROMPT, 6, seed=3)
    for p in tr.positions:
        new_lp = torch.log_softmax(token_logits(m.lm, tr.seq[:p]), -1)[tr.seq[p]]
        old_lp = torch.log_softmax(token_logits(old.lm, tr.seq[:p]), -1)[tr.seq[p]]
        assert float(torch.exp(new_lp - old_lp)) == 1.0


def test_checkpoint_round_trip(tmp_path):
    m = freeze(UnifiedModel(SMALL), "lm")
    save_checkpoint(m, tmp_path / "ck", {"step": 3})
    back, extra = load_checkpoint(tmp_path / "ck")
    assert checksum(back) == checksum(m)
    assert back.frozen == {"lm"} and extra == {"step": 3}
    raw = (tmp_path / "ck" / "tensors.bin").read_bytes()
    assert len(raw) == 8 * sum(p.numel() for p in m.parameters())
