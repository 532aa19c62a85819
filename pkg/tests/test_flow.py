import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrl.flow import (
    DeterministicStepError,
    SamplerError,
    SdeConfig,
    StepDistribution,
    TimeGrid,
    add_noise,
    energy_distance,
    flow_matching_loss,
    rollout,
    sample_time_logit_normal,
    sde_step,
    sde_step_reference,
    step_logprob,
    trajectory_logprobs,
)
from oracles import logistic, oracle_add_noise, oracle_logpdf, oracle_reference_step, oracle_step

T = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


class ZeroVelocity(torch.nn.Module):
    def forward(self, x, t, c):
        return torch.zeros_like(x)


class LinearVelocity(torch.nn.Module):
    def forward(self, x, t, c):
        return -0.5 * x + t[:, None]


# ---------------------------------------------------------------- types


def test_time_grid_uniform_endpoints():
    g = TimeGrid.uniform(4)
    assert tuple(g.times) == (1.0, 0.75, 0.5, 0.25, 0.0)
    assert g.num_steps == 4
    assert all(d < 0 for d in g.dts)


@pytest.mark.parametrize("times", [(1.0, 0.5, 0.6, 0.0), (0.9, 0.0), (1.0, 0.5), (1.0, 1.0, 0.0)])
def test_time_grid_rejects_bad_times(times):
    with pytest.raises((SamplerError, ValueError)):
        TimeGrid(times)


def test_sde_config_validation():
    assert SdeConfig(0.7).half_eta_sq == pytest.approx(0.245)
    assert SdeConfig(0.7).guarded(1.0) == 0.9931
    assert SdeConfig(0.7).guarded(0.4) == 0.4
    with pytest.raises((SamplerError, ValueError)):
        SdeConfig(-0.1)
    with pytest.raises((SamplerError, ValueError)):
        SdeConfig(0.7, sigma_one_guard=1.0)


# ---------------------------------------------------------------- add_noise


def test_add_noise_zero_window_is_identity():
    x = T(0.3, -1.2)
    assert torch.equal(add_noise(x, 0.5, 0.0, T(5.0, 5.0)), x)


def test_add_noise_hand_values():
    assert add_noise(T(1.0), 0.5, 0.05, T(0.0)).item() == pytest.approx(0.9, abs=1e-15)
    assert add_noise(T(0.0), 0.5, 0.05, T(1.0)).item() == pytest.approx(math.sqrt(0.1), abs=1e-15)


@pytest.mark.parametrize("t,Dt", [(0.5, -0.01), (0.9, 0.1), (0.95, 0.2)])
def test_add_noise_rejects(t, Dt):
    with pytest.raises(SamplerError):
        add_noise(T(1.0), t, Dt, T(0.0))


@given(
    x=st.floats(-3, 3), z=st.floats(-3, 3), t=st.floats(0.01, 0.9), frac=st.floats(0.001, 0.09)
)
def test_add_noise_matches_oracle(x, z, t, frac):
    Dt = frac * (1 - t)
    assert add_noise(T(x), t, Dt, T(z)).item() == pytest.approx(oracle_add_noise(x, t, Dt, z), abs=1e-12)


# ---------------------------------------------------------------- sde_step


def test_sde_step_hand_values():
    nxt, lp, dist = sde_step(T(-2.0), 0.5, -0.1, T(1.0), SdeConfig(1.0), T(0.0))
    assert nxt.item() == pytest.approx(1.2, abs=1e-14)
    assert dist.std == pytest.approx(math.sqrt(0.1), abs=1e-15)
    assert lp.item() == pytest.approx(0.2324, abs=5e-5)
    assert lp.item() == pytest.approx(-math.log(math.sqrt(0.1)) - 0.5 * math.log(2 * math.pi), abs=1e-14)
    # coefficients: x -> 0.9, v -> -0.15
    a, _, _ = sde_step(T(0.0), 0.5, -0.1, T(1.0), SdeConfig(1.0), T(0.0))
    b, _, _ = sde_step(T(1.0), 0.5, -0.1, T(0.0), SdeConfig(1.0), T(0.0))
    assert a.item() == pytest.approx(0.9, abs=1e-15)
    assert b.item() == pytest.approx(-0.15, abs=1e-15)


def test_sde_step_eta_zero_is_euler_and_flags_log_prob():
    x, v = T(0.4, -0.7), T(1.5, 2.0)
    nxt, lp, dist = sde_step(v, 0.6, -0.1, x, SdeConfig(0.0), T(9.0, 9.0))
    assert torch.equal(nxt, x + v * -0.1)
    assert dist.std == 0.0
    assert lp is None
    with pytest.raises(DeterministicStepError):
        step_logprob(nxt, dist)


def test_sde_step_is_pure():
    args = (T(0.3, 0.1), 0.7, -0.05, T(1.0, -1.0), SdeConfig(0.7), T(0.2, -0.4))
    a, b = sde_step(*args), sde_step(*args)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


@pytest.mark.parametrize("sigma,dt", [(0.5, 0.0), (0.5, 0.1), (0.0, -0.1), (1.2, -0.1)])
def test_sde_step_rejects(sigma, dt):
    with pytest.raises(SamplerError):
        sde_step(T(0.0), sigma, dt, T(0.0), SdeConfig(0.7), T(0.0))


def test_sde_step_guard_path_uses_constant():
    mean, std, _ = oracle_step(1.0, 1.0, -0.1, 0.5, 0.7, 0.0)
    nxt, _, dist = sde_step(T(1.0), 1.0, -0.1, T(0.5), SdeConfig(0.7), T(0.0))
    assert dist.mean.item() == pytest.approx(mean, abs=1e-14)
    assert dist.std == pytest.approx(std, abs=1e-14)


sigmas = st.floats(0.01, 0.99)
dts = st.floats(-0.2, -1e-4)
etas = st.floats(0.05, 1.5)
vals = st.floats(-3, 3)


@given(v=vals, x=vals, z=vals, sigma=sigmas, dt=dts, eta=etas)
def test_sde_step_matches_scalar_oracle(v, x, z, sigma, dt, eta):
    mean, std, nxt = oracle_step(v, sigma, dt, x, eta, z)
    got, lp, dist = sde_step(T(v), sigma, dt, T(x), SdeConfig(eta), T(z))
    assert got.item() == pytest.approx(nxt, abs=1e-12)
    assert dist.std == pytest.approx(std, rel=1e-12)
    assert lp.item() == pytest.approx(oracle_logpdf(nxt, mean, std), abs=1e-9)


# ---------------------------------------------------------------- reference form


def test_reference_hand_values():
    nxt, _, dist = sde_step_reference(T(-2.0), 0.5, -0.1, T(1.0), SdeConfig(1.0), T(0.0))
    assert dist.mean.item() == pytest.approx(1.2, abs=1e-14)
    assert dist.std == pytest.approx(math.sqrt(0.1), abs=1e-15)


def test_reference_eta_zero_is_euler():
    x, v = T(0.4), T(1.5)
    a = sde_step(v, 0.3, -0.1, x, SdeConfig(0.0), T(1.0))[0]
    b = sde_step_reference(v, 0.3, -0.1, x, SdeConfig(0.0), T(1.0))[0]
    assert torch.equal(a, b)


@given(v=vals, x=vals, z=vals, sigma=sigmas, dt=dts, eta=etas)
def test_reference_matches_its_oracle(v, x, z, sigma, dt, eta):
    _, std, nxt = oracle_reference_step(v, sigma, dt, x, eta, z)
    got, _, dist = sde_step_reference(T(v), sigma, dt, T(x), SdeConfig(eta), T(z))
    assert got.item() == pytest.approx(nxt, abs=1e-12)
    assert dist.std == pytest.approx(std, rel=1e-12)


@given(v=vals, x=vals, z=vals, sigma=sigmas, dt=dts, eta=st.one_of(st.just(0.0), st.floats(1e-6, 1.5)))
def test_forms_agree_inside_unit_interval(v, x, z, sigma, dt, eta):
    a, lpa, da = sde_step(T(v), sigma, dt, T(x), SdeConfig(eta), T(z))
    b, lpb, db = sde_step_reference(T(v), sigma, dt, T(x), SdeConfig(eta), T(z))
    assert abs(a.item() - b.item()) <= 1e-6
    assert abs(da.std - db.std) <= 1e-6
    assert (lpa is None) == (lpb is None)
    if lpa is not None:
        assert abs(lpa.item() - lpb.item()) <= 1e-6


@given(v=st.floats(0.1, 3), x=vals, dt=dts, eta=etas)
def test_forms_differ_by_dt_times_v_at_sigma_one(v, x, dt, eta):
    # the reference form's unguarded (1 - sigma) factor drops the -Dt v term
    a = sde_step(T(v), 1.0, dt, T(x), SdeConfig(eta), T(0.0))[2].mean.item()
    b = sde_step_reference(T(v), 1.0, dt, T(x), SdeConfig(eta), T(0.0))[2].mean.item()
    Dt = -dt * eta * eta / 2
    assert a - b == pytest.approx(-Dt * v, abs=1e-12)


# ---------------------------------------------------------------- construction and limits


@given(v=vals, x=vals, sigma=st.floats(0.01, 0.9), dt=st.floats(-0.05, -1e-3), eta=st.floats(0.05, 1.0))
def test_add_then_euler_reproduces_step_mean(v, x, sigma, dt, eta):
    Dt = -dt * eta * eta / 2
    renoised = add_noise(T(x), sigma, Dt, T(0.0))
    euler = renoised + T(v) * (dt - Dt)
    # the construction uses the velocity at the re-noised point; for a shared v it is exact
    mean = sde_step(T(v), sigma, dt, T(x), SdeConfig(eta), T(0.0))[2].mean
    assert euler.item() == pytest.approx(mean.item(), abs=1e-12)


@settings(max_examples=50)
@given(v=vals, x=vals, sigma=sigmas, dt=dts)
def test_std_monotone_in_eta_and_mean_tends_to_euler(v, x, sigma, dt):
    stds, gaps = [], []
    for eta in (1.0, 0.5, 0.1, 0.01):
        d = sde_step(T(v), sigma, dt, T(x), SdeConfig(eta), T(0.0))[2]
        stds.append(d.std)
        gaps.append(abs(d.mean.item() - (x + v * dt)))
    assert stds == sorted(stds, reverse=True)
    assert gaps == sorted(gaps, reverse=True)
    assert gaps[-1] < 1e-3 * (abs(x) + abs(v) + 1)


# ---------------------------------------------------------------- log-density


def test_step_logprob_peaks_and_offsets():
    peak = -0.5 * math.log(2 * math.pi)
    assert step_logprob(T(0.0, 0.0), StepDistribution(T(0.0, 0.0), 1.0)).item() == pytest.approx(peak, abs=1e-15)
    s = math.sqrt(0.1)
    assert step_logprob(T(0.0), StepDistribution(T(0.0), s)).item() == pytest.approx(0.2324, abs=5e-5)
    one_sigma = step_logprob(T(0.7 + s, -0.2 + s), StepDistribution(T(0.7, -0.2), s)).item()
    assert one_sigma == pytest.approx(-math.log(s) + peak - 0.5, abs=1e-13)


def test_step_logprob_is_dimension_mean():
    d = StepDistribution(T(0.0, 0.0, 0.0), 0.5)
    y = T(0.1, -0.4, 1.0)
    want = np.mean([oracle_logpdf(v, 0.0, 0.5) for v in (0.1, -0.4, 1.0)])
    assert step_logprob(y, d).item() == pytest.approx(want, abs=1e-14)


# ---------------------------------------------------------------- rollout


def test_rollout_null_velocity_single_ode_step():
    tr = rollout(ZeroVelocity(), torch.zeros(1, dtype=torch.float64), TimeGrid.uniform(1), SdeConfig(0.0), 3, 4)
    assert torch.equal(tr.final[0], tr.states[0, 0])


def test_rollout_shapes_and_determinism():
    grid, cfg = TimeGrid.uniform(8), SdeConfig(1.0)
    a = rollout(LinearVelocity(), torch.zeros(2, dtype=torch.float64), grid, cfg, 7, 3)
    b = rollout(LinearVelocity(), torch.zeros(2, dtype=torch.float64), grid, cfg, 7, 3)
    assert a.states.shape == (1, 9, 3)
    assert a.log_probs.shape == (1, 8)
    assert len(a.stds) == 8
    assert torch.equal(a.states, b.states) and torch.equal(a.log_probs, b.log_probs)
    assert all(sd > 0 for sd in a.stds)


def test_rollout_first_state_is_standard_normal():
    grid, cfg = TimeGrid.uniform(2), SdeConfig(0.7)
    x1 = torch.cat([rollout(ZeroVelocity(), torch.zeros(1, dtype=torch.float64), grid, cfg, s, 50).states[0, 0] for s in range(40)])
    assert abs(float(x1.mean())) < 0.05 and abs(float(x1.std()) - 1) < 0.05


def test_stored_log_probs_recompute_exactly():
    grid, cfg = TimeGrid.uniform(6), SdeConfig(0.8)
    tr = rollout(LinearVelocity(), torch.zeros(1, dtype=torch.float64), grid, cfg, 11, 5)
    again = trajectory_logprobs(tr.means, tr)
    assert torch.allclose(again, tr.log_probs, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- training objective and timesteps


class ConstVelocity(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, t, c):
        return self.value.expand_as(x)


def test_flow_matching_loss_values():
    assert flow_matching_loss(ZeroVelocity(), T(0.0), T(1.0), 0.3).item() == pytest.approx(1.0)
    x0, eps = T(0.2, -0.5), T(1.0, 0.3)
    assert flow_matching_loss(ConstVelocity(eps - x0), x0, eps, 0.6).item() == 0.0


@given(st.permutations(range(4)))
def test_flow_matching_loss_permutation_invariant(perm):
    rng = np.random.default_rng(0)
    x0, eps, out = (torch.from_numpy(rng.standard_normal(4)) for _ in range(3))
    idx = list(perm)
    a = flow_matching_loss(ConstVelocity(out), x0, eps, 0.4).item()
    b = flow_matching_loss(ConstVelocity(out[idx]), x0[idx], eps[idx], 0.4).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_logit_normal_timesteps():
    assert logistic(0.0) == 0.5
    assert logistic(4.0) == pytest.approx(0.9820, abs=5e-5)
    t = sample_time_logit_normal(0, 100_000)
    assert 0.49 <= t.mean() <= 0.51
    assert ((t > 0) & (t < 1)).all()
    assert np.array_equal(t[:10], sample_time_logit_normal(0, 100_000)[:10])


def test_energy_distance_zero_for_identical_and_positive_for_shifted():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((300, 2))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    assert energy_distance(a, a + 1.0) > 0.5
