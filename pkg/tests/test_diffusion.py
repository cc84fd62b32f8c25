import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actiondiff.diffusion import (
    NoiseSchedule,
    NonFiniteLossError,
    forward_marginal,
    forward_step,
    make_linear_schedule,
    reverse_step,
    strided_timesteps,
    training_loss,
)
from oracles import OracleEps, ToyDenoiser, max_fd_relative_error, oracle_noise_chain

SCHED = make_linear_schedule(1000, 1e-4, 0.02)


# --------------------------------------------------------------------------- schedule

def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.beta, [0.5])
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_two_step_cumulative_product():
    s = NoiseSchedule(np.array([0.5, 0.5]))
    np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25], rtol=0, atol=0)


def test_linear_endpoints():
    assert SCHED.beta[0] == pytest.approx(1e-4, abs=0)
    assert SCHED.beta[999] == pytest.approx(0.02, abs=1e-18)
    assert SCHED.T == 1000


def test_variance_preserving_identity_exact():
    np.testing.assert_allclose(SCHED.alpha_bar + SCHED.sigma**2, 1.0, rtol=0, atol=1e-15)


def test_alpha_bar_recursion_and_monotone():
    ab = SCHED.alpha_bar
    np.testing.assert_allclose(ab[1:], ab[:-1] * SCHED.alpha[1:], rtol=1e-15)
    assert np.all(np.diff(ab) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule_rejected(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_default_weights_are_one_and_snr_weights():
    np.testing.assert_array_equal(SCHED.w, np.ones(1000))
    snr = SCHED.with_weights("snr")
    np.testing.assert_allclose(snr.w, SCHED.alpha_bar / SCHED.sigma**2)
    capped = SCHED.with_weights("min_snr", gamma=5.0)
    assert capped.w.max() == 5.0
    with pytest.raises(ValueError):
        SCHED.with_weights("bogus")


def test_respace_keeps_alpha_bar_at_kept_steps():
    ts = strided_timesteps(1000, 50)
    sub = SCHED.respace(ts)
    assert sub.T == len(ts) == 50
    np.testing.assert_allclose(sub.alpha_bar, SCHED.alpha_bar[ts - 1], rtol=1e-12)
    np.testing.assert_array_equal(sub.timesteps, ts)


def test_strided_timesteps_contract():
    ts = strided_timesteps(1000, 50)
    assert ts[0] == 1 and ts[-1] == 1000 and np.all(np.diff(ts) > 0)
    with pytest.raises(ValueError):
        strided_timesteps(10, 0)
    with pytest.raises(ValueError):
        strided_timesteps(10, 11)


# --------------------------------------------------------------------------- forward process

def test_forward_step_special_cases():
    eps = torch.randn(3, 4)
    z = torch.randn(3, 4)
    t = 17
    torch.testing.assert_close(forward_step(torch.zeros(3, 4), t, eps, SCHED), np.sqrt(SCHED.beta[t - 1]) * eps)
    torch.testing.assert_close(forward_step(z, t, torch.zeros(3, 4), SCHED), np.sqrt(1 - SCHED.beta[t - 1]) * z)


def test_forward_step_shape_and_range_errors():
    with pytest.raises(ValueError):
        forward_step(torch.zeros(2), 1, torch.zeros(3), SCHED)
    with pytest.raises(ValueError):
        forward_step(torch.zeros(2), 0, torch.zeros(2), SCHED)
    with pytest.raises(ValueError):
        forward_marginal(torch.zeros(2), 1001, torch.zeros(2), SCHED)


def test_forward_step_variance_preserving_monte_carlo():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(200_000, generator=g, dtype=torch.float64)
    eps = torch.randn(200_000, generator=g, dtype=torch.float64)
    for t in (1, 500, 1000):
        assert abs(float(forward_step(z, t, eps, SCHED).var()) - 1.0) < 0.05


def test_forward_marginal_limits():
    z0 = torch.randn(5)
    eps = torch.randn(5)
    torch.testing.assert_close(forward_marginal(z0, 300, torch.zeros(5), SCHED), np.sqrt(SCHED.alpha_bar[299]) * z0)
    out = forward_marginal(z0, 1000, eps, SCHED)
    assert float((out - eps).abs().max()) < 0.02


def test_forward_marginal_unit_variance_every_t():
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(100_000, generator=g, dtype=torch.float64)
    eps = torch.randn(100_000, generator=g, dtype=torch.float64)
    for t in (1, 10, 100, 250, 500, 750, 1000):
        assert abs(float(forward_marginal(z0, t, eps, SCHED).var()) - 1.0) < 0.05


def test_marginal_matches_iterated_steps_in_moments():
    """Closed form vs t chained steps: means and variances within 3 Monte-Carlo standard errors."""
    n, t = 100_000, 40
    g = torch.Generator().manual_seed(2)
    z0 = 0.7 + 1.3 * torch.randn(n, generator=g, dtype=torch.float64)
    z = z0.clone()
    for s in range(1, t + 1):
        z = forward_step(z, s, torch.randn(n, generator=g, dtype=torch.float64), SCHED)
    closed = forward_marginal(z0, t, torch.randn(n, generator=g, dtype=torch.float64), SCHED)
    for a, b in ((z, closed),):
        se_mean = np.sqrt(float(a.var()) / n + float(b.var()) / n)
        assert abs(float(a.mean() - b.mean())) < 3 * se_mean
        se_var = np.sqrt(2 * float(a.var()) ** 2 / (n - 1) + 2 * float(b.var()) ** 2 / (n - 1))
        assert abs(float(a.var() - b.var())) < 3 * se_var


# --------------------------------------------------------------------------- reverse process

def test_reverse_step_reductions():
    z = torch.randn(4, 3)
    t = 250
    out = reverse_step(z, t, torch.zeros_like(z), SCHED, torch.zeros_like(z))
    torch.testing.assert_close(out, z / np.sqrt(SCHED.alpha[t - 1]))


def test_reverse_step_t1_ignores_noise():
    z, e = torch.randn(6), torch.randn(6)
    a = reverse_step(z, 1, e, SCHED, torch.randn(6) * 100)
    b = reverse_step(z, 1, e, SCHED, None)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert SCHED.posterior_sigma(1) == 0.0


def test_reverse_step_rejects_t0_and_shape_mismatch():
    with pytest.raises(ValueError):
        reverse_step(torch.zeros(2), 0, torch.zeros(2), SCHED)
    with pytest.raises(ValueError):
        reverse_step(torch.zeros(2), 5, torch.zeros(3), SCHED)


def test_posterior_sigma_formula():
    t = 400
    ab = SCHED.alpha_bar
    expected = np.sqrt(SCHED.beta[t - 1] * (1 - ab[t - 2]) / (1 - ab[t - 1]))
    assert SCHED.posterior_sigma(t) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("t", [1, 2, 50, 1000])
def test_oracle_noise_round_trip(t):
    g = torch.Generator().manual_seed(t)
    z0 = torch.randn(7, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    rec = oracle_noise_chain(z0, t, eps, SCHED, reverse_step)
    rel = float((rec - z0).norm() / z0.norm())
    assert rel < 1e-4


def test_oracle_round_trip_on_respaced_chain():
    sub = SCHED.respace(strided_timesteps(1000, 50))
    g = torch.Generator().manual_seed(3)
    z0 = torch.randn(2, 7, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    rec = oracle_noise_chain(z0, sub.T, eps, sub, reverse_step)
    assert float((rec - z0).norm() / z0.norm()) < 1e-4


# --------------------------------------------------------------------------- training loss

def test_oracle_model_gives_zero_loss():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 7, 4, 8, 8, dtype=torch.float64, generator=g)
    loss = training_loss(x, None, OracleEps(x, SCHED), SCHED, torch.Generator().manual_seed(5))
    assert float(loss) < 1e-10


def test_loss_non_negative_and_weighted():
    model = ToyDenoiser()
    x = torch.randn(2, 7, 4, 4, 4, dtype=torch.float64)
    cond = torch.randn(2, 3, dtype=torch.float64)
    t = torch.tensor([10, 900])
    unit = training_loss(x, cond, model, SCHED, torch.Generator().manual_seed(1), t=t)
    snr_sched = SCHED.with_weights("snr")
    snr = training_loss(x, cond, model, snr_sched, torch.Generator().manual_seed(1), t=t)
    assert unit.item() >= 0 and snr.item() >= 0
    # the snr weighting turns the x-space loss into the noise-prediction MSE
    g = torch.Generator().manual_seed(1)
    eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
    ab = torch.as_tensor(SCHED.alpha_bar)[t - 1].view(-1, 1, 1, 1, 1)
    eps_hat = model(ab.sqrt() * x + (1 - ab).sqrt() * eps, t, cond)
    torch.testing.assert_close(snr, ((eps_hat - eps) ** 2).flatten(1).mean(1).mean())


def test_loss_reports_divergence():
    class Bad(torch.nn.Module):
        def forward(self, z, t, c):
            return z * float("nan")

    with pytest.raises(NonFiniteLossError):
        training_loss(torch.randn(1, 7, 4, 2, 2), None, Bad(), SCHED, torch.Generator().manual_seed(0))


def test_timesteps_uniform_over_range():
    seen = []

    class Spy(torch.nn.Module):
        def forward(self, z, t, c):
            seen.extend(t.tolist())
            return torch.zeros_like(z)

    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        training_loss(torch.zeros(50, 1, 1, 1, 1), None, Spy(), SCHED, g)
    seen = np.array(seen)
    assert seen.min() >= 1 and seen.max() <= 1000
    hist = np.histogram(seen, bins=10, range=(0.5, 1000.5))[0]
    expected = len(seen) / 10
    chi2 = float(((hist - expected) ** 2 / expected).sum())
    assert chi2 < 27.9  # 99.9th percentile of chi-square with 9 dof


def test_finite_difference_gradient_check():
    torch.manual_seed(0)
    model = ToyDenoiser()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 100
    x = torch.randn(2, 7, 4, 3, 3, dtype=torch.float64)
    cond = torch.randn(2, 3, dtype=torch.float64)
    sched = SCHED.with_weights("snr")

    def loss_fn():
        return training_loss(x, cond, model, sched, torch.Generator().manual_seed(11))

    rel = max_fd_relative_error(model, loss_fn)
    assert rel < 1e-4


# --------------------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.05), span=st.floats(0.0, 0.4))
def test_schedule_invariants_property(T, lo, span):
    hi = min(lo + span, 0.999)
    s = make_linear_schedule(T, lo, hi)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_allclose(s.alpha_bar + s.sigma**2, 1.0, atol=1e-15)
    assert np.all(np.diff(s.alpha_bar) < 0)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31 - 1))
def test_reverse_inverts_forward_given_oracle_noise_property(t, seed):
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(16, generator=g, dtype=torch.float64)
    eps = torch.randn(16, generator=g, dtype=torch.float64)
    z_t = forward_marginal(z0, t, eps, SCHED)
    # one reverse step with the exact noise lands on the posterior mean
    ab_prev = SCHED.alpha_bar_at(t - 1)
    mean = reverse_step(z_t, t, eps, SCHED, None)
    beta, ab = SCHED.beta[t - 1], SCHED.alpha_bar[t - 1]
    post_mean = (np.sqrt(ab_prev) * beta / (1 - ab)) * z0 + (np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * z_t
    torch.testing.assert_close(mean, post_mean, rtol=1e-9, atol=1e-9)
