import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skilladapt.diffusion import (DiffusionSchedule, NonFiniteError, forward_diffuse, predict_clean, reverse_step,
                                  run_chain)
from skilladapt.distributions import GaussianDist


def test_forward_hand_value():
    sch = DiffusionSchedule.from_alpha([0.25])
    x = forward_diffuse(torch.tensor([1.0], dtype=torch.float64), torch.tensor([1]),
                        torch.tensor([1.0], dtype=torch.float64), sch)
    assert x.item() == pytest.approx(0.5 + np.sqrt(0.75), abs=1e-12)
    assert x.item() == pytest.approx(1.3660, abs=1e-4)


def test_zero_noise_and_no_noise_limit():
    sch = DiffusionSchedule.linear(50)
    a0 = torch.randn(4, 10, 2, dtype=torch.float64)
    k = torch.tensor([1, 5, 20, 50])
    x = forward_diffuse(a0, k, torch.zeros_like(a0), sch)
    torch.testing.assert_close(x, sch.alpha_bar_at(k, a0).sqrt() * a0, rtol=0, atol=0)
    near = DiffusionSchedule.from_alpha([1 - 1e-12])
    x1 = forward_diffuse(a0, torch.ones(4, dtype=torch.long), torch.randn_like(a0), near)
    torch.testing.assert_close(x1, a0, atol=1e-5, rtol=0)


@pytest.mark.parametrize("K", [1, 2, 10, 50, 200])
def test_schedule_invariants(K):
    sch = DiffusionSchedule.linear(K)
    assert np.all((sch.alpha > 0) & (sch.alpha < 1))
    assert np.all(np.diff(sch.alpha_bar) < 0)
    assert sch.alpha_bar[-1] < 0.01
    assert sch.alpha_bar[-1] == pytest.approx(0.005, rel=1e-6)
    np.testing.assert_allclose(np.cumprod(sch.alpha), sch.alpha_bar)
    assert DiffusionSchedule.from_dict(sch.to_dict()).alpha_bar.tolist() == sch.alpha_bar.tolist()


def test_schedule_rejects_bad_alpha():
    with pytest.raises(ValueError):
        DiffusionSchedule.from_alpha([0.5, 1.0])
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.5, 0.5]), np.array([0.5, 0.3]))


def test_step_out_of_range():
    sch = DiffusionSchedule.linear(10)
    a0 = torch.zeros(2, 3, 1)
    for bad in ([0, 1], [1, 11]):
        with pytest.raises(ValueError):
            forward_diffuse(a0, torch.tensor(bad), a0, sch)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31 - 1))
def test_forward_denoise_inversion(k, seed):
    sch = DiffusionSchedule.linear(50)
    g = torch.Generator().manual_seed(seed)
    a0 = torch.randn(3, 10, 2, generator=g, dtype=torch.float64)
    eta = torch.randn(3, 10, 2, generator=g, dtype=torch.float64)
    kk = torch.full((3,), k)
    back = predict_clean(forward_diffuse(a0, kk, eta, sch), kk, eta, sch)
    assert torch.max(torch.abs(back - a0)).item() < 1e-5


def test_predict_clean_zero_eps_and_guard():
    sch = DiffusionSchedule.linear(20)
    x = torch.randn(2, 4, 2, dtype=torch.float64)
    k = torch.tensor([3, 20])
    torch.testing.assert_close(predict_clean(x, k, torch.zeros_like(x), sch), x / sch.alpha_bar_at(k, x).sqrt())
    tiny = DiffusionSchedule.from_alpha([1e-9])
    with pytest.raises(ValueError):
        predict_clean(x, torch.tensor([1, 1]), x, tiny)


def test_reverse_step_matches_closed_form():
    sch = DiffusionSchedule.linear(50)
    x = torch.randn(2, 10, 2, dtype=torch.float64)
    eps = torch.randn_like(x)
    for k in (1, 17, 50):
        a, ab = sch.alpha[k - 1], sch.alpha_bar[k - 1]
        expected = (x - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a)
        torch.testing.assert_close(reverse_step(x, k, eps, sch), expected)


def test_chain_is_deterministic_and_reports_step():
    sch = DiffusionSchedule.linear(12)
    fn = lambda x, k: 0.1 * x  # noqa: E731
    a = run_chain(fn, (3, 4, 2), sch, torch.Generator().manual_seed(4))
    b = run_chain(fn, (3, 4, 2), sch, torch.Generator().manual_seed(4))
    assert torch.equal(a, b) and a.shape == (3, 4, 2)

    def bad(x, k):
        return torch.full_like(x, float("inf")) if int(k[0]) == 7 else torch.zeros_like(x)
    with pytest.raises(NonFiniteError, match="k=7"):
        run_chain(bad, (1, 4, 2), sch, torch.Generator().manual_seed(0))


# Gaussian KL -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_kl_matches_monte_carlo(seed):
    g = torch.Generator().manual_seed(seed)
    dim = 4
    p = GaussianDist(torch.randn(dim, generator=g, dtype=torch.float64) * 0.5,
                     torch.rand(dim, generator=g, dtype=torch.float64) * 0.8 - 0.4)
    q = GaussianDist(torch.randn(dim, generator=g, dtype=torch.float64) * 0.5,
                     torch.rand(dim, generator=g, dtype=torch.float64) * 0.8 - 0.4)
    closed = p.kl_to(q).item()
    x = p.mean + p.std * torch.randn(100_000, dim, generator=g, dtype=torch.float64)
    mc = (p.log_prob(x) - q.log_prob(x)).mean().item()
    assert abs(mc - closed) <= 0.02 * abs(closed)


def test_kl_self_zero_and_clamp():
    p = GaussianDist(torch.randn(5, 3), torch.randn(5, 3))
    assert torch.allclose(p.kl_to(p), torch.zeros(5))
    clamped = GaussianDist(torch.zeros(2), torch.tensor([-50.0, 50.0]))
    assert clamped.log_std.tolist() == [-5.0, 2.0]


def test_sampling_reparameterized_flag():
    mean = torch.zeros(3, requires_grad=True)
    p = GaussianDist(mean, torch.zeros(3))
    assert p.sample(torch.Generator().manual_seed(0)).requires_grad
    assert not p.sample(torch.Generator().manual_seed(0), reparameterized=False).requires_grad
