"""Forward-process families: boundaries, inversion, drifts, learned schedules."""

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from latdiff.errors import ConfigError, DegenerateSigmaError
from latdiff.forward import (
    GaussianMarginal,
    MulanForward,
    NfdmForward,
    RampForward,
    _gaussian_ode_drift,
)
from latdiff.nets import init_parameters
from latdiff.schedule import GammaPoint, gamma_ramp

B, S, H = 4, 5, 8
DTYPE = torch.float64


def data(seed=0, b=B):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.normal(size=(b, S, H)), dtype=DTYPE)
    eps = torch.tensor(rng.normal(size=(b, S, H)), dtype=DTYPE)
    t = torch.tensor(rng.uniform(0.05, 0.95, size=b), dtype=DTYPE)
    return x, eps, t


def randomized(module, seed=0, std=0.3):
    """Give every parameter a nonzero value so learned schedules are non-trivial."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, std, size=tuple(p.shape))).to(p.dtype))
    return module


def make_mulan(fixed_average=False, context_dim=0, seed=0):
    fwd = MulanForward(S, context_dim=context_dim, fixed_average=fixed_average).to(DTYPE)
    return randomized(fwd, seed)


def make_nfdm(seed=0, **kw):
    fwd = NfdmForward(H, S, layers=1, heads=2, **kw).double()
    return randomized(init_parameters(fwd, seed), seed, std=0.05)


ALL = [
    ("static", lambda: RampForward()),
    ("mulan-free", lambda: make_mulan(False)),
    ("mulan-fixed", lambda: make_mulan(True)),
    ("nfdm", lambda: make_nfdm()),
]


class TestFlowInversion:
    @pytest.mark.parametrize("name,build", ALL)
    def test_round_trip(self, name, build):
        fwd = build()
        x, eps, t = data()
        z = fwd.flow(eps, t, x)
        assert_allclose(fwd.invert(z, t, x).detach(), eps, rtol=1e-9, atol=1e-9)

    def test_degenerate_sigma_raises(self):
        class Tiny(RampForward):
            def marginal(self, x, t, context=None):
                m = super().marginal(x, t, context)
                return GaussianMarginal(m.mu, m.sigma * 1e-6)

        x, eps, t = data()
        z = Tiny().flow(eps, t, x)
        with pytest.raises(DegenerateSigmaError):
            Tiny().invert(z, t, x)
        with pytest.raises(DegenerateSigmaError):
            Tiny().score(z, t, x)

    def test_nfdm_delta_bounds(self):
        with pytest.raises(ConfigError):
            NfdmForward(H, S, delta=1e-6)
        with pytest.raises(ConfigError):
            NfdmForward(H, S, delta=1.5)


class TestNfdmBoundaries:
    def test_exact_endpoints(self):
        fwd = make_nfdm()
        x, _, _ = data()
        m0 = fwd.marginal(x, torch.zeros(B, dtype=DTYPE))
        assert torch.equal(m0.mu, x)
        assert torch.all(m0.sigma == fwd.delta)
        m1 = fwd.marginal(x, torch.ones(B, dtype=DTYPE))
        assert torch.all(m1.mu == 0.0)
        assert torch.all(m1.sigma == 1.0)

    def test_interior_depends_on_net(self):
        a, b = make_nfdm(seed=1), make_nfdm(seed=2)
        x, _, t = data()
        assert (a.marginal(x, t).mu - b.marginal(x, t).mu).abs().max() > 1e-8


class TestScore:
    @pytest.mark.parametrize("name,build", ALL)
    def test_matches_autograd_log_density(self, name, build):
        fwd = build()
        x, eps, t = data()
        z = fwd.flow(eps, t, x).detach().requires_grad_(True)
        m = fwd.marginal(x, t)
        logq = (-((z - m.mu) ** 2) / (2 * m.sigma**2) - torch.log(m.sigma * torch.ones_like(m.mu))).sum()
        (grad,) = torch.autograd.grad(logq, z)
        assert_allclose(fwd.score(z.detach(), t, x).detach(), grad.detach(), rtol=1e-8, atol=1e-10)


class TestOdeDrift:
    @pytest.mark.parametrize("name,build", ALL)
    def test_matches_flow_finite_difference(self, name, build):
        # f(z, t) must equal d/dt F(eps, t, x) at the eps that lands on z
        fwd = build()
        x, eps, t = data()
        z = fwd.flow(eps, t, x)
        f = fwd.ode_drift(z, t, x)
        h = 1e-6
        fd = (fwd.flow(eps, t + h, x) - fwd.flow(eps, t - h, x)) / (2 * h)
        assert_allclose(f.detach(), fd.detach(), rtol=5e-4, atol=1e-6)

    def test_nfdm_jvp_agrees_with_fd_method(self):
        fwd = make_nfdm()
        x, eps, t = data()
        z = fwd.flow(eps, t, x)
        a = fwd.ode_drift(z, t, x, method="jvp")
        b = fwd.ode_drift(z, t, x, method="fd")
        assert_allclose(a.detach(), b.detach(), rtol=1e-3, atol=1e-3)
        with pytest.raises(ConfigError):
            fwd.ode_drift(z, t, x, method="nope")

    def test_constant_gamma_gives_zero_drift(self):
        class Flat(MulanForward):
            def gamma(self, t, context=None):
                g = torch.full((t.shape[0], self.seq_len), 0.3, dtype=t.dtype)
                return GammaPoint(g, torch.zeros_like(g))

        fwd = Flat(S)
        x, eps, t = data()
        z = fwd.flow(eps, t, x)
        assert float(fwd.ode_drift(z, t, x).abs().max()) == 0.0
        # markovian volatility vanishes with the slope, so both drifts are zero
        assert float(fwd.drift_forward(z, t, x).abs().max()) == 0.0

    def test_frozen_position_has_zero_drift(self):
        gp = GammaPoint(
            torch.full((B, S), -1.0, dtype=DTYPE),
            torch.cat([torch.zeros(B, 1, dtype=DTYPE), torch.ones(B, S - 1, dtype=DTYPE)], dim=1),
        )
        x, eps, _ = data()
        z = x * 0.9 + eps
        f = _gaussian_ode_drift(gp, x, z, lambda v: v[:, :, None])
        assert float(f[:, 0, :].abs().max()) == 0.0
        assert float(f[:, 1:, :].abs().max()) > 0.0


class TestMarkovianDrift:
    @pytest.mark.parametrize("kind", ["static", "mulan"])
    def test_forward_drift_ignores_data_at_unit_eta(self, kind):
        fwd = RampForward() if kind == "static" else randomized(MulanForward(S).to(DTYPE))
        x1, eps, t = data(1)
        x2, _, _ = data(2)
        z = fwd.flow(eps, t, x1)
        f1 = fwd.drift_forward(z, t, x1)
        f2 = fwd.drift_forward(z, t, x2)
        denom = float(f1.abs().max())
        assert float((f1 - f2).abs().max()) <= 1e-6 * max(denom, 1.0)
        # the backward drift must NOT be data independent, or the test is vacuous
        b1, b2 = fwd.drift_backward(z, t, x1), fwd.drift_backward(z, t, x2)
        assert float((b1 - b2).abs().max()) > 1e-4

    @pytest.mark.parametrize("eta", [0.5, 2.0])
    def test_unit_eta_is_the_unique_markovian_choice(self, eta):
        # the x coefficient of the forward drift is alpha gamma_dot (eta - 1) / 2
        fwd = RampForward(eta=eta)
        x1, eps, t = data(1)
        x2, _, _ = data(2)
        z = fwd.flow(eps, t, x1)
        gap = fwd.drift_forward(z, t, x1) - fwd.drift_forward(z, t, x2)
        gp = fwd.gamma(t)
        a = torch.sqrt(torch.sigmoid(-gp.gamma))[:, None, None]
        expect = 0.5 * a * gp.dgamma_dt[:, None, None] * (eta - 1.0) * (x1 - x2)
        assert_allclose(gap.detach(), expect.detach(), rtol=1e-10, atol=1e-12)

    def test_drift_gap_is_volatility_times_score(self):
        fwd = make_nfdm()
        x, eps, t = data()
        z = fwd.flow(eps, t, x)
        gap = fwd.drift_forward(z, t, x) - fwd.drift_backward(z, t, x)
        expect = fwd.volatility(t) * fwd.score(z, t, x)
        assert_allclose(gap.detach(), expect.detach(), rtol=1e-10, atol=1e-12)


class TestMulanSchedule:
    @pytest.mark.parametrize("fixed", [False, True])
    def test_monotone_per_position(self, fixed):
        fwd = make_mulan(fixed)
        t = torch.linspace(0.0, 1.0, 101, dtype=DTYPE)
        g = fwd.gamma(t).gamma
        assert torch.all(g[1:] - g[:-1] > -1e-12)

    def test_free_mode_endpoints_and_bounds(self):
        fwd = make_mulan(False)
        g0 = fwd.gamma(torch.zeros(1, dtype=DTYPE)).gamma
        g1 = fwd.gamma(torch.ones(1, dtype=DTYPE)).gamma
        assert_allclose(g0.detach(), torch.full_like(g0, fwd.gamma_min), rtol=0, atol=1e-12)
        assert_allclose(g1.detach(), torch.full_like(g1, fwd.gamma_max), rtol=0, atol=1e-12)
        t = torch.linspace(0, 1, 51, dtype=DTYPE)
        g = fwd.gamma(t).gamma
        assert torch.all(g >= fwd.gamma_min - 1e-12) and torch.all(g <= fwd.gamma_max + 1e-12)

    def test_positions_learn_distinct_curves(self):
        g = make_mulan(False).gamma(torch.full((1,), 0.5, dtype=DTYPE)).gamma
        assert float(g.max() - g.min()) > 1e-4

    def test_fixed_average_pins_mean_snr(self):
        fwd = make_mulan(True)
        t = torch.tensor(np.linspace(0.01, 0.99, 23), dtype=DTYPE)
        got = torch.exp(-fwd.gamma(t).gamma).mean(dim=1)
        expect = torch.tensor(np.exp(-gamma_ramp(t.numpy()).gamma), dtype=DTYPE)
        assert_allclose(got.detach(), expect, rtol=1e-12)

    def test_derivative_matches_finite_difference(self):
        for fixed in (False, True):
            fwd = make_mulan(fixed)
            t = torch.tensor([0.2, 0.5, 0.8], dtype=DTYPE)
            h = 1e-6
            fd = (fwd.gamma(t + h).gamma - fwd.gamma(t - h).gamma) / (2 * h)
            assert_allclose(fwd.gamma(t).dgamma_dt.detach(), fd.detach(), rtol=1e-6, atol=1e-9)

    def test_context_changes_schedule(self):
        fwd = make_mulan(context_dim=H)
        t = torch.full((2,), 0.5, dtype=DTYPE)
        c = torch.zeros(2, H, dtype=DTYPE)
        c2 = torch.ones(2, H, dtype=DTYPE)
        assert (fwd.gamma(t, c).gamma - fwd.gamma(t, c2).gamma).abs().max() > 1e-6
        with pytest.raises(ConfigError):
            fwd.gamma(t)

    def test_dev_scale_bound(self):
        with pytest.raises(ConfigError):
            MulanForward(S, fixed_average=True, dev_scale=2.0)


class TestVolatilityShapes:
    def test_broadcast_ranks(self):
        x, eps, t = data()
        assert RampForward().volatility(t).shape == (B, 1, 1)
        assert make_mulan().volatility(t).shape == (B, S, 1)
        g2 = make_nfdm().volatility(t)
        assert g2.shape == (B, 1, 1)
        assert float(g2.min()) >= NfdmForward.G2_FLOOR
