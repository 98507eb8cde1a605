"""The three forward-process families behind z_t = F(eps, t, x).

* RampForward: the frozen analytic schedule (no parameters).
* MulanForward: learned per-position log-NSR curves, optionally pinned to the
  frozen ramp's average SNR, optionally conditioned on a context vector.
* NfdmForward: a free Gaussian flow whose mean and scale come from a network,
  with boundary conditions mu(0)=x, sigma(0)=delta, mu(1)=0, sigma(1)=1 exact.

Everything supports: marginal, flow (eps -> z), invert (z -> eps), score,
ode_drift (dF/dt at fixed eps), and the forward/backward SDE drifts
f +- (g^2/2) * score.  Marginal-level quantities broadcast against [B, S, H];
the ramp uses one gamma per sequence, MULAN one per position, NFDM a full
per-coordinate sigma.
"""

import numpy as np
import torch
from torch import nn

from . import schedule
from .errors import ConfigError, DegenerateSigmaError, ScheduleError
from .nets import Backbone, TimeEmbedding
from .schedule import GammaPoint, alpha_sigma, fixed_average_snr, markovian_volatility

KINDS = ("static", "mulan", "nfdm")
SIGMA_FLOOR = 1e-5


class GaussianMarginal:
    """Mean and scale of q(z_t | x); sigma broadcasts against mu."""

    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma

    def sample(self, eps):
        return self.mu + self.sigma * eps


def _ramp_point(t, dtype) -> GammaPoint:
    """Frozen-schedule gamma at a batch of times, as torch constants."""
    gp = schedule.gamma_ramp(np.asarray(t.detach().cpu(), dtype=np.float64))
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    return GammaPoint(as_t(gp.gamma), as_t(gp.dgamma_dt))


def _gaussian_ode_drift(gp: GammaPoint, x, z, expand):
    """f = alpha_dot x + (sigma_dot / sigma)(z - alpha x) for logit-variance schedules.

    alpha_dot = -alpha sigma^2 gamma_dot / 2 and sigma_dot/sigma = alpha^2 gamma_dot / 2
    follow from alpha^2 = sigmoid(-gamma).
    """
    a = alpha_sigma(gp)
    alpha, sigma2, alpha2 = expand(a.alpha), expand(a.sigma2), expand(a.alpha2)
    dg = expand(gp.dgamma_dt)
    alpha_dot = -0.5 * alpha * sigma2 * dg
    dlog_sigma = 0.5 * alpha2 * dg
    return alpha_dot * x + dlog_sigma * (z - alpha * x)


class ForwardProcess(nn.Module):
    """Shared flow/inversion/score/drift plumbing over ``marginal``."""

    eta = 1.0

    def marginal(self, x, t, context=None) -> GaussianMarginal:
        raise NotImplementedError

    def ode_drift(self, z, t, x, context=None):
        raise NotImplementedError

    def volatility(self, t, context=None):
        raise NotImplementedError

    def flow(self, eps, t, x, context=None):
        return self.marginal(x, t, context).sample(eps)

    def _checked(self, x, t, context) -> GaussianMarginal:
        m = self.marginal(x, t, context)
        if float(m.sigma.detach().min()) < SIGMA_FLOOR:
            raise DegenerateSigmaError(f"marginal sigma below {SIGMA_FLOOR}; inversion is ill-conditioned")
        return m

    def invert(self, z, t, x, context=None):
        m = self._checked(x, t, context)
        return (z - m.mu) / m.sigma

    def score(self, z, t, x, context=None):
        m = self._checked(x, t, context)
        return (m.mu - z) / m.sigma**2

    def drift_forward(self, z, t, x, context=None, g2=None):
        if g2 is None:
            g2 = self.volatility(t, context)
        return self.ode_drift(z, t, x, context) + 0.5 * g2 * self.score(z, t, x, context)

    def drift_backward(self, z, t, x, context=None, g2=None):
        if g2 is None:
            g2 = self.volatility(t, context)
        return self.ode_drift(z, t, x, context) - 0.5 * g2 * self.score(z, t, x, context)


class RampForward(ForwardProcess):
    """Frozen analytic schedule: one gamma per time, shared by all coordinates."""

    kind = "static"

    def __init__(self, eta: float = 1.0):
        super().__init__()
        if eta <= 0:
            raise ScheduleError(f"eta must be positive, got {eta}")
        self.eta = eta

    def gamma(self, t, context=None) -> GammaPoint:
        return _ramp_point(t, t.dtype if t.is_floating_point() else torch.float32)

    def _expand(self, v):
        return v[:, None, None]

    def marginal(self, x, t, context=None):
        a = alpha_sigma(self.gamma(t))
        return GaussianMarginal(self._expand(a.alpha) * x, self._expand(a.sigma))

    def ode_drift(self, z, t, x, context=None):
        return _gaussian_ode_drift(self.gamma(t), x, z, self._expand)

    def volatility(self, t, context=None):
        return self._expand(markovian_volatility(self.gamma(t), self.eta).g2)


class MulanForward(ForwardProcess):
    """Learned monotone log-NSR per token position.

    Each position gets a cubic p_j(t) with softmax coefficients, so
    p_j runs 0 -> 1 monotonically with p_j(1) = 1 built in.  In free mode
    gamma_j = gamma_min + (gamma_max - gamma_min) p_j; in fixed-average mode
    gamma_j rides the frozen ramp plus a bounded offset dev_scale * p_j,
    recentered so the per-position mean SNR equals the ramp's exactly.
    Coefficients come from a context vector when use_context is set,
    otherwise they are free parameters.
    """

    kind = "mulan"
    DEGREE = 3

    def __init__(
        self,
        seq_len: int,
        context_dim: int = 0,
        fixed_average: bool = False,
        gamma_min: float = -10.0,
        gamma_max: float = 10.0,
        dev_scale: float = 1.0,
        eta: float = 1.0,
    ):
        super().__init__()
        if eta <= 0:
            raise ScheduleError(f"eta must be positive, got {eta}")
        if gamma_max <= gamma_min:
            raise ConfigError("gamma_max must exceed gamma_min")
        if fixed_average and not 0.0 < dev_scale <= 1.1:
            # normalized cubics have slope at most 3, the ramp's slope floor is
            # ~3.37; dev_scale <= 1.1 keeps the combined schedule monotone
            raise ConfigError("dev_scale must lie in (0, 1.1]")
        self.seq_len = seq_len
        self.fixed_average = fixed_average
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.dev_scale = dev_scale
        self.eta = eta
        self.use_context = context_dim > 0
        if self.use_context:
            self.coeff_net = nn.Sequential(
                nn.Linear(context_dim, 2 * context_dim),
                nn.SiLU(),
                nn.Linear(2 * context_dim, seq_len * self.DEGREE),
            )
        else:
            self.coeffs = nn.Parameter(torch.zeros(seq_len, self.DEGREE))

    def _poly(self, t, context):
        """Normalized monotone cubic p(t) in [0, 1] and its derivative, both [B, S]."""
        if self.use_context:
            if context is None:
                raise ConfigError("context-conditioned schedule needs a context vector")
            raw = self.coeff_net(context).view(-1, self.seq_len, self.DEGREE)
        else:
            raw = self.coeffs[None, :, :].expand(t.shape[0], -1, -1)
        # softmax rather than softplus-and-divide: the schedule only sees the
        # normalized weights, and a ratio of softplus terms has a flat scale
        # direction that lets raw drift until the denominator underflows
        w = torch.softmax(raw, dim=-1)
        powers = torch.stack([t, t**2, t**3], dim=-1)[:, None, :]
        dpowers = torch.stack([torch.ones_like(t), 2 * t, 3 * t**2], dim=-1)[:, None, :]
        p = (w * powers).sum(dim=-1)
        dp = (w * dpowers).sum(dim=-1)
        return p, dp

    def gamma(self, t, context=None) -> GammaPoint:
        p, dp = self._poly(t, context)
        if not self.fixed_average:
            span = self.gamma_max - self.gamma_min
            return GammaPoint(self.gamma_min + span * p, span * dp)
        glob = _ramp_point(t, p.dtype)
        # where the ramp's endpoint clip freezes the base slope, freeze the
        # offsets' motion too (same "derivative is zero under the clip" rule),
        # otherwise below-average offset slopes would tip the sum negative
        active = (glob.dgamma_dt > 0).to(p.dtype)[:, None]
        dev = GammaPoint(self.dev_scale * p, self.dev_scale * dp * active)
        return fixed_average_snr(GammaPoint(glob.gamma[:, None], glob.dgamma_dt[:, None]), dev)

    def _expand(self, v):
        return v[:, :, None]

    def marginal(self, x, t, context=None):
        a = alpha_sigma(self.gamma(t, context))
        return GaussianMarginal(self._expand(a.alpha) * x, self._expand(a.sigma))

    def ode_drift(self, z, t, x, context=None):
        return _gaussian_ode_drift(self.gamma(t, context), x, z, self._expand)

    def volatility(self, t, context=None):
        return self._expand(markovian_volatility(self.gamma(t, context), self.eta).g2)


class NfdmForward(ForwardProcess):
    """Free Gaussian flow with exact endpoint pinning.

    mu        = (1 - t) x + t (1 - t) mu_bar(x, t)
    log sigma = (1 - t) log(delta) + t (1 - t) log_sigma_bar(x, t)

    so t=0 gives N(x, delta^2) and t=1 gives N(0, 1) no matter what the
    interior net outputs.  log_sigma_bar is squashed through 3 tanh(r/3) to
    keep the learned scale within e^[-3, 3].  The volatility g^2(t) is its
    own positive network, floored at 1e-4.
    """

    kind = "nfdm"
    G2_FLOOR = 1e-4

    def __init__(self, dim, seq_len, layers=2, heads=2, delta=0.01, time_mode="adaln", g2_dim=32):
        super().__init__()
        if not 0 < delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if delta < SIGMA_FLOOR:
            raise ConfigError(f"delta below the sigma floor {SIGMA_FLOOR}")
        self.delta = delta
        self.net = Backbone(dim, dim, 2 * dim, seq_len, layers, heads, time_mode)
        self.g2_time = TimeEmbedding(g2_dim)
        self.g2_out = nn.Linear(g2_dim, 1)

    def mu_log_sigma(self, x, t):
        mu_bar, raw = self.net(x, t).chunk(2, dim=-1)
        log_sigma_bar = 3.0 * torch.tanh(raw / 3.0)
        tt = t[:, None, None]
        mu = (1.0 - tt) * x + tt * (1.0 - tt) * mu_bar
        log_sigma = (1.0 - tt) * np.log(self.delta) + tt * (1.0 - tt) * log_sigma_bar
        return mu, log_sigma

    def mu_bar(self, x, t):
        """Interior mean net alone; used by the time-conditioning diagnostic."""
        return self.net(x, t).chunk(2, dim=-1)[0]

    def marginal(self, x, t, context=None):
        mu_bar, raw = self.net(x, t).chunk(2, dim=-1)
        log_sigma_bar = 3.0 * torch.tanh(raw / 3.0)
        tt = t[:, None, None]
        mu = (1.0 - tt) * x + tt * (1.0 - tt) * mu_bar
        # delta**(1-t) instead of exp((1-t) log delta): keeps sigma(0) == delta
        # and sigma(1) == 1 bitwise
        sigma = self.delta ** (1.0 - tt) * torch.exp(tt * (1.0 - tt) * log_sigma_bar)
        return GaussianMarginal(mu, sigma)

    def ode_drift(self, z, t, x, context=None, method="jvp"):
        if method == "jvp":
            (mu, log_sigma), (dmu, dlog_sigma) = torch.func.jvp(
                lambda u: self.mu_log_sigma(x, u), (t,), (torch.ones_like(t),)
            )
        elif method == "fd":
            h = 1e-3
            mu, log_sigma = self.mu_log_sigma(x, t)
            mu_p, ls_p = self.mu_log_sigma(x, t + h)
            mu_m, ls_m = self.mu_log_sigma(x, t - h)
            dmu, dlog_sigma = (mu_p - mu_m) / (2 * h), (ls_p - ls_m) / (2 * h)
        else:
            raise ConfigError(f"unknown drift method {method!r}")
        # dF/dt = mu_dot + sigma_dot * eps with sigma_dot * eps = dlog_sigma * (z - mu)
        return dmu + dlog_sigma * (z - mu)

    def volatility(self, t, context=None):
        g2 = torch.nn.functional.softplus(self.g2_out(self.g2_time(t))) + self.G2_FLOOR
        return g2[:, :, None]
