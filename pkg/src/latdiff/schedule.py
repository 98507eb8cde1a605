"""Noise-schedule math shared by every forward-process family.

Everything is parameterized by the log noise-to-signal ratio
``gamma = log(sigma^2 / alpha^2)``, so ``alpha^2 = sigmoid(-gamma)`` and
``sigma^2 = sigmoid(gamma)`` (variance preserving).  The signal-to-noise
ratio is ``exp(-gamma)`` and grows as gamma falls.

Functions accept numpy arrays or torch tensors and return the same engine.
The torch path keeps gradients intact, which lets the learned schedules
reuse this single implementation.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit, logsumexp, softmax

from .errors import ScheduleError

# The frozen schedule sets sigma^2(t) = sqrt(VAR_RAMP_SLOPE * t + VAR_RAMP_FLOOR):
# the squared noise variance ramps linearly from a small floor (so t=0 keeps a
# sliver of noise and gamma stays finite) up to ~1 at t=1.
VAR_RAMP_SLOPE = 0.9999
VAR_RAMP_FLOOR = 9.9e-5
# sigma^2 is clipped to [VAR_CLIP, 1 - VAR_CLIP] before the logit; the time
# derivative is defined as zero wherever the clip is active.
VAR_CLIP = 1e-6


def _is_torch(x):
    return isinstance(x, torch.Tensor)


def _sigmoid(x):
    return torch.sigmoid(x) if _is_torch(x) else expit(x)


def _exp(x):
    return torch.exp(x) if _is_torch(x) else np.exp(x)


def _sqrt(x):
    return torch.sqrt(x) if _is_torch(x) else np.sqrt(x)


def _any(x):
    return bool(torch.any(x)) if _is_torch(x) else bool(np.any(x))


@dataclass(frozen=True)
class GammaPoint:
    """Log noise-to-signal ratio and its time derivative at one or more times.

    ``dgamma_dt`` must be non-negative: noise never shrinks as t grows.
    """

    gamma: object
    dgamma_dt: object

    def __post_init__(self):
        if _any(self.dgamma_dt < 0):
            raise ScheduleError("dgamma_dt must be non-negative (monotone schedule)")


@dataclass(frozen=True)
class AlphaSigma:
    """Squared signal and noise scales; alpha2 + sigma2 = 1 for these families."""

    alpha2: object
    sigma2: object

    @property
    def alpha(self):
        return _sqrt(self.alpha2)

    @property
    def sigma(self):
        return _sqrt(self.sigma2)


@dataclass(frozen=True)
class VolatilityPoint:
    """Squared diffusion coefficient g^2 together with the eta that produced it."""

    g2: object
    eta: float = 1.0


def gamma_ramp(t):
    """Log-NSR of the frozen near-linear variance ramp, with derivative.

    Accepts scalars or numpy arrays with t in [0, 1]; always computes in
    float64.  Outside the clip region

        gamma(t)     = logit(v),   v = sqrt(VAR_RAMP_SLOPE * t + VAR_RAMP_FLOOR)
        dgamma/dt(t) = VAR_RAMP_SLOPE / (2 v^2 (1 - v))
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ScheduleError("t must lie in [0, 1]")
    v = np.sqrt(VAR_RAMP_SLOPE * t + VAR_RAMP_FLOOR)
    clipped = (v < VAR_CLIP) | (v > 1.0 - VAR_CLIP)
    v = np.clip(v, VAR_CLIP, 1.0 - VAR_CLIP)
    gamma = np.log(v) - np.log1p(-v)
    dgamma = np.where(clipped, 0.0, VAR_RAMP_SLOPE / (2.0 * v * v * (1.0 - v)))
    return GammaPoint(gamma, dgamma)


def alpha_sigma(gp: GammaPoint) -> AlphaSigma:
    """Variance-preserving signal/noise split implied by a log-NSR value."""
    return AlphaSigma(_sigmoid(-gp.gamma), _sigmoid(gp.gamma))


def snr(gp: GammaPoint):
    """Signal-to-noise ratio alpha^2 / sigma^2 = exp(-gamma)."""
    return _exp(-gp.gamma)


def markovian_volatility(gp: GammaPoint, eta: float = 1.0) -> VolatilityPoint:
    """The g^2 that makes the forward SDE drift independent of the data.

    g^2 = sigmoid(gamma) * dgamma/dt * eta.  At eta = 1 the diffusion-loss
    weight (1 + eta)^2 / (4 eta) is minimized; larger or smaller eta scales
    the volatility but keeps the marginals fixed.
    """
    if eta <= 0:
        raise ScheduleError(f"eta must be positive, got {eta}")
    return VolatilityPoint(_sigmoid(gp.gamma) * gp.dgamma_dt * eta, eta)


def lambda_weight(gp: GammaPoint):
    """Per-dimension weight of the squared data-prediction error in the ELBO.

    lambda(t) = 0.5 * exp(-gamma) * dgamma/dt, which is -0.5 * d(SNR)/dt:
    its integral over [a, b] telescopes to 0.5 * (SNR(a) - SNR(b)).
    """
    return 0.5 * _exp(-gp.gamma) * gp.dgamma_dt


def fixed_average_snr(global_gp: GammaPoint, dev_gp: GammaPoint, dim: int = -1) -> GammaPoint:
    """Combine a global schedule with per-dimension offsets at constant mean SNR.

    Shifts the offsets by log(D) - logsumexp(-dev) along ``dim`` so that
    mean_j exp(-gamma_j) == exp(-gamma_global) holds exactly at every t.
    Derivatives are propagated in closed form (the correction's derivative is
    the softmax(-dev)-weighted mean of the offset derivatives).
    """
    dev, ddev = dev_gp.gamma, dev_gp.dgamma_dt
    if _is_torch(dev):
        d = dev.shape[dim]
        corr = np.log(d) - torch.logsumexp(-dev, dim=dim, keepdim=True)
        w = torch.softmax(-dev, dim=dim)
        dcorr = (w * ddev).sum(dim=dim, keepdim=True)
    else:
        dev = np.asarray(dev, dtype=np.float64)
        ddev = np.broadcast_to(np.asarray(ddev, dtype=np.float64), dev.shape)
        d = dev.shape[dim]
        corr = np.log(d) - logsumexp(-dev, axis=dim, keepdims=True)
        w = softmax(-dev, axis=dim)
        dcorr = (w * ddev).sum(axis=dim, keepdims=True)
    gamma = global_gp.gamma + dev - corr
    dgamma = global_gp.dgamma_dt + ddev - dcorr
    return GammaPoint(gamma, dgamma)


def fresh_noise_fraction(gp_s: GammaPoint, gp_t: GammaPoint):
    """Variance share of fresh noise that keeps a chain step marginal-true.

    v*(s, t) = 1 - SNR(t) / SNR(s) = 1 - exp(gamma_s - gamma_t) for s < t.
    Raises if gamma decreases from s to t (schedule not monotone).
    """
    diff = gp_t.gamma - gp_s.gamma
    if _any(diff < 0):
        raise ScheduleError("gamma(s) exceeds gamma(t); schedule must be monotone in t")
    return 1.0 - _exp(-diff)


def ramp_grid(n: int = 1000) -> dict:
    """Tabulate the frozen schedule on a uniform grid for reports and plots."""
    if n < 2:
        raise ScheduleError("grid needs at least two points")
    t = np.linspace(0.0, 1.0, n)
    gp = gamma_ramp(t)
    return {
        "t": t,
        "gamma": gp.gamma,
        "dgamma_dt": gp.dgamma_dt,
        "g2": markovian_volatility(gp).g2,
        "snr": snr(gp),
        "lam": lambda_weight(gp),
    }
