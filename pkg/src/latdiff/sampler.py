"""Reverse-time generation: star jumps, noisy chains, SDE/ODE integration.

All methods walk a uniform time grid from t=1 to t=0 and re-predict the clean
embeddings at every step; the final latent is decoded by nearest logit.

* star:  invert z_t against the current prediction, carry the SAME eps to the
  next time (the deterministic jump family).
* chain: recombine the inverted eps with fresh noise,
  eps_tilde = sqrt(1-v) eps_old + sqrt(v) eps_new.  v may be a constant in
  [0, 1] or "snr_star", the per-step (per-dimension, for learned schedules)
  fraction 1 - SNR(t)/SNR(s) that keeps one-step marginals exact.  v=0 is the
  star walk bit for bit; v=1 redraws eps from scratch each step.
* sde:   Euler-Maruyama on dz = [f - (tau^2 g^2 / 2) score] dt + tau g dw,
  i.e. the volatility is scaled by tau everywhere; tau=0 is the marginal
  ODE and is what method "ode" runs (it just skips the noise draws).

One numpy stream per call, keyed by the seed: the sample count and step
count are part of the recipe, and equal seeds reproduce files byte for byte.
Teacher-forced mode pins the prediction to given clean embeddings and starts
from z_1 ~ q(z_1 | x); it exists so tests can compare chain marginals against
closed form.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import PAD_ID
from .errors import ConfigError, UnsupportedPolicyError
from .schedule import fresh_noise_fraction

METHODS = ("star", "chain", "sde", "ode")


@dataclass
class SamplerConfig:
    method: str
    steps: int
    noise_mix: object = None  # chain only: float in [0, 1] or "snr_star"
    tau: float = None  # sde only
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown sampler method {self.method!r}")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.method == "chain":
            if self.noise_mix is None:
                raise ConfigError("chain sampling needs noise_mix")
            if self.noise_mix != "snr_star" and not 0.0 <= float(self.noise_mix) <= 1.0:
                raise ConfigError("noise_mix must be in [0, 1] or 'snr_star'")
        elif self.noise_mix is not None:
            raise ConfigError(f"noise_mix is undefined for method {self.method!r}")
        if self.method == "sde":
            if self.tau is None or self.tau < 0:
                raise ConfigError("sde sampling needs tau >= 0")
        elif self.tau is not None:
            raise ConfigError(f"tau is undefined for method {self.method!r}")


@dataclass
class SampleBatch:
    """One generation run: the time grid, final latents, decoded ids."""

    times: np.ndarray
    z0: np.ndarray
    ids: np.ndarray
    latents: list | None = None


def decode_final(table_weight, z0: np.ndarray) -> np.ndarray:
    """Nearest-logit decode, first index winning ties."""
    w = table_weight.detach().cpu().numpy() if isinstance(table_weight, torch.Tensor) else table_weight
    return np.argmax(z0 @ w.T, axis=-1).astype(np.int64)


def _noise(rng, shape, dtype):
    return torch.from_numpy(rng.standard_normal(shape)).to(dtype)


def _step_mix(model, cfg, s_vec, t_vec, context):
    """Fresh-noise fraction for one chain step, broadcast to [n, ., 1]."""
    if cfg.noise_mix == "snr_star":
        gp_s = model.process.gamma(s_vec, context)
        gp_t = model.process.gamma(t_vec, context)
        v = fresh_noise_fraction(gp_s, gp_t)
        return v[:, None, None] if v.dim() == 1 else v[:, :, None]
    return torch.as_tensor(float(cfg.noise_mix))


def generate(model, cfg: SamplerConfig, count: int, teacher_emb=None, context_ids=None,
             keep_latents: bool = False) -> SampleBatch:
    """Run one sampler; returns final latents and argmax-decoded ids."""
    if count < 1:
        raise ConfigError("count must be positive")
    if cfg.noise_mix == "snr_star" and not hasattr(model.process, "gamma"):
        raise UnsupportedPolicyError("snr_star needs a gamma-parameterized schedule; nfdm has none")
    dtype = model.table.weight.dtype
    s_len, dim = model.seq_len, model.dim
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    times = np.linspace(1.0, 0.0, cfg.steps + 1)

    context = None
    if model.encoder is not None:
        if context_ids is None:
            # no ids exist at generation time; summarize an all-PAD row instead
            context_ids = torch.full((count, s_len), PAD_ID, dtype=torch.long)
        context = model.encoder(context_ids)

    with torch.no_grad():
        eps = _noise(rng, (count, s_len, dim), dtype)
        if teacher_emb is not None:
            t1 = torch.ones(count, dtype=dtype)
            z = model.process.flow(eps, t1, teacher_emb, context)
        else:
            z = eps
        latents = [z.numpy().copy()] if keep_latents else None

        for i in range(cfg.steps):
            t, s = times[i], times[i + 1]
            t_vec = torch.full((count,), t, dtype=dtype)
            s_vec = torch.full((count,), s, dtype=dtype)
            x_hat = teacher_emb if teacher_emb is not None else model.predict(z, t_vec, context)

            if cfg.method in ("star", "chain"):
                eps_old = model.process.invert(z, t_vec, x_hat, context)
                if cfg.method == "chain":
                    v = _step_mix(model, cfg, s_vec, t_vec, context).to(dtype)
                    fresh = _noise(rng, (count, s_len, dim), dtype)
                    eps_old = torch.sqrt(1.0 - v) * eps_old + torch.sqrt(v) * fresh
                z = model.process.flow(eps_old, s_vec, x_hat, context)
            else:
                dt = t - s
                tau = 0.0 if cfg.method == "ode" else cfg.tau
                g2 = model.process.volatility(t_vec, context)
                drift = model.process.ode_drift(z, t_vec, x_hat, context)
                drift = drift - (tau**2 / 2.0) * g2 * model.process.score(z, t_vec, x_hat, context)
                z = z - drift * dt
                if cfg.method == "sde":
                    w = _noise(rng, (count, s_len, dim), dtype)
                    z = z + tau * torch.sqrt(g2) * np.sqrt(dt) * w
            if keep_latents:
                latents.append(z.numpy().copy())

    z0 = z.numpy()
    return SampleBatch(times, z0, decode_final(model.table.weight, z0), latents)
