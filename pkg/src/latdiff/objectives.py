"""Losses, bits-per-character accounting, and the training step.

Conventions, used everywhere:

* Loss functions return per-sequence TOTAL nats as a tensor [B]: the
  diffusion and prior terms sum over all positions and hidden dims, the
  reconstruction term sums over non-PAD positions only.
* The training scalar is batch-mean total nats divided by seq_len.
* The rescaled x-prediction loss is a training surrogate (mean over
  positions of the per-position squared error summed over hidden); it never
  feeds bits-per-character, which always uses the exact terms.
* All randomness comes from numpy generators handed in by the caller;
  training keys them by (seed, step), evaluation by (seed, sequence index).
"""

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericalError, ScheduleError
from .schedule import lambda_weight

LOSS_MODES = ("nfdm_full", "mulan_simplified", "rescaled_xpred")


def check_compatible(kind: str, mode: str, fixed_average: bool = False):
    """The mode/kind pairs that are mathematically sound to train with."""
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}")
    if mode == "mulan_simplified" and kind == "nfdm":
        raise ConfigError("the simplified loss needs a gamma-parameterized process, not nfdm")
    if mode == "rescaled_xpred" and not (kind == "static" or (kind == "mulan" and fixed_average)):
        raise ConfigError(
            "rescaled_xpred needs a schedule with pinned average SNR "
            "(static, or mulan with fixed_average); free schedules collapse under it"
        )


class TimeSampler:
    """Draws diffusion times in [0, 1); every mode keeps the uniform marginal."""

    MODES = ("uniform", "antithetic", "stratified")

    def __init__(self, mode: str = "uniform"):
        if mode not in self.MODES:
            raise ConfigError(f"unknown time sampling mode {mode!r}")
        self.mode = mode

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "uniform":
            return rng.uniform(size=n)
        if self.mode == "antithetic":
            half = rng.uniform(size=(n + 1) // 2)
            return np.concatenate([half, 1.0 - half])[:n]
        return (np.arange(n) + rng.uniform(size=n)) / n


def _parts(model, ids, t, eps):
    x = model.embed(ids)
    c = model.context(ids)
    z = model.process.flow(eps, t, x, c)
    x_hat = model.predict(z, t, c)
    return x, c, z, x_hat


def full_elbo_diffusion(model, ids, t, eps):
    """Squared backward-drift gap over 2 g^2; exact for every kind."""
    x, c, z, x_hat = _parts(model, ids, t, eps)
    proc = model.process
    g2 = proc.volatility(t, c)
    if float(g2.detach().min()) < 1e-12:
        raise ScheduleError("volatility underflow in the diffusion loss")
    fb_true = proc.drift_backward(z, t, x, c, g2=g2)
    fb_pred = proc.drift_backward(z, t, x_hat, c, g2=g2)
    return ((fb_true - fb_pred) ** 2 / (2.0 * g2)).sum(dim=(1, 2))


def simplified_diffusion(model, ids, t, eps):
    """lambda(t)-weighted squared data-prediction error.

    Algebraically equal to the full loss for gamma-parameterized processes at
    eta = 1, where the drift gap collapses to -alpha gamma_dot (x - x_hat).
    """
    if model.kind == "nfdm":
        raise ConfigError("simplified loss is undefined for nfdm")
    x, c, z, x_hat = _parts(model, ids, t, eps)
    lam = lambda_weight(model.process.gamma(t, c))
    lam = lam[:, None, None] if lam.dim() == 1 else lam[:, :, None]
    return (lam * (x - x_hat) ** 2).sum(dim=(1, 2))


def rescaled_xpred(model, ids, t, eps):
    """Unweighted surrogate: per-position squared error, averaged over positions."""
    x, _, _, x_hat = _parts(model, ids, t, eps)
    return ((x - x_hat) ** 2).sum(dim=-1).mean(dim=-1)


DIFFUSION_TERMS = {
    "nfdm_full": full_elbo_diffusion,
    "mulan_simplified": simplified_diffusion,
    "rescaled_xpred": rescaled_xpred,
}


def reconstruction_loss(model, ids, eps0):
    """Cross entropy of decoding z_0 ~ q(z_0 | x), summed over non-PAD positions."""
    from .corpus import PAD_ID

    x = model.embed(ids)
    c = model.context(ids)
    t0 = torch.zeros(ids.shape[0], dtype=x.dtype)
    z0 = model.process.marginal(x, t0, c).sample(eps0)
    logits = model.table.logits(z0)
    ce = torch.nn.functional.cross_entropy(logits.transpose(1, 2), ids, reduction="none")
    mask = (ids != PAD_ID).to(ce.dtype)
    return (ce * mask).sum(dim=-1)


def prior_loss(model, ids):
    """KL(q(z_1 | x) || N(0, I)) in closed form; exactly zero for nfdm."""
    x = model.embed(ids)
    c = model.context(ids)
    t1 = torch.ones(ids.shape[0], dtype=x.dtype)
    m = model.process.marginal(x, t1, c)
    sig2 = m.sigma**2
    kl = 0.5 * (m.mu**2 + (sig2 - 1.0 - torch.log(sig2)) * torch.ones_like(m.mu))
    return kl.sum(dim=(1, 2))


@dataclass
class LossBreakdown:
    """Per-sequence nats totals from evaluation, plus what divides them."""

    diff_nats: np.ndarray
    rec_nats: np.ndarray
    prior_nats: np.ndarray
    char_counts: np.ndarray
    draws: int
    mode: str

    def total_nats(self):
        return self.diff_nats + self.rec_nats + self.prior_nats


def bpc(breakdown: LossBreakdown):
    """Mean bits per character over sequences, with its standard error."""
    per_seq = breakdown.total_nats() / (math.log(2.0) * breakdown.char_counts)
    n = len(per_seq)
    se = float(per_seq.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(per_seq.mean()), se


def exact_mode_for(kind: str) -> str:
    """The ELBO-exact diffusion term used when reporting bpc."""
    return "nfdm_full" if kind == "nfdm" else "mulan_simplified"


def estimate_breakdown(model, sequences, draws: int, seed: int, time_mode: str = "stratified",
                       batch_size: int = 64) -> LossBreakdown:
    """Monte Carlo ELBO terms for a list of TokenSequence, K draws each.

    Every sequence gets its own stream from SeedSequence([seed, index]), so
    the result is invariant to how sequences are batched.  Runs on a float64
    copy of the model to keep that invariance below 1e-8.
    """
    model64 = copy.deepcopy(model).double().eval()
    sampler = TimeSampler(time_mode)
    n, s = len(sequences), model.seq_len
    h = model.dim
    ids_all = np.stack([q.ids for q in sequences])
    t_all = np.empty((n, draws))
    eps_all = np.empty((n, draws, s, h))
    eps0_all = np.empty((n, draws, s, h))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        t_all[i] = sampler.draw(draws, rng)
        eps_all[i] = rng.standard_normal((draws, s, h))
        eps0_all[i] = rng.standard_normal((draws, s, h))
    diff = np.zeros((n, draws))
    rec = np.zeros((n, draws))
    prior = np.zeros(n)
    term = DIFFUSION_TERMS[exact_mode_for(model.kind)]
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            ids = torch.from_numpy(ids_all[lo:hi])
            for k in range(draws):
                t = torch.from_numpy(t_all[lo:hi, k])
                eps = torch.from_numpy(eps_all[lo:hi, k])
                eps0 = torch.from_numpy(eps0_all[lo:hi, k])
                diff[lo:hi, k] = term(model64, ids, t, eps).numpy()
                rec[lo:hi, k] = reconstruction_loss(model64, ids, eps0).numpy()
            prior[lo:hi] = prior_loss(model64, ids).numpy()
    chars = np.array([q.char_count for q in sequences], dtype=np.float64)
    return LossBreakdown(diff.mean(axis=1), rec.mean(axis=1), prior, chars, draws, exact_mode_for(model.kind))


class Trainer:
    """Adam training loop over one model; fully determined by (seed, step)."""

    def __init__(self, model, mode: str, lr: float, seed: int = 0, clip_norm: float = 1.5,
                 clip_start_step: int = 0, time_mode: str = "antithetic"):
        fixed_avg = bool(getattr(model.process, "fixed_average", False))
        check_compatible(model.kind, mode, fixed_avg)
        self.model = model
        self.mode = mode
        self.seed = seed
        self.clip_norm = clip_norm
        self.clip_start_step = clip_start_step
        self.time_sampler = TimeSampler(time_mode)
        self.opt = torch.optim.Adam(model.parameters(), lr=lr)
        self.step_count = 0

    def _draws(self, step: int, b: int, s: int, h: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step]))
        t = self.time_sampler.draw(b, rng)
        eps = rng.standard_normal((b, s, h))
        eps0 = rng.standard_normal((b, s, h))
        return t, eps, eps0

    def train_step(self, ids_np: np.ndarray) -> dict:
        step = self.step_count
        b, s = ids_np.shape
        t_np, eps_np, eps0_np = self._draws(step, b, s, self.model.dim)
        ids = torch.from_numpy(np.ascontiguousarray(ids_np))
        dtype = self.model.table.weight.dtype
        t = torch.from_numpy(t_np).to(dtype)
        eps = torch.from_numpy(eps_np).to(dtype)
        eps0 = torch.from_numpy(eps0_np).to(dtype)

        diff = DIFFUSION_TERMS[self.mode](self.model, ids, t, eps)
        rec = reconstruction_loss(self.model, ids, eps0)
        prior = prior_loss(self.model, ids)
        total = diff + rec + prior
        loss = total.mean() / s
        stats = {
            "step": step,
            "loss": float(loss.detach()),
            "diff": float(diff.detach().mean()),
            "rec": float(rec.detach().mean()),
            "prior": float(prior.detach().mean()),
        }
        if not math.isfinite(stats["loss"]):
            raise NumericalError(f"non-finite training loss at step {step}: {stats}")

        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.clip_norm and step >= self.clip_start_step:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.clip_norm)
        for p in self.model.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient at step {step}: {stats}")
        self.opt.step()
        self.step_count += 1
        return stats
