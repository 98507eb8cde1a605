"""Neural building blocks: embeddings, time conditioning, transformer backbone.

Attention and layer norm are written out op by op on purpose: the fused
scaled-dot-product kernels have no forward-mode derivative on CPU, the native
layer-norm kernel miscomputes gradients taken through a forward-mode
derivative, and the learned forward processes differentiate through these
nets with jvp both ways (jvp for drifts, backward through jvp for training).

All parameters are initialized from a numpy stream via ``init_parameters`` so
that runs are reproducible without ever touching torch's global RNG.
"""

import math

import numpy as np
import torch
from torch import nn

from .corpus import PAD_ID
from .errors import ConfigError

TIME_MODES = ("adaln", "additive", "none")


class TimeEmbedding(nn.Module):
    """Geometric sin/cos features of t followed by a two-layer SiLU MLP."""

    def __init__(self, dim: int, n_freq: int = 64, fmin: float = 1.0, fmax: float = 1000.0):
        super().__init__()
        freqs = np.geomspace(fmin, fmax, n_freq)
        self.register_buffer("freqs", torch.tensor(freqs, dtype=torch.float32))
        self.fc1 = nn.Linear(2 * n_freq, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        ang = t[:, None] * self.freqs.to(t.dtype)
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return self.fc2(torch.nn.functional.silu(self.fc1(feats)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, s, self.heads, -1).transpose(1, 2)
        k = k.view(b, s, self.heads, -1).transpose(1, 2)
        v = v.view(b, s, self.heads, -1).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        return self.proj((w @ v).transpose(1, 2).reshape(b, s, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.silu(self.fc1(x)))


class Norm(nn.Module):
    """Layer norm written out op by op, like the attention above.

    The native kernel returns a wrong cross derivative when reverse mode runs
    on top of a jvp (gradients w.r.t. tensors that feed only the primal come
    back scrambled), and that composition is exactly how the free forward
    process trains.  Composed from mean/var primitives it is exact.
    """

    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim)) if affine else None
        self.bias = nn.Parameter(torch.zeros(dim)) if affine else None

    def forward(self, x):
        m = x.mean(dim=-1, keepdim=True)
        v = ((x - m) ** 2).mean(dim=-1, keepdim=True)
        y = (x - m) / torch.sqrt(v + self.eps)
        return y if self.weight is None else y * self.weight + self.bias


class Block(nn.Module):
    """Pre-norm transformer block, optionally modulated by a time embedding.

    In adaln mode the norms carry no affine parameters; shift, scale, and gate
    come from the time embedding instead, with the gates zero-initialized so
    the block starts as the identity.
    """

    def __init__(self, dim: int, heads: int, adaln: bool):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.mlp = Mlp(dim)
        self.norm1 = Norm(dim, affine=not adaln)
        self.norm2 = Norm(dim, affine=not adaln)
        self.mod = None
        if adaln:
            self.mod = nn.Linear(dim, 6 * dim)
            self.mod.zero_init = True

    def forward(self, x, temb=None):
        if self.mod is None:
            x = x + self.attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        m = self.mod(torch.nn.functional.silu(temb))[:, None, :]
        sh1, sc1, g1, sh2, sc2, g2 = m.chunk(6, dim=-1)
        x = x + g1 * self.attn(self.norm1(x) * (1 + sc1) + sh1)
        return x + g2 * self.mlp(self.norm2(x) * (1 + sc2) + sh2)


class Backbone(nn.Module):
    """Bidirectional transformer over a latent row, with learned positions.

    time_mode picks how t enters: "adaln" modulates every block, "additive"
    adds a time embedding to the input once, "none" ignores t.
    """

    def __init__(self, in_dim, dim, out_dim, seq_len, layers, heads, time_mode="adaln"):
        super().__init__()
        if time_mode not in TIME_MODES:
            raise ConfigError(f"unknown time_mode {time_mode!r}")
        self.time_mode = time_mode
        self.in_proj = nn.Linear(in_dim, dim)
        self.pos = nn.Parameter(torch.zeros(seq_len, dim))
        self.time_emb = TimeEmbedding(dim) if time_mode != "none" else None
        self.blocks = nn.ModuleList(Block(dim, heads, adaln=time_mode == "adaln") for _ in range(layers))
        self.norm = Norm(dim)
        self.out = nn.Linear(dim, out_dim)

    def forward(self, x, t=None):
        if (t is None) != (self.time_mode == "none"):
            raise ConfigError("t must be supplied exactly when the backbone is time conditioned")
        h = self.in_proj(x) + self.pos
        temb = self.time_emb(t) if self.time_emb is not None else None
        if self.time_mode == "additive":
            h = h + temb[:, None, :]
        for blk in self.blocks:
            h = blk(h, temb if self.time_mode == "adaln" else None)
        return self.out(self.norm(h))


class EmbeddingTable(nn.Module):
    """Token embeddings shared by encoding and decoding; logits = z E^T."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(vocab_size, dim))

    def embed(self, ids):
        return self.weight[ids]

    def logits(self, z):
        return z @ self.weight.t()

    def min_content_distance(self, first_content_id: int = 4) -> float:
        """Smallest pairwise distance among content embeddings; collapse gauge."""
        w = self.weight[first_content_id:].detach()
        d = torch.cdist(w, w)
        d = d + torch.eye(len(w)) * d.max().clamp(min=1.0)
        return float(d.min())


class Predictor(nn.Module):
    """Predicts clean embeddings from a noisy latent and its time.

    With a context vector, c is prefixed as an extra position so attention can
    read it everywhere; the prefix is dropped from the output.
    """

    def __init__(self, dim, seq_len, layers, heads, time_mode="adaln", use_context=False):
        super().__init__()
        self.use_context = use_context
        extra = 1 if use_context else 0
        self.backbone = Backbone(dim, dim, dim, seq_len + extra, layers, heads, time_mode)

    def forward(self, z, t, context=None):
        if self.use_context != (context is not None):
            raise ConfigError("context must be supplied exactly when the predictor uses one")
        h = torch.cat([context[:, None, :], z], dim=1) if context is not None else z
        out = self.backbone(h, t)
        return out[:, 1:, :] if self.use_context else out


class ContextEncoder(nn.Module):
    """Summarizes token ids into a vector by mean-pooling over non-PAD positions."""

    def __init__(self, vocab_size, dim, seq_len, heads):
        super().__init__()
        self.table = EmbeddingTable(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(seq_len, dim))
        self.block = Block(dim, heads, adaln=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, ids):
        h = self.table.embed(ids) + self.pos
        h = self.block(h)
        mask = (ids != PAD_ID).to(h.dtype)[..., None]
        pooled = (h * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return self.out(pooled)


def init_parameters(module: nn.Module, seed: int, std: float = 0.02, std_overrides=None):
    """Fill every parameter from one numpy stream, in sorted-name order.

    Linear/embedding/position weights get N(0, std), biases and zero-tagged
    modulation layers get zeros, LayerNorm gains get ones.  Same seed, same
    architecture, same bytes.  std_overrides maps parameter names to their own
    scale; the draw count per parameter is fixed, so overriding one name never
    shifts the stream for the others.
    """
    over = std_overrides or {}
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    zeroed = set()
    for mname, sub in module.named_modules():
        if getattr(sub, "zero_init", False):
            zeroed.update(f"{mname}.{p}" if mname else p for p, _ in sub.named_parameters())
    ln_weights = {
        (f"{mname}.weight" if mname else "weight")
        for mname, sub in module.named_modules()
        if isinstance(sub, (nn.LayerNorm, Norm))
    }
    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name in zeroed or name.endswith("bias"):
                param.zero_()
            elif name in ln_weights:
                param.fill_(1.0)
            else:
                draw = rng.normal(0.0, over.get(name, std), size=tuple(param.shape))
                param.copy_(torch.from_numpy(draw).to(param.dtype))
    return module
