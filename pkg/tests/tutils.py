"""Shared test helpers: parameter randomization, finite-difference checks."""

import numpy as np
import torch


def randomize_params(module, seed=0, std=0.1):
    """Give every parameter a nonzero value; zero-init gates stay zero otherwise."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, std, size=tuple(p.shape))).to(p.dtype))
    return module


def fd_param_grad_check(loss_fn, module, n_coords=10, h=1e-4, rtol=1e-2, seed=0):
    """Central differences vs autograd on sampled parameter coordinates.

    ``loss_fn`` must be a deterministic closure over ``module`` returning a
    scalar tensor; the module must already be in float64.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    assert params, "module has no trainable parameters"
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    checked = 0
    for _ in range(n_coords):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        ci = int(rng.integers(sizes[pi]))
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[ci].item()
            p.view(-1)[ci] = orig + h
            up = loss_fn().item()
            p.view(-1)[ci] = orig - h
            dn = loss_fn().item()
            p.view(-1)[ci] = orig
        fd = (up - dn) / (2.0 * h)
        auto = 0.0 if grads[pi] is None else grads[pi].view(-1)[ci].item()
        if abs(fd) < 1e-9 and abs(auto) < 1e-9:
            checked += 1
            continue
        rel = abs(fd - auto) / max(abs(fd), abs(auto))
        assert rel < rtol, f"param {pi} coord {ci}: autograd {auto} vs fd {fd} (rel {rel:.3e})"
        checked += 1
    assert checked == n_coords
