"""Shared test utilities: tiny double-precision models and a central
finite-difference gradient oracle."""

import numpy as np
import torch

from puda.models import ArchConfig, build_models


def tiny_bundle(seed=0, input_dim=3, d_z=2, encoder_hidden=(2,), head_hidden=(2,)):
    """A <=50-parameter float64 bundle (encoder 20 + head 12 + decoder 15)."""
    torch.manual_seed(seed)
    arch = ArchConfig(input_shape=(input_dim,), d_z=d_z,
                      encoder_hidden=encoder_hidden, head_hidden=head_hidden,
                      final_hidden=(2,))
    bundle = build_models(arch)
    for m in (bundle.encoder, bundle.head, bundle.decoder):
        m.double()
    return bundle


def n_params(modules):
    return sum(p.numel() for m in modules for p in m.parameters())


def analytic_grad(loss_fn, params):
    """Concatenated autograd gradient of loss_fn() over the parameter list."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1))
    return torch.cat(flat).detach().numpy()


def central_difference_grad(loss_fn, params, step=1e-5):
    """Central finite differences of loss_fn() over every scalar parameter."""
    flat = []
    with torch.no_grad():
        for p in params:
            g = np.zeros(p.numel())
            view = p.reshape(-1)
            for i in range(p.numel()):
                orig = view[i].item()
                view[i] = orig + step
                f_plus = float(loss_fn())
                view[i] = orig - step
                f_minus = float(loss_fn())
                view[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * step)
            flat.append(g)
    return np.concatenate(flat)


def grad_rel_error(loss_fn, params, step=1e-5):
    """Norm-relative disagreement between autograd and central differences."""
    ga = analytic_grad(loss_fn, params)
    gfd = central_difference_grad(loss_fn, params, step=step)
    denom = max(np.linalg.norm(gfd), np.linalg.norm(ga), 1e-12)
    return np.linalg.norm(ga - gfd) / denom
