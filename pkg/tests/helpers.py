from __future__ import annotations

import torch

from latentogm.models import ModelConfig
from latentogm.ogm import GridSpec


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        grid=GridSpec(8, 8, 1.0),
        style_dim=3,
        content_channels=2,
        content_h=4,
        content_w=4,
        enc_stem=2,
        enc_channels=(3,),
        gen_channels=(3,),
        const_channels=2,
        content_proj=2,
        disc_channels=(2,),
        disc_scales=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def central_difference_check(f, x: torch.Tensor, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences of scalar f at x (float64)."""
    x = x.detach().clone().double().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    num = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        with torch.no_grad():
            num.view(-1)[i] = (f(xp.view_as(x)) - f(xm.view_as(x))) / (2 * eps)
    denom = max(grad.norm().item(), num.norm().item(), 1e-12)
    return (grad - num).norm().item() / denom
