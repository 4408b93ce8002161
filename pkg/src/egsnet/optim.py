"""Bias-corrected Adam with explicit, checkpointable per-parameter moments."""

from __future__ import annotations

from typing import Sequence

import torch


class NonFiniteError(FloatingPointError):
    pass


def init_moments(param: torch.Tensor) -> dict:
    return {"m": torch.zeros_like(param), "v": torch.zeros_like(param), "t": 0}


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    moments: Sequence[dict],
    lr: float = 1e-3,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update, in place on ``params`` and ``moments``.

    Each moment record carries its own step count ``t`` so parameter groups
    that sit frozen for a while keep correct bias corrections.
    """
    if not (len(params) == len(grads) == len(moments)):
        raise ValueError("params, grads and moments must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    for p, g, mom in zip(params, grads, moments):
        mom["t"] += 1
        t = mom["t"]
        m, v = mom["m"], mom["v"]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params, moments

