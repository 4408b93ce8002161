import math

import pytest
import torch

from egsnet.optim import NonFiniteError, adam_step, init_moments


def reference_adam(theta, grad_fn, steps, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8):
    """Scalar pure-Python Adam, written from the textbook update."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
        out.append(theta)
    return out


def test_zero_gradient_keeps_parameters():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    mom = init_moments(p)
    mom["m"].fill_(0.4)
    mom["v"].fill_(0.2)
    before = p.clone()
    adam_step([p], [torch.zeros_like(p)], [mom])
    # zero gradient still moves p through the existing first moment
    assert torch.allclose(mom["m"], torch.full_like(p, 0.2))
    assert torch.allclose(mom["v"], torch.full_like(p, 0.2 * 0.999))
    fresh = torch.tensor([3.0], dtype=torch.float64)
    fm = init_moments(fresh)
    adam_step([fresh], [torch.zeros_like(fresh)], [fm])
    assert fresh.item() == 3.0
    assert not torch.equal(p, before)


def test_first_step_closed_form():
    p = torch.tensor([0.0], dtype=torch.float64)
    mom = init_moments(p)
    adam_step([p], [torch.ones_like(p)], [mom], lr=1e-3)
    assert p.item() == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_trajectory_matches_reference():
    grad = lambda th: 2 * (th - 3.0)  # noqa: E731  (d/dθ of (θ-3)^2)
    ref = reference_adam(0.5, grad, 10)
    p = torch.tensor([0.5], dtype=torch.float64)
    mom = init_moments(p)
    for expected in ref:
        adam_step([p], [torch.tensor([grad(p.item())], dtype=torch.float64)], [mom])
        assert abs(p.item() - expected) < 1e-10


def test_matches_torch_adam():
    torch.manual_seed(0)
    a = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    b = a.detach().clone()
    opt = torch.optim.Adam([a], lr=1e-3, betas=(0.5, 0.999), eps=1e-8)
    mom = init_moments(b)
    for _ in range(20):
        g = torch.randn(5, 3, dtype=torch.float64)
        a.grad = g.clone()
        opt.step()
        adam_step([b], [g], [mom], lr=1e-3, beta1=0.5, beta2=0.999)
    assert torch.allclose(a.detach(), b, atol=1e-12, rtol=0)


def test_non_finite_gradient_aborts():
    p = torch.zeros(2)
    with pytest.raises(NonFiniteError):
        adam_step([p], [torch.tensor([1.0, float("nan")])], [init_moments(p)])
    assert torch.all(p == 0)
