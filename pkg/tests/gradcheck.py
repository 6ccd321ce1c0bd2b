"""Central-finite-difference gradient checks in float64."""

from __future__ import annotations

import torch


def central_diff_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Element-wise central differences of a scalar-valued fn."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(b.abs().max()), 1e-8)
    return float((a - b).abs().max()) / denom


def check_gradients(module: torch.nn.Module, x: torch.Tensor, tol: float = 1e-4) -> dict:
    """Compare autograd against central differences for inputs and parameters.

    Everything runs in float64; returns the worst relative error per kind.
    """
    module = module.double()
    x = x.double().clone().requires_grad_(True)

    def loss():
        out = module(x)
        # a fixed, smooth reduction exercising every output element
        return (out * torch.cos(torch.arange(out.numel(), dtype=torch.float64).reshape(out.shape))).sum()

    value = loss()
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(value, [x] + params)

    errors = {}
    with torch.no_grad():
        fd_x = central_diff_grad(lambda: loss(), x.detach())
    errors["input"] = rel_err(grads[0], fd_x)
    for (name, p), g in zip(
        [(n, p) for n, p in module.named_parameters() if p.requires_grad], grads[1:]
    ):
        with torch.no_grad():
            fd_p = central_diff_grad(lambda: loss(), p.data)
        errors[name] = rel_err(g, fd_p)
    assert max(errors.values()) <= tol, f"gradient mismatch: {errors}"
    return errors
