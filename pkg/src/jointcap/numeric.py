"""Float64 array plumbing: sparsemax, gradient collection, finite differences.

Reverse-mode differentiation is delegated to torch autograd; every tensor the
package creates is float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ContractError, DimensionError, EvaluationError

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# sparsemax
# ---------------------------------------------------------------------------


def _sparsemax_threshold(z: torch.Tensor) -> torch.Tensor:
    """Return tau with sparsemax(z) = max(z - tau, 0) along the last dim."""
    n = z.shape[-1]
    zs, _ = torch.sort(z, dim=-1, descending=True)
    ks = torch.arange(1, n + 1, dtype=z.dtype, device=z.device)
    cums = zs.cumsum(-1)
    support = (1.0 + ks * zs) > cums
    k = support.to(z.dtype).sum(-1, keepdim=True)
    tau = (cums.gather(-1, k.long() - 1) - 1.0) / k
    return tau


class _Sparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits):
        z = logits - logits.max(dim=-1, keepdim=True).values
        tau = _sparsemax_threshold(z)
        out = torch.clamp(z - tau, min=0.0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        (out,) = ctx.saved_tensors
        support = (out > 0).to(grad_out.dtype)
        mean = (grad_out * support).sum(-1, keepdim=True) / support.sum(-1, keepdim=True)
        return support * (grad_out - mean)


def sparsemax(logits):
    """Euclidean projection onto the probability simplex along the last axis.

    Accepts a torch tensor (differentiable) or anything array-like, in which
    case a numpy array is returned.
    """
    is_tensor = torch.is_tensor(logits)
    z = logits if is_tensor else as_tensor(logits)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise DimensionError("sparsemax needs a non-empty last dimension")
    out = _Sparsemax.apply(z)
    return out if is_tensor else out.detach().numpy()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(output: torch.Tensor, parameters: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` for every named parameter.

    Parameters that ``output`` does not depend on get zero arrays.
    """
    if output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    names = [n for n, p in parameters.items() if p.requires_grad]
    grads = torch.autograd.grad(
        output.reshape(()), [parameters[n] for n in names], allow_unused=True, retain_graph=True
    )
    result = {}
    for name, g in zip(names, grads):
        p = parameters[name]
        result[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
    return result


def finite_diff_check(
    fn: Callable[[], torch.Tensor],
    parameters: Mapping[str, torch.Tensor],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` recomputes a scalar from the current values of ``parameters``
    (which are perturbed in place). The error per entry is
    ``|analytic - numeric| / max(1, |analytic|)``. With ``max_entries`` a
    seeded random subset of entries per parameter is checked.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    value = fn()
    if not torch.isfinite(value).all():
        raise EvaluationError("function is not finite at the check point")
    analytic = backward(value, parameters)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in parameters.items():
        if not p.requires_grad:
            continue
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(rng.choice(idx.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + epsilon
                up = fn().item()
                flat[i] = orig - epsilon
                down = fn().item()
                flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise EvaluationError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * epsilon)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_module(module: torch.nn.Module, rng: np.random.Generator) -> None:
    """Glorot-uniform every matrix, zero every vector, in parameter order."""
    with torch.no_grad():
        for _, p in module.named_parameters():
            if p.ndim >= 2:
                fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
                p.copy_(torch.from_numpy(glorot_uniform(rng, fan_out, fan_in).reshape(p.shape)))
            else:
                p.zero_()


def zero_module(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
