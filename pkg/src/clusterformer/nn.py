"""Dense numeric kernel: stable row-wise activations, Adam and a gradient oracle.

Autograd is delegated to torch; everything here works on plain tensors so the
same functions serve both float64 checks and float32 training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor


class NonFiniteError(ValueError):
    pass


class NonFiniteGradientError(NonFiniteError):
    def __init__(self, param_id: str):
        super().__init__(f"non-finite gradient in parameter {param_id!r}")
        self.param_id = param_id


def _require_finite(m: Tensor, what: str) -> None:
    # max/min propagate NaN, so two reductions catch NaN and both infinities
    if m.numel() and not (torch.isfinite(m.amax()) and torch.isfinite(m.amin())):
        raise NonFiniteError(f"{what} contains non-finite values")


def softmax_rows(m: Tensor, allowed: Tensor | None = None) -> Tensor:
    """Softmax over the last axis (torch's kernel subtracts the row max).

    ``allowed`` is an optional boolean mask broadcastable to ``m``; disallowed
    entries get exactly zero weight. Every row must allow at least one entry.
    """
    _require_finite(m, "softmax input")
    if allowed is None:
        return torch.softmax(m, dim=-1)
    if not allowed.any(dim=-1).all():
        raise ValueError("softmax row with no allowed entries")
    return torch.softmax(m.masked_fill(~allowed, float("-inf")), dim=-1)


def layer_norm_rows(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row (biased variance, eps inside the sqrt), then scale and shift."""
    if gain.shape[-1] != m.shape[-1] or bias.shape[-1] != m.shape[-1]:
        raise ValueError(
            f"gain/bias width {gain.shape[-1]}/{bias.shape[-1]} != row width {m.shape[-1]}"
        )
    return F.layer_norm(m, (m.shape[-1],), gain, bias, eps)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, Tensor | None],
) -> dict[str, Tensor]:
    """Bias-corrected Adam update, applied in place to ``params``.

    All gradients are validated before anything is modified, so a non-finite
    gradient leaves parameters, moments and the step counter untouched.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != {tuple(p.shape)} for {name!r}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.first_moment.get(name)
            v = state.second_moment.get(name)
            if m is None:
                m = state.first_moment[name] = torch.zeros_like(p)
                v = state.second_moment[name] = torch.zeros_like(p)
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            update = (m / c1) / ((v / c2).sqrt() + state.eps)
            p.sub_(state.lr * update)
    return params


class Adam:
    """Thin optimizer over named parameters of a module, backed by adam_step."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.state, self.params, grads)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: int
    worst_index: int

    def __str__(self) -> str:
        return (
            f"max rel err {self.max_rel_error:.3e} at param {self.worst_param}, "
            f"flat index {self.worst_index}"
        )


def finite_diff_grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` are leaf tensors read by ``f``; each coordinate is perturbed in
    place and restored. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    loss = f()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    worst = GradCheckResult(0.0, -1, -1)
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, analytic)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                a = gflat[i].item()
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > worst.max_rel_error or worst.worst_param < 0:
                    worst = GradCheckResult(err, pi, i)
    return worst
