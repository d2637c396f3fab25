"""Differentiation, gradient checking, Adam and checkpoint I/O.

Tensors and reverse-mode differentiation come from torch; everything the
model needs is built from its basic ops (matmul, add, mul, softmax, log,
cat, slicing, mean/max pooling, layer norm, embedding lookup). The
finite-difference checker below never calls autograd, so it is an
independent oracle for the analytic gradients.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ShapeError

CHECKPOINT_FORMAT = "syntaxie-checkpoint"
CHECKPOINT_VERSION = 1


def check_finite(tensor: torch.Tensor, what: str = "tensor"):
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in {what}")


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs"):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return list(params.named_parameters())
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def forward_backward(loss_fn: Callable[[], torch.Tensor], params) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate a scalar loss and populate gradients of every parameter.

    Gradients are returned by name (zeros for parameters the loss does not
    touch). Raises NumericError on a non-finite loss or gradient.
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()
    grads = {}
    for name, p in named:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        check_finite(g, f"gradient of {name}")
        grads[name] = g
    return loss.item(), grads


@dataclass
class GradCheckReport:
    max_rel_errors: list[float]
    max_abs_errors: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_errors)

    def __str__(self):
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_errors)
        return f"gradcheck {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g}): [{errs}]"


def numeric_gradient(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], index: int,
                     h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    x = inputs[index].detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    args = [t.detach() for t in inputs]
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            args[index] = x
            up = float(fn(*args))
            flat[k] = orig - h
            down = float(fn(*args))
            flat[k] = orig
            grad[k] = (up - down) / (2 * h)
    return grad.view_as(x)


def analytic_gradient(fn, inputs):
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]


def gradient_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], tolerance: float = 1e-4,
                   h: float = 1e-5, floor: float = 1e-6, analytic: Sequence[torch.Tensor] | None = None
                   ) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    report holds the maximum per input. ``analytic`` overrides autograd, which
    lets callers test a hand-supplied (or deliberately corrupted) gradient.
    """
    if analytic is None:
        analytic = analytic_gradient(fn, inputs)
    rel, absolute = [], []
    for i in range(len(inputs)):
        a = analytic[i].detach()
        n = numeric_gradient(fn, inputs, i, h)
        diff = (a - n).abs()
        scale = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        rel.append(float((diff / scale).max()) if diff.numel() else 0.0)
        absolute.append(float(diff.max()) if diff.numel() else 0.0)
    return GradCheckReport(rel, absolute, tolerance)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not state.lr > 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        check_same_shape(p, g, f"adam update of {name}")
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


class Adam:
    """Thin optimizer wrapper around :func:`adam_step` for a module's parameters."""

    def __init__(self, module: nn.Module, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(module.named_parameters())
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: Mapping[str, torch.Tensor]):
        adam_step(self.params, grads, self.state)


# -- initialization -----------------------------------------------------------

def xavier_uniform(shape, generator: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


def embedding_normal(shape, generator: torch.Generator, dtype=torch.float64, std=0.02) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype) * std


def init_parameters(module: nn.Module, generator: torch.Generator):
    """Seeded init: Xavier-uniform weight matrices, zero biases, N(0, 0.02) embeddings, unit LayerNorm gain."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                sub.weight.copy_(xavier_uniform(tuple(sub.weight.shape), generator, sub.weight.dtype))
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.Embedding):
                sub.weight.copy_(embedding_normal(tuple(sub.weight.shape), generator, sub.weight.dtype))
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None):
    """Write a versioned ``.npz`` container of float64 arrays plus a JSON metadata record.

    The write goes through a temporary file and an atomic rename.
    """
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {},
              "names": list(tensors)}
    arrays = {f"p{i}": t.detach().cpu().to(torch.float64).numpy() for i, t in enumerate(tensors.values())}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise NumericError(f"{path}: not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise NumericError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {name: torch.from_numpy(data[f"p{i}"].copy()) for i, name in enumerate(header["names"])}
    return tensors, header["meta"]


def to_dtype(name: str) -> torch.dtype:
    try:
        return {"float64": torch.float64, "float32": torch.float32}[name]
    except KeyError:
        raise ValueError(f"unsupported precision {name!r}; use float32 or float64") from None

