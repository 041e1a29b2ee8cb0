"""Tensor primitives, gradient evaluation, SGD and learning-rate schedules.

Tensors are ``torch.Tensor`` values. Everything here is written so the same
code runs in float32 (training) and float64 (gradient checks).
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ContractError, InvalidShapeError

Tensor = torch.Tensor

EPS_STD = 1e-5


def use_deterministic(threads: int = 1) -> None:
    """Pin torch to a fixed thread count and deterministic kernels."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# channel statistics


@dataclass
class ChannelStats:
    """Per-item, per-channel mean and (floored) standard deviation.

    Both fields have shape ``(B, C)``.
    """

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise InvalidShapeError(
                f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}"
            )

    def code(self) -> Tensor:
        """Concatenate ``mu`` and ``sigma`` into a ``(B, 2C)`` style code."""
        return torch.cat([self.mu, self.sigma], dim=1)

    @classmethod
    def from_code(cls, code: Tensor, eps: float = EPS_STD) -> "ChannelStats":
        """Split a ``(B, 2C)`` code, flooring the sigma half at ``eps``."""
        if code.dim() != 2 or code.shape[1] % 2:
            raise InvalidShapeError(f"style code must be (B, 2C), got {tuple(code.shape)}")
        c = code.shape[1] // 2
        _note_kink(code[:, c:] > eps)
        return cls(code[:, :c], code[:, c:].clamp_min(eps))


def channel_stats(f: Tensor, eps: float = EPS_STD) -> ChannelStats:
    """Spatial mean and population std of every channel of a ``(B, C, H, W)`` map."""
    if f.dim() != 4:
        raise InvalidShapeError(f"expected (B, C, H, W), got {tuple(f.shape)}")
    if f.shape[2] * f.shape[3] < 1:
        raise InvalidShapeError("empty spatial extent")
    mu = f.mean(dim=(2, 3))
    var = (f - mu[:, :, None, None]).pow(2).mean(dim=(2, 3))
    # max(std, eps) written on the variance so the gradient stays finite at 0
    _note_kink(var > eps * eps)
    sigma = var.clamp_min(eps * eps).sqrt()
    return ChannelStats(mu, sigma)


# ---------------------------------------------------------------------------
# gradients

WrtSpec = Union[Sequence[Tensor], Mapping[str, Tensor]]


def grad_eval(loss: Tensor, wrt: WrtSpec, *, retain_graph: bool = False,
              create_graph: bool = False):
    """Reverse-mode gradient of a scalar ``loss``.

    ``wrt`` may be a sequence of tensors (a tuple of gradients is returned in
    the same order) or a mapping ``name -> tensor`` (a dict is returned).
    Tensors that do not take part in the graph get a zero gradient.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if isinstance(wrt, Mapping):
        names = list(wrt)
        tensors = [wrt[n] for n in names]
    else:
        names = None
        tensors = list(wrt)
    grads = torch.autograd.grad(
        loss.reshape(()), tensors, retain_graph=retain_graph,
        create_graph=create_graph, allow_unused=True,
    )
    grads = tuple(torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads))
    if names is None:
        return grads
    return dict(zip(names, grads))


# ---------------------------------------------------------------------------
# layer primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise InvalidShapeError("conv2d expects (B, C, H, W) input and (O, C, kh, kw) weight")
    if x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(
            f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidShapeError("conv2d: bias must have one entry per output channel")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    if x.dim() != 4:
        raise InvalidShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=scale, mode="nearest")


_kink_log: list | None = None


@contextmanager
def record_kinks():
    """Collect the on/off pattern of every piecewise-linear switch evaluated
    inside the block. Finite-difference checks use it to reject steps that
    straddle a kink."""
    global _kink_log
    outer, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = outer


def _note_kink(mask: Tensor) -> None:
    if _kink_log is not None:
        _kink_log.append(mask.detach().clone())


def relu(x: Tensor) -> Tensor:
    _note_kink(x > 0)
    return torch.relu(x)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.dim() != 2 or weight.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(
            f"fully_connected: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    return F.linear(x, weight, bias)


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.dim() != 2 or labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise InvalidShapeError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match"
        )
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels.long())


def l2_norm(x: Tensor, dim: int = -1) -> Tensor:
    """Euclidean norm along ``dim``; the gradient at the origin is taken as 0."""
    return torch.linalg.vector_norm(x, ord=2, dim=dim)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    warmup_iters: int
    max_iters: int
    power: float = 0.9

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ContractError("base_lr must be positive")
        if self.warmup_iters < 0 or self.max_iters <= 0:
            raise ContractError("warmup_iters must be >= 0 and max_iters > 0")
        if self.warmup_iters >= self.max_iters:
            raise ContractError("warmup_iters must be < max_iters")
        if not self.power > 0:
            raise ContractError("power must be positive")


def learning_rate(spec: ScheduleSpec, it: int) -> float:
    """Linear warm-up from 0 to ``base``, then poly decay to 0 at ``max_iters``.

    The decay runs over the post-warm-up span, ``base * (1 - t)^power`` with
    ``t = (it - warmup) / (max - warmup)``, so the curve is continuous and
    reaches ``base`` exactly when warm-up ends.
    """
    if it < 0 or it > spec.max_iters:
        raise ContractError(f"iteration {it} outside [0, {spec.max_iters}]")
    if it < spec.warmup_iters:
        return spec.base_lr * it / spec.warmup_iters
    t = (it - spec.warmup_iters) / (spec.max_iters - spec.warmup_iters)
    return spec.base_lr * (1.0 - t) ** spec.power


# ---------------------------------------------------------------------------
# parameters and SGD


@dataclass
class ParamSet:
    """Named parameters with parallel gradient and momentum buffers.

    Parameters are held by reference, so a ``ParamSet`` built from a module
    updates that module in place.
    """

    params: "OrderedDict[str, Tensor]"
    grads: Dict[str, Tensor] = field(default_factory=dict)
    momentum: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParamSet":
        return cls(OrderedDict((prefix + n, p) for n, p in module.named_parameters()))

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def set_grads(self, grads: Union[Mapping[str, Tensor], Iterable[Tensor]]) -> None:
        if not isinstance(grads, Mapping):
            grads = dict(zip(self.params, grads))
        for name, g in grads.items():
            if name not in self.params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise InvalidShapeError(f"gradient shape mismatch for {name!r}")
            self.grads[name] = g.detach()

    def state(self) -> "OrderedDict[str, Tensor]":
        """Parameters followed by momentum buffers (``momentum/<name>``)."""
        out = OrderedDict((n, p.detach()) for n, p in self.params.items())
        for n, v in self.momentum.items():
            out["momentum/" + n] = v
        return out

    def load_state(self, state: Mapping[str, Tensor]) -> None:
        with torch.no_grad():
            for n, p in self.params.items():
                if n not in state:
                    raise ContractError(f"missing parameter {n!r}")
                if state[n].shape != p.shape:
                    raise InvalidShapeError(f"shape mismatch for {n!r}")
                p.copy_(state[n])
        self.momentum = {
            n[len("momentum/"):]: v.clone() for n, v in state.items() if n.startswith("momentum/")
        }


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> ParamSet:
    """SGD with momentum and L2 weight decay, applied in place.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    """
    missing = [n for n in params.params if n not in params.grads]
    if missing:
        raise ContractError(f"missing gradient for {missing[0]!r}")
    with torch.no_grad():
        for name, p in params.params.items():
            d = params.grads[name]
            if weight_decay:
                d = d + weight_decay * p
            if momentum:
                buf = params.momentum.get(name)
                if buf is None:
                    buf = d.clone()
                else:
                    buf.mul_(momentum).add_(d)
                params.momentum[name] = buf
                d = buf
            p.sub_(lr * d)
    return params
