"""Finite-difference checks of every reverse-mode rule used in training.

Each case builds a small random float64 instance, reduces its output to a
scalar with a fixed random weighting, and compares the autograd gradient with
central differences coordinate by coordinate. An instance whose ``+h`` or
``-h`` evaluation flips any ReLU or clamp is discarded and redrawn, because
the finite difference is then not an estimate of the local derivative.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Sequence

import torch

from . import numcore as nc
from .miner import total_loss
from .models import NetConfig, build_generator, build_task_model, encode, vae_decode
from .numcore import ChannelStats, channel_stats
from .rain import (adain, content_loss, kl_loss, rec_loss, stylize_features, style_loss)
from .models import StylePosterior
from .miner import consistency_loss

STEP = 1e-4
TOLERANCE = 1e-4
DTYPE = torch.float64

Builder = Callable[[torch.Generator], tuple]


@dataclass
class CaseResult:
    name: str
    instances: int
    redraws: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


class KinkCrossed(Exception):
    pass


def _rand(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale


def _weighted(out: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (out * w).sum()


def _kinks(fn, inputs):
    with nc.record_kinks() as log:
        with torch.no_grad():
            value = fn(*inputs)
    return float(value), log


def _same(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def check_instance(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                   wrt: Sequence[int], h: float = STEP) -> float:
    """Largest relative error over the inputs listed in ``wrt``.

    Raises ``KinkCrossed`` if any perturbation changes the kink pattern.
    """
    leaves = [t.detach().clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    with nc.record_kinks() as base_log:
        loss = fn(*leaves)
    grads = nc.grad_eval(loss, [leaves[i] for i in wrt])
    worst = 0.0
    for i, g in zip(wrt, grads):
        flat = leaves[i].detach().clone().reshape(-1)
        numeric = torch.empty_like(flat)
        for k in range(flat.numel()):
            vals = []
            for sign in (1.0, -1.0):
                probe = flat.clone()
                probe[k] += sign * h
                args = [t.detach() for t in leaves]
                args[i] = probe.reshape(leaves[i].shape)
                value, log = _kinks(fn, args)
                if not _same(log, base_log):
                    raise KinkCrossed
                vals.append(value)
            numeric[k] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, relative_error(g.reshape(-1), numeric))
    return worst


# ---------------------------------------------------------------------------
# cases; each builder returns (fn, inputs, wrt indices)


def _case_conv2d(gen):
    x, w, b = _rand(gen, 2, 2, 5, 5), _rand(gen, 3, 2, 3, 3), _rand(gen, 3)
    r = _rand(gen, 2, 3, 3, 3)
    return (lambda x, w, b: _weighted(nc.conv2d(x, w, b, stride=2, padding=1), r)), (x, w, b), (0, 1, 2)


def _case_upsample(gen):
    x, r = _rand(gen, 2, 2, 3, 3), _rand(gen, 2, 2, 6, 6)
    return (lambda x: _weighted(nc.upsample_nearest(x), r)), (x,), (0,)


def _case_relu(gen):
    x, r = _rand(gen, 4, 6), _rand(gen, 4, 6)
    return (lambda x: _weighted(nc.relu(x), r)), (x,), (0,)


def _case_fully_connected(gen):
    x, w, b, r = _rand(gen, 3, 5), _rand(gen, 4, 5), _rand(gen, 4), _rand(gen, 3, 4)
    return (lambda x, w, b: _weighted(nc.fully_connected(x, w, b), r)), (x, w, b), (0, 1, 2)


def _case_cross_entropy(gen):
    logits = _rand(gen, 5, 4, scale=2.0)
    labels = torch.randint(0, 4, (5,), generator=gen)
    return (lambda z: nc.softmax_cross_entropy(z, labels)), (logits,), (0,)


def _case_l2_norm(gen):
    x, r = _rand(gen, 4, 6), _rand(gen, 4)
    return (lambda x: _weighted(nc.l2_norm(x), r)), (x,), (0,)


def _case_channel_stats(gen):
    f = _rand(gen, 2, 3, 4, 4)
    rm, rs = _rand(gen, 2, 3), _rand(gen, 2, 3)

    def fn(f):
        s = channel_stats(f)
        return _weighted(s.mu, rm) + _weighted(s.sigma, rs)
    return fn, (f,), (0,)


def _case_adain(gen):
    f, mu = _rand(gen, 2, 3, 4, 4), _rand(gen, 2, 3)
    sigma = torch.rand(2, 3, generator=gen, dtype=DTYPE) + 0.5
    r = _rand(gen, 2, 3, 4, 4)
    return (lambda f, m, s: _weighted(adain(f, ChannelStats(m, s)), r)), (f, mu, sigma), (0, 1, 2)


def _case_kl(gen):
    psi = _rand(gen, 3, 4)
    xi = torch.rand(3, 4, generator=gen, dtype=DTYPE) + 0.3
    return (lambda p, x: kl_loss(StylePosterior(p, x))), (psi, xi), (0, 1)


def _case_rec(gen):
    a, b = _rand(gen, 3, 6), _rand(gen, 3, 6)
    return rec_loss, (a, b), (0, 1)


def _case_content(gen):
    a, b = _rand(gen, 2, 3, 2, 2), _rand(gen, 2, 3, 2, 2)
    return content_loss, (a, b), (0, 1)


def _case_style(gen):
    o1, o2 = _rand(gen, 2, 3, 4, 4), _rand(gen, 2, 4, 2, 2)
    s = [channel_stats(_rand(gen, 2, 3, 4, 4)), channel_stats(_rand(gen, 2, 4, 2, 2))]
    return (lambda a, b: style_loss([channel_stats(a), channel_stats(b)], s)), (o1, o2), (0, 1)


def _case_consistency(gen):
    z = _rand(gen, 3, 2, 5)
    return consistency_loss, (z,), (0,)


_NET = NetConfig(channels=8, latent_dim=4, n_classes=3, feat_dim=8, side=8, vae_hidden=8,
                 task_width=4)


def _nets(gen):
    seed = int(torch.randint(0, 2 ** 31 - 1, (), generator=gen))
    G = build_generator(_NET, seed, DTYPE)
    G.encoder.gain.fill_(1.5)
    G.mark_trained()
    M = build_task_model(_NET, seed + 1, DTYPE)
    for p in [*G.parameters(), *M.parameters()]:
        p.requires_grad_(False)
    return G, M


def _case_mined_latent(gen):
    """L_M as a function of the mined latents: vae_decode -> adain -> decode -> task model."""
    G, M = _nets(gen)
    x = torch.rand(2, 3, _NET.side, _NET.side, generator=gen, dtype=DTYPE)
    y = torch.randint(0, _NET.n_classes, (2,), generator=gen).repeat(2)
    with torch.no_grad():
        f_c = encode(G, x)
    eps, comp = _rand(gen, 2, _NET.latent_dim), _rand(gen, 2, _NET.latent_dim)

    def fn(e):
        xs = stylize_features(G, f_c.repeat(2, 1, 1, 1), torch.cat([e, comp]))
        return total_loss(M, xs, y, lam=0.5).total
    return fn, (eps,), (0,)


def _case_image_path(gen):
    """The same loss as a function of the content image: encoder -> adain -> decoder -> task model."""
    G, M = _nets(gen)
    # a 4x4 image upsampled to full size keeps the probe count small
    x = torch.rand(1, 3, _NET.side // 2, _NET.side // 2, generator=gen, dtype=DTYPE) * 0.8 + 0.1
    y = torch.randint(0, _NET.n_classes, (1,), generator=gen).repeat(2)
    eps = _rand(gen, 2, _NET.latent_dim)

    def fn(x):
        full = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
        xs = stylize_features(G, encode(G, full).repeat(2, 1, 1, 1), eps)
        return total_loss(M, xs, y, lam=0.5).total
    return fn, (x,), (0,)


def _case_task_params(gen):
    """L_M with respect to task-model weights (the descent side)."""
    G, M = _nets(gen)
    x = torch.rand(4, 3, _NET.side, _NET.side, generator=gen, dtype=DTYPE)
    y = torch.randint(0, _NET.n_classes, (4,), generator=gen)
    names = ["head.weight", "fc.bias", "conv1.bias"]
    params = dict(M.named_parameters())

    def fn(*ws):
        with _swapped(M, dict(zip(names, ws))):
            return total_loss(M, x, y, lam=0.5).total
    return fn, tuple(params[n].detach().clone() for n in names), (0, 1, 2)


@contextmanager
def _swapped(module, tensors: Dict[str, torch.Tensor]):
    saved = {}
    for name, t in tensors.items():
        owner, attr = module, name
        *path, attr = name.split(".")
        for p in path:
            owner = getattr(owner, p)
        saved[name] = (owner, attr, owner._parameters[attr])
        owner._parameters[attr] = t
    try:
        yield
    finally:
        for owner, attr, old in saved.values():
            owner._parameters[attr] = old


CASES: Dict[str, Builder] = {
    "conv2d": _case_conv2d,
    "upsample_nearest": _case_upsample,
    "relu": _case_relu,
    "fully_connected": _case_fully_connected,
    "softmax_cross_entropy": _case_cross_entropy,
    "l2_norm": _case_l2_norm,
    "channel_stats": _case_channel_stats,
    "adain": _case_adain,
    "kl_loss": _case_kl,
    "rec_loss": _case_rec,
    "content_loss": _case_content,
    "style_loss": _case_style,
    "consistency_loss": _case_consistency,
    "task_params": _case_task_params,
    "mined_latent": _case_mined_latent,
    "image_path": _case_image_path,
}


def run_case(name: str, instances: int = 50, seed: int = 0, max_redraws: int = 200) -> CaseResult:
    gen = torch.Generator().manual_seed(seed)
    worst, done, redraws = 0.0, 0, 0
    while done < instances:
        fn, inputs, wrt = CASES[name](gen)
        try:
            err = check_instance(fn, inputs, wrt)
        except KinkCrossed:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"{name}: too many instances straddle a kink")
            continue
        worst = max(worst, err)
        done += 1
    return CaseResult(name, done, redraws, worst)


def run_all(instances: int = 50, seed: int = 0, names: Sequence[str] | None = None) -> Iterator[CaseResult]:
    for i, name in enumerate(names or CASES):
        yield run_case(name, instances, seed + i)


# ---------------------------------------------------------------------------
# mutation hook: a deliberately wrong backward rule must be caught


class _LeakyBackwardRelu(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.relu(x)

    @staticmethod
    def backward(ctx, g):
        return g


def _broken_relu(x):
    nc._note_kink(x > 0)
    return _LeakyBackwardRelu.apply(x)


MUTATIONS = {"relu": ("relu", _broken_relu)}


@contextmanager
def mutated(kind: str | None):
    """Temporarily swap a primitive for one with an incorrect gradient."""
    if kind is None:
        yield
        return
    if kind not in MUTATIONS:
        raise ValueError(f"unknown mutation {kind!r}")
    attr, replacement = MUTATIONS[kind]
    original = getattr(nc, attr)
    setattr(nc, attr, replacement)
    try:
        yield
    finally:
        setattr(nc, attr, original)


def main_report(instances: int = 50, seed: int = 0, mutate: str | None = None,
                out=print) -> bool:
    start = time.perf_counter()
    ok = True
    with mutated(mutate):
        for res in run_all(instances, seed):
            ok &= res.passed
            out(f"{res.name:22s} instances {res.instances:3d}  redrawn {res.redraws:3d}  "
                f"max rel err {res.max_rel_error:.3e}  {'ok' if res.passed else 'FAIL'}")
    out(f"elapsed {time.perf_counter() - start:.1f} s")
    return ok
