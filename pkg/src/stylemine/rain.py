"""Random AdaIN: AdaIN stylization whose style code comes from a small VAE.

A style is the per-channel mean and std of encoder features. The VAE maps
that code to a Gaussian latent so new styles can be produced from a latent
vector instead of a style image, and the path latent -> image is
differentiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from ._validation import check_images
from .errors import ContractError, InvalidShapeError
from .models import (Generator, NetConfig, StylePosterior, build_generator, decode,
                     encode, freeze, vae_decode, vae_encode)
from .numcore import EPS_STD, ChannelStats, channel_stats

logger = logging.getLogger(__name__)

RAIN_LOG_HEADER = ["iter", "l_c", "l_s", "l_kl", "l_rec", "total"]


@dataclass(frozen=True)
class RainWeights:
    lambda_s: float = 1.0
    lambda_k: float = 1.0
    lambda_r: float = 5.0
    # pixel reconstruction of undecorated features; keeps the decoder anchored
    # to image space when the encoder is a small classifier trunk
    lambda_id: float = 1000.0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_k", "lambda_r", "lambda_id"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


def adain(f_c: torch.Tensor, target: ChannelStats, eps: float = EPS_STD) -> torch.Tensor:
    """Re-normalise every channel of ``f_c`` to the target mean and std."""
    if f_c.dim() != 4:
        raise InvalidShapeError(f"expected (B, C, H, W), got {tuple(f_c.shape)}")
    mu_t, sigma_t = target.mu, target.sigma
    if mu_t.dim() == 1:
        mu_t, sigma_t = mu_t[None], sigma_t[None]
    if mu_t.shape[1] != f_c.shape[1]:
        raise InvalidShapeError(
            f"feature map has {f_c.shape[1]} channels, target stats have {mu_t.shape[1]}")
    src = channel_stats(f_c, eps)
    normed = (f_c - src.mu[:, :, None, None]) / src.sigma[:, :, None, None]
    return sigma_t[:, :, None, None] * normed + mu_t[:, :, None, None]


def content_loss(f_out: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if f_out.shape != t.shape:
        raise InvalidShapeError(f"content shapes differ: {tuple(f_out.shape)} vs {tuple(t.shape)}")
    return (f_out - t).pow(2).mean()


def style_loss(out_stats: Sequence[ChannelStats], style_stats: Sequence[ChannelStats]) -> torch.Tensor:
    """Sum over stages of ``|mu_out - mu_style| + |sigma_out - sigma_style|``.

    Norms are Euclidean over channels and averaged over the batch.
    """
    if len(out_stats) != len(style_stats):
        raise InvalidShapeError("need one style statistic per encoder stage")
    total = 0.0
    for o, s in zip(out_stats, style_stats):
        if o.mu.shape != s.mu.shape:
            raise InvalidShapeError(f"stage stats differ: {tuple(o.mu.shape)} vs {tuple(s.mu.shape)}")
        total = total + nc.l2_norm(o.mu - s.mu).mean() + nc.l2_norm(o.sigma - s.sigma).mean()
    return total


def kl_loss(p: StylePosterior) -> torch.Tensor:
    """KL of ``N(psi, diag(xi^2))`` from ``N(0, I)``, summed over dims, batch-averaged."""
    if not bool((p.xi > 0).all()):
        raise ContractError("xi must be strictly positive")
    per_dim = 0.5 * (p.psi.pow(2) + p.xi.pow(2) - 1.0 - 2.0 * torch.log(p.xi))
    kl = per_dim.sum(dim=-1)
    return kl.mean() if kl.dim() else kl


def rec_loss(code: torch.Tensor, code_hat: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between style codes (batch-averaged for 2-D input)."""
    if code.shape != code_hat.shape:
        raise ContractError(f"code lengths differ: {tuple(code.shape)} vs {tuple(code_hat.shape)}")
    d = nc.l2_norm(code - code_hat)
    return d.mean() if d.dim() else d


def sample_latent(p: StylePosterior, eta: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``psi + xi * eta``."""
    if not bool((p.xi > 0).all()):
        raise ContractError("xi must be strictly positive")
    return p.psi + p.xi * eta


def style_code(G: Generator, x: torch.Tensor) -> torch.Tensor:
    """``(B, 2C)`` concatenation of encoder channel means and stds."""
    return channel_stats(encode(G, x)).code()


def stylize_features(G: Generator, f_c: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Decode content features re-styled by the latent ``eps``."""
    if eps.dim() == 1:
        eps = eps[None]
    code_hat = vae_decode(G, eps)
    if code_hat.shape[0] == 1 and f_c.shape[0] != 1:
        code_hat = code_hat.expand(f_c.shape[0], -1)
    return decode(G, adain(f_c, ChannelStats.from_code(code_hat)))


def stylize(G: Generator, x_content: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    G.require_trained()
    return stylize_features(G, encode(G, x_content), eps)


# ---------------------------------------------------------------------------
# training


def calibrate_gain(G: Generator, style_corpus: torch.Tensor, target_std: float = 1.0) -> float:
    """Set the encoder output gain so style-code entries vary by ``target_std``
    (root-mean-square over code dimensions) across the corpus.

    AdaIN is scale-equivariant, so the gain only changes how strongly the VAE
    reconstruction term weighs against the KL term.
    """
    G.encoder.gain.fill_(1.0)
    with torch.no_grad():
        codes = style_code(G, style_corpus.to(G.encoder.gain.dtype))
    # RMS rather than median: channels that never fire on textures have zero spread
    spread = float(codes.var(dim=0).mean().sqrt()) if len(codes) > 1 else 0.0
    gain = target_std / spread if spread > 0 else 1.0
    G.encoder.gain.fill_(gain)
    return gain


def _rain_losses(G, x_c, x_s, eta, weights, use_vae_path):
    with torch.no_grad():
        f_c = encode(G, x_c)
        s_stages = G.encoder.stages(x_s)
    style_stats = [channel_stats(f) for f in s_stages]
    code = style_stats[-1].code()
    zero = x_c.new_zeros(())
    if use_vae_path:
        post = vae_encode(G, code)
        code_hat = vae_decode(G, sample_latent(post, eta))
        l_kl = kl_loss(post)
        l_rec = rec_loss(code, code_hat)
        target = ChannelStats.from_code(code_hat)
    else:
        l_kl = l_rec = zero
        target = style_stats[-1]
    t = adain(f_c, target)
    out = decode(G, t)
    out_stages = G.encoder.stages(out)
    l_c = content_loss(out_stages[-1], t)
    l_s = style_loss([channel_stats(f) for f in out_stages], style_stats)
    total = l_c + weights.lambda_s * l_s + weights.lambda_k * l_kl + weights.lambda_r * l_rec
    if weights.lambda_id:
        x_id = torch.cat([x_c, x_s])
        l_id = (decode(G, torch.cat([f_c, s_stages[-1]])) - x_id).pow(2).mean()
        total = total + weights.lambda_id * l_id
    return total, (l_c, l_s, l_kl, l_rec)


def train_rain(G: Generator, source_images: torch.Tensor, style_corpus: torch.Tensor,
               weights: RainWeights = RainWeights(), schedule: nc.ScheduleSpec | None = None,
               seed: int = 0, batch_size: int = 8, use_vae_path: bool = True):
    """Train decoder and style VAE with a frozen encoder.

    Returns ``(G, rows)`` where each row is ``[iter, l_c, l_s, l_kl, l_rec, total]``
    for iterations ``1..max_iters``.
    """
    if len(style_corpus) == 0:
        raise ContractError("style corpus is empty")
    if len(source_images) == 0:
        raise ContractError("no content images")
    if any(p.requires_grad for p in G.encoder.parameters()):
        raise ContractError("the encoder must be frozen before stylizer training")
    schedule = schedule or nc.ScheduleSpec(1e-3, 100, 2000, 0.9)
    params = [p for m in (G.decoder, G.vae_encoder, G.vae_decoder) for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=schedule.base_lr)
    rng = np.random.default_rng(seed)
    noise = torch.Generator().manual_seed(int(seed))
    dtype = next(G.parameters()).dtype
    rows: List[list] = []
    for it in range(1, schedule.max_iters + 1):
        ic = rng.integers(0, len(source_images), batch_size)
        js = rng.integers(0, len(style_corpus), batch_size)
        x_c = torch.as_tensor(source_images[ic], dtype=dtype)
        x_s = torch.as_tensor(style_corpus[js], dtype=dtype)
        eta = torch.randn(batch_size, G.cfg.latent_dim, generator=noise, dtype=dtype)
        total, parts = _rain_losses(G, x_c, x_s, eta, weights, use_vae_path)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite stylizer loss at iteration {it}")
        for group in opt.param_groups:
            group["lr"] = nc.learning_rate(schedule, it)
        opt.zero_grad()
        total.backward()
        opt.step()
        rows.append([it, *(float(v.detach()) for v in parts), float(total.detach())])
        if it % 500 == 0:
            logger.info("rain iter %d total %.4f", it, rows[-1][-1])
    G.mark_trained()
    return G, rows


class RAINStylizer(TransformerMixin, BaseEstimator):
    """Stylizer estimator: ``fit`` on style images, ``transform`` content images.

    ``fit`` takes the style corpus as ``X``, the content images as
    ``content`` and optionally a pretrained encoder module. ``transform``
    re-styles images with a latent ``epsilon`` (drawn from the prior when
    omitted).
    """

    def __init__(self, channels=64, latent_dim=16, side=32, vae_hidden=64,
                 lambda_s=1.0, lambda_k=1.0, lambda_r=5.0, lambda_id=1000.0, n_iters=2000,
                 warmup_iters=100, learning_rate=1e-3, batch_size=8, random_state=0):
        self.channels = channels
        self.latent_dim = latent_dim
        self.side = side
        self.vae_hidden = vae_hidden
        self.lambda_s = lambda_s
        self.lambda_k = lambda_k
        self.lambda_r = lambda_r
        self.lambda_id = lambda_id
        self.n_iters = n_iters
        self.warmup_iters = warmup_iters
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _net_config(self):
        return NetConfig(channels=self.channels, latent_dim=self.latent_dim,
                         side=self.side, vae_hidden=self.vae_hidden)

    def fit(self, X, y=None, *, content=None, encoder=None):
        X = check_images(X, self.side)
        content = X if content is None else check_images(content, self.side)
        G = build_generator(self._net_config(), self.random_state)
        if encoder is not None:
            G.encoder.load_state_dict(encoder.state_dict())
        for p in G.encoder.parameters():
            p.requires_grad_(False)
        calibrate_gain(G, torch.from_numpy(X))
        schedule = nc.ScheduleSpec(self.learning_rate, self.warmup_iters, self.n_iters)
        weights = RainWeights(self.lambda_s, self.lambda_k, self.lambda_r, self.lambda_id)
        self.generator_, self.loss_log_ = train_rain(
            G, torch.from_numpy(content), torch.from_numpy(X), weights, schedule,
            seed=self.random_state, batch_size=self.batch_size)
        freeze(self.generator_)
        return self

    def posterior(self, x) -> StylePosterior:
        """Style posterior ``(psi, xi)`` of each image in ``x``."""
        check_is_fitted(self, "generator_")
        x = torch.from_numpy(check_images(x, self.side))
        with torch.no_grad():
            return vae_encode(self.generator_, style_code(self.generator_, x))

    def transform(self, X, epsilon=None):
        check_is_fitted(self, "generator_")
        X = torch.from_numpy(check_images(X, self.side))
        if epsilon is None:
            gen = torch.Generator().manual_seed(int(self.random_state))
            epsilon = torch.randn(len(X), self.latent_dim, generator=gen)
        epsilon = torch.as_tensor(np.asarray(epsilon, dtype=np.float32))
        with torch.no_grad():
            return stylize(self.generator_, X, epsilon).numpy()
