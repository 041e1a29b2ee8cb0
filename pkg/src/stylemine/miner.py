"""Adversarial style mining.

The task model descends on its loss while the style latent of every content
image ascends on the same loss, starting from the style of the one target
sample. Baselines re-draw the latent instead of ascending it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from ._validation import check_images, check_labels
from .data import AnchorSample, batches
from .errors import ContractError, DivergenceError
from .models import (Generator, NetConfig, StylePosterior, TaskModel, build_task_model,
                     encode, task_forward, vae_encode)
from .rain import sample_latent, style_code, stylize_features

logger = logging.getLogger(__name__)

STRATEGIES = ("asm", "anchored", "random", "source_only")
MINING_LOG_HEADER = ["outer_iter", "depth", "strategy", "l_task", "l_consist", "l_m", "lr"]
DIVERGENCE_LIMIT = 50.0


@dataclass(frozen=True)
class MiningConfig:
    alpha: float = 0.01             # base learning rate of the task model
    beta: float = 0.05              # latent ascent step
    depth_n: int = 5
    lam: float = 2e-4               # consistency weight
    batch_size: int = 64
    total_iters: int = 3000
    styles_per_content: int = 2
    seed: int = 0
    warmup_iters: int = 100
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    consist_mode: str = "group"

    def __post_init__(self):
        if self.depth_n < 1:
            raise ContractError("depth_n must be >= 1")
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        if self.alpha <= 0 or self.total_iters < 1:
            raise ContractError("alpha and total_iters must be positive")
        if self.styles_per_content < 2:
            raise ContractError("styles_per_content must be >= 2")
        if self.batch_size % self.styles_per_content:
            raise ContractError("batch_size must be divisible by styles_per_content")
        if self.consist_mode not in ("group", "batch"):
            raise ContractError(f"unknown consist_mode {self.consist_mode!r}")

    @property
    def contents_per_batch(self) -> int:
        return self.batch_size // self.styles_per_content

    def schedule(self) -> nc.ScheduleSpec:
        return nc.ScheduleSpec(self.alpha, self.warmup_iters,
                               self.total_iters * self.depth_n, self.power)


@dataclass
class ConsistencyGroup:
    """Penultimate features of one content under several styles, ``(S, F)``."""

    z: torch.Tensor

    @property
    def z_bar(self) -> torch.Tensor:
        return self.z.mean(dim=0)


# ---------------------------------------------------------------------------
# losses


def anchor_posterior(G: Generator, x_T) -> StylePosterior:
    """Style posterior of the single target image; fields have shape ``(d,)``."""
    G.require_trained()
    if isinstance(x_T, AnchorSample):
        x_T = x_T.batch()
    x = torch.as_tensor(np.asarray(x_T), dtype=next(G.parameters()).dtype)
    if x.dim() == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ContractError("exactly one target sample is allowed")
    with torch.no_grad():
        post = vae_encode(G, style_code(G, x))
    return StylePosterior(post.psi[0], post.xi[0])


def task_loss(M: TaskModel, x, y) -> torch.Tensor:
    logits, _ = task_forward(M, x)
    return nc.softmax_cross_entropy(logits, y)


def consistency_loss(groups) -> torch.Tensor:
    """Mean over groups of the average distance of each row to the group mean.

    ``groups`` is a list of ``ConsistencyGroup`` or a ``(G, S, F)`` tensor.
    """
    if isinstance(groups, torch.Tensor):
        z = groups
    else:
        groups = list(groups)
        if not groups:
            raise ContractError("no consistency groups")
        z = torch.stack([g.z for g in groups])
    if z.dim() != 3 or z.shape[1] < 2:
        raise ContractError(f"each group needs at least two rows, got shape {tuple(z.shape)}")
    dev = nc.l2_norm(z - z.mean(dim=1, keepdim=True))
    return dev.mean(dim=1).mean()


def _group(z, styles, mode):
    # rows are laid out style-major: row s * n + c holds content c under style s
    if mode == "batch":
        return z[None]
    return z.reshape(styles, -1, z.shape[1]).transpose(0, 1)


class MLoss(NamedTuple):
    total: torch.Tensor
    task: torch.Tensor
    consist: torch.Tensor


def total_loss(M: TaskModel, x_styled, labels, lam: float, styles: int = 2,
               mode: str = "group") -> MLoss:
    """Task loss over all stylized replicas plus ``lam`` times the consistency loss."""
    logits, z = task_forward(M, x_styled)
    l_task = nc.softmax_cross_entropy(logits, labels)
    l_con = consistency_loss(_group(z, styles, mode))
    return MLoss(l_task + lam * l_con, l_task, l_con)


# ---------------------------------------------------------------------------
# one mining step


class StepResult(NamedTuple):
    eps: torch.Tensor
    loss: MLoss


def mine_step(M: TaskModel, G: Generator | None, params: nc.ParamSet, f_c, y, eps, companions,
              lr: float, beta: float, cfg: MiningConfig, *, iteration: int | None = None,
              x_plain=None) -> StepResult:
    """One coupled update from a single forward pass.

    ``f_c`` are encoder features of the ``n`` content images, ``y`` the
    labels repeated once per style, ``eps`` the ``(n, d)`` mined latents and
    ``companions`` a list of ``(n, d)`` latents for the remaining styles.
    ``x_plain`` (with ``G=None``) trains on unstylized images instead.
    Returns the ascended latents and the loss evaluated before the updates.
    """
    if G is None:
        x = x_plain
        eps_leaf = None
    else:
        if not bool(torch.isfinite(eps).all()):
            raise DivergenceError("non-finite style latent", iteration=iteration, epsilon=eps)
        eps_leaf = eps.detach().requires_grad_(beta > 0)
        latents = torch.cat([eps_leaf, *companions], dim=0)
        x = stylize_features(G, f_c.repeat(len(companions) + 1, 1, 1, 1), latents)
    loss = total_loss(M, x, y, cfg.lam, cfg.styles_per_content, cfg.consist_mode)
    value = float(loss.total.detach())
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"task-model loss {value} at iteration {iteration}", iteration=iteration,
            epsilon=None if eps is None else eps.detach().clone())
    wrt = params.tensors() + ([eps_leaf] if eps_leaf is not None and beta > 0 else [])
    grads = nc.grad_eval(loss.total, wrt)
    params.set_grads(grads[:len(params.params)])
    nc.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
    if eps_leaf is None:
        new_eps = eps
    elif beta > 0:
        new_eps = (eps_leaf + beta * grads[-1]).detach()
    else:
        new_eps = eps.detach()
    return StepResult(new_eps, MLoss(*(t.detach() for t in loss)))


# ---------------------------------------------------------------------------
# training loops


def _draw(post: StylePosterior | None, n, gen, dtype, d):
    eta = torch.randn(n, d, generator=gen, dtype=dtype)
    if post is None:
        return eta
    return sample_latent(StylePosterior(post.psi[None], post.xi[None]), eta)


def _run(M: TaskModel, G: Generator | None, images, labels, x_T, cfg: MiningConfig,
         strategy: str, log: list | None = None):
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    dtype = next(M.parameters()).dtype
    n = cfg.contents_per_batch
    S = cfg.styles_per_content
    post = None
    if strategy != "source_only":
        if G is None:
            raise ContractError(f"strategy {strategy!r} needs a trained generator")
        G.require_trained()
        if any(p.requires_grad for p in G.parameters()):
            raise ContractError("the generator must be frozen")
        post = anchor_posterior(G, x_T)
        d = post.psi.shape[0]
    params = nc.ParamSet.from_module(M)
    schedule = cfg.schedule()
    noise = torch.Generator().manual_seed(int(cfg.seed))
    it_batches = batches(images, labels, n, cfg.seed)
    rows = [] if log is None else log
    step = 0
    for outer in range(1, cfg.total_iters + 1):
        xb, yb = next(it_batches)
        xb = torch.as_tensor(xb, dtype=dtype)
        y = torch.as_tensor(yb).repeat(S)
        f_c = x_plain = eps = None
        if strategy == "source_only":
            x_plain = xb.repeat(S, 1, 1, 1)
        else:
            with torch.no_grad():
                f_c = encode(G, xb)
            if strategy == "asm":
                eps = _draw(post, n, noise, dtype, d)
        for depth in range(1, cfg.depth_n + 1):
            companions = []
            if strategy == "anchored":
                eps = _draw(post, n, noise, dtype, d)
            elif strategy == "random":
                eps = _draw(None, n, noise, dtype, d)
            if strategy != "source_only":
                comp_post = None if strategy == "random" else post
                companions = [_draw(comp_post, n, noise, dtype, d) for _ in range(S - 1)]
            lr = nc.learning_rate(schedule, step)
            beta = cfg.beta if strategy == "asm" else 0.0
            res = mine_step(M, None if strategy == "source_only" else G, params, f_c, y, eps, companions, lr, beta, cfg,
                            iteration=outer, x_plain=x_plain)
            eps = res.eps
            step += 1
            rows.append([outer, depth, strategy, float(res.loss.task),
                         float(res.loss.consist), float(res.loss.total), lr])
        if outer % 500 == 0:
            logger.info("%s outer %d l_m %.4f", strategy, outer, rows[-1][5])
    return M, rows


def train_asm(M: TaskModel, G: Generator, images, labels, x_T, cfg: MiningConfig, log=None):
    """Mine styles adversarially while training ``M``. Returns ``(M, log rows)``."""
    return _run(M, G, images, labels, x_T, cfg, "asm", log)


def baseline_strategy(kind: str, M: TaskModel, G: Generator | None, images, labels, x_T,
                      cfg: MiningConfig, log=None):
    """Same pipeline with latents re-drawn each step (``anchored`` or ``random``),
    or without stylization at all (``source_only``)."""
    if kind not in ("anchored", "random", "source_only"):
        raise ContractError(f"unknown baseline {kind!r}")
    return _run(M, G, images, labels, x_T, cfg, kind, log)


def predict_logits(M: TaskModel, images, batch_size: int = 256) -> np.ndarray:
    dtype = next(M.parameters()).dtype
    out = []
    with torch.no_grad():
        for k in range(0, len(images), batch_size):
            x = torch.as_tensor(images[k:k + batch_size], dtype=dtype)
            out.append(task_forward(M, x)[0].numpy())
    return np.concatenate(out) if out else np.zeros((0, M.cfg.n_classes))


def embed(M: TaskModel, images, batch_size: int = 256) -> np.ndarray:
    dtype = next(M.parameters()).dtype
    out = []
    with torch.no_grad():
        for k in range(0, len(images), batch_size):
            out.append(task_forward(M, torch.as_tensor(images[k:k + batch_size], dtype=dtype))[1].numpy())
    return np.concatenate(out) if out else np.zeros((0, M.cfg.feat_dim))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ContractError(f"logits {logits.shape} do not match {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label outside the model's class range")
    if not len(labels):
        raise ContractError("empty evaluation set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# estimator


class ASMClassifier(ClassifierMixin, BaseEstimator):
    """Task classifier adapted to a target domain from one unlabeled sample.

    ``fit(X, y, generator=G, anchor=x_T)`` trains on labeled source images
    ``X``; ``G`` is a trained stylizer (ignored for ``source_only``).
    ``transform`` returns penultimate features.
    """

    def __init__(self, strategy="asm", alpha=0.01, beta=0.05, depth_n=5, lambda_consist=2e-4,
                 batch_size=64, total_iters=3000, styles_per_content=2, warmup_iters=100,
                 power=0.9, momentum=0.9, weight_decay=5e-4, consist_mode="group",
                 n_classes=10, feat_dim=128, task_width=32, random_state=0):
        self.strategy = strategy
        self.alpha = alpha
        self.beta = beta
        self.depth_n = depth_n
        self.lambda_consist = lambda_consist
        self.batch_size = batch_size
        self.total_iters = total_iters
        self.styles_per_content = styles_per_content
        self.warmup_iters = warmup_iters
        self.power = power
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.consist_mode = consist_mode
        self.n_classes = n_classes
        self.feat_dim = feat_dim
        self.task_width = task_width
        self.random_state = random_state

    def mining_config(self) -> MiningConfig:
        return MiningConfig(alpha=self.alpha, beta=self.beta, depth_n=self.depth_n,
                            lam=self.lambda_consist, batch_size=self.batch_size,
                            total_iters=self.total_iters,
                            styles_per_content=self.styles_per_content, seed=self.random_state,
                            warmup_iters=self.warmup_iters, power=self.power,
                            momentum=self.momentum, weight_decay=self.weight_decay,
                            consist_mode=self.consist_mode)

    def fit(self, X, y, *, generator=None, anchor=None):
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.strategy != "source_only" and anchor is None:
            raise ContractError("a single target image is required")
        cfg = self.mining_config()
        net = NetConfig(n_classes=self.n_classes, feat_dim=self.feat_dim, side=X.shape[-1],
                        task_width=self.task_width)
        M = build_task_model(net, self.random_state)
        self.model_, self.log_ = _run(M, generator, X, y, anchor, cfg, self.strategy)
        self.classes_ = np.arange(self.n_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_images(X, self.model_.cfg.side))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_, check_images(X, self.model_.cfg.side))
