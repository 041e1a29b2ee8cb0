"""End-to-end stages shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from . import numcore as nc
from .data import (AnchorSample, LabeledDataset, apply_shift, batches, gen_style_corpus, load_idx,
                   split_anchor)
from .errors import ConfigError
from .io import RunConfig
from .miner import (STRATEGIES, MiningConfig, _run, accuracy, predict_logits)
from .models import (Generator, build_generator, build_source_classifier, build_task_model,
                     freeze)
from .rain import RainWeights, calibrate_gain, train_rain

logger = logging.getLogger(__name__)


@dataclass
class Splits:
    source: LabeledDataset
    val: LabeledDataset
    anchor: AnchorSample
    heldout: LabeledDataset

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.source.images, self.source.labels, self.anchor.image,
                    self.heldout.images, self.heldout.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def prepare_data(cfg: RunConfig) -> Splits:
    """Source / source-validation / anchor / held-out target splits from the IDX pair."""
    if not cfg.source_images or not cfg.source_labels:
        raise ConfigError("source_images", "path to the IDX image and label files is required")
    for key in ("source_images", "source_labels"):
        if not Path(getattr(cfg, key)).is_file():
            raise ConfigError(key, f"no such file: {getattr(cfg, key)}")
    ds = load_idx(cfg.source_images, cfg.source_labels, side=cfg.side, n_classes=cfg.n_classes)
    need = cfg.n_source + cfg.n_val + cfg.n_heldout + 1
    if len(ds) < need:
        raise ConfigError("n_source", f"needs {need} images, file has {len(ds)}")
    source = ds.subset(np.arange(cfg.n_source))
    val = ds.subset(np.arange(cfg.n_source, cfg.n_source + cfg.n_val), split="heldout")
    pool = ds.subset(np.arange(cfg.n_source + cfg.n_val, need), split="heldout")
    anchor, heldout = split_anchor(apply_shift(pool, cfg.shift_spec()), cfg.shift_seed)
    return Splits(source, val, anchor, heldout)


def pretrain_encoder(cfg: RunConfig, splits: Splits):
    """Train the source classifier; its trunk becomes the frozen stylizer encoder.

    Returns ``(classifier, validation accuracy)``.
    """
    clf = build_source_classifier(cfg.net_config(), cfg.seed)
    params = nc.ParamSet.from_module(clf)
    spec = nc.ScheduleSpec(cfg.pretrain_lr, max(1, cfg.pretrain_iters // 20), cfg.pretrain_iters)
    it = batches(splits.source.images, splits.source.labels, min(64, len(splits.source)), cfg.seed)
    for step in range(cfg.pretrain_iters):
        xb, yb = next(it)
        loss = nc.softmax_cross_entropy(clf(torch.from_numpy(xb)), torch.from_numpy(yb))
        params.set_grads(nc.grad_eval(loss, params.tensors()))
        nc.sgd_step(params, nc.learning_rate(spec, step), 0.9, 5e-4)
    with torch.no_grad():
        logits = torch.cat([clf(torch.from_numpy(splits.val.images[k:k + 256]))
                            for k in range(0, len(splits.val), 256)]).numpy()
    return clf, accuracy(logits, splits.val.labels) if len(splits.val) else float("nan")


def train_stylizer(cfg: RunConfig, encoder: torch.nn.Module, splits: Splits):
    """Returns ``(frozen trained G, loss rows)``."""
    G = build_generator(cfg.net_config(), cfg.seed)
    G.encoder.load_state_dict(encoder.state_dict())
    freeze(G.encoder)
    corpus = gen_style_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.side)
    calibrate_gain(G, torch.from_numpy(corpus))
    schedule = nc.ScheduleSpec(cfg.rain_lr, cfg.rain_warmup, cfg.rain_iters)
    weights = RainWeights(cfg.lambda_s, cfg.lambda_k, cfg.lambda_r, cfg.lambda_id)
    G, rows = train_rain(G, torch.from_numpy(splits.source.images), torch.from_numpy(corpus),
                         weights, schedule, seed=cfg.seed, batch_size=cfg.rain_batch)
    freeze(G)
    return G, rows


def mining_config(cfg: RunConfig, seed: int | None = None) -> MiningConfig:
    return MiningConfig(alpha=cfg.alpha, beta=cfg.beta, depth_n=cfg.depth_n,
                        lam=cfg.lambda_consist, batch_size=cfg.batch_size,
                        total_iters=cfg.total_iters, styles_per_content=cfg.styles_per_content,
                        seed=cfg.seed if seed is None else seed, warmup_iters=cfg.warmup_iters,
                        power=cfg.power, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                        consist_mode=cfg.consist_mode)


def run_strategy(cfg: RunConfig, G: Generator | None, splits: Splits, strategy: str,
                 seed: int | None = None):
    """Train a task model with ``strategy``; returns ``(model, log rows, target accuracy)``."""
    seed = cfg.seed if seed is None else seed
    M = build_task_model(cfg.net_config(), seed)
    M, rows = _run(M, G, splits.source.images, splits.source.labels, splits.anchor,
                   mining_config(cfg, seed), strategy)
    acc = accuracy(predict_logits(M, splits.heldout.images), splits.heldout.labels)
    return M, rows, acc


@dataclass
class StrategyReport:
    seeds: List[int]
    accuracy: Dict[str, List[float]] = field(default_factory=dict)
    fingerprint: str = ""
    stylizer_fingerprint: str = ""

    def median(self, strategy: str) -> float:
        return statistics.median(self.accuracy[strategy])

    def verdict(self, margin_anchored: float = 0.01, margin_source: float = 0.05) -> Dict[str, bool]:
        asm = self.median("asm")
        out = {
            "asm_beats_anchored": asm >= self.median("anchored") + margin_anchored,
            "asm_beats_source_only": asm >= self.median("source_only") + margin_source,
        }
        out["passed"] = all(out.values())
        return out

    def rows(self):
        out = []
        for strategy in STRATEGIES:
            for seed, acc in zip(self.seeds, self.accuracy.get(strategy, [])):
                out.append([strategy, seed, acc])
        return out

    def summary(self) -> str:
        lines = [f"data {self.fingerprint}  stylizer {self.stylizer_fingerprint}  seeds {self.seeds}"]
        for s in STRATEGIES:
            if s in self.accuracy:
                accs = " ".join(f"{a:.4f}" for a in self.accuracy[s])
                lines.append(f"{s:12s} median {self.median(s):.4f}  [{accs}]")
        v = self.verdict()
        lines.append(f"random vs anchored (reported only): "
                     f"{self.median('random') - self.median('anchored'):+.4f}")
        lines.append(f"ASM >= anchored + 0.01: {'PASS' if v['asm_beats_anchored'] else 'FAIL'}")
        lines.append(f"ASM >= source_only + 0.05: {'PASS' if v['asm_beats_source_only'] else 'FAIL'}")
        return "\n".join(lines)


def params_fingerprint(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for _, p in module.named_parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()[:16]


def compare_strategies(cfg: RunConfig, G: Generator, splits: Splits, seeds=None,
                       log_dir: Path | None = None) -> StrategyReport:
    from .io import write_metrics
    from .miner import MINING_LOG_HEADER

    seeds = list(cfg.seeds if seeds is None else seeds)
    report = StrategyReport(seeds, fingerprint=splits.fingerprint(),
                            stylizer_fingerprint=params_fingerprint(G))
    for strategy in STRATEGIES:
        report.accuracy[strategy] = []
        for seed in seeds:
            _, rows, acc = run_strategy(cfg, G, splits, strategy, seed)
            report.accuracy[strategy].append(acc)
            logger.info("%s seed %d target accuracy %.4f", strategy, seed, acc)
            if log_dir is not None:
                path = Path(log_dir) / f"log_{strategy}_seed{seed}.csv"
                path.unlink(missing_ok=True)
                write_metrics(path, MINING_LOG_HEADER, rows)
    return report
