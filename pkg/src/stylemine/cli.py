"""Command-line entry point.

Every subcommand accepts ``--config PATH`` plus ``--key=value`` overrides for
any configuration key; a flag beats the file, which beats the default.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Sequence

import torch

from . import numcore as nc
from .errors import ConfigError, ContractError, FormatError
from .io import (RunConfig, config_from_dict, load_module_state, module_state, parse_config,
                 parse_override, read_checkpoint, save_checkpoint, serialize_config,
                 write_metrics, write_ppm)

logger = logging.getLogger("stylemine")

EXIT_OK, EXIT_CONTRACT, EXIT_FORMAT, EXIT_VERDICT = 0, 1, 2, 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylemine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat JSON configuration file")
        return sp

    sp = add("make-digits", "render a synthetic digit set as an IDX image/label pair")
    sp.add_argument("--count", type=int, default=3100)
    sp.add_argument("--digit-seed", type=int, default=123)
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels", required=True)

    add("pretrain-encoder", "train the source classifier whose trunk becomes the encoder")

    sp = add("train-rain", "train the stylizer decoder and style VAE")
    sp.add_argument("--encoder", help="encoder checkpoint (default: <out_dir>/encoder.ckpt)")
    sp.add_argument("--previews", type=int, default=4, help="number of PPM previews")

    sp = add("train-asm", "train a task model with style mining or a baseline")
    sp.add_argument("--generator", help="stylizer checkpoint (default: <out_dir>/generator.ckpt)")

    sp = add("eval", "accuracy of a task-model checkpoint on the held-out target images")

    sp = add("compare-strategies", "run every strategy over several seeds and report the ordering")
    sp.add_argument("--generator", help="stylizer checkpoint (default: <out_dir>/generator.ckpt)")

    sp = add("gradcheck", "finite-difference check of every gradient rule")
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--mutate", choices=["relu"], help="swap in a broken backward rule")
    return p


def _split_overrides(extra: Sequence[str]) -> dict:
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "unexpected argument")
        key, sep, value = tok[2:].partition("=")
        if not sep:
            value = next(it, None)
            if value is None:
                raise ConfigError(key, "missing value")
        key = key.replace("-", "_")
        out[key] = parse_override(key, value)
    return out


def resolve_config(path: str | None, overrides: dict) -> RunConfig:
    base = parse_config(path).to_dict() if path else {}
    base.update(overrides)
    return config_from_dict(base)


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_generator(cfg: RunConfig, path: str | None):
    from .models import build_generator, freeze

    path = Path(path) if path else Path(cfg.out_dir) / "generator.ckpt"
    if not path.is_file():
        raise ConfigError("generator", f"no stylizer checkpoint at {path}")
    G = build_generator(cfg.net_config(), cfg.seed)
    load_module_state(G, read_checkpoint(path))
    G.mark_trained()
    return freeze(G)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_digits(cfg: RunConfig, args) -> int:
    from .data import render_digits, write_idx

    images, labels = render_digits(args.count, args.digit_seed)
    write_idx(args.images, args.labels, images, labels)
    print(f"wrote {len(labels)} digits to {args.images} and {args.labels}")
    return EXIT_OK


def cmd_pretrain_encoder(cfg: RunConfig, args) -> int:
    from .pipeline import prepare_data, pretrain_encoder

    out = _out_dir(cfg)
    clf, acc = pretrain_encoder(cfg, prepare_data(cfg))
    save_checkpoint(out / "encoder.ckpt", module_state(clf.encoder))
    write_metrics_fresh(out / "pretrain.csv", ["seed", "val_accuracy"], [[cfg.seed, acc]])
    print(f"source validation accuracy {acc:.4f}")
    return EXIT_OK


def cmd_train_rain(cfg: RunConfig, args) -> int:
    from .models import build_source_classifier
    from .pipeline import prepare_data, train_stylizer
    from .rain import RAIN_LOG_HEADER, stylize

    out = _out_dir(cfg)
    enc_path = Path(args.encoder) if args.encoder else out / "encoder.ckpt"
    if not enc_path.is_file():
        raise ConfigError("encoder", f"no encoder checkpoint at {enc_path}")
    encoder = build_source_classifier(cfg.net_config(), cfg.seed).encoder
    load_module_state(encoder, read_checkpoint(enc_path))
    splits = prepare_data(cfg)
    G, rows = train_stylizer(cfg, encoder, splits)
    save_checkpoint(out / "generator.ckpt", module_state(G))
    write_metrics_fresh(out / "rain_loss.csv", RAIN_LOG_HEADER, rows)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.from_numpy(splits.source.images[:args.previews])
    eps = torch.randn(len(x), cfg.latent_dim, generator=gen)
    with torch.no_grad():
        styled = stylize(G, x, eps).numpy()
    for k, img in enumerate(styled):
        write_ppm(out / f"preview_{k}.ppm", img)
    first = rows[min(99, len(rows) - 1)][-1]
    print(f"stylizer loss {first:.4f} at iteration {min(100, len(rows))}, "
          f"{rows[-1][-1]:.4f} at iteration {len(rows)}")
    return EXIT_OK


def cmd_train_asm(cfg: RunConfig, args) -> int:
    from .miner import MINING_LOG_HEADER
    from .pipeline import prepare_data, run_strategy

    out = _out_dir(cfg)
    G = None if cfg.strategy == "source_only" else _load_generator(cfg, args.generator)
    M, rows, acc = run_strategy(cfg, G, prepare_data(cfg), cfg.strategy, cfg.seed)
    tag = f"{cfg.strategy}_seed{cfg.seed}"
    save_checkpoint(out / f"task_{tag}.ckpt", module_state(M))
    write_metrics_fresh(out / f"log_{tag}.csv", MINING_LOG_HEADER, rows)
    print(f"{cfg.strategy} seed {cfg.seed}: target accuracy {acc:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .miner import accuracy, embed, predict_logits
    from .models import build_task_model
    from .pipeline import prepare_data

    if not cfg.checkpoint:
        raise ConfigError("checkpoint", "path to a task-model checkpoint is required")
    M = build_task_model(cfg.net_config(), cfg.seed)
    load_module_state(M, read_checkpoint(cfg.checkpoint))
    held = prepare_data(cfg).heldout
    acc = accuracy(predict_logits(M, held.images), held.labels)
    z = embed(M, held.images)
    header = ["label"] + [f"z{k}" for k in range(z.shape[1])]
    rows = [[int(y), *map(float, row)] for y, row in zip(held.labels, z)]
    write_metrics_fresh(_out_dir(cfg) / f"embeddings_{Path(cfg.checkpoint).stem}.csv", header, rows)
    print(f"accuracy {acc:.4f} on {len(held)} held-out target images")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    from .pipeline import compare_strategies, prepare_data

    if len(cfg.seeds) < 3:
        raise ConfigError("seeds", "at least three seeds are required")
    out = _out_dir(cfg)
    G = _load_generator(cfg, args.generator)
    report = compare_strategies(cfg, G, prepare_data(cfg), cfg.seeds, log_dir=out)
    write_metrics_fresh(out / "strategies.csv", ["strategy", "seed", "accuracy"], report.rows())
    summary = report.summary()
    (out / "verdict.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK if report.verdict()["passed"] else EXIT_VERDICT


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import main_report

    ok = main_report(args.instances, cfg.seed, args.mutate)
    return EXIT_OK if ok else EXIT_CONTRACT


def write_metrics_fresh(path: Path, header, rows) -> None:
    """Overwrite ``path`` so repeated runs give identical files."""
    path.unlink(missing_ok=True)
    write_metrics(path, header, rows)


COMMANDS = {
    "make-digits": cmd_make_digits,
    "pretrain-encoder": cmd_pretrain_encoder,
    "train-rain": cmd_train_rain,
    "train-asm": cmd_train_asm,
    "eval": cmd_eval,
    "compare-strategies": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv: List[str] | None = None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    nc.use_deterministic(1)
    try:
        cfg = resolve_config(args.config, _split_overrides(extra))
        if args.verbose:
            logger.info("configuration:\n%s", serialize_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except RuntimeError as exc:
        # divergence and other numerical failures are contract violations at this level
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
