"""Checkpoints, run configuration, metric CSVs and PPM previews."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, FormatError
from .numcore import ParamSet

CKPT_MAGIC = b"ASMC"
CKPT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_TAGS = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamSet | Mapping[str, torch.Tensor]) -> None:
    """Write a named tensor table; a ``ParamSet`` also stores its momentum buffers."""
    table = params.state() if isinstance(params, ParamSet) else OrderedDict(params)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(table))]
    for name, t in table.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        tag, np_dtype = _DTYPES[t.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", tag, t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.numpy().astype(np_dtype, copy=False).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def _take(buf, off, n, what):
    if off + n > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
    return buf[off:off + n], off + n


def read_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    buf = Path(path).read_bytes()
    head, off = _take(buf, 0, 12, "header")
    if head[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, count = struct.unpack_from("<II", head, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    table = OrderedDict()
    for _ in range(count):
        raw, off = _take(buf, off, 2, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, nlen, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=off - nlen) from None
        if name in table:
            raise FormatError(f"duplicate tensor name {name!r}", offset=off - nlen)
        raw, off = _take(buf, off, 2, "dtype/rank")
        tag, rank = struct.unpack("<BB", raw)
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag}", offset=off - 2)
        raw, off = _take(buf, off, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw)
        dtype, np_dtype = _TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        raw, off = _take(buf, off, nbytes, f"payload of {name!r}")
        arr = np.frombuffer(raw, np_dtype).reshape(dims).astype(np_dtype[1:])
        table[name] = torch.from_numpy(arr.copy())
    if off != len(buf):
        raise FormatError("trailing bytes after last tensor", offset=off)
    return table


def load_checkpoint(path) -> ParamSet:
    """Load a checkpoint as a ``ParamSet`` (momentum buffers restored)."""
    table = read_checkpoint(path)
    params = OrderedDict((n, t) for n, t in table.items() if not n.startswith("momentum/"))
    momentum = {n[len("momentum/"):]: t for n, t in table.items() if n.startswith("momentum/")}
    return ParamSet(params, momentum=momentum)


def module_state(module: torch.nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Parameters and buffers of ``module`` under ``prefix``."""
    return OrderedDict((prefix + n, t.detach()) for n, t in module.state_dict().items())


def load_module_state(module: torch.nn.Module, table: Mapping[str, torch.Tensor],
                      prefix: str = "") -> None:
    state = {n[len(prefix):]: t for n, t in table.items()
             if n.startswith(prefix) and not n.startswith("momentum/")}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match the network: {exc}", offset=0) from None


# ---------------------------------------------------------------------------
# run configuration


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit(v):
    return 0.0 <= v <= 1.0


@dataclass
class RunConfig:
    """Every tunable of a run, as one flat key/value document."""

    # networks
    channels: int = 64
    latent_dim: int = 16
    n_classes: int = 10
    feat_dim: int = 128
    side: int = 32
    vae_hidden: int = 64
    task_width: int = 32
    # stylizer training
    lambda_s: float = 1.0
    lambda_k: float = 1.0
    lambda_r: float = 5.0
    lambda_id: float = 1000.0
    rain_iters: int = 2000
    rain_warmup: int = 100
    rain_lr: float = 1e-3
    rain_batch: int = 8
    corpus_size: int = 512
    corpus_seed: int = 0
    # encoder pretraining
    pretrain_iters: int = 600
    pretrain_lr: float = 0.05
    # adversarial mining / task model
    strategy: str = "asm"
    alpha: float = 0.01
    beta: float = 0.05
    depth_n: int = 5
    lambda_consist: float = 2e-4
    consist_mode: str = "group"
    batch_size: int = 64
    total_iters: int = 3000
    styles_per_content: int = 2
    warmup_iters: int = 100
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # data
    source_images: str = ""
    source_labels: str = ""
    n_source: int = 2000
    n_heldout: int = 500
    n_val: int = 500
    shift_hue_deg: float = 60.0
    shift_gain: list = dataclasses.field(default_factory=lambda: [0.8, 0.9, 0.7])
    shift_bias: list = dataclasses.field(default_factory=lambda: [0.1, 0.05, 0.15])
    shift_texture: float = 0.85
    shift_noise: float = 0.04
    shift_hue_jitter: float = 60.0
    shift_gain_jitter: float = 0.15
    shift_bias_jitter: float = 0.1
    shift_invert_prob: float = 0.3
    shift_seed: int = 7
    # run
    seed: int = 0
    seeds: list = dataclasses.field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    checkpoint: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def shift_spec(self):
        from .data import ShiftSpec
        return ShiftSpec(hue_deg=self.shift_hue_deg, gain=tuple(self.shift_gain),
                         bias=tuple(self.shift_bias), texture_strength=self.shift_texture,
                         noise_std=self.shift_noise, seed=self.shift_seed,
                         hue_jitter_deg=self.shift_hue_jitter, gain_jitter=self.shift_gain_jitter,
                         bias_jitter=self.shift_bias_jitter, invert_prob=self.shift_invert_prob)

    def net_config(self):
        from .models import NetConfig
        return NetConfig(channels=self.channels, latent_dim=self.latent_dim,
                         n_classes=self.n_classes, feat_dim=self.feat_dim, side=self.side,
                         vae_hidden=self.vae_hidden, task_width=self.task_width)


_RANGES = {
    **{k: _positive for k in ("channels", "latent_dim", "n_classes", "feat_dim", "side",
                              "vae_hidden", "task_width", "rain_iters", "rain_lr", "rain_batch",
                              "corpus_size", "pretrain_iters", "pretrain_lr", "alpha",
                              "depth_n", "batch_size", "total_iters", "power", "n_source",
                              "n_heldout")},
    **{k: _non_negative for k in ("lambda_s", "lambda_k", "lambda_r", "lambda_id", "lambda_consist", "beta",
                                  "rain_warmup", "warmup_iters", "weight_decay", "n_val",
                                  "shift_noise", "shift_gain_jitter", "shift_bias_jitter",
                                  "corpus_seed", "shift_seed", "seed")},
    **{k: _unit for k in ("momentum", "shift_texture", "shift_invert_prob")},
    "styles_per_content": lambda v: v >= 2,
    "side": lambda v: v > 0 and v % 4 == 0,
    "channels": lambda v: v > 0 and v % 4 == 0,
    "strategy": lambda v: v in ("asm", "anchored", "random", "source_only"),
    "consist_mode": lambda v: v in ("group", "batch"),
    "shift_gain": lambda v: len(v) == 3,
    "shift_bias": lambda v: len(v) == 3,
    "seeds": lambda v: len(v) >= 1 and all(s >= 0 for s in v),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    kind = _FIELD_TYPES[key]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if not np.isfinite(value):
            raise ConfigError(key, "must be finite")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if not isinstance(value, list):
        raise ConfigError(key, f"expected a list, got {value!r}")
    want_int = key == "seeds"
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (want_int and not isinstance(v, int)):
            raise ConfigError(key, f"bad list element {v!r}")
        out.append(v if want_int else float(v))
    return out


def config_from_dict(doc: Mapping) -> RunConfig:
    values = {}
    for key, value in doc.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        value = _coerce(key, value)
        check = _RANGES.get(key)
        if check is not None and not check(value):
            raise ConfigError(key, f"value {value!r} out of range")
        values[key] = value
    cfg = RunConfig(**values)
    if cfg.warmup_iters >= cfg.total_iters * cfg.depth_n:
        raise ConfigError("warmup_iters", "must be smaller than the number of task-model updates")
    if cfg.rain_warmup >= cfg.rain_iters:
        raise ConfigError("rain_warmup", "must be smaller than rain_iters")
    if cfg.batch_size % cfg.styles_per_content:
        raise ConfigError("batch_size", "must be divisible by styles_per_content")
    return cfg


def parse_config(source=None) -> RunConfig:
    """Parse a flat JSON object from a path or a text; missing keys keep defaults."""
    if source is None:
        return RunConfig()
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")
                                    and source.strip() and Path(source).exists()):
        text = Path(source).read_text()
    if not text.strip():
        return config_from_dict({})
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "expected a flat JSON object")
    return config_from_dict(doc)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def parse_override(key: str, text: str):
    """Turn a ``--key=value`` string into the JSON value for ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown key")
    kind = _FIELD_TYPES[key]
    if kind == "str":
        return text
    if kind == "list":
        items = [s for s in text.split(",") if s.strip()]
        try:
            return [json.loads(s) for s in items]
        except json.JSONDecodeError:
            raise ConfigError(key, f"bad list {text!r}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(key, f"cannot parse {text!r}") from None


# ---------------------------------------------------------------------------
# metrics and previews


def format_number(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_metrics(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Append rows to a CSV, writing ``header`` only when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, newline="") as fh:
            existing = next(csv.reader(fh), None)
        if existing != list(header):
            raise FormatError(f"{path} has header {existing}, expected {list(header)}", offset=0)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            writer.writerow([format_number(v) for v in row])


def write_ppm(path, image) -> None:
    """Binary P6 PPM from a ``(3, H, W)`` image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    _, h, w = img.shape
    pix = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise FormatError("not a binary P6 PPM", offset=0)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=m.start(3))
    data = buf[m.end():]
    if len(data) != w * h * 3:
        raise FormatError("PPM payload size mismatch", offset=m.end())
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
