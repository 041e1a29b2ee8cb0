"""Datasets: IDX digit files, synthetic domain shifts, procedural style images."""

from __future__ import annotations

import glob
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence, Tuple

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ASMD_MAGIC = b"ASMD"
ASMD_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    split: str = "train"
    ids: np.ndarray | None = None   # stable per-sample identity, survives subsetting

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    def subset(self, index, split=None) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index],
                              split or self.split, self.ids[index])


@dataclass(frozen=True)
class AnchorSample:
    """The single unlabeled target image available for adaptation."""

    image: np.ndarray           # (3, H, W)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractError(f"an anchor is exactly one (3, H, W) image, got {self.image.shape}")

    def batch(self) -> np.ndarray:
        return self.image[None]


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, magic: int, ndim: int, what: str):
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", offset=len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(buf) < need:
        raise FormatError(f"{what}: truncated header", offset=len(buf))
    return struct.unpack_from(">" + "I" * ndim, buf, 4), need


def parse_idx_images(buf: bytes) -> np.ndarray:
    (n, rows, cols), off = _read_header(buf, IDX_IMAGES_MAGIC, 3, "images")
    size = n * rows * cols
    if len(buf) < off + size:
        raise FormatError(f"images: expected {size} pixel bytes, file ends early", offset=len(buf))
    return np.frombuffer(buf, np.uint8, size, off).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (n,), off = _read_header(buf, IDX_LABELS_MAGIC, 1, "labels")
    if len(buf) < off + n:
        raise FormatError(f"labels: expected {n} label bytes, file ends early", offset=len(buf))
    return np.frombuffer(buf, np.uint8, n, off)


def resize_nearest(images: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``side x side``."""
    rows, cols = images.shape[-2:]
    if (rows, cols) == (side, side):
        return images
    ri = (np.arange(side) * rows) // side
    ci = (np.arange(side) * cols) // side
    return images[..., ri[:, None], ci[None, :]]


def load_idx(images_path, labels_path, side: int | None = None,
             n_classes: int = 10) -> LabeledDataset:
    """Load an IDX image/label pair as 3-channel float images in [0, 1]."""
    raw = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(raw) != len(labels):
        # the label count sits right after the label-file magic
        raise FormatError(f"{len(raw)} images but {len(labels)} labels", offset=4)
    if len(labels) and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise FormatError(f"label {labels[bad]} out of range", offset=8 + bad)
    gray = raw.astype(np.float32) / 255.0
    if side is not None:
        gray = resize_nearest(gray, side)
    images = np.repeat(gray[:, None], 3, axis=1)
    return LabeledDataset(np.ascontiguousarray(images), labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())


# ---------------------------------------------------------------------------
# rendered digits

_FONT_GLOBS = ("/usr/share/fonts/**/*.ttf", "/usr/share/fonts/**/*.otf")


def _font_files():
    files = sorted({f for g in _FONT_GLOBS for f in glob.glob(g, recursive=True)})
    return [f for f in files if "Oblique" not in f and "Italic" not in f] or files


def render_digits(n: int, seed: int, size: int = 28) -> Tuple[np.ndarray, np.ndarray]:
    """Handwriting-like grayscale digits (white on black) rendered from system fonts.

    Each glyph gets a random font, scale, rotation, shear and offset.
    Returns ``(uint8 images (n, size, size), labels (n,))``.
    """
    from PIL import Image, ImageDraw, ImageFilter, ImageFont

    rng = np.random.default_rng(seed)
    fonts = _font_files()
    cache = {}

    def font(i, px):
        key = (i, px)
        if key not in cache:
            cache[key] = (ImageFont.truetype(fonts[i], px) if fonts
                          else ImageFont.load_default(size=px))
        return cache[key]

    big = size * 4
    images = np.zeros((n, size, size), np.uint8)
    labels = rng.integers(0, 10, n)
    for k in range(n):
        px = int(rng.uniform(0.55, 0.8) * big)
        f = font(int(rng.integers(0, max(len(fonts), 1))), px)
        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        draw.text((big / 2, big / 2), str(labels[k]), fill=255, font=f, anchor="mm",
                  stroke_width=int(rng.integers(0, 4)), stroke_fill=255)
        shear = rng.uniform(-0.25, 0.25)
        canvas = canvas.transform((big, big), Image.AFFINE,
                                  (1, shear, -shear * big / 2, 0, 1, 0),
                                  resample=Image.BILINEAR)
        canvas = canvas.rotate(rng.uniform(-15, 15), resample=Image.BILINEAR,
                               translate=tuple(rng.uniform(-0.08, 0.08, 2) * big))
        canvas = canvas.filter(ImageFilter.GaussianBlur(1.0))
        images[k] = np.asarray(canvas.resize((size, size), Image.BILINEAR))
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# procedural textures


def _value_noise(rng, side, cells):
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, side, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = grid[i[:, None], i[None, :]]
    b = grid[i[:, None], i[None, :] + 1]
    c = grid[i[:, None] + 1, i[None, :]]
    d = grid[i[:, None] + 1, i[None, :] + 1]
    fy, fx = f[:, None], f[None, :]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _fractal_noise(rng, side, octaves=3):
    out, amp, total = np.zeros((side, side)), 1.0, 0.0
    cells = int(rng.integers(2, 5))
    for _ in range(octaves):
        out += amp * _value_noise(rng, side, cells)
        total += amp
        amp *= 0.5
        cells *= 2
    out /= total
    return (out - out.min()) / (np.ptp(out) + 1e-12)


def _palette(rng):
    # two colours that differ by at least 0.3 in every channel
    c1 = rng.uniform(0.0, 1.0, 3)
    delta = rng.uniform(0.3, 0.7, 3)
    c2 = np.where(c1 > 0.5, c1 - delta, c1 + delta).clip(0, 1)
    return c1, c2


def texture(rng: np.random.Generator, side: int, kind: str | None = None) -> np.ndarray:
    """One ``(3, side, side)`` texture: stripes, radial gradient or value noise."""
    kind = kind or ("stripes", "radial", "noise")[int(rng.integers(0, 3))]
    y, x = np.mgrid[0:side, 0:side] / side
    if kind == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        w = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (x * np.cos(angle) + y * np.sin(angle)) + phase)
    elif kind == "radial":
        cy, cx = rng.uniform(0, 1, 2)
        r = np.hypot(y - cy, x - cx)
        w = np.clip(r / (r.max() + 1e-12), 0, 1) ** rng.uniform(0.5, 2.0)
    elif kind == "noise":
        w = _fractal_noise(rng, side)
    else:
        raise ContractError(f"unknown texture kind {kind!r}")
    c1, c2 = _palette(rng)
    img = c1[:, None, None] * (1 - w) + c2[:, None, None] * w
    return img.astype(np.float32)


def gen_style_corpus(n: int = 512, seed: int = 0, side: int = 32) -> np.ndarray:
    """``n`` seeded procedural style images, ``(n, 3, side, side)`` in [0, 1]."""
    if n < 1:
        raise ContractError("style corpus needs at least one image")
    rng = np.random.default_rng(seed)
    kinds = ("stripes", "radial", "noise")
    out = np.empty((n, 3, side, side), np.float32)
    for i in range(n):
        a = texture(rng, side, kinds[i % 3])
        if rng.random() < 0.5:
            # blend with a second texture for richer statistics
            b = texture(rng, side)
            m = _fractal_noise(rng, side)[None]
            a = a * m + b * (1 - m)
        out[i] = a
    return out


# ---------------------------------------------------------------------------
# domain shift


@dataclass(frozen=True)
class ShiftSpec:
    """Appearance shift turning clean digits into a target domain.

    ``gain``/``bias`` act per channel; the ``*_jitter`` fields add per-sample
    variation so the target domain is a distribution of styles, not one.
    """

    hue_deg: float = 0.0
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_strength: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    hue_jitter_deg: float = 0.0
    gain_jitter: float = 0.0
    bias_jitter: float = 0.0
    invert_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.texture_strength <= 1.0:
            raise ContractError("texture_strength must lie in [0, 1]")
        if self.noise_std < 0 or self.gain_jitter < 0 or self.bias_jitter < 0:
            raise ContractError("noise_std and jitters must be non-negative")
        if not 0.0 <= self.invert_prob <= 1.0:
            raise ContractError("invert_prob must lie in [0, 1]")
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ContractError("gain and bias need three entries")


# a fixed desk-scale target domain: textured colour backgrounds, hue shift,
# reduced contrast and sensor noise
DESK_SHIFT = ShiftSpec(hue_deg=60.0, gain=(0.8, 0.9, 0.7), bias=(0.1, 0.05, 0.15),
                       texture_strength=0.85, noise_std=0.04, seed=7,
                       hue_jitter_deg=60.0, gain_jitter=0.15, bias_jitter=0.1,
                       invert_prob=0.3)


def _hue_matrix(deg):
    # rotation about the grey axis
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def _shift_one(img, spec: ShiftSpec, sample_id: int):
    rng = np.random.default_rng([spec.seed, int(sample_id)])
    x = img.astype(np.float64)
    side = x.shape[-1]
    if spec.invert_prob and rng.random() < spec.invert_prob:
        x = 1.0 - x
    if spec.texture_strength:
        bg = texture(rng, side)
        fg = rng.uniform(0, 1, 3)[:, None, None]
        coloured = x * fg + (1 - x) * bg
        x = (1 - spec.texture_strength) * x + spec.texture_strength * coloured
    hue = spec.hue_deg + (rng.uniform(-1, 1) * spec.hue_jitter_deg if spec.hue_jitter_deg else 0.0)
    if hue:
        x = np.einsum("ij,jhw->ihw", _hue_matrix(hue), x)
    gain = np.asarray(spec.gain, float)
    bias = np.asarray(spec.bias, float)
    if spec.gain_jitter:
        gain = gain + rng.uniform(-1, 1, 3) * spec.gain_jitter
    if spec.bias_jitter:
        bias = bias + rng.uniform(-1, 1, 3) * spec.bias_jitter
    x = x * gain[:, None, None] + bias[:, None, None]
    if spec.noise_std:
        x = x + rng.normal(0.0, spec.noise_std, x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def apply_shift(ds: LabeledDataset, spec: ShiftSpec) -> LabeledDataset:
    """Shift every image; randomness is keyed on (seed, sample id), so the
    result does not depend on the order or subset of samples."""
    images = np.stack([_shift_one(img, spec, i) for img, i in zip(ds.images, ds.ids)]) \
        if len(ds) else ds.images.copy()
    return LabeledDataset(images, ds.labels.copy(), ds.split, ds.ids.copy())


def split_anchor(target: LabeledDataset, seed: int) -> Tuple[AnchorSample, LabeledDataset]:
    """Seeded shuffle; the first image becomes the anchor, the rest are held out."""
    order = np.random.default_rng(seed).permutation(len(target))
    anchor = AnchorSample(target.images[order[0]].copy())
    return anchor, target.subset(order[1:], split="heldout")


# ---------------------------------------------------------------------------
# batching and persistence


def batches(images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int,
            epochs: int | None = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches, reshuffled every epoch; partial batches dropped.

    Runs forever when ``epochs`` is None.
    """
    n = len(labels)
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch_size must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n)
        for k in range(n // batch_size):
            idx = order[k * batch_size:(k + 1) * batch_size]
            yield images[idx], labels[idx]
        epoch += 1


def save_dataset(path, ds: LabeledDataset) -> None:
    """Header ``ASMD``, version, N, side (u32 LE), then f32 LE images and labels."""
    n, side = len(ds), ds.side
    with open(path, "wb") as fh:
        fh.write(ASMD_MAGIC + struct.pack("<III", ASMD_VERSION, n, side))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<f4").tobytes())


def load_dataset(path, split: str = "train") -> LabeledDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("dataset header truncated", offset=len(buf))
    if buf[:4] != ASMD_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    version, n, side = struct.unpack_from("<III", buf, 4)
    if version != ASMD_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    n_img = n * 3 * side * side
    if len(buf) < 16 + 4 * (n_img + n):
        raise FormatError("dataset payload truncated", offset=len(buf))
    images = np.frombuffer(buf, "<f4", n_img, 16).reshape(n, 3, side, side)
    labels = np.frombuffer(buf, "<f4", n, 16 + 4 * n_img).astype(np.int64)
    return LabeledDataset(images.astype(np.float32), labels, split)


def with_split(ds: LabeledDataset, split: str) -> LabeledDataset:
    return replace(ds, split=split)
