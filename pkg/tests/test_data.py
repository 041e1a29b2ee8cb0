import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylemine.data import (DESK_SHIFT, AnchorSample, LabeledDataset, ShiftSpec, apply_shift,
                            batches, gen_style_corpus, load_dataset, load_idx, parse_idx_images,
                            parse_idx_labels, render_digits, resize_nearest, save_dataset,
                            split_anchor, write_idx)
from stylemine.errors import ContractError, FormatError

# four 2x2 images with hand-picked bytes
FIXTURE_PIXELS = [[0, 255, 128, 1], [10, 20, 30, 40], [255, 255, 0, 0], [7, 0, 0, 7]]
FIXTURE_LABELS = [3, 0, 9, 5]


def _fixture_bytes():
    img = struct.pack(">IIII", 0x803, 4, 2, 2) + bytes(sum(FIXTURE_PIXELS, []))
    lab = struct.pack(">II", 0x801, 4) + bytes(FIXTURE_LABELS)
    return img, lab


@pytest.fixture
def idx_pair(tmp_path):
    img, lab = _fixture_bytes()
    (tmp_path / "img.idx").write_bytes(img)
    (tmp_path / "lab.idx").write_bytes(lab)
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_idx_fixture_decodes_exactly(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.images.shape == (4, 3, 2, 2) and ds.images.dtype == np.float32
    expected = np.array(FIXTURE_PIXELS, np.float32).reshape(4, 2, 2) / 255.0
    for c in range(3):
        assert np.array_equal(ds.images[:, c], expected)
    assert ds.labels.tolist() == FIXTURE_LABELS
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[1, 0, 0, 0] == np.float32(10 / 255)


def test_idx_raw_parsers():
    img, lab = _fixture_bytes()
    assert parse_idx_images(img).tolist() == np.array(FIXTURE_PIXELS).reshape(4, 2, 2).tolist()
    assert parse_idx_labels(lab).tolist() == FIXTURE_LABELS


@pytest.mark.parametrize("mutate", [
    lambda b: b"\x00\x00\x08\x04" + b[4:],   # wrong magic
    lambda b: b[:-1],                          # payload truncated
    lambda b: b[:10],                          # header truncated
    lambda b: b[:2],                           # no room for magic
])
def test_idx_images_rejected(mutate):
    img, _ = _fixture_bytes()
    with pytest.raises(FormatError) as info:
        parse_idx_images(mutate(img))
    assert info.value.offset is not None


def test_idx_labels_rejected(tmp_path, idx_pair):
    _, lab = _fixture_bytes()
    with pytest.raises(FormatError):
        parse_idx_labels(b"\x00\x00\x08\x03" + lab[4:])
    with pytest.raises(FormatError):
        parse_idx_labels(lab[:-2])
    # count mismatch between the two files
    (tmp_path / "short.idx").write_bytes(struct.pack(">II", 0x801, 3) + bytes(FIXTURE_LABELS[:3]))
    with pytest.raises(FormatError):
        load_idx(idx_pair[0], tmp_path / "short.idx")
    # label out of class range
    (tmp_path / "big.idx").write_bytes(struct.pack(">II", 0x801, 4) + bytes([1, 2, 10, 0]))
    with pytest.raises(FormatError) as info:
        load_idx(idx_pair[0], tmp_path / "big.idx")
    assert info.value.offset == 10


def test_write_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 6, 6), dtype=np.uint8)
    labels = rng.integers(0, 10, 5)
    write_idx(tmp_path / "a", tmp_path / "b", imgs, labels)
    ds = load_idx(tmp_path / "a", tmp_path / "b")
    assert np.array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == labels.tolist()


def test_resize_nearest():
    x = np.arange(16).reshape(1, 4, 4)
    assert resize_nearest(x, 2).tolist() == [[[0, 2], [8, 10]]]
    assert resize_nearest(x, 8).shape == (1, 8, 8)
    assert resize_nearest(x, 4) is x


def test_render_digits_deterministic():
    a, la = render_digits(20, 5)
    b, lb = render_digits(20, 5)
    assert a.dtype == np.uint8 and a.shape == (20, 28, 28)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert set(la.tolist()) <= set(range(10))


def test_identity_shift_is_identity():
    rng = np.random.default_rng(1)
    ds = LabeledDataset(rng.random((6, 3, 8, 8), dtype=np.float32), np.arange(6) % 10)
    out = apply_shift(ds, ShiftSpec())
    assert np.array_equal(out.images, ds.images)
    assert np.array_equal(out.labels, ds.labels)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 11), min_size=1, max_size=12, unique=True))
def test_shift_commutes_with_subsetting(index):
    rng = np.random.default_rng(2)
    ds = LabeledDataset(rng.random((12, 3, 8, 8), dtype=np.float32), np.arange(12) % 10)
    whole = apply_shift(ds, DESK_SHIFT).subset(index)
    part = apply_shift(ds.subset(index), DESK_SHIFT)
    assert np.array_equal(whole.images, part.images)


def test_desk_shift_changes_images_in_range():
    rng = np.random.default_rng(3)
    ds = LabeledDataset(rng.random((4, 3, 16, 16), dtype=np.float32), np.zeros(4, np.int64))
    out = apply_shift(ds, DESK_SHIFT)
    assert out.images.min() >= 0.0 and out.images.max() <= 1.0
    assert not np.allclose(out.images, ds.images)


def test_shift_spec_validation():
    with pytest.raises(ContractError):
        ShiftSpec(texture_strength=1.5)
    with pytest.raises(ContractError):
        ShiftSpec(noise_std=-0.1)
    with pytest.raises(ContractError):
        ShiftSpec(gain=(1.0, 1.0))


def test_style_corpus_is_varied_and_seeded():
    a = gen_style_corpus(12, seed=4, side=16)
    assert a.shape == (12, 3, 16, 16) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, gen_style_corpus(12, seed=4, side=16))
    mu = a.mean(axis=(2, 3))
    sd = a.std(axis=(2, 3))
    assert mu.var(axis=0).min() > 1e-4 and sd.var(axis=0).min() > 1e-4
    with pytest.raises(ContractError):
        gen_style_corpus(0)


def test_batches_cover_each_epoch_once():
    x = np.arange(10)
    seen = [b for b, _ in batches(x, x, 3, seed=0, epochs=2)]
    assert len(seen) == 6
    assert len(set(np.concatenate(seen[:3]).tolist())) == 9
    again = [b for b, _ in batches(x, x, 3, seed=0, epochs=2)]
    assert all(np.array_equal(p, q) for p, q in zip(seen, again))
    with pytest.raises(ContractError):
        next(batches(x, x, 11, seed=0))


def test_split_anchor_disjoint():
    rng = np.random.default_rng(5)
    ds = LabeledDataset(rng.random((7, 3, 4, 4), dtype=np.float32), np.arange(7))
    anchor, held = split_anchor(ds, 9)
    assert len(held) == 6 and held.split == "heldout"
    missing = set(range(7)) - set(held.ids.tolist())
    assert len(missing) == 1
    assert np.array_equal(anchor.image, ds.images[missing.pop()])
    with pytest.raises(ContractError):
        AnchorSample(np.zeros((2, 3, 4, 4), np.float32))


def test_dataset_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(6)
    ds = LabeledDataset(rng.random((3, 3, 4, 4), dtype=np.float32), np.array([1, 9, 0]))
    path = tmp_path / "d.asmd"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images) and back.labels.tolist() == [1, 9, 0]
    raw = path.read_bytes()
    path.write_bytes(b"XSMD" + raw[4:])
    with pytest.raises(FormatError):
        load_dataset(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_dataset(path)
    with pytest.raises(ContractError):
        LabeledDataset(ds.images, ds.labels[:2])
