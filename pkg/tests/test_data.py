import struct

import numpy as np
import pytest

from dat.data import IdxFormatError, load_idx_pair, parse_idx, synthetic_shapes, write_idx


def test_synthetic_deterministic_and_balanced():
    a = synthetic_shapes(53, seed=1)
    b = synthetic_shapes(53, seed=1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=10)
    assert counts.max() - counts.min() <= 1 and abs(counts - 5.3).max() <= 1
    assert a.images.shape == (53, 3, 32, 32) and a.images.dtype == np.float32
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_splits_and_seeds_differ():
    a = synthetic_shapes(10, seed=1)
    assert not np.array_equal(a.images, synthetic_shapes(10, seed=2).images)
    assert not np.array_equal(a.images, synthetic_shapes(10, seed=1, split="test").images)


def test_idx_header_big_endian(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    buf = struct.pack(">I", 0x00000803) + struct.pack(">3I", 2, 3, 4) + arr.tobytes()
    out = parse_idx(buf, 0x00000803)
    assert out.shape == (2, 3, 4) and np.array_equal(out, arr)


def test_idx_pair_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 4, 4)).astype(np.uint8)
    labels = np.arange(5, dtype=np.uint8)
    write_idx(tmp_path / "i.idx", imgs)
    write_idx(tmp_path / "l.idx", labels)
    ds = load_idx_pair(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.images.shape == (5, 1, 4, 4)
    assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert list(ds.labels) == list(range(5))


def test_color_idx_round_trip(tmp_path):
    ds = synthetic_shapes(4, seed=0, size=16)
    write_idx(tmp_path / "i.idx", np.rint(ds.images * 255))
    write_idx(tmp_path / "l.idx", ds.labels)
    back = load_idx_pair(tmp_path / "i.idx", tmp_path / "l.idx")
    assert np.array_equal(back.images, ds.images)


GOOD = struct.pack(">I", 0x00000803) + struct.pack(">3I", 2, 2, 2) + bytes(8)
MALFORMED = [
    (b"\x00\x00\x09\x03" + GOOD[4:], "bad magic.*offset 0"),
    (struct.pack(">I", 0x00000800), "zero dimensions"),
    (GOOD[:9], "truncated header"),
    (GOOD[:-3], "truncated payload"),
    (GOOD + b"\x00", "trailing data at byte offset 24"),
]


@pytest.mark.parametrize("buf,message", MALFORMED)
def test_idx_malformed(buf, message):
    with pytest.raises(IdxFormatError, match=message):
        parse_idx(buf, None)


def test_idx_wrong_kind():
    with pytest.raises(IdxFormatError, match="expected 0x00000801"):
        parse_idx(GOOD, 0x00000801)


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2)))
    write_idx(tmp_path / "l.idx", np.zeros(2))
    with pytest.raises(IdxFormatError, match="does not match"):
        load_idx_pair(tmp_path / "i.idx", tmp_path / "l.idx")
