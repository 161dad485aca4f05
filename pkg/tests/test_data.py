import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartnet.data import (
    BatchPlan,
    Dataset,
    batch_indices,
    batches,
    decode_idx,
    encode_cifar_binary,
    encode_idx,
    load_mnist5k,
    parse_cifar_binary,
    parse_idx,
    to_uint8,
    write_idx,
)
from smartnet.errors import DataError, ParseError, UsageError


def idx_bytes(dims, payload, type_code=0x08):
    return bytes([0, 0, type_code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_header_two_images(tmp_path):
    payload = bytes(range(256)) * 6 + bytes(32)
    assert len(payload) == 1568
    path = tmp_path / "imgs.idx"
    path.write_bytes(idx_bytes((2, 28, 28), payload))
    ds = parse_idx(path)
    assert len(ds) == 2
    assert ds.images.shape == (2, 1, 28, 28)
    assert ds.images.dtype == np.float32


def test_pixel_scaling(tmp_path):
    path = tmp_path / "p.idx"
    path.write_bytes(idx_bytes((1, 1, 2), bytes([255, 0])))
    ds = parse_idx(path)
    assert ds.images[0, 0, 0].tolist() == [1.0, 0.0]


def test_idx_big_endian_dims():
    raw = idx_bytes((1, 2, 3), bytes(range(6)))
    arr = decode_idx(raw)
    assert arr.shape == (1, 2, 3)
    assert arr.ravel().tolist() == [0, 1, 2, 3, 4, 5]
    raw16 = bytes([0, 0, 0x0B, 1]) + struct.pack(">I", 2) + struct.pack(">2h", -2, 513)
    assert decode_idx(raw16).tolist() == [-2, 513]


def test_idx_labels(tmp_path):
    write_idx(tmp_path / "x.idx", np.zeros((4, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "y.idx", np.array([3, 1, 0, 9], dtype=np.uint8))
    ds = parse_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.labels.tolist() == [3, 1, 0, 9]


def test_idx_bad_magic():
    with pytest.raises(ParseError) as err:
        decode_idx(b"\x01\x00\x08\x01" + bytes(8))
    assert err.value.offset == 0
    with pytest.raises(ParseError):
        decode_idx(b"\x00\x00\x07\x01" + bytes(8))


def test_idx_truncated_payload():
    raw = idx_bytes((2, 28, 28), bytes(1000))
    with pytest.raises(ParseError) as err:
        decode_idx(raw)
    assert err.value.offset == len(raw)


def test_idx_truncated_header():
    with pytest.raises(ParseError) as err:
        decode_idx(bytes([0, 0, 8, 3, 0, 0]))
    assert err.value.offset == 6
    with pytest.raises(ParseError):
        decode_idx(b"\x00\x00")


def test_idx_dimension_overflow():
    raw = idx_bytes((0xFFFFFFFF, 0xFFFFFFFF, 2), b"")
    with pytest.raises(ParseError) as err:
        decode_idx(raw)
    assert err.value.offset == 8


def test_idx_label_out_of_range(tmp_path):
    write_idx(tmp_path / "x.idx", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "y.idx", np.array([1, 12], dtype=np.uint8))
    with pytest.raises(ParseError):
        parse_idx(tmp_path / "x.idx", tmp_path / "y.idx")


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_idx(tmp_path / "nope.idx")


def _cifar_fixture(labels):
    rows = []
    for i, lab in enumerate(labels):
        pixels = bytes((i * 7 + j) % 256 for j in range(3072))
        rows.append(bytes([lab]) + pixels)
    return b"".join(rows)


def test_cifar_known_labels(tmp_path):
    path = tmp_path / "data_batch.bin"
    path.write_bytes(_cifar_fixture([3, 1, 0, 9]))
    ds = parse_cifar_binary(path)
    assert ds.labels.tolist() == [3, 1, 0, 9]
    assert ds.images.shape == (4, 3, 32, 32)
    # first record: pixel j has byte j % 256, channel-major
    assert ds.images[0, 0, 0, 1] == np.float32(1 / 255)
    assert ds.images[0, 1, 0, 0] == np.float32((1024 % 256) / 255)
    assert ds.images[1, 0, 0, 0] == np.float32(7 / 255)


def test_cifar_truncated(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(_cifar_fixture([1, 2])[:-10])
    with pytest.raises(ParseError) as err:
        parse_cifar_binary(path)
    assert err.value.offset == 3073


def test_cifar_bad_label(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(_cifar_fixture([1, 200]))
    with pytest.raises(ParseError) as err:
        parse_cifar_binary(path)
    assert err.value.offset == 3073


def test_cifar_round_trip(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(_cifar_fixture([3, 1, 0, 9]))
    ds = parse_cifar_binary(path)
    again = tmp_path / "c2.bin"
    again.write_bytes(encode_cifar_binary(to_uint8(ds), ds.labels))
    assert again.read_bytes() == path.read_bytes()
    ds2 = parse_cifar_binary(again)
    assert np.array_equal(ds.images, ds2.images) and np.array_equal(ds.labels, ds2.labels)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**16))
def test_idx_round_trip(dims, seed):
    arr = np.random.default_rng(seed).integers(0, 256, dims).astype(np.uint8)
    assert np.array_equal(decode_idx(encode_idx(arr)), arr)


def test_idx_gzip_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx.gz", arr)
    raw = gzip.decompress((tmp_path / "a.idx.gz").read_bytes())
    assert raw == encode_idx(arr)
    ds = parse_idx(tmp_path / "a.idx.gz")
    assert np.array_equal(to_uint8(ds)[:, 0], arr)


def test_dataset_is_immutable_and_validated():
    ds = Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 1, 1), 1.5, np.float32), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 1, 1), np.float32), np.array([2]), 2)


def _toy(n):
    return Dataset(np.zeros((n, 1, 1, 1), np.float32), np.arange(n) % 2, 2)


def test_batches_cover_all():
    got = batch_indices(_toy(10), BatchPlan(5, seed=3))
    assert len(got) == 2
    assert sorted(np.concatenate(got).tolist()) == list(range(10))


def test_batches_drop_last():
    got = batch_indices(_toy(10), BatchPlan(4, seed=3))
    assert len(got) == 2
    assert len(set(np.concatenate(got).tolist())) == 8


def test_batches_deterministic():
    ds = Dataset(np.random.default_rng(0).random((12, 1, 2, 2)).astype(np.float32), np.arange(12) % 3, 3)
    a = [(x.tobytes(), y.tobytes()) for x, y in batches(ds, BatchPlan(4, seed=9), epoch=2)]
    b = [(x.tobytes(), y.tobytes()) for x, y in batches(ds, BatchPlan(4, seed=9), epoch=2)]
    assert a == b
    c = [(x.tobytes(), y.tobytes()) for x, y in batches(ds, BatchPlan(4, seed=9), epoch=3)]
    assert a != c


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), b=st.integers(1, 60), seed=st.integers(0, 1000), epoch=st.integers(0, 5))
def test_batch_order_is_bijection(n, b, seed, epoch):
    plan = BatchPlan(b, seed)
    order = plan.order(n, epoch)
    assert sorted(order.tolist()) == list(range(n))
    if b > n:
        with pytest.raises(UsageError):
            batch_indices(_toy(n), plan, epoch)
        return
    got = np.concatenate(batch_indices(_toy(n), plan, epoch))
    assert len(got) == (n // b) * b
    assert len(set(got.tolist())) == len(got)


def test_zero_batch_size():
    with pytest.raises(UsageError):
        list(batches(_toy(4), BatchPlan(0)))


def test_augment_keeps_range_and_shape():
    ds = Dataset(np.random.default_rng(0).random((8, 3, 6, 6)).astype(np.float32), np.zeros(8, int), 1)
    x, _ = next(batches(ds, BatchPlan(8, seed=0, augment=True)))
    assert x.shape == (8, 3, 6, 6)
    assert x.min() >= 0 and x.max() <= 1


def test_bundled_mnist_subset():
    train, test = load_mnist5k("train"), load_mnist5k("test")
    assert train.images.shape == (4000, 1, 28, 28)
    assert test.images.shape == (1000, 1, 28, 28)
    assert np.bincount(train.labels, minlength=10).min() > 300
    assert 0.0 <= train.images.min() and train.images.max() == 1.0
