import struct

import numpy as np
import pytest

from lipforge.data import (Dataset, IdxError, dumps_dataset, load_dataset, load_idx, loads_dataset, save_dataset,
                           synth_blobs, write_idx)
from lipforge.textio import ParseError, VersionError


@pytest.fixture
def idx_pair(tmp_path):
    """Two 28x28 images: one all black, one with a white diagonal."""
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[1][np.arange(28), np.arange(28)] = 255
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    return ip, lp


class TestIdx:
    def test_fixture_shape_and_values(self, idx_pair):
        ds = load_idx(*idx_pair)
        assert ds.inputs.shape == (2, 1, 28, 28)
        assert set(np.unique(ds.inputs)) == {0.0, 1.0}
        assert ds.inputs[1, 0].trace() == 28.0
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_header_bytes(self, idx_pair):
        raw = idx_pair[0].read_bytes()
        assert raw[:16] == struct.pack(">IIII", 0x803, 2, 28, 28)
        assert len(raw) == 16 + 2 * 28 * 28

    def test_wrong_magic_names_both(self, idx_pair):
        ip, lp = idx_pair
        with pytest.raises(IdxError, match="0x00000801.*0x00000803") as e:
            load_idx(lp, lp)
        assert e.value.offset == 0

    def test_count_mismatch(self, idx_pair, tmp_path):
        ip, _ = idx_pair
        lp = tmp_path / "three.idx"
        lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
        with pytest.raises(IdxError, match="count mismatch"):
            load_idx(ip, lp)

    def test_truncated_payload(self, idx_pair):
        ip, lp = idx_pair
        raw = ip.read_bytes()
        ip.write_bytes(raw[:-10])
        with pytest.raises(IdxError, match="truncated") as e:
            load_idx(ip, lp)
        assert e.value.offset == len(raw) - 10

    def test_short_header(self, tmp_path, idx_pair):
        p = tmp_path / "short.idx"
        p.write_bytes(b"\x00\x00")
        with pytest.raises(IdxError):
            load_idx(p, idx_pair[1])

    def test_trailing_bytes(self, idx_pair):
        ip, lp = idx_pair
        raw = ip.read_bytes()
        ip.write_bytes(raw + b"\x00")
        with pytest.raises(IdxError, match="trailing") as e:
            load_idx(ip, lp)
        assert e.value.offset == len(raw)

    def test_errors_are_parse_errors(self):
        assert issubclass(IdxError, ParseError)


class TestBlobs:
    def test_deterministic(self):
        a, b = synth_blobs(seed=4), synth_blobs(seed=4)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.provenance == b.provenance and "seed=4" in a.provenance

    def test_seed_changes_data(self):
        assert not np.array_equal(synth_blobs(seed=1).inputs, synth_blobs(seed=2).inputs)

    def test_in_unit_box_and_balanced(self):
        ds = synth_blobs(classes=4, dim=5, count=400, separation=0.5)
        assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1
        np.testing.assert_array_equal(np.bincount(ds.labels), [100] * 4)

    def test_empty_is_flagged(self):
        ds = synth_blobs(count=0)
        assert len(ds) == 0 and "empty" in ds.flags

    def test_separation_must_be_positive(self):
        with pytest.raises(ValueError):
            synth_blobs(separation=0.0)


class TestDatasetInvariants:
    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), [0], 2)

    def test_label_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 3)), [2], 2)

    def test_value_range(self):
        with pytest.raises(ValueError):
            Dataset(np.full((1, 3), 1.5), [0], 2)

    def test_split_off(self):
        tr, te = synth_blobs(count=100).split_off(25)
        assert (len(tr), len(te), tr.split, te.split) == (75, 25, "train", "test")


class TestDump:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = synth_blobs(classes=3, dim=4, count=30, seed=9)
        path = tmp_path / "d.lfd"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert (back.classes, back.split, back.provenance) == (ds.classes, ds.split, ds.provenance)

    def test_image_shape_kept(self, idx_pair):
        ds = load_idx(*idx_pair)
        back = loads_dataset(dumps_dataset(ds))
        assert back.inputs.shape == (2, 1, 28, 28)
        np.testing.assert_array_equal(back.inputs, ds.inputs)

    def test_empty_round_trip(self):
        back = loads_dataset(dumps_dataset(synth_blobs(dim=3, count=0)))
        assert len(back) == 0

    def test_version_mismatch(self):
        text = dumps_dataset(synth_blobs(count=3)).replace("lipforge-dataset 1", "lipforge-dataset 9")
        with pytest.raises(VersionError):
            loads_dataset(text)

    def test_truncated(self):
        text = dumps_dataset(synth_blobs(dim=3, count=6))
        with pytest.raises(ParseError) as e:
            loads_dataset(text[: len(text) // 2])
        assert e.value.offset >= 0

    def test_out_of_range_value_rejected(self):
        ds = Dataset(np.full((1, 2), 0.5), [0], 2)
        text = dumps_dataset(ds).replace("0.5", "1.5", 1)
        with pytest.raises(ParseError, match="invalid dataset"):
            loads_dataset(text)
