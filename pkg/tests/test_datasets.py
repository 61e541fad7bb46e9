import struct

import numpy as np
import pytest

from bufferknn.datasets import (
    FORMAT_VERSION,
    MAGIC,
    DatasetFormatError,
    gen_mixture,
    gen_outlier_instance,
    gen_synthetic,
    load_dataset,
    write_dataset,
)

HEADER = struct.Struct("<4sIQII")


def make_binary(n, d, payload=None, magic=MAGIC, version=FORMAT_VERSION):
    head = HEADER.pack(magic, version, n, d, 0)
    if payload is None:
        payload = np.zeros((n, d), dtype="<f4").tobytes()
    return head + payload


class TestBinaryFormat:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        pts = rng.standard_normal((37, 5)).astype(np.float32)
        path = tmp_path / "pts.bknn"
        write_dataset(path, pts)
        back = load_dataset(path)
        assert back.data.dtype == np.float32
        assert np.array_equal(back.data, pts)

    def test_sniffed_by_magic_not_extension(self, rng, tmp_path):
        pts = rng.random((4, 2), dtype=np.float32)
        path = tmp_path / "pts.csv"  # lying extension
        write_dataset(path, pts, fmt="binary")
        assert np.array_equal(load_dataset(path).data, pts)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "p"
        path.write_bytes(b"BKNN\x01\x00")
        with pytest.raises(DatasetFormatError, match="truncated header, 6 bytes but need 24"):
            load_dataset(path)

    def test_header_layout_is_fixed(self, tmp_path):
        # 4-byte magic, u32 version, u64 n, u32 d, u32 reserved, then rows
        pts = np.float32([[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "p.bknn"
        write_dataset(path, pts)
        raw = path.read_bytes()
        assert raw[:4] == b"BKNN"
        assert raw[:24] == HEADER.pack(b"BKNN", 1, 2, 2, 0)
        assert raw[24:] == pts.astype("<f4").tobytes()
        assert len(raw) == 24 + 16

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "p"
        path.write_bytes(make_binary(1, 1, version=9))
        with pytest.raises(DatasetFormatError, match="unsupported version 9 at byte 4"):
            load_dataset(path)

    def test_zero_rows_rejected(self, tmp_path):
        path = tmp_path / "p"
        path.write_bytes(make_binary(0, 3, payload=b""))
        with pytest.raises(DatasetFormatError, match="header claims 0 points of dimension 3"):
            load_dataset(path)

    def test_payload_size_mismatch(self, tmp_path):
        path = tmp_path / "p"
        path.write_bytes(make_binary(3, 2)[:-4])
        with pytest.raises(DatasetFormatError,
                           match=r"payload ends at byte 44, expected 48 for 3 x 2 float32"):
            load_dataset(path)

    def test_non_finite_payload_located(self, tmp_path):
        data = np.zeros((4, 3), dtype="<f4")
        data[2, 1] = np.nan
        path = tmp_path / "p"
        path.write_bytes(make_binary(4, 3, payload=data.tobytes()))
        with pytest.raises(DatasetFormatError, match="non-finite value in row 2, column 1"):
            load_dataset(path)

    def test_unknown_write_format(self, tmp_path, rng):
        with pytest.raises(ValueError, match="unknown format"):
            write_dataset(tmp_path / "p", rng.random((2, 2), dtype=np.float32), fmt="json")


class TestCsvFormat:
    def test_roundtrip(self, rng, tmp_path):
        # %.9g prints enough digits to reproduce any float32 exactly
        pts = rng.standard_normal((50, 3)).astype(np.float32)
        path = tmp_path / "pts.csv"
        write_dataset(path, pts, fmt="csv")
        assert np.array_equal(load_dataset(path).data, pts)

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("# header\n\n1.5,2.5\n\n# mid\n3.0,4.0\n")
        got = load_dataset(path)
        assert np.array_equal(got.data, np.float32([[1.5, 2.5], [3.0, 4.0]]))

    def test_ragged_line_reported(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(DatasetFormatError, match="line 2 has 2 fields, expected 3"):
            load_dataset(path)

    def test_non_numeric_line_reported(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("1,2\n3,potato\n")
        with pytest.raises(DatasetFormatError, match="line 2 is not numeric"):
            load_dataset(path)

    def test_non_finite_line_reported(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("1,2\ninf,4\n")
        with pytest.raises(DatasetFormatError, match="non-finite value on line 2"):
            load_dataset(path)

    def test_empty_file_reported(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("# only comments\n\n")
        with pytest.raises(DatasetFormatError, match="no data rows"):
            load_dataset(path)

    def test_binary_garbage_reported_as_encoding(self, tmp_path):
        path = tmp_path / "p"
        path.write_bytes(b"\xff\xfe junk \xff")
        with pytest.raises(DatasetFormatError, match="not valid UTF-8 at byte 0"):
            load_dataset(path)


class TestGenerators:
    def test_uniform_deterministic_per_seed(self):
        a = gen_synthetic(100, 4, seed=7)
        b = gen_synthetic(100, 4, seed=7)
        c = gen_synthetic(100, 4, seed=8)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
        assert a.data.dtype == np.float32
        assert 0.0 <= a.data.min() and a.data.max() < 1.0

    def test_mixture_labels_reproducible(self):
        pts1, lab1 = gen_mixture(200, 3, components=5, seed=3)
        pts2, lab2 = gen_mixture(200, 3, components=5, seed=3)
        assert np.array_equal(pts1.data, pts2.data)
        assert np.array_equal(lab1, lab2)
        assert lab1.shape == (200,)
        assert lab1.min() >= 0 and lab1.max() < 5
        assert np.array_equal(gen_synthetic(200, 3, "mixture", seed=3,
                                            components=5).data, pts1.data)

    def test_mixture_validation(self):
        with pytest.raises(ValueError):
            gen_mixture(10, 2, components=0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown kind"):
            gen_synthetic(10, 2, kind="spiral")

    def test_outlier_instance_planted_far_away(self):
        pts, idx = gen_outlier_instance(300, 4, 7, seed=11)
        assert idx.shape == (7,)
        assert np.array_equal(idx, np.sort(idx))
        assert len(set(idx.tolist())) == 7
        planted = pts.data[idx]
        assert (planted >= 3.0).all() and (planted < 4.0).all()
        rest = np.delete(pts.data, idx, axis=0)
        assert (rest >= 0.0).all() and (rest < 1.0).all()

    def test_outlier_instance_validation(self):
        with pytest.raises(ValueError):
            gen_outlier_instance(10, 2, 11)
        with pytest.raises(ValueError):
            gen_outlier_instance(10, 2, -1)
