"""Binary and CSV vector round trips."""

import numpy as np
import pytest

from eit_cs.arrays import read_array, read_csv, write_array, write_csv
from eit_cs.errors import DataFormatError


def test_eitb_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    vec = rng.standard_normal(257)
    path = tmp_path / "v.eitb"
    write_array(vec, path)
    back = read_array(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, vec)


def test_eitb_empty_vector(tmp_path):
    path = tmp_path / "empty.eitb"
    write_array(np.zeros(0), path)
    assert read_array(path).size == 0


def test_eitb_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.eitb"
    write_array(np.ones(4), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="magic"):
        read_array(path)


def test_eitb_rejects_truncation(tmp_path):
    path = tmp_path / "cut.eitb"
    write_array(np.ones(16), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DataFormatError):
        read_array(path)


def test_eitb_rejects_matrix():
    with pytest.raises(DataFormatError):
        write_array(np.ones((2, 2)), "/tmp/_unused.eitb")


def test_csv_round_trip(tmp_path):
    vec = np.array([0.1, -2.5, 3.0, 1e-17])
    path = tmp_path / "v.csv"
    write_csv(vec, path)
    text = path.read_text().splitlines()
    assert text[0] == "vertex_index,value"
    assert len(text) == 5
    np.testing.assert_array_equal(read_csv(path), vec)
