import numpy as np
import pytest

from cadpose.tensorio import ArchiveError, read_archive, write_archive


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "f32": rng.random((7, 5), dtype=np.float32),
        "f64": rng.random((3, 4, 2)),
        "i64": rng.integers(-100, 100, size=11),
        "u8": (rng.random(6) * 255).astype(np.uint8),
        "bools": rng.random(9) > 0.5,
    }
    meta = {"answer": 42, "name": "probe", "nested": {"a": [1, 2, 3]}}
    path = tmp_path / "arc.ta"
    write_archive(path, arrays, meta=meta)
    back, back_meta = read_archive(path)
    assert back_meta == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_double_write_is_deterministic(tmp_path):
    arrays = {"x": np.arange(10.0)}
    write_archive(tmp_path / "a.ta", arrays, meta={"k": 1})
    write_archive(tmp_path / "b.ta", arrays, meta={"k": 1})
    assert (tmp_path / "a.ta").read_bytes() == (tmp_path / "b.ta").read_bytes()


def test_crc_corruption_detected(tmp_path):
    path = tmp_path / "arc.ta"
    write_archive(path, {"x": np.arange(100.0)})
    raw = bytearray(path.read_bytes())
    raw[-60] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(ArchiveError, match="CRC"):
        read_archive(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "arc.ta"
    write_archive(path, {"x": np.arange(100.0)})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ArchiveError, match="truncated"):
        read_archive(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "arc.ta"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ArchiveError, match="magic"):
        read_archive(path)


def test_reserved_name_rejected(tmp_path):
    with pytest.raises(ArchiveError, match="reserved"):
        write_archive(tmp_path / "arc.ta", {"__meta__": np.zeros(1)})
