import numpy as np
import pytest

from propshot_export import formats


def test_tensor_roundtrip_and_determinism(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(3, 5))
    shape_a, crc_a = formats.save_tensor(tmp_path / "a.pct1", arr)
    shape_b, crc_b = formats.save_tensor(tmp_path / "b.pct1", arr)
    assert shape_a == shape_b == [3, 5] and crc_a == crc_b
    assert (tmp_path / "a.pct1").read_bytes() == (tmp_path / "b.pct1").read_bytes()
    np.testing.assert_array_equal(formats.load_tensor(tmp_path / "a.pct1"), arr)


def test_tensor_checksum_detects_corruption(tmp_path):
    formats.save_tensor(tmp_path / "t.pct1", np.ones(4))
    raw = bytearray((tmp_path / "t.pct1").read_bytes())
    raw[-10] ^= 0x01
    (tmp_path / "t.pct1").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        formats.load_tensor(tmp_path / "t.pct1")


def test_manifest_writer_roundtrip(tmp_path):
    writer = formats.ManifestWriter(tmp_path, dim=8, n_classes=2, shots=1,
                                    m_props=3, seed=5)
    writer.put("class_tokens", np.eye(8)[:2])
    path = writer.write()
    doc = formats.read_json(path)
    assert doc["D"] == 8 and doc["N"] == 2 and doc["K"] == 1
    assert doc["extended_template"] == "{class_name}, {description}"
    again = formats.ManifestWriter.from_existing(tmp_path)
    again.put("labels", np.zeros(2))
    again.write()
    doc2 = formats.read_json(path)
    assert set(doc2["files"]) == {"class_tokens", "labels"}


def test_descriptions_jsonl_roundtrip(tmp_path):
    path = tmp_path / "d.jsonl"
    entries = [{"class_id": 0, "class_name": "amber",
                "descriptions": ["warm gold surface"]}]
    formats.write_descriptions_jsonl(path, entries)
    assert formats.read_descriptions_jsonl(path) == entries
    formats.write_descriptions_jsonl(path, [])
    assert path.read_text() == ""
    assert formats.read_descriptions_jsonl(path) == []
