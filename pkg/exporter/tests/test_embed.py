import numpy as np
import pytest

from propshot_export import formats
from propshot_export.describe import DescribeJob, generate_descriptions
from propshot_export.embed import embed_descriptions
from propshot_export.errors import ParseError
from propshot_export.export import ExportJob, export_embeddings


@pytest.fixture
def exported(micro_dataset, tmp_path, response_cache):
    root, names = micro_dataset
    out = tmp_path / "run"
    export_embeddings(ExportJob(dataset_root=root, encoder_id="color-probe-64",
                                out_dir=out, shots=2))
    jsonl = generate_descriptions(DescribeJob(
        class_names=names, dataset_type="real world",
        out_path=out / "descriptions.jsonl", from_cache=response_cache))
    return out, jsonl, names


class TestEmbedDescriptions:
    def test_matrices_written_with_unit_rows(self, exported):
        out, jsonl, names = exported
        embed_descriptions(jsonl, "color-probe-64", out)
        doc = formats.read_json(out / "manifest.json")
        for c in range(len(names)):
            for prefix in ("desc_plain", "desc_ext"):
                name = f"{prefix}_{c:03d}"
                assert name in doc["files"]
                rows = formats.load_tensor(out / doc["files"][name]["path"])
                np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0,
                                           atol=1e-5)

    def test_duplicate_phrase_plain_identical_extended_distinct(self, tmp_path,
                                                                micro_dataset):
        root, names = micro_dataset
        out = tmp_path / "run"
        export_embeddings(ExportJob(dataset_root=root, encoder_id="color-probe-64",
                                    out_dir=out, shots=2))
        jsonl = out / "descriptions.jsonl"
        formats.write_descriptions_jsonl(jsonl, [
            {"class_id": c, "class_name": names[c],
             "descriptions": ["soft even glow"]}
            for c in range(len(names))
        ])
        embed_descriptions(jsonl, "color-probe-64", out)
        plain0 = formats.load_tensor(out / "desc_plain_000.pct1")
        plain1 = formats.load_tensor(out / "desc_plain_001.pct1")
        ext0 = formats.load_tensor(out / "desc_ext_000.pct1")
        ext1 = formats.load_tensor(out / "desc_ext_001.pct1")
        np.testing.assert_array_equal(plain0, plain1)
        assert not np.array_equal(ext0, ext1)

    def test_empty_phrase_rejected(self, exported):
        out, jsonl, names = exported
        formats.write_descriptions_jsonl(jsonl, [
            {"class_id": 0, "class_name": names[0], "descriptions": ["  "]}])
        with pytest.raises(ParseError):
            embed_descriptions(jsonl, "color-probe-64", out)

    def test_rerun_is_byte_identical(self, exported):
        out, jsonl, names = exported
        embed_descriptions(jsonl, "color-probe-64", out)
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        embed_descriptions(jsonl, "color-probe-64", out)
        for p in out.iterdir():
            assert p.read_bytes() == first[p.name], p.name
