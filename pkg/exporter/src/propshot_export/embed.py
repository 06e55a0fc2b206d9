"""Description embedding: plain and class-name-extended matrices per class."""

from __future__ import annotations

from pathlib import Path

from .encoders import get_encoder
from .errors import ParseError
from .formats import (
    EXTENDED_TEMPLATE,
    ManifestWriter,
    read_descriptions_jsonl,
)


def embed_descriptions(descriptions_path, encoder_id: str, out_dir) -> Path:
    """Embed every description twice (bare and name-extended) and register
    the per-class matrices in the directory's manifest."""
    encoder = get_encoder(encoder_id)
    entries = read_descriptions_jsonl(descriptions_path)
    writer = ManifestWriter.from_existing(out_dir)
    if writer.dim != encoder.dim:
        raise ParseError(f"manifest D={writer.dim} but encoder dim={encoder.dim}")
    for entry in entries:
        class_id = int(entry["class_id"])
        name = str(entry["class_name"]).replace("_", " ")
        texts = [str(t) for t in entry["descriptions"]]
        if not texts:
            raise ParseError(f"class {class_id} has no descriptions")
        if any(not t.strip() for t in texts):
            raise ParseError(f"class {class_id} has an empty phrase")
        plain = encoder.encode_texts(texts)
        extended = encoder.encode_texts(
            [EXTENDED_TEMPLATE.format(class_name=name, description=t)
             for t in texts])
        writer.put(f"desc_plain_{class_id:03d}", plain)
        writer.put(f"desc_ext_{class_id:03d}", extended)
    target = Path(out_dir) / "descriptions.jsonl"
    source = Path(descriptions_path).resolve()
    if source != target.resolve():
        target.write_bytes(source.read_bytes())
    return writer.write()
