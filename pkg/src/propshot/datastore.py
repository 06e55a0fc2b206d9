"""On-disk embedding formats, bundle validation, and synthetic generation.

Tensor files use the PCT1 layout: magic "PCT1" | u16 version | u8 dtype
(1 = little-endian f64) | u8 ndim | ndim x u32 dims | row-major payload |
u32 CRC32 of the payload. A manifest.json ties the files of one bundle
together; descriptions.jsonl sits next to it. Everything downstream loads
through validate_bundle/load_descriptions, which enforce the invariants, so
later stages never re-check.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    ArgumentError,
    ChecksumError,
    FormatError,
    ShapeHeaderMismatch,
    ValidationError,
)

MAGIC = b"PCT1"
FORMAT_VERSION = 1
_DTYPE_F64 = 1

UNIT_NORM_TOL = 1e-6

# Template used to prepend the class name when embedding supervision
# ("extended") forms of the descriptions; recorded in every manifest.
EXTENDED_TEMPLATE = "{class_name}, {description}"

# Planted-geometry constants for gen_synthetic. Classes come in pairs whose
# directions overlap (PAIR_OVERLAP is the cosine); each class also gets a
# private prompt axis mixed into its prompt. Class-token noise leans along
# the *twin's* prompt axis, which confuses zero-shot scoring between twins
# while staying invisible to cluster ranking and cache prototypes (the axis
# is orthogonal to every class and property direction). Property directions
# lean onto their class direction with a slot-decaying weight so cluster
# scores rank slots in plant order.
PAIR_OVERLAP = 0.55
PROMPT_AXIS_MIX = 4.5
TOKEN_NOISE_MULT = 7.0
TOKEN_TWIN_LEAN = 0.95
PROPERTY_CLASS_LEAN = (0.50, 0.42, 0.34)
PROPERTY_LEAN_FLOOR = 0.15
PROMPT_NOISE_MULT = 0.5
PATCH_NOISE_MULT = 1.0
DESC_NOISE_MULT = 1.0
EXTENDED_CLASS_MIX = 0.5
DESCRIPTIONS_PER_PROPERTY = 6


# ---------------------------------------------------------------------------
# PCT1 tensor files


def save_tensor(path, array) -> tuple[tuple[int, ...], int]:
    """Write one tensor; returns (shape, payload crc32) for manifest entries."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, _DTYPE_F64, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    payload = a.tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))
    return tuple(a.shape), crc


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path.name}: bad magic")
    version, dtype, ndim = struct.unpack("<HBB", raw[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}")
    if dtype != _DTYPE_F64:
        raise FormatError(f"{path.name}: unsupported dtype {dtype}")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end + 4:
        raise FormatError(f"{path.name}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    count = 1
    for d in shape:
        count *= d
    payload = raw[dims_end:-4]
    if len(payload) != 8 * count:
        raise ShapeHeaderMismatch(
            f"{path.name}: header says {shape} ({count} values) but payload holds "
            f"{len(payload) // 8}"
        )
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path.name}: payload CRC mismatch")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path.name}: non-finite values in payload")
    return np.array(data, dtype=np.float64)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class FileEntry:
    path: str
    shape: tuple[int, ...]
    crc32: int


@dataclass
class Manifest:
    version: int
    dim: int
    n_classes: int
    shots: int
    m_props: int
    seed: int
    files: dict[str, FileEntry]
    root: Path
    descriptions: str = "descriptions.jsonl"
    extended_template: str = EXTENDED_TEMPLATE

    def tensor_path(self, name: str) -> Path:
        return self.root / self.files[name].path

    def load(self, name: str) -> np.ndarray:
        if name not in self.files:
            raise ValidationError(f"missing-file: manifest has no entry {name!r}")
        return load_tensor(self.tensor_path(name))

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "D": self.dim,
            "N": self.n_classes,
            "K": self.shots,
            "M": self.m_props,
            "seed": self.seed,
            "descriptions": self.descriptions,
            "extended_template": self.extended_template,
            "files": {
                name: {"path": e.path, "shape": list(e.shape), "crc32": e.crc32}
                for name, e in sorted(self.files.items())
            },
        }


def write_json(path, payload: dict) -> None:
    """Canonical JSON writer: sorted keys, fixed layout, trailing newline."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_manifest(path, manifest: Manifest) -> None:
    write_json(path, manifest.to_json_dict())


def load_manifest(path) -> Manifest:
    """Parse manifest.json and verify every referenced tensor file.

    Existence, header shape, and payload CRC are all checked here so that
    downstream loads can trust the table.
    """
    path = Path(path)
    try:
        doc = read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        files = {
            name: FileEntry(e["path"], tuple(e["shape"]), int(e["crc32"]))
            for name, e in doc["files"].items()
        }
        manifest = Manifest(
            version=int(doc["version"]),
            dim=int(doc["D"]),
            n_classes=int(doc["N"]),
            shots=int(doc["K"]),
            m_props=int(doc["M"]),
            seed=int(doc["seed"]),
            files=files,
            root=path.parent,
            descriptions=doc.get("descriptions", "descriptions.jsonl"),
            extended_template=doc.get("extended_template", EXTENDED_TEMPLATE),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    for name, entry in sorted(manifest.files.items()):
        fpath = manifest.root / entry.path
        if not fpath.is_file():
            raise ValidationError(f"missing-file: {entry.path} (entry {name!r})")
        tensor = load_tensor(fpath)
        if tensor.shape != entry.shape:
            raise ShapeHeaderMismatch(
                f"{entry.path}: manifest shape {entry.shape} vs header {tensor.shape}"
            )
        crc = zlib.crc32(np.ascontiguousarray(tensor, dtype="<f8").tobytes()) & 0xFFFFFFFF
        if crc != entry.crc32:
            raise ChecksumError(f"{entry.path}: manifest CRC {entry.crc32} vs payload {crc}")
    return manifest


# ---------------------------------------------------------------------------
# Bundle and description containers


@dataclass
class BundleImage:
    class_token: np.ndarray  # (D,), unit norm
    patches: np.ndarray      # (P, D)
    label: int


@dataclass
class EmbeddingBundle:
    dim: int
    patch_count: int
    images: list[BundleImage]
    class_prompts: np.ndarray  # (N, D), unit rows
    support: list[int]
    query: list[int]
    shots: int

    @property
    def n_classes(self) -> int:
        return self.class_prompts.shape[0]

    def supports_of(self, class_id: int) -> list[int]:
        return [i for i in self.support if self.images[i].label == class_id]

    def support_tokens(self, class_id: int) -> np.ndarray:
        return np.stack([self.images[i].class_token for i in self.supports_of(class_id)])


@dataclass
class ClassDescriptions:
    class_id: int
    class_name: str
    texts: list[str]
    plain: np.ndarray     # (n_desc, D)
    extended: np.ndarray  # (n_desc, D)


class DescriptionSet:
    """All per-class descriptions with a flat global index space.

    Global index g enumerates (class, local) pairs in class order; pools in
    the property assignment refer to these indices.
    """

    def __init__(self, classes: list[ClassDescriptions]):
        self.classes = classes
        self._offsets = np.cumsum([0] + [len(c.texts) for c in classes])

    def __len__(self) -> int:
        return int(self._offsets[-1])

    @cached_property
    def plain_matrix(self) -> np.ndarray:
        return np.concatenate([c.plain for c in self.classes], axis=0)

    @cached_property
    def extended_matrix(self) -> np.ndarray:
        return np.concatenate([c.extended for c in self.classes], axis=0)

    @cached_property
    def owners(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(c.texts), c.class_id, dtype=int) for c in self.classes]
        )

    def global_index(self, class_id: int, local: int) -> int:
        return int(self._offsets[class_id] + local)

    def locate(self, global_index: int) -> tuple[int, int]:
        class_id = int(np.searchsorted(self._offsets, global_index, side="right") - 1)
        return class_id, int(global_index - self._offsets[class_id])


@dataclass
class PlantRecord:
    """Ground truth of a synthetic bundle, for oracle comparisons only."""
    class_dirs: np.ndarray        # (N, D)
    prop_dirs: np.ndarray         # (N, m, D)
    desc_property: list[list[int]]  # per class, local desc index -> property index
    per_property: int
    noise: float
    pair_overlap: float


# ---------------------------------------------------------------------------
# Validation


def _check_unit_rows(rows: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(rows, axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(f"unit-norm: {what} {i} has norm {norms.flat[i]:.6f}")


def validate_bundle(manifest: Manifest) -> EmbeddingBundle:
    """Load and fully check a bundle; the only entry point to downstream code."""
    tokens = manifest.load("class_tokens")
    patches = manifest.load("patches")
    labels_f = manifest.load("labels")
    prompts = manifest.load("class_prompts")
    support = manifest.load("support_idx")
    query = manifest.load("query_idx")

    n_images = tokens.shape[0]
    dim = manifest.dim
    n = manifest.n_classes
    if tokens.ndim != 2 or tokens.shape[1] != dim:
        raise ValidationError(f"dim: class_tokens shape {tokens.shape}, expected (*, {dim})")
    if patches.ndim != 3 or patches.shape[0] != n_images or patches.shape[2] != dim:
        raise ValidationError(f"dim: patches shape {patches.shape}")
    if prompts.shape != (n, dim):
        raise ValidationError(f"dim: class_prompts shape {prompts.shape}, expected ({n}, {dim})")
    if labels_f.shape != (n_images,):
        raise ValidationError(f"dim: labels shape {labels_f.shape}")
    if np.any(labels_f != np.round(labels_f)):
        raise ValidationError("labels: non-integral label value")
    labels = labels_f.astype(int)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValidationError(f"labels: value outside [0, {n})")

    _check_unit_rows(tokens, "class token")
    _check_unit_rows(prompts, "class prompt")
    # patch finiteness is guaranteed by load_tensor; re-check to cover
    # programmatic construction that bypassed the file layer
    if not np.all(np.isfinite(patches)):
        raise ValidationError("finite: patches contain non-finite values")

    def as_indices(arr, what):
        if np.any(arr != np.round(arr)):
            raise ValidationError(f"{what}: non-integral index")
        idx = arr.astype(int)
        if idx.size and (idx.min() < 0 or idx.max() >= n_images):
            raise ValidationError(f"{what}: index outside [0, {n_images})")
        return [int(i) for i in idx]

    support_idx = as_indices(support, "support")
    query_idx = as_indices(query, "query")

    per_class = np.bincount(labels[support_idx], minlength=n)
    for c in range(n):
        if per_class[c] != manifest.shots:
            raise ValidationError(
                f"shots: class {c} has {per_class[c]} support images, expected {manifest.shots}"
            )

    images = [
        BundleImage(class_token=tokens[i], patches=patches[i], label=int(labels[i]))
        for i in range(n_images)
    ]
    return EmbeddingBundle(
        dim=dim,
        patch_count=patches.shape[1],
        images=images,
        class_prompts=prompts,
        support=support_idx,
        query=query_idx,
        shots=manifest.shots,
    )


def load_descriptions(manifest: Manifest) -> DescriptionSet:
    jsonl = manifest.root / manifest.descriptions
    if not jsonl.is_file():
        raise ValidationError(f"missing-file: {manifest.descriptions}")
    classes: list[ClassDescriptions] = []
    for line in jsonl.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            class_id = int(doc["class_id"])
            name = str(doc["class_name"])
            texts = [str(t) for t in doc["descriptions"]]
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"{manifest.descriptions}: bad line ({exc})") from exc
        plain = manifest.load(f"desc_plain_{class_id:03d}")
        extended = manifest.load(f"desc_ext_{class_id:03d}")
        if not texts:
            raise ValidationError(f"descriptions: class {class_id} has none")
        if plain.shape != (len(texts), manifest.dim) or extended.shape != plain.shape:
            raise ValidationError(
                f"dim: class {class_id} descriptions {plain.shape}/{extended.shape} "
                f"vs {len(texts)} texts"
            )
        _check_unit_rows(plain, f"class {class_id} plain description")
        _check_unit_rows(extended, f"class {class_id} extended description")
        classes.append(ClassDescriptions(class_id, name, texts, plain, extended))
    classes.sort(key=lambda c: c.class_id)
    if [c.class_id for c in classes] != list(range(manifest.n_classes)):
        raise ValidationError(
            f"class-count: descriptions cover {[c.class_id for c in classes]}, "
            f"expected 0..{manifest.n_classes - 1}"
        )
    return DescriptionSet(classes)


# ---------------------------------------------------------------------------
# Synthetic bundles


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _noisy_unit(base: np.ndarray, sigma: float, rng) -> np.ndarray:
    # the gaussian is drawn even for sigma=0 to keep the stream layout fixed
    g = _unit(rng.standard_normal(base.shape[0]))
    return _unit(base + sigma * g)


def _lean(slot: int) -> float:
    if slot < len(PROPERTY_CLASS_LEAN):
        return PROPERTY_CLASS_LEAN[slot]
    return max(PROPERTY_LEAN_FLOOR,
               PROPERTY_CLASS_LEAN[-1] - 0.08 * (slot - len(PROPERTY_CLASS_LEAN) + 1))


def _twin(c: int, n_classes: int) -> int:
    twin = c + 1 if c % 2 == 0 else c - 1
    return c if twin >= n_classes else twin


def gen_synthetic(n_classes, shots, queries_per_class, dim, patches, m_props,
                  noise, seed, pair_overlap=PAIR_OVERLAP):
    """Build a bundle with planted class/property geometry.

    Per class n there is a class direction c_n (paired classes overlap with
    cosine `pair_overlap`), a prompt axis r_n, and m_props property
    directions u_{n,i} leaning onto c_n with slot-decaying weights. Image
    patches carry noisy copies of every u_{n,i} plus random distractors;
    descriptions are noisy copies of u_{n,i} (plain) and of
    u_{n,i} + 0.5 c_n (extended). Deterministic per seed.
    Returns (bundle, description set, plant record).
    """
    if dim < 8:
        raise ArgumentError(f"dim must be >= 8, got {dim}")
    if m_props < 1:
        raise ArgumentError(f"m_props must be >= 1, got {m_props}")
    if patches < m_props:
        raise ArgumentError(f"patches ({patches}) must be >= m_props ({m_props})")
    if n_classes < 2:
        raise ArgumentError(f"n_classes must be >= 2, got {n_classes}")
    if shots < 1 or queries_per_class < 0:
        raise ArgumentError("shots must be >= 1 and queries_per_class >= 0")
    if noise < 0:
        raise ArgumentError(f"noise must be >= 0, got {noise}")
    if not 0.0 <= pair_overlap < 1.0:
        raise ArgumentError(f"pair_overlap must be in [0, 1), got {pair_overlap}")

    rng = np.random.default_rng(seed)
    n_pairs = (n_classes + 1) // 2
    needed = n_pairs + 2 * n_classes + n_classes * m_props
    if needed <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        frame = q.T[:needed]
    else:
        frame = np.stack([_unit(rng.standard_normal(dim)) for _ in range(needed)])
    pair_bases = frame[:n_pairs]
    class_axes = frame[n_pairs:n_pairs + n_classes]
    prompt_axes = frame[n_pairs + n_classes:n_pairs + 2 * n_classes]
    prop_axes = frame[n_pairs + 2 * n_classes:].reshape(n_classes, m_props, dim)

    shared = np.sqrt(pair_overlap)
    private = np.sqrt(1.0 - pair_overlap)
    class_dirs = np.stack(
        [_unit(shared * pair_bases[c // 2] + private * class_axes[c])
         for c in range(n_classes)]
    )
    prop_dirs = np.empty((n_classes, m_props, dim))
    for c in range(n_classes):
        for i in range(m_props):
            w = _lean(i)
            prop_dirs[c, i] = _unit(np.sqrt(1.0 - w * w) * prop_axes[c, i]
                                    + w * class_dirs[c])

    sigma_token = TOKEN_NOISE_MULT * noise
    lean = TOKEN_TWIN_LEAN
    residual = np.sqrt(1.0 - lean * lean)

    per_class_images = shots + queries_per_class
    images: list[BundleImage] = []
    for c in range(n_classes):
        toward = prompt_axes[_twin(c, n_classes)]
        for _ in range(per_class_images):
            a = rng.standard_normal()
            g = _unit(rng.standard_normal(dim))
            token = _unit(class_dirs[c] + sigma_token * (lean * a * toward + residual * g))
            rows = [
                _noisy_unit(prop_dirs[c, i], PATCH_NOISE_MULT * noise, rng)
                for i in range(m_props)
            ]
            rows += [_unit(rng.standard_normal(dim)) for _ in range(patches - m_props)]
            order = rng.permutation(patches)
            images.append(BundleImage(
                class_token=token,
                patches=np.stack(rows)[order],
                label=c,
            ))

    prompts = np.stack([
        _noisy_unit(class_dirs[c] + PROMPT_AXIS_MIX * noise * prompt_axes[c],
                    PROMPT_NOISE_MULT * noise, rng)
        for c in range(n_classes)
    ])

    classes: list[ClassDescriptions] = []
    desc_property: list[list[int]] = []
    for c in range(n_classes):
        texts, plains, exts, owners_local = [], [], [], []
        for i in range(m_props):
            for t in range(DESCRIPTIONS_PER_PROPERTY):
                texts.append(f"trait {i} variant {t}")
                plains.append(_noisy_unit(prop_dirs[c, i], DESC_NOISE_MULT * noise, rng))
                exts.append(_noisy_unit(
                    prop_dirs[c, i] + EXTENDED_CLASS_MIX * class_dirs[c],
                    DESC_NOISE_MULT * noise, rng))
                owners_local.append(i)
        classes.append(ClassDescriptions(
            class_id=c,
            class_name=f"class {c}",
            texts=texts,
            plain=np.stack(plains),
            extended=np.stack(exts),
        ))
        desc_property.append(owners_local)

    support = [c * per_class_images + s for c in range(n_classes) for s in range(shots)]
    query = [c * per_class_images + shots + q
             for c in range(n_classes) for q in range(queries_per_class)]

    bundle = EmbeddingBundle(
        dim=dim,
        patch_count=patches,
        images=images,
        class_prompts=prompts,
        support=support,
        query=query,
        shots=shots,
    )
    plant = PlantRecord(
        class_dirs=class_dirs,
        prop_dirs=prop_dirs,
        desc_property=desc_property,
        per_property=DESCRIPTIONS_PER_PROPERTY,
        noise=noise,
        pair_overlap=pair_overlap,
    )
    return bundle, DescriptionSet(classes), plant


# ---------------------------------------------------------------------------
# Writing bundles to disk


def write_bundle(out_dir, bundle: EmbeddingBundle, desc_set: DescriptionSet,
                 plant: PlantRecord | None, m_props: int, seed: int) -> Path:
    """Serialize a bundle (+ descriptions, + optional plant) under out_dir.

    Returns the manifest path. Output bytes are a pure function of the
    inputs, which is what makes stage reruns byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, FileEntry] = {}

    def put(name: str, array) -> None:
        rel = f"{name}.pct1"
        shape, crc = save_tensor(out / rel, array)
        files[name] = FileEntry(rel, shape, crc)

    put("class_tokens", np.stack([im.class_token for im in bundle.images]))
    put("patches", np.stack([im.patches for im in bundle.images]))
    put("labels", np.array([im.label for im in bundle.images], dtype=float))
    put("class_prompts", bundle.class_prompts)
    put("support_idx", np.array(bundle.support, dtype=float))
    put("query_idx", np.array(bundle.query, dtype=float))
    for c in desc_set.classes:
        put(f"desc_plain_{c.class_id:03d}", c.plain)
        put(f"desc_ext_{c.class_id:03d}", c.extended)
    if plant is not None:
        put("plant_class_dirs", plant.class_dirs)
        put("plant_prop_dirs", plant.prop_dirs)

    lines = [
        json.dumps(
            {"class_id": c.class_id, "class_name": c.class_name,
             "descriptions": c.texts},
            sort_keys=True,
        )
        for c in desc_set.classes
    ]
    (out / "descriptions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if plant is not None:
        write_json(out / "plant.json", {
            "format_version": FORMAT_VERSION,
            "desc_property": plant.desc_property,
            "per_property": plant.per_property,
            "noise": plant.noise,
            "pair_overlap": plant.pair_overlap,
        })

    manifest = Manifest(
        version=FORMAT_VERSION,
        dim=bundle.dim,
        n_classes=bundle.n_classes,
        shots=bundle.shots,
        m_props=m_props,
        seed=seed,
        files=files,
        root=out,
    )
    write_manifest(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_plant(manifest: Manifest) -> PlantRecord:
    doc = read_json(manifest.root / "plant.json")
    return PlantRecord(
        class_dirs=manifest.load("plant_class_dirs"),
        prop_dirs=manifest.load("plant_prop_dirs"),
        desc_property=[list(map(int, row)) for row in doc["desc_property"]],
        per_property=int(doc["per_property"]),
        noise=float(doc["noise"]),
        pair_overlap=float(doc["pair_overlap"]),
    )
