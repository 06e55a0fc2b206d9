"""Property-token generator: learnable seed tokens refined by cross-attention.

Each layer attends the current tokens (queries) over an image's patch
features (keys/values), applies a residual + layer norm, then a group-wise
feed-forward block where group i transforms only token i, and a second
residual + layer norm. Output and second FFN projections start at zero so a
fresh generator passes the seeds straight through the norm chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datastore import FileEntry, load_tensor, read_json, save_tensor, write_json
from .errors import ArgumentError, ShapeMismatch

INIT_STD = 0.02


@dataclass(frozen=True)
class MpgConfig:
    m_tokens: int
    dim: int
    layers: int = 2
    hidden: int | None = None
    heads: int = 1
    seed: int = 0

    @property
    def hidden_width(self) -> int:
        return self.dim if self.hidden is None else self.hidden


@dataclass
class PropertyTokens:
    raw: ad.Node   # (M, D)
    unit: ad.Node  # row-normalized view used for all similarities

    @property
    def unit_values(self) -> np.ndarray:
        return self.unit.value


class MpgParams:
    """Flat {name: leaf Node} parameter table plus the structural config."""

    def __init__(self, config: MpgConfig, nodes: dict[str, ad.Node]):
        self.config = config
        self.nodes = nodes

    def values(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.nodes.items()}

    def replace_values(self, values: dict[str, np.ndarray]) -> "MpgParams":
        return MpgParams(self.config, {name: ad.leaf(values[name]) for name in self.nodes})

    def parameter_count(self) -> int:
        return sum(node.value.size for node in self.nodes.values())


def init_params(m_tokens: int, dim: int, layers: int = 2, hidden: int | None = None,
                heads: int = 1, seed: int = 0) -> MpgParams:
    """Fresh parameters: gaussian seeds/projections, zeroed residual outputs."""
    if m_tokens < 1 or dim < 2 or layers < 1:
        raise ArgumentError(
            f"need m_tokens >= 1, dim >= 2, layers >= 1; got {m_tokens}, {dim}, {layers}")
    if heads < 1 or dim % heads != 0:
        raise ArgumentError(f"heads ({heads}) must divide dim ({dim})")
    h = dim if hidden is None else hidden
    if h < 1:
        raise ArgumentError(f"hidden width must be >= 1, got {h}")
    config = MpgConfig(m_tokens=m_tokens, dim=dim, layers=layers,
                       hidden=h, heads=heads, seed=seed)
    rng = np.random.default_rng(seed)
    nodes: dict[str, ad.Node] = {}
    nodes["seeds"] = ad.leaf(rng.normal(0.0, INIT_STD, size=(m_tokens, dim)))
    for l in range(layers):
        p = f"layer{l}."
        nodes[p + "wq"] = ad.leaf(rng.normal(0.0, INIT_STD, size=(dim, dim)))
        nodes[p + "wk"] = ad.leaf(rng.normal(0.0, INIT_STD, size=(dim, dim)))
        nodes[p + "wv"] = ad.leaf(rng.normal(0.0, INIT_STD, size=(dim, dim)))
        nodes[p + "wo"] = ad.leaf(np.zeros((dim, dim)))
        nodes[p + "ln1_gain"] = ad.leaf(np.ones(dim))
        nodes[p + "ln1_bias"] = ad.leaf(np.zeros(dim))
        for i in range(m_tokens):
            nodes[p + f"ffn_w1_{i}"] = ad.leaf(rng.normal(0.0, INIT_STD, size=(dim, h)))
            nodes[p + f"ffn_b1_{i}"] = ad.leaf(np.zeros((1, h)))
            nodes[p + f"ffn_w2_{i}"] = ad.leaf(np.zeros((h, dim)))
            nodes[p + f"ffn_b2_{i}"] = ad.leaf(np.zeros((1, dim)))
        nodes[p + "ln2_gain"] = ad.leaf(np.ones(dim))
        nodes[p + "ln2_bias"] = ad.leaf(np.zeros(dim))
    return MpgParams(config, nodes)


def cross_attention(queries, patches, wq, wk, wv, wo, heads: int = 1) -> ad.Node:
    """Scaled dot-product attention of token queries over patch keys/values."""
    q = ad.matmul(queries, wq)
    k = ad.matmul(patches, wk)
    v = ad.matmul(patches, wv)
    dim = q.value.shape[1]
    if dim % heads != 0:
        raise ShapeMismatch(f"heads ({heads}) must divide dim ({dim})")
    dh = dim // heads
    pieces = []
    for h in range(heads):
        qh = ad.narrow(q, 1, h * dh, dh) if heads > 1 else q
        kh = ad.narrow(k, 1, h * dh, dh) if heads > 1 else k
        vh = ad.narrow(v, 1, h * dh, dh) if heads > 1 else v
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        pieces.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    merged = pieces[0] if heads == 1 else ad.concat(pieces, axis=1)
    return ad.matmul(merged, wo)


def forward(params: MpgParams, patches) -> PropertyTokens:
    """Run the full layer stack over one image's patch matrix (P x D)."""
    cfg = params.config
    pv = patches.value if isinstance(patches, ad.Node) else np.asarray(patches, float)
    if pv.ndim != 2 or pv.shape[1] != cfg.dim or pv.shape[0] < 1:
        raise ShapeMismatch(f"patches shape {pv.shape}, expected (P>=1, {cfg.dim})")
    q = params.nodes["seeds"]
    for l in range(cfg.layers):
        def node(name, l=l):
            return params.nodes[f"layer{l}.{name}"]
        attn = cross_attention(q, patches, node("wq"), node("wk"), node("wv"),
                               node("wo"), heads=cfg.heads)
        q = ad.layer_norm(ad.add(q, attn), node("ln1_gain"), node("ln1_bias"))
        rows = []
        for i in range(cfg.m_tokens):
            row = ad.narrow(q, 0, i, 1)
            hidden = ad.gelu(ad.add(ad.matmul(row, node(f"ffn_w1_{i}")),
                                    node(f"ffn_b1_{i}")))
            rows.append(ad.add(ad.matmul(hidden, node(f"ffn_w2_{i}")),
                               node(f"ffn_b2_{i}")))
        q = ad.layer_norm(ad.add(q, ad.concat(rows, axis=0)),
                          node("ln2_gain"), node("ln2_bias"))
    return PropertyTokens(raw=q, unit=ad.l2_normalize(q))


def token_angles(unit_tokens: np.ndarray) -> list[tuple[int, int, float]]:
    """Pairwise angles (degrees) between unit token rows."""
    m = unit_tokens.shape[0]
    out = []
    for i in range(m):
        for j in range(i + 1, m):
            cos = float(np.clip(unit_tokens[i] @ unit_tokens[j], -1.0, 1.0))
            out.append((i, j, math.degrees(math.acos(cos))))
    return out


def _file_stem(name: str) -> str:
    return "mpg_" + name.replace(".", "_")


def save_mpg(out_dir, params: MpgParams) -> None:
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    files = {}
    for name in sorted(params.nodes):
        rel = _file_stem(name) + ".pct1"
        shape, crc = save_tensor(out / rel, params.nodes[name].value)
        files[name] = FileEntry(rel, shape, crc)
    write_json(out / "mpg.json", {
        "format_version": 1,
        "M": cfg.m_tokens,
        "D": cfg.dim,
        "L": cfg.layers,
        "H": cfg.hidden_width,
        "heads": cfg.heads,
        "seed": cfg.seed,
        "files": {n: {"path": e.path, "shape": list(e.shape), "crc32": e.crc32}
                  for n, e in sorted(files.items())},
    })


def load_mpg(in_dir) -> MpgParams:
    from pathlib import Path
    root = Path(in_dir)
    doc = read_json(root / "mpg.json")
    config = MpgConfig(m_tokens=int(doc["M"]), dim=int(doc["D"]), layers=int(doc["L"]),
                       hidden=int(doc["H"]), heads=int(doc["heads"]), seed=int(doc["seed"]))
    nodes = {name: ad.leaf(load_tensor(root / entry["path"]))
             for name, entry in doc["files"].items()}
    return MpgParams(config, nodes)
