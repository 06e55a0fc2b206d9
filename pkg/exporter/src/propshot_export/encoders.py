"""Encoder registry: deterministic color-probe encoder plus a CLIP adapter.

The color-probe encoder maps both modalities through one shared RGB space:
images contribute grid-cell mean colors, texts contribute the colors of the
lexicon words they mention. Colors become soft similarities to a fixed
anchor lattice, then pass through a seeded random projection, so embeddings
of a reddish image and of the phrase "deep ruby tint" genuinely land close.
It needs no weights or network and is fully deterministic, which makes it
the encoder of choice for tests and demos. `hf-clip:<model>` adapts a
transformers CLIP checkpoint when one is loadable.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import EncoderLoadError

# word -> RGB in [0, 1]; object words carry their characteristic color
LEXICON = {
    "red": (0.86, 0.16, 0.16), "crimson": (0.86, 0.08, 0.24),
    "scarlet": (1.00, 0.14, 0.00), "ruby": (0.88, 0.07, 0.37),
    "cherry": (0.87, 0.19, 0.25), "maroon": (0.50, 0.00, 0.00),
    "green": (0.16, 0.70, 0.25), "emerald": (0.31, 0.78, 0.47),
    "lime": (0.65, 0.89, 0.18), "jade": (0.00, 0.66, 0.42),
    "olive": (0.50, 0.50, 0.00), "fern": (0.31, 0.67, 0.35),
    "blue": (0.16, 0.32, 0.85), "azure": (0.00, 0.50, 1.00),
    "navy": (0.00, 0.00, 0.50), "cobalt": (0.00, 0.28, 0.67),
    "sapphire": (0.06, 0.32, 0.73), "cerulean": (0.00, 0.48, 0.65),
    "yellow": (0.95, 0.87, 0.13), "gold": (1.00, 0.84, 0.00),
    "amber": (1.00, 0.75, 0.00), "mustard": (0.89, 0.76, 0.22),
    "honey": (0.92, 0.78, 0.31), "saffron": (0.96, 0.77, 0.19),
    "purple": (0.55, 0.18, 0.65), "violet": (0.56, 0.13, 0.82),
    "plum": (0.56, 0.27, 0.52), "lavender": (0.71, 0.49, 0.86),
    "mauve": (0.69, 0.47, 0.60), "amethyst": (0.60, 0.40, 0.80),
    "orange": (0.95, 0.55, 0.11), "tangerine": (0.95, 0.52, 0.00),
    "apricot": (0.98, 0.68, 0.49),
    "pink": (0.95, 0.52, 0.70), "magenta": (0.88, 0.11, 0.73),
    "rose": (0.94, 0.40, 0.53),
    "teal": (0.00, 0.50, 0.50), "cyan": (0.05, 0.77, 0.85),
    "turquoise": (0.19, 0.79, 0.74),
    "brown": (0.45, 0.29, 0.14), "chocolate": (0.48, 0.25, 0.10),
    "chestnut": (0.58, 0.27, 0.21),
    "gray": (0.50, 0.50, 0.50), "grey": (0.50, 0.50, 0.50),
    "black": (0.06, 0.06, 0.06), "white": (0.97, 0.97, 0.97),
    "ivory": (1.00, 1.00, 0.94), "charcoal": (0.21, 0.21, 0.21),
}

_ANCHOR_GRID = 3           # 3x3x3 lattice over the RGB cube
_ANCHOR_WIDTH = 0.25       # gaussian width of anchor responses
_PROJECTION_SEED = 20240101

_WORD_RE = re.compile(r"[a-z]+")


class ColorProbeEncoder:
    """Hand-built joint image/text encoder over color semantics."""

    def __init__(self, dim: int = 64, grid: int = 2):
        if dim < 8 or grid < 1:
            raise EncoderLoadError(f"color-probe needs dim >= 8, grid >= 1; "
                                   f"got {dim}, {grid}")
        self.dim = dim
        self.grid = grid
        axis = np.linspace(0.15, 0.85, _ANCHOR_GRID)
        self.anchors = np.array(
            [(r, g, b) for r in axis for g in axis for b in axis])
        rng = np.random.default_rng(_PROJECTION_SEED)
        n_features = self.anchors.shape[0] + 3
        self.projection = rng.normal(size=(n_features, dim)) / np.sqrt(n_features)

    @property
    def patch_count(self) -> int:
        return self.grid * self.grid

    def _embed_rgb(self, rgb: np.ndarray) -> np.ndarray:
        rgb = np.asarray(rgb, dtype=np.float64)
        d2 = ((self.anchors - rgb) ** 2).sum(axis=1)
        features = np.concatenate([np.exp(-d2 / (2.0 * _ANCHOR_WIDTH ** 2)), rgb])
        vec = features @ self.projection
        return vec / np.linalg.norm(vec)

    def encode_image(self, image) -> tuple[np.ndarray, np.ndarray]:
        """Returns (class token (D,), patch tokens (grid^2, D))."""
        arr = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
        token = self._embed_rgb(arr.reshape(-1, 3).mean(axis=0))
        h, w = arr.shape[0], arr.shape[1]
        rows = np.array_split(np.arange(h), self.grid)
        cols = np.array_split(np.arange(w), self.grid)
        patches = []
        for r in rows:
            for c in cols:
                cell = arr[np.ix_(r, c)].reshape(-1, 3).mean(axis=0)
                patches.append(self._embed_rgb(cell))
        return token, np.stack(patches)

    def _text_rgb(self, text: str) -> np.ndarray:
        words = _WORD_RE.findall(text.lower())
        hits = [LEXICON[w] for w in words if w in LEXICON]
        if hits:
            return np.mean(hits, axis=0)
        # no color vocabulary: a stable pseudo-color from the text bytes
        import hashlib
        digest = hashlib.md5(" ".join(words).encode("utf-8")).digest()
        return np.array(list(digest[:3]), dtype=np.float64) / 255.0

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._embed_rgb(self._text_rgb(t)) for t in texts])


class HfClipEncoder:
    """transformers CLIP checkpoint adapter; patch tokens go through the
    model's post-layernorm + visual projection into the joint space."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
            self._torch = torch
            self.model = CLIPModel.from_pretrained(model_id).to(device)
            self.processor = CLIPProcessor.from_pretrained(model_id)
            self.model.eval()
        except Exception as exc:
            raise EncoderLoadError(f"cannot load {model_id!r}: {exc}") from exc
        self.device = device
        self.dim = int(self.model.config.projection_dim)
        vision_cfg = self.model.config.vision_config
        self.patch_count = (vision_cfg.image_size // vision_cfg.patch_size) ** 2

    def encode_image(self, image):
        torch = self._torch
        with torch.no_grad():
            inputs = self.processor(images=image.convert("RGB"),
                                    return_tensors="pt")
            vision = self.model.vision_model(**inputs)
            pooled = self.model.visual_projection(vision.pooler_output)
            token = torch.nn.functional.normalize(pooled, dim=-1)[0]
            hidden = self.model.vision_model.post_layernorm(
                vision.last_hidden_state[:, 1:, :])
            patches = self.model.visual_projection(hidden)
            patches = torch.nn.functional.normalize(patches, dim=-1)[0]
        return token.numpy().astype(np.float64), patches.numpy().astype(np.float64)

    def encode_texts(self, texts):
        torch = self._torch
        with torch.no_grad():
            inputs = self.processor(text=texts, return_tensors="pt", padding=True)
            emb = self.model.get_text_features(**inputs)
            emb = torch.nn.functional.normalize(emb, dim=-1)
        return emb.numpy().astype(np.float64)


_COLOR_PROBE_RE = re.compile(r"^color-probe(?:-(\d+))?(?:-g(\d+))?$")


def get_encoder(encoder_id: str, device: str = "cpu"):
    match = _COLOR_PROBE_RE.match(encoder_id)
    if match:
        dim = int(match.group(1)) if match.group(1) else 64
        grid = int(match.group(2)) if match.group(2) else 2
        return ColorProbeEncoder(dim=dim, grid=grid)
    if encoder_id.startswith("hf-clip:"):
        return HfClipEncoder(encoder_id.split(":", 1)[1], device=device)
    raise EncoderLoadError(f"unknown encoder id {encoder_id!r}")
