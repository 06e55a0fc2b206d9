import json

import numpy as np
import pytest
from PIL import Image

# class name -> base RGB (matches the encoder lexicon hue for that word)
CLASS_COLORS = {
    "amber": (255, 191, 0),
    "azure": (0, 128, 255),
    "crimson": (219, 20, 61),
    "emerald": (79, 199, 120),
    "violet": (143, 33, 209),
}

# raw "endpoint" responses: bulleted/numbered lines, some deliberately
# containing the class name to exercise stripping
RAW_RESPONSES = {
    "amber": "1. warm gold surface\n2. honey colored sheen\n3. deep mustard tone\n"
             "4. saffron tinted glow\n5. soft yellow hue\n6. glossy gold finish\n"
             "7. pale honey edge\n8. rich mustard core",
    "azure": "- bright cerulean surface\n- deep cobalt sheen\n- clear blue tone\n"
             "- pale sapphire tint\n- cool navy shadow\n- vivid cerulean glow\n"
             "- soft blue haze\n- glossy cobalt finish",
    "crimson": "1. deep ruby surface\n2. rich scarlet sheen\n3. dark cherry tone\n"
               "4. vivid crimson glow\n5. warm red tint\n6. faint maroon shadow\n"
               "7. glossy cherry finish\n8. bright scarlet edge",
    "emerald": "* lush jade surface\n* bright green sheen\n* soft lime tint\n"
               "* deep fern tone\n* cool jade shadow\n* vivid green glow\n"
               "* pale lime edge\n* glossy jade finish",
    "violet": "1. deep purple surface\n2. soft lavender sheen\n3. rich plum tone\n"
              "4. pale mauve tint\n5. vivid amethyst glow\n6. muted violet shadow\n"
              "7. glossy plum finish\n8. bright amethyst edge",
}


def build_micro_dataset(root, images_per_class=4, size=32, seed=0):
    """Class-labeled folders of noisy solid-color PNGs; returns class names."""
    rng = np.random.default_rng(seed)
    for name, rgb in sorted(CLASS_COLORS.items()):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        base = np.array(rgb, dtype=float)[None, None, :]
        for i in range(images_per_class):
            scale = rng.uniform(0.88, 1.12)
            jitter = rng.normal(0.0, 14.0, size=(size, size, 3))
            arr = np.clip(base * scale + jitter, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(folder / f"img_{i:02d}.png")
    return sorted(CLASS_COLORS)


@pytest.fixture
def micro_dataset(tmp_path):
    root = tmp_path / "dataset"
    names = build_micro_dataset(root)
    return root, names


@pytest.fixture
def response_cache(tmp_path):
    path = tmp_path / "llm_cache.json"
    path.write_text(json.dumps(
        {"model": "cached", "dataset_type": "real world",
         "responses": RAW_RESPONSES},
        indent=2, sort_keys=True))
    return path
