"""Class/property prototype caches and the hybrid scoring rule.

Both caches are key-value attention lookups: cosine affinities pass through
the sharpness modulator phi(x) = exp(-beta_s (1 - x)) and hit a one-hot
label matrix. Scores mix the scaled zero-shot vector with the two cache
terms through learnable nonnegative weights alpha (property) and beta
(class); the final score is their sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import mpg as mpg_mod
from .datastore import EmbeddingBundle, load_tensor, read_json, save_tensor, write_json
from .errors import (
    ArgumentError,
    DegeneratePrototype,
    NonFiniteLoss,
    ShapeMismatch,
)

DEFAULT_BETA_S = 5.5
DEFAULT_LOGIT_SCALE = 2.0
UNIT_GUARD = 1e-12  # rows are renormalized only when off by more than this


@dataclass
class HybridCache:
    class_keys: np.ndarray    # (N, D), unit rows
    class_labels: np.ndarray  # (N, N) identity
    prop_keys: np.ndarray     # (N*M, D), row n*M+i is class n, slot i
    prop_labels: np.ndarray   # (N*M, N) one-hot by owning class
    alpha: float
    beta: float
    beta_s: float
    logit_scale: float
    m_props: int
    trained: bool = False

    @property
    def n_classes(self) -> int:
        return self.class_keys.shape[0]


@dataclass
class ScoreBreakdown:
    s_clip: np.ndarray
    s_cls_cache: np.ndarray
    s_mp_cache: np.ndarray
    s_ours: np.ndarray


def zero_shot(f_cls: np.ndarray, class_prompts: np.ndarray) -> np.ndarray:
    """Cosine row against every class prompt (unit inputs assumed)."""
    f = np.asarray(f_cls, dtype=np.float64)
    w = np.asarray(class_prompts, dtype=np.float64)
    if f.ndim != 1 or w.ndim != 2 or w.shape[1] != f.shape[0]:
        raise ShapeMismatch(f"zero_shot got f_cls {f.shape}, prompts {w.shape}")
    return w @ f


def phi(x, beta_s: float):
    """Sharpness modulator exp(-beta_s (1 - x)); strictly increasing, phi(1)=1."""
    if beta_s <= 0:
        raise ArgumentError(f"beta_s must be > 0, got {beta_s}")
    return np.exp(-beta_s * (1.0 - np.asarray(x, dtype=np.float64)))


def cache_logits(f: np.ndarray, keys: np.ndarray, labels: np.ndarray,
                 beta_s: float) -> np.ndarray:
    """phi-modulated affinities against the keys, summed into class bins."""
    f = np.asarray(f, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if f.ndim != 1 or keys.ndim != 2 or keys.shape[1] != f.shape[0]:
        raise ShapeMismatch(f"cache_logits got f {f.shape}, keys {keys.shape}")
    if labels.shape[0] != keys.shape[0]:
        raise ShapeMismatch(f"labels rows {labels.shape} vs keys {keys.shape}")
    return phi(keys @ f, beta_s) @ labels


def build_caches(bundle: EmbeddingBundle, params: mpg_mod.MpgParams,
                 beta_s: float = DEFAULT_BETA_S,
                 logit_scale: float = DEFAULT_LOGIT_SCALE) -> HybridCache:
    """Average support tokens per class (and per slot) into unit prototypes."""
    n = bundle.n_classes
    m = params.config.m_tokens
    class_keys = np.empty((n, bundle.dim))
    prop_keys = np.empty((n * m, bundle.dim))
    for c in range(n):
        supports = bundle.supports_of(c)
        token_mean = np.mean([bundle.images[j].class_token for j in supports], axis=0)
        norm = np.linalg.norm(token_mean)
        if norm < 1e-8:
            raise DegeneratePrototype(f"class {c}: token mean norm {norm:.3e}")
        class_keys[c] = token_mean / norm
        slot_tokens = np.stack(
            [mpg_mod.forward(params, bundle.images[j].patches).unit.value
             for j in supports])
        for i in range(m):
            mean = slot_tokens[:, i, :].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-8:
                raise DegeneratePrototype(f"class {c} slot {i}: mean norm {norm:.3e}")
            prop_keys[c * m + i] = mean / norm
    prop_labels = np.zeros((n * m, n))
    for c in range(n):
        prop_labels[c * m:(c + 1) * m, c] = 1.0
    return HybridCache(
        class_keys=class_keys,
        class_labels=np.eye(n),
        prop_keys=prop_keys,
        prop_labels=prop_labels,
        alpha=1.0,
        beta=1.0,
        beta_s=beta_s,
        logit_scale=logit_scale,
        m_props=m,
    )


def hybrid_scores(f_cls: np.ndarray, unit_tokens: np.ndarray, cache: HybridCache,
                  class_prompts: np.ndarray) -> ScoreBreakdown:
    s_clip = cache.logit_scale * zero_shot(f_cls, class_prompts)
    prop_term = np.zeros(cache.n_classes)
    for i in range(unit_tokens.shape[0]):
        prop_term += cache_logits(unit_tokens[i], cache.prop_keys,
                                  cache.prop_labels, cache.beta_s)
    prop_term /= unit_tokens.shape[0]
    s_mp = s_clip + cache.alpha * prop_term
    s_cls = s_clip + cache.beta * cache_logits(f_cls, cache.class_keys,
                                               cache.class_labels, cache.beta_s)
    return ScoreBreakdown(
        s_clip=s_clip, s_cls_cache=s_cls, s_mp_cache=s_mp, s_ours=s_mp + s_cls)


def predict(f_cls: np.ndarray, unit_tokens: np.ndarray, cache: HybridCache,
            class_prompts: np.ndarray) -> tuple[int, ScoreBreakdown]:
    """Argmax of the summed score; ties resolve to the lowest class index."""
    breakdown = hybrid_scores(f_cls, unit_tokens, cache, class_prompts)
    return int(np.argmax(breakdown.s_ours)), breakdown


def _phi_node(sims: ad.Node, beta_s: float) -> ad.Node:
    return ad.exp(ad.mul(ad.add(sims, -1.0), beta_s))


def _cache_logits_node(f_row: np.ndarray, keys: ad.Node, labels: np.ndarray,
                       beta_s: float) -> ad.Node:
    sims = ad.matmul(np.atleast_2d(f_row), ad.transpose(keys))
    return ad.matmul(_phi_node(sims, beta_s), labels)


def cross_entropy(logits: ad.Node, true_index: int) -> ad.Node:
    """Softmax cross-entropy of a (1, N) logit row against one hot index."""
    lse = ad.reduce_sum(ad.logsumexp(logits, axis=-1))
    return ad.sub(lse, ad.reduce_sum(ad.narrow(logits, 1, true_index, 1)))


def _renormalize_rows(keys: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    off = np.abs(norms - 1.0) > UNIT_GUARD
    if not np.any(off):
        return keys
    scale = np.where(off, norms, 1.0)
    return keys / scale


def train_cache(bundle: EmbeddingBundle, cache: HybridCache,
                params: mpg_mod.MpgParams, epochs: int = 15, lr: float = 1e-3,
                batch_size: int = 128, seed: int = 0):
    """Fine-tune cache keys and the mixing weights on the support split.

    Cross-entropy on both score heads, AdamW with a linear warm-up over the
    first tenth of the steps; keys are renormalized to unit rows and
    alpha/beta clamped to >= 0 after every step. The generator stays frozen
    (support tokens are precomputed once). Returns (cache, per-epoch trace).
    """
    if epochs < 1 or batch_size < 1:
        raise ArgumentError("epochs and batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    supports = list(bundle.support)
    feats = {
        j: (bundle.images[j].class_token,
            mpg_mod.forward(params, bundle.images[j].patches).unit.value,
            bundle.images[j].label)
        for j in supports
    }
    prompts = bundle.class_prompts
    m = cache.m_props
    values = {
        "class_keys": cache.class_keys.copy(),
        "prop_keys": cache.prop_keys.copy(),
        "alpha": np.array([cache.alpha]),
        "beta": np.array([cache.beta]),
    }
    state = ad.AdamWState()
    steps_per_epoch = math.ceil(len(supports) / batch_size)
    total_steps = epochs * steps_per_epoch
    warm_steps = max(1, round(0.1 * total_steps))
    step = 0
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(supports))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = [supports[i] for i in order[start:start + batch_size]]
            nodes = {name: ad.leaf(v) for name, v in values.items()}
            loss = None
            for j in batch:
                f_cls, unit_tokens, label = feats[j]
                s_clip = cache.logit_scale * zero_shot(f_cls, prompts)
                cls_term = _cache_logits_node(f_cls, nodes["class_keys"],
                                              cache.class_labels, cache.beta_s)
                s_cls = ad.add(s_clip[None, :], ad.mul(cls_term, nodes["beta"]))
                prop_term = None
                for i in range(m):
                    one = _cache_logits_node(unit_tokens[i], nodes["prop_keys"],
                                             cache.prop_labels, cache.beta_s)
                    prop_term = one if prop_term is None else ad.add(prop_term, one)
                s_mp = ad.add(s_clip[None, :],
                              ad.mul(ad.mul(prop_term, 1.0 / m), nodes["alpha"]))
                item = ad.add(cross_entropy(s_cls, label), cross_entropy(s_mp, label))
                loss = item if loss is None else ad.add(loss, item)
            loss = ad.mul(loss, 1.0 / len(batch))
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise NonFiniteLoss(f"epoch {epoch}, step {step}: loss {loss_value}")
            ad.backward(loss)
            step += 1
            lr_t = lr * min(1.0, step / warm_steps)
            grads = {name: node.grad for name, node in nodes.items()}
            values = ad.adamw_step(values, grads, state, lr=lr_t)
            values["class_keys"] = _renormalize_rows(values["class_keys"])
            values["prop_keys"] = _renormalize_rows(values["prop_keys"])
            values["alpha"] = np.maximum(values["alpha"], 0.0)
            values["beta"] = np.maximum(values["beta"], 0.0)
            epoch_loss += loss_value * len(batch)
        trace.append({"epoch": epoch, "mean_loss": epoch_loss / len(supports)})
    tuned = HybridCache(
        class_keys=values["class_keys"],
        class_labels=cache.class_labels,
        prop_keys=values["prop_keys"],
        prop_labels=cache.prop_labels,
        alpha=float(values["alpha"][0]),
        beta=float(values["beta"][0]),
        beta_s=cache.beta_s,
        logit_scale=cache.logit_scale,
        m_props=cache.m_props,
        trained=True,
    )
    return tuned, trace


@dataclass
class EvalOutcome:
    accuracies: dict[str, float]
    angles: list[dict]
    n_queries: int


def evaluate(bundle: EmbeddingBundle, params: mpg_mod.MpgParams,
             cache: HybridCache) -> EvalOutcome:
    """All four accuracy variants over the query split, plus token angles."""
    hits = {"zero_shot": 0, "cls_cache_only": 0, "mp_cache_only": 0, "combined": 0}
    m = params.config.m_tokens
    angle_sums = {}
    for q in bundle.query:
        image = bundle.images[q]
        unit_tokens = mpg_mod.forward(params, image.patches).unit.value
        breakdown = hybrid_scores(image.class_token, unit_tokens, cache,
                                  bundle.class_prompts)
        hits["zero_shot"] += int(np.argmax(breakdown.s_clip) == image.label)
        hits["cls_cache_only"] += int(np.argmax(breakdown.s_cls_cache) == image.label)
        hits["mp_cache_only"] += int(np.argmax(breakdown.s_mp_cache) == image.label)
        hits["combined"] += int(np.argmax(breakdown.s_ours) == image.label)
        for i, j, deg in mpg_mod.token_angles(unit_tokens):
            angle_sums[(i, j)] = angle_sums.get((i, j), 0.0) + deg
    count = max(1, len(bundle.query))
    angles = [
        {"slots": [i, j], "mean_deg": angle_sums[(i, j)] / count}
        for (i, j) in sorted(angle_sums)
    ]
    return EvalOutcome(
        accuracies={k: v / count for k, v in hits.items()},
        angles=angles,
        n_queries=len(bundle.query),
    )


def save_cache(out_dir, cache: HybridCache) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in (("class_keys", cache.class_keys),
                      ("prop_keys", cache.prop_keys)):
        rel = f"cache_{name}.pct1"
        shape, crc = save_tensor(out / rel, arr)
        files[name] = {"path": rel, "shape": list(shape), "crc32": crc}
    write_json(out / "cache.json", {
        "format_version": 1,
        "alpha": cache.alpha,
        "beta": cache.beta,
        "beta_s": cache.beta_s,
        "logit_scale": cache.logit_scale,
        "M": cache.m_props,
        "N": cache.n_classes,
        "trained": cache.trained,
        "files": files,
    })


def load_cache(in_dir) -> HybridCache:
    root = Path(in_dir)
    doc = read_json(root / "cache.json")
    class_keys = load_tensor(root / doc["files"]["class_keys"]["path"])
    prop_keys = load_tensor(root / doc["files"]["prop_keys"]["path"])
    n = int(doc["N"])
    m = int(doc["M"])
    prop_labels = np.zeros((n * m, n))
    for c in range(n):
        prop_labels[c * m:(c + 1) * m, c] = 1.0
    return HybridCache(
        class_keys=class_keys,
        class_labels=np.eye(n),
        prop_keys=prop_keys,
        prop_labels=prop_labels,
        alpha=float(doc["alpha"]),
        beta=float(doc["beta"]),
        beta_s=float(doc["beta_s"]),
        logit_scale=float(doc["logit_scale"]),
        m_props=m,
        trained=bool(doc["trained"]),
    )
