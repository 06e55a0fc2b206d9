"""Contrastive alignment of property tokens to their selected descriptions.

Per support image and token slot, one positive description plus a scheduled
mix of hard/general negatives are drawn fresh every iteration and scored by
cosine against the slot's token inside the usual InfoNCE ratio. The hard
fraction ramps linearly over epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mpg as mpg_mod
from .datastore import DescriptionSet, EmbeddingBundle
from .errors import ArgumentError, NonFiniteLoss
from .propmine import PropertyAssignment


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.3
    n_negatives: int = 100
    hard_frac_start: float = 0.1
    hard_frac_end: float = 0.4
    epochs: int = 30
    lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    layers: int = 2
    hidden: int | None = None
    heads: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.hard_frac_start <= self.hard_frac_end <= 1.0:
            raise ArgumentError(
                f"need 0 <= hard_frac_start <= hard_frac_end <= 1, got "
                f"{self.hard_frac_start}, {self.hard_frac_end}")
        if self.n_negatives < 1:
            raise ArgumentError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be >= 1")


@dataclass
class ContrastBatchItem:
    image_index: int
    slot: int
    positive: int            # global description index
    hard: list[int] = field(default_factory=list)
    general: list[int] = field(default_factory=list)


def schedule(epoch: int, cfg: ContrastConfig) -> tuple[int, int]:
    """Negative-pool quotas for one epoch; the hard share ramps linearly."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        frac = cfg.hard_frac_start
    else:
        frac = cfg.hard_frac_start + (
            (cfg.hard_frac_end - cfg.hard_frac_start) * epoch / (cfg.epochs - 1))
    n_hard = round(frac * cfg.n_negatives)
    return n_hard, cfg.n_negatives - n_hard


def _draw(pool: list[int], count: int, rng) -> list[int]:
    if count == 0:
        return []
    picked = rng.choice(len(pool), size=count, replace=len(pool) < count)
    return [pool[int(i)] for i in picked]


def sample_item(assignment: PropertyAssignment, label: int, image_index: int,
                slot: int, n_hard: int, n_general: int, rng) -> ContrastBatchItem:
    """Draw one positive and the negative quota for an (image, slot) pair.

    Undersized pools are sampled with replacement; an empty general pool
    shifts its quota to hard (and vice versa).
    """
    entry = assignment.for_class(label)
    positives = entry.slots[slot].positives
    hard_pool = entry.hard_negatives
    general_pool = entry.general_negatives
    if not general_pool:
        n_hard, n_general = n_hard + n_general, 0
    if not hard_pool:
        if not general_pool:
            raise ArgumentError(f"class {label} has no negative descriptions")
        n_general, n_hard = n_general + n_hard, 0
    positive = positives[int(rng.integers(len(positives)))]
    return ContrastBatchItem(
        image_index=image_index,
        slot=slot,
        positive=positive,
        hard=_draw(hard_pool, n_hard, rng),
        general=_draw(general_pool, n_general, rng),
    )


def draw_epoch_samples(bundle: EmbeddingBundle, assignment: PropertyAssignment,
                       image_indices, epoch: int, cfg: ContrastConfig,
                       rng) -> list[ContrastBatchItem]:
    n_hard, n_general = schedule(epoch, cfg)
    items = []
    for j in image_indices:
        label = bundle.images[j].label
        for slot in range(assignment.m_props):
            items.append(sample_item(assignment, label, j, slot,
                                     n_hard, n_general, rng))
    return items


def info_nce(token: ad.Node, positive: np.ndarray, hard: np.ndarray,
             general: np.ndarray, tau: float) -> ad.Node:
    """-log of the positive's share after temperature-scaled exponentiation.

    token is a unit row (1 x D) in the graph; the description rows are
    constants. Equals ln(1 + N_neg) under uniform similarities.
    """
    if tau <= 0:
        raise ArgumentError(f"tau must be > 0, got {tau}")
    bank = [np.atleast_2d(positive)]
    if hard is not None and len(hard):
        bank.append(np.atleast_2d(hard))
    if general is not None and len(general):
        bank.append(np.atleast_2d(general))
    sims = ad.matmul(token, np.concatenate(bank, axis=0).T)
    scaled = ad.mul(sims, 1.0 / tau)
    positive_term = ad.reduce_sum(ad.narrow(scaled, 1, 0, 1))
    return ad.sub(ad.reduce_sum(ad.logsumexp(scaled, axis=-1)), positive_term)


def property_loss(params: mpg_mod.MpgParams, bundle: EmbeddingBundle,
                  extended: np.ndarray, items: list[ContrastBatchItem],
                  tau: float) -> ad.Node:
    """Sum of info_nce terms over items, one MPG forward per distinct image."""
    by_image: dict[int, list[ContrastBatchItem]] = {}
    for item in items:
        by_image.setdefault(item.image_index, []).append(item)
    total = None
    for j, group in by_image.items():
        tokens = mpg_mod.forward(params, bundle.images[j].patches).unit
        for item in group:
            token = ad.narrow(tokens, 0, item.slot, 1)
            loss = info_nce(token, extended[item.positive],
                            extended[item.hard], extended[item.general], tau)
            total = loss if total is None else ad.add(total, loss)
    if total is None:
        raise ArgumentError("no items to score")
    return total


def total_property_loss(bundle: EmbeddingBundle, params: mpg_mod.MpgParams,
                        assignment: PropertyAssignment, desc_set: DescriptionSet,
                        epoch: int, cfg: ContrastConfig, rng) -> ad.Node:
    """Fresh samples for every (support image, slot), summed info_nce."""
    items = draw_epoch_samples(bundle, assignment, bundle.support, epoch, cfg, rng)
    return property_loss(params, bundle, desc_set.extended_matrix, items, cfg.tau)


def train_mpg(bundle: EmbeddingBundle, desc_set: DescriptionSet,
              assignment: PropertyAssignment, cfg: ContrastConfig,
              params: mpg_mod.MpgParams | None = None):
    """Minibatch AdamW descent on the property loss; returns (params, trace).

    The trace lists per-epoch mean loss per info_nce term plus the negative
    quotas in force. Deterministic per cfg.seed.
    """
    if params is None:
        params = mpg_mod.init_params(
            m_tokens=assignment.m_props, dim=bundle.dim, layers=cfg.layers,
            hidden=cfg.hidden, heads=cfg.heads, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    extended = desc_set.extended_matrix
    state = ad.AdamWState()
    trace = []
    for epoch in range(cfg.epochs):
        n_hard, n_general = schedule(epoch, cfg)
        order = rng.permutation(len(bundle.support))
        epoch_loss_sum = 0.0
        epoch_terms = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [bundle.support[i] for i in order[start:start + cfg.batch_size]]
            items = []
            for j in batch:
                label = bundle.images[j].label
                for slot in range(assignment.m_props):
                    items.append(sample_item(assignment, label, j, slot,
                                             n_hard, n_general, rng))
            loss = ad.mul(property_loss(params, bundle, extended, items, cfg.tau),
                          1.0 / len(items))
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {start}: loss {loss_value}")
            ad.backward(loss)
            grads = {name: node.grad for name, node in params.nodes.items()}
            values = ad.adamw_step({n: nd.value for n, nd in params.nodes.items()},
                                   grads, state, lr=cfg.lr)
            params = params.replace_values(values)
            epoch_loss_sum += loss_value * len(items)
            epoch_terms += len(items)
        trace.append({
            "epoch": epoch,
            "mean_loss": epoch_loss_sum / epoch_terms,
            "n_hard": n_hard,
            "n_general": n_general,
        })
    return params, trace
