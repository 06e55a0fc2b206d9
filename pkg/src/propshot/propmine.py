"""Pruning of description pools into per-class dominant properties.

All class descriptions are clustered jointly (plain embeddings, no class
names), each cluster is scored against a class's support tokens by mean
cosine, and the top-M clusters define the class's property slots. Slot rank
is the token mapping used by contrastive training: slot i always trains
against the i-th ranked cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastore import DescriptionSet, EmbeddingBundle
from .errors import ArgumentError, EmptyClass, EmptyInput, NoPositives

CONFUSION_TOP = 5


@dataclass
class ClusterSet:
    k: int
    assignment: np.ndarray   # (P,) cluster id per description
    centroids: np.ndarray    # (k, D)
    inertia: float
    seed: int

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster_id)


@dataclass
class SlotAssignment:
    cluster: int
    positives: list[int]          # global description indices
    fallback_from: int | None = None


@dataclass
class ClassAssignment:
    class_id: int
    ranked_clusters: list[int]
    confusion: list[int]
    slots: list[SlotAssignment]
    hard_negatives: list[int] = field(default_factory=list)
    general_negatives: list[int] = field(default_factory=list)

    @property
    def positive_union(self) -> list[int]:
        seen: set[int] = set()
        for slot in self.slots:
            seen.update(slot.positives)
        return sorted(seen)


@dataclass
class PropertyAssignment:
    m_props: int
    classes: list[ClassAssignment]

    def for_class(self, class_id: int) -> ClassAssignment:
        return self.classes[class_id]

    def to_json_dict(self) -> dict:
        return {
            "m_props": self.m_props,
            "classes": [
                {
                    "class_id": c.class_id,
                    "ranked_clusters": c.ranked_clusters,
                    "confusion": c.confusion,
                    "slots": [
                        {
                            "cluster": s.cluster,
                            "positives": s.positives,
                            "fallback_from": s.fallback_from,
                        }
                        for s in c.slots
                    ],
                    "hard_negatives": c.hard_negatives,
                    "general_negatives": c.general_negatives,
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PropertyAssignment":
        classes = [
            ClassAssignment(
                class_id=int(c["class_id"]),
                ranked_clusters=[int(x) for x in c["ranked_clusters"]],
                confusion=[int(x) for x in c["confusion"]],
                slots=[
                    SlotAssignment(
                        cluster=int(s["cluster"]),
                        positives=[int(x) for x in s["positives"]],
                        fallback_from=None if s["fallback_from"] is None
                        else int(s["fallback_from"]),
                    )
                    for s in c["slots"]
                ],
                hard_negatives=[int(x) for x in c["hard_negatives"]],
                general_negatives=[int(x) for x in c["general_negatives"]],
            )
            for c in doc["classes"]
        ]
        return cls(m_props=int(doc["m_props"]), classes=classes)


def default_cluster_count(n_classes: int) -> int:
    """Half the class count, rounded up so tiny problems keep k >= 1."""
    return max(1, (n_classes + 1) // 2)


def build_pool(desc_set: DescriptionSet) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate every class's plain embeddings with an ownership map."""
    for c in desc_set.classes:
        if len(c.texts) == 0:
            raise EmptyClass(f"class {c.class_id} has no descriptions")
    if not desc_set.classes:
        raise EmptyClass("description set is empty")
    return desc_set.plain_matrix, desc_set.owners


def _farthest_point_seed(points: np.ndarray, k: int, rng) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    min_d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        min_d2[chosen[-1]] = -np.inf
        nxt = int(np.argmax(min_d2))  # argmax ties resolve to the lowest index
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(pool: np.ndarray, k: int, seed: int, max_iter: int = 100) -> ClusterSet:
    """Lloyd iterations with farthest-point seeding from a seeded generator.

    Runs until the assignment is a fixpoint or max_iter. Empty clusters are
    repaired by reseeding them with the point farthest from its current
    centroid, which can only lower the objective; inertia is asserted
    non-increasing every iteration.
    """
    pool = np.asarray(pool, dtype=np.float64)
    p = pool.shape[0]
    if k < 1 or k > p:
        raise ArgumentError(f"k must be in [1, {p}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_seed(pool, k, rng)
    prev_assign = None
    prev_inertia = np.inf
    assign = np.zeros(p, dtype=int)
    for _ in range(max_iter):
        d2 = ((pool[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own_d2 = d2[np.arange(p), assign]
            movable = np.flatnonzero(counts[assign] >= 2)
            far = int(movable[np.argmax(own_d2[movable])])
            assign[far] = empty
            centroids[empty] = pool[far]
            d2[:, empty] = ((pool - pool[far]) ** 2).sum(axis=1)
            counts = np.bincount(assign, minlength=k)
        inertia = float(d2[np.arange(p), assign].sum())
        assert inertia <= prev_inertia + 1e-9, "k-means inertia increased"
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()
        for j in range(k):
            centroids[j] = pool[assign == j].mean(axis=0)
    final_inertia = float(((pool - centroids[assign]) ** 2).sum())
    return ClusterSet(k=k, assignment=assign, centroids=centroids,
                      inertia=final_inertia, seed=seed)


def score_cluster(support_tokens: np.ndarray, members: np.ndarray) -> float:
    """Mean cosine over the K x P_i support/member similarity matrix."""
    support_tokens = np.atleast_2d(np.asarray(support_tokens, dtype=np.float64))
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if support_tokens.shape[0] == 0 or members.shape[0] == 0:
        raise EmptyInput("score_cluster needs nonempty supports and members")
    return float((support_tokens @ members.T).mean())


def select_top_m(scores, m: int) -> list[int]:
    """Descending by score, ties to the lower cluster id; rank = token slot."""
    scores = np.asarray(scores, dtype=np.float64)
    if m < 1 or m > scores.shape[0]:
        raise ArgumentError(f"m must be in [1, {scores.shape[0]}], got {m}")
    order = sorted(range(scores.shape[0]), key=lambda j: (-scores[j], j))
    return order[:m]


def confusion_classes(bundle: EmbeddingBundle, class_id: int,
                      top: int = CONFUSION_TOP) -> list[int]:
    """Other classes ranked by mean zero-shot score over this class's supports."""
    tokens = bundle.support_tokens(class_id)
    mean_scores = (tokens @ bundle.class_prompts.T).mean(axis=0)
    others = [c for c in range(bundle.n_classes) if c != class_id]
    others.sort(key=lambda c: (-mean_scores[c], c))
    return others[:top]


def assemble_assignment(bundle: EmbeddingBundle, desc_set: DescriptionSet,
                        clusters: ClusterSet, m_props: int) -> PropertyAssignment:
    """Build per-class slot pools from ranked clusters.

    Positives for slot i are the class's own extended descriptions inside the
    i-th ranked cluster; a selected cluster owning none falls back to the
    nearest-by-centroid cluster that does (recorded on the slot). Hard
    negatives are the confusion classes' positives, general negatives the
    positives of every remaining class.
    """
    pool, owners = build_pool(desc_set)
    n = bundle.n_classes
    member_ids = [clusters.members(j) for j in range(clusters.k)]

    def owned(c: int, j: int) -> list[int]:
        ids = member_ids[j]
        return [int(g) for g in ids[owners[ids] == c]]

    classes: list[ClassAssignment] = []
    for c in range(n):
        if not np.any(owners == c):
            raise NoPositives(f"class {c} owns no descriptions in any cluster")
        supports = bundle.support_tokens(c)
        scores = [score_cluster(supports, pool[member_ids[j]])
                  for j in range(clusters.k)]
        ranked = select_top_m(scores, m_props)
        own_clusters = [j for j in range(clusters.k) if owned(c, j)]
        slots: list[SlotAssignment] = []
        for j in ranked:
            positives = owned(c, j)
            if positives:
                slots.append(SlotAssignment(cluster=j, positives=sorted(positives)))
                continue
            # nearest centroid among clusters that do own class-c descriptions
            dists = [(float(((clusters.centroids[j] - clusters.centroids[j2]) ** 2).sum()), j2)
                     for j2 in own_clusters]
            _, best = min(dists)
            slots.append(SlotAssignment(
                cluster=best, positives=sorted(owned(c, best)), fallback_from=j))
        classes.append(ClassAssignment(
            class_id=c,
            ranked_clusters=list(ranked),
            confusion=confusion_classes(bundle, c),
            slots=slots,
        ))

    for entry in classes:
        confusion = set(entry.confusion)
        hard: set[int] = set()
        general: set[int] = set()
        for other in classes:
            if other.class_id == entry.class_id:
                continue
            target = hard if other.class_id in confusion else general
            target.update(other.positive_union)
        entry.hard_negatives = sorted(hard)
        entry.general_negatives = sorted(general)
    return PropertyAssignment(m_props=m_props, classes=classes)
