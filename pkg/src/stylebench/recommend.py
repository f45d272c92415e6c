"""Uniform top-k recommendation facade over the three strategies.

All strategies rank the training-period candidate set only, break score
ties by ascending item id, and truncate to min(k, #candidates). Most
popular gives every user the same list; collaborative filtering covers
only users seen in training (new users come back in an uncovered list);
the content-based forest covers every user that has features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .als import FactorModel
from .data import FeatureTable, PopularityTable
from .errors import EmptyCandidates, UnknownItem
from .forest import ForestModel, encode_entities, predict_forest

ALGORITHMS = ("MP", "CF", "CB")


@dataclass(frozen=True)
class RankedList:
    """A user's top-k recommendation: parallel item/score tuples."""

    user_id: str
    items: tuple[str, ...]
    scores: tuple[float, ...]
    algorithm: str

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores must be parallel")
        if len(set(self.items)) != len(self.items):
            raise ValueError("recommended items must be distinct")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")


def top_k_select(scores: Mapping[str, float], k: int) -> tuple[tuple[str, ...], tuple[float, ...]]:
    """The k highest-scoring items, ties broken by ascending item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not scores:
        raise EmptyCandidates("no candidate items to rank")
    items = sorted(scores)
    vec = np.array([scores[i] for i in items], dtype=np.float64)
    top = _top_k_indices(vec, k)
    return tuple(items[i] for i in top), tuple(float(vec[i]) for i in top)


def _top_k_indices(scores_by_id_asc: np.ndarray, k: int) -> np.ndarray:
    """Top-k positions of a score vector indexed by id-ascending candidates.

    The stable descending sort makes equal scores fall back to ascending
    item id.
    """
    order = np.argsort(-scores_by_id_asc, kind="stable")
    return order[: min(k, len(scores_by_id_asc))]


def score_mp(pop: PopularityTable, candidates: Sequence[str]) -> np.ndarray:
    """Units-sold score for each candidate (identical for every user)."""
    return np.array([pop.quantities[i] for i in candidates], dtype=np.float64)


def score_cb_users(
    model: ForestModel,
    users: Sequence[str],
    candidates: Sequence[str],
    user_features: FeatureTable,
    item_features: FeatureTable,
    batch_users: int = 128,
) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (user_id, score vector over candidates) from the forest.

    Encodes each side once and assembles (user x candidate) rows in user
    batches to bound memory.
    """
    n_items = len(candidates)
    enc_items = encode_entities(model.schema, item_features, "item", list(candidates))
    enc_users = encode_entities(model.schema, user_features, "user", list(users))
    for start in range(0, len(users), batch_users):
        batch = list(users[start : start + batch_users])
        rows = np.hstack(
            [
                np.repeat(enc_users[start : start + len(batch)], n_items, axis=0),
                np.tile(enc_items, (len(batch), 1)),
            ]
        )
        preds = predict_forest(model, rows)
        for b, user in enumerate(batch):
            yield user, preds[b * n_items : (b + 1) * n_items]


def _ranked_from_vector(
    user: str, candidates: Sequence[str], vec: np.ndarray, k: int, algorithm: str
) -> RankedList:
    top = _top_k_indices(vec, k)
    return RankedList(
        user_id=user,
        items=tuple(candidates[i] for i in top),
        scores=tuple(float(vec[i]) for i in top),
        algorithm=algorithm,
    )


def recommend_mp(
    pop: PopularityTable, users: Sequence[str], k: int
) -> list[RankedList]:
    """The same most-popular list for every user; scores are quantities."""
    if not pop.quantities:
        raise EmptyCandidates("popularity table is empty")
    items = pop.ranking[: min(k, len(pop.ranking))]
    scores = tuple(float(pop.quantities[i]) for i in items)
    return [
        RankedList(user_id=u, items=items, scores=scores, algorithm="MP")
        for u in sorted(users)
    ]


def recommend_cf(
    model: FactorModel,
    users: Sequence[str],
    candidates: Sequence[str],
    k: int,
) -> tuple[list[RankedList], list[str]]:
    """Factor-model lists for training-known users; the rest are returned
    uncovered rather than silently scored."""
    candidates = sorted(candidates)
    try:
        cand_idx = np.array([model.item_index[i] for i in candidates], dtype=np.int64)
    except KeyError as exc:
        raise UnknownItem(f"candidate {exc.args[0]!r} was not in training") from None
    lists: list[RankedList] = []
    uncovered: list[str] = []
    for user in sorted(users):
        if user not in model.user_index:
            uncovered.append(user)
            continue
        vec = model.scores_for_user(user, cand_idx)
        lists.append(_ranked_from_vector(user, candidates, vec, k, "CF"))
    return lists, uncovered


def recommend_cb(
    model: ForestModel,
    users: Sequence[str],
    candidates: Sequence[str],
    k: int,
    user_features: FeatureTable,
    item_features: FeatureTable,
) -> list[RankedList]:
    """Forest lists for every user; features stand in for history, so new
    users are covered too."""
    candidates = sorted(candidates)
    ordered = sorted(users)
    lists: list[RankedList] = []
    for user, vec in score_cb_users(model, ordered, candidates, user_features, item_features):
        lists.append(_ranked_from_vector(user, candidates, vec, k, "CB"))
    return lists
