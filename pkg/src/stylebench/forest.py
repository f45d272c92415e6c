"""Regression random forest over user x product feature rows, trained on
labels augmented with factor-model predictions.

Observed pairs keep their implicit interaction value as the label; for a
seeded sample of unobserved pairs the label is the factor-model score
clamped to [0, 1]. Trees split numeric features on thresholds and
categorical features on level subsets, always choosing the best
variance-reducing split among a seeded random feature subset.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .als import ConfidenceMatrix, FactorModel
from .data import Dataset, FeatureTable
from .errors import DegenerateTableWarning, MissingFeatures, SchemaMismatch

# Exhaustive level-subset search is exponential; above this many levels a
# split scans prefixes of the levels ordered by mean label instead.
_EXACT_SUBSET_LEVELS = 12
_ZERO_SSE = 1e-12


@dataclass(frozen=True)
class FeatureSpec:
    """One model feature: its source table column and encoding."""

    name: str
    side: str  # "user" | "item"
    column: str
    kind: str  # "numeric" | "categorical"
    levels: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FeatureSchema:
    """Concatenated user + item feature layout shared by table and model."""

    specs: tuple[FeatureSpec, ...]

    @property
    def n_features(self) -> int:
        return len(self.specs)

    @classmethod
    def from_tables(cls, user_features: FeatureTable, item_features: FeatureTable) -> "FeatureSchema":
        specs: list[FeatureSpec] = []
        for side, table in (("user", user_features), ("item", item_features)):
            for column, col in table.columns.items():
                specs.append(
                    FeatureSpec(
                        name=f"{side}.{column}",
                        side=side,
                        column=column,
                        kind=col.kind,
                        levels=col.vocabulary,
                    )
                )
        return cls(specs=tuple(specs))

    def side_specs(self, side: str) -> list[FeatureSpec]:
        return [s for s in self.specs if s.side == side]

    def max_levels(self) -> int:
        sizes = [len(s.levels) for s in self.specs if s.levels]
        return max(sizes, default=1)


def encode_entities(
    schema: FeatureSchema, table: FeatureTable, side: str, ids: list[str]
) -> np.ndarray:
    """Encode one side's features for the given ids: numeric values as-is,
    categorical values as level codes. Raises MissingFeatures for absent ids.
    """
    for eid in ids:
        if eid not in table:
            raise MissingFeatures(f"{side} {eid!r} has no feature row")
    rows = np.array([table.index_of(eid) for eid in ids], dtype=np.int64)
    specs = schema.side_specs(side)
    out = np.empty((len(ids), len(specs)), dtype=np.float64)
    for j, spec in enumerate(specs):
        col = table.columns.get(spec.column)
        if col is None or col.kind != spec.kind:
            raise SchemaMismatch(f"column {spec.column!r} missing or wrong kind")
        if spec.kind == "numeric":
            out[:, j] = col.values[rows]
        else:
            code = {level: float(c) for c, level in enumerate(spec.levels)}
            try:
                out[:, j] = [code[v] for v in col.values[rows]]
            except KeyError as exc:
                raise SchemaMismatch(
                    f"level {exc.args[0]!r} not in schema for {spec.name}"
                ) from None
    return out


@dataclass(frozen=True, eq=False)
class AugmentedTable:
    """Training rows: (user, item, encoded features, augmented label)."""

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters; features_per_split=None means ceil(p/3)."""

    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    features_per_split: int | None = None
    negatives_per_user: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("n_trees, max_depth and min_leaf must be positive")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be positive")
        if self.negatives_per_user < 1:
            raise ValueError("negatives_per_user must be positive")

    def resolved_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is None:
            return math.ceil(n_features / 3)
        if self.features_per_split > n_features:
            raise ValueError(
                f"features_per_split={self.features_per_split} exceeds {n_features} features"
            )
        return self.features_per_split


@dataclass(frozen=True, eq=False)
class Tree:
    """One regression tree in flat-array form.

    ``feature`` is -1 at leaves; categorical nodes test membership of the
    level code in ``members[node]``, numeric nodes compare against
    ``threshold[node]`` (<= goes left).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    is_cat: np.ndarray
    members: np.ndarray  # (n_nodes, max_levels) bool

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        cur = np.zeros(n, dtype=np.int64)
        row_ids = np.arange(n)
        for _ in range(self.n_nodes):
            feat = self.feature[cur]
            internal = feat >= 0
            if not internal.any():
                break
            vals = x[row_ids, np.where(internal, feat, 0)]
            with np.errstate(invalid="ignore"):
                go_left = vals <= self.threshold[cur]
            cat = self.is_cat[cur] & internal
            if cat.any():
                codes = np.clip(vals.astype(np.int64), 0, self.members.shape[1] - 1)
                go_left = np.where(cat, self.members[cur, codes], go_left)
            nxt = np.where(go_left, self.left[cur], self.right[cur])
            cur = np.where(internal, nxt, cur)
        return self.value[cur]


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Averaged ensemble of regression trees plus the shared schema."""

    trees: tuple[Tree, ...]
    schema: FeatureSchema
    config: ForestConfig
    label_min: float
    label_max: float


# ---------------------------------------------------------------------------
# Label augmentation
# ---------------------------------------------------------------------------


def augment_labels(
    train: Dataset,
    cm: ConfidenceMatrix,
    als: FactorModel,
    cfg: ForestConfig,
) -> AugmentedTable:
    """Build the forest's training table from observed and sampled cells.

    Observed (u, i) pairs keep their implicit rating as the label. Per
    user, ``negatives_per_user`` unobserved items are drawn uniformly
    without replacement (seeded) and labeled with the factor-model score
    clamped to [0, 1].
    """
    if train.user_features is None or train.item_features is None:
        raise MissingFeatures("training dataset has no user/item feature tables")
    schema = FeatureSchema.from_tables(train.user_features, train.item_features)
    users = list(cm.users)
    items = list(cm.items)
    enc_users = encode_entities(schema, train.user_features, "user", users)
    enc_items = encode_entities(schema, train.item_features, "item", items)

    n_items = len(items)
    rng = np.random.default_rng(np.random.SeedSequence([_mask_seed(cfg.seed), 0]))
    user_rows: list[int] = []
    item_rows: list[int] = []
    labels: list[float] = []
    indptr, indices, data = cm.ratings.indptr, cm.ratings.indices, cm.ratings.data
    for u in range(len(users)):
        lo, hi = indptr[u], indptr[u + 1]
        observed = indices[lo:hi]
        for i, r in zip(observed, data[lo:hi]):
            user_rows.append(u)
            item_rows.append(int(i))
            labels.append(float(r))
        unobserved = np.setdiff1d(np.arange(n_items), observed, assume_unique=False)
        if len(unobserved) == 0:
            continue
        n_neg = min(cfg.negatives_per_user, len(unobserved))
        sampled = rng.choice(unobserved, size=n_neg, replace=False)
        sampled.sort()
        scores = als.item_factors[sampled] @ als.user_factors[u]
        clamped = np.clip(scores, 0.0, 1.0)
        for i, s in zip(sampled, clamped):
            user_rows.append(u)
            item_rows.append(int(i))
            labels.append(float(s))

    u_idx = np.array(user_rows, dtype=np.int64)
    i_idx = np.array(item_rows, dtype=np.int64)
    features = np.hstack([enc_users[u_idx], enc_items[i_idx]])
    return AugmentedTable(
        user_ids=tuple(users[u] for u in user_rows),
        item_ids=tuple(items[i] for i in item_rows),
        features=features,
        labels=np.array(labels, dtype=np.float64),
        schema=schema,
    )


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------


def _mask_seed(seed: int) -> int:
    return seed & 0xFFFFFFFFFFFFFFFF


def _best_numeric_split(col, y, sum_y, min_leaf):
    """Best threshold by the S_L^2/n_L + S_R^2/n_R criterion, or None."""
    n = len(col)
    order = np.argsort(col, kind="stable")
    cs = col[order]
    if cs[0] == cs[-1]:
        return None
    ys = y[order]
    left_sums = np.cumsum(ys)[:-1]
    left_n = np.arange(1, n)
    valid = (cs[1:] > cs[:-1]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
    if not valid.any():
        return None
    crit = np.where(
        valid,
        left_sums**2 / left_n + (sum_y - left_sums) ** 2 / (n - left_n),
        -np.inf,
    )
    t = int(np.argmax(crit))
    return float(crit[t]), float((cs[t] + cs[t + 1]) / 2.0)


def _best_categorical_split(codes, y, sum_y, min_leaf, n_levels):
    """Best level-subset split: exact enumeration up to 12 present levels,
    else prefix splits along levels ordered by mean label.
    Returns (crit, left_codes) or None.
    """
    n = len(codes)
    counts = np.bincount(codes, minlength=n_levels)
    sums = np.bincount(codes, weights=y, minlength=n_levels)
    present = np.flatnonzero(counts)
    k = len(present)
    if k < 2:
        return None
    p_counts = counts[present].astype(np.float64)
    p_sums = sums[present]
    if k <= _EXACT_SUBSET_LEVELS:
        masks = np.arange(1, 2 ** (k - 1), dtype=np.uint64)
        bits = ((masks[:, None] >> np.arange(k, dtype=np.uint64)) & 1).astype(bool)
        n_left = bits @ p_counts
        s_left = bits @ p_sums
        valid = (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            return None
        crit = np.where(
            valid,
            s_left**2 / np.maximum(n_left, 1)
            + (sum_y - s_left) ** 2 / np.maximum(n - n_left, 1),
            -np.inf,
        )
        best = int(np.argmax(crit))
        left_codes = present[bits[best]]
        return float(crit[best]), left_codes
    # many levels: order by mean label (ties by code) and scan prefixes
    means = p_sums / p_counts
    order = np.lexsort((present, means))
    oc = p_counts[order]
    os_ = p_sums[order]
    n_left = np.cumsum(oc)[:-1]
    s_left = np.cumsum(os_)[:-1]
    valid = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    crit = np.where(
        valid, s_left**2 / n_left + (sum_y - s_left) ** 2 / (n - n_left), -np.inf
    )
    t = int(np.argmax(crit))
    left_codes = present[order[: t + 1]]
    return float(crit[t]), left_codes


class _TreeBuilder:
    """Grows one tree depth-first into flat node arrays."""

    def __init__(self, x, y, schema: FeatureSchema, cfg: ForestConfig, rng, n_split_features):
        self.x = x
        self.y = y
        self.cfg = cfg
        self.rng = rng
        self.n_split_features = n_split_features
        self.is_cat = np.array([s.kind == "categorical" for s in schema.specs])
        self.n_levels = [len(s.levels) if s.levels else 0 for s in schema.specs]
        self.max_levels = schema.max_levels()
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.members: list[np.ndarray | None] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(float("nan"))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float("nan"))
        self.members.append(None)
        return len(self.feature) - 1

    def build(self, idx: np.ndarray) -> int:
        node = self._new_node()
        self._grow(node, idx, depth=0)
        return node

    def _grow(self, node: int, idx: np.ndarray, depth: int) -> None:
        y_node = self.y[idx]
        n = len(idx)
        sum_y = float(y_node.sum())
        mean = sum_y / n
        sse = float((y_node**2).sum()) - sum_y * mean
        if depth >= self.cfg.max_depth or n < 2 * self.cfg.min_leaf or sse <= _ZERO_SSE:
            self.value[node] = mean
            return
        n_feat = self.x.shape[1]
        chosen = self.rng.choice(n_feat, size=self.n_split_features, replace=False)
        baseline = sum_y * mean
        best_crit = baseline + _ZERO_SSE
        best: tuple | None = None
        for f in chosen:
            f = int(f)
            col = self.x[idx, f]
            if self.is_cat[f]:
                found = _best_categorical_split(
                    col.astype(np.int64), y_node, sum_y, self.cfg.min_leaf, self.n_levels[f]
                )
                if found is not None and found[0] > best_crit:
                    best_crit = found[0]
                    best = (f, None, found[1])
            else:
                found = _best_numeric_split(col, y_node, sum_y, self.cfg.min_leaf)
                if found is not None and found[0] > best_crit:
                    best_crit = found[0]
                    best = (f, found[1], None)
        if best is None:
            self.value[node] = mean
            return
        f, thr, left_codes = best
        col = self.x[idx, f]
        if left_codes is not None:
            member = np.zeros(self.max_levels, dtype=bool)
            member[left_codes] = True
            go_left = member[col.astype(np.int64)]
            self.members[node] = member
        else:
            go_left = col <= thr
            self.threshold[node] = thr
        self.feature[node] = f
        left_node = self._new_node()
        right_node = self._new_node()
        self.left[node] = left_node
        self.right[node] = right_node
        self._grow(left_node, idx[go_left], depth + 1)
        self._grow(right_node, idx[~go_left], depth + 1)

    def finish(self) -> Tree:
        n_nodes = len(self.feature)
        members = np.zeros((n_nodes, self.max_levels), dtype=bool)
        for i, m in enumerate(self.members):
            if m is not None:
                members[i] = m
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=np.float64),
            is_cat=self.is_cat[np.maximum(self.feature, 0)]
            & (np.array(self.feature) >= 0),
            members=members,
        )


_FIT_CONTEXT: dict = {}


def _init_fit_context(x, y, schema, cfg, n_split_features) -> None:
    _FIT_CONTEXT.update(
        x=x, y=y, schema=schema, cfg=cfg, n_split_features=n_split_features
    )


def _fit_one_tree(tree_index: int) -> Tree:
    ctx = _FIT_CONTEXT
    cfg: ForestConfig = ctx["cfg"]
    rng = np.random.default_rng(
        np.random.SeedSequence([_mask_seed(cfg.seed), 1, tree_index])
    )
    y = ctx["y"]
    boot = rng.integers(0, len(y), size=len(y))
    builder = _TreeBuilder(ctx["x"], y, ctx["schema"], cfg, rng, ctx["n_split_features"])
    builder.build(boot)
    return builder.finish()


def fit_forest(table: AugmentedTable, cfg: ForestConfig, threads: int = 1) -> ForestModel:
    """Train n_trees trees on seeded bootstrap resamples.

    Per-tree RNG streams derive from (seed, tree index), so the result is
    independent of scheduling and of ``threads``.
    """
    x, y = table.features, table.labels
    if len(y) < 2:
        raise ValueError("need at least 2 rows to fit a forest")
    if x.shape[1] < 1:
        raise ValueError("need at least 1 feature to fit a forest")
    if np.ptp(y) == 0.0:
        warnings.warn(
            "all labels identical; trees degenerate to single leaves",
            DegenerateTableWarning,
            stacklevel=2,
        )
    n_split_features = cfg.resolved_features_per_split(x.shape[1])
    _init_fit_context(x, y, table.schema, cfg, n_split_features)
    if threads > 1:
        with ProcessPoolExecutor(
            max_workers=threads,
            initializer=_init_fit_context,
            initargs=(x, y, table.schema, cfg, n_split_features),
        ) as pool:
            trees = tuple(
                pool.map(_fit_one_tree, range(cfg.n_trees),
                         chunksize=max(1, cfg.n_trees // (4 * threads)))
            )
    else:
        trees = tuple(_fit_one_tree(t) for t in range(cfg.n_trees))
    return ForestModel(
        trees=trees,
        schema=table.schema,
        config=cfg,
        label_min=float(y.min()),
        label_max=float(y.max()),
    )


def predict_forest(model: ForestModel, rows: np.ndarray) -> np.ndarray:
    """Mean of per-tree predictions for each encoded feature row."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != model.schema.n_features:
        raise SchemaMismatch(
            f"expected rows of width {model.schema.n_features}, got {rows.shape}"
        )
    total = np.zeros(len(rows), dtype=np.float64)
    for tree in model.trees:
        total += tree.predict(rows)
    return total / len(model.trees)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_forest(model: ForestModel, path: str | Path) -> None:
    """Human-inspectable JSON dump of schema, splits, and leaf values."""
    payload = {
        "kind": "forest_model",
        "schema": [asdict(s) for s in model.schema.specs],
        "config": asdict(model.config),
        "label_min": model.label_min,
        "label_max": model.label_max,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": [None if math.isnan(v) else v for v in t.threshold],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": [None if math.isnan(v) else v for v in t.value],
                "cat_left": {
                    str(i): np.flatnonzero(t.members[i]).tolist()
                    for i in range(t.n_nodes)
                    if t.is_cat[i]
                },
            }
            for t in model.trees
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_forest(path: str | Path) -> ForestModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("kind") != "forest_model":
        raise ValueError(f"{path} is not a serialized forest model")
    specs = tuple(
        FeatureSpec(
            name=s["name"],
            side=s["side"],
            column=s["column"],
            kind=s["kind"],
            levels=tuple(s["levels"]) if s["levels"] else None,
        )
        for s in payload["schema"]
    )
    schema = FeatureSchema(specs=specs)
    max_levels = schema.max_levels()
    trees = []
    for t in payload["trees"]:
        n_nodes = len(t["feature"])
        feature = np.array(t["feature"], dtype=np.int64)
        members = np.zeros((n_nodes, max_levels), dtype=bool)
        is_cat = np.zeros(n_nodes, dtype=bool)
        for key, codes in t["cat_left"].items():
            members[int(key), codes] = True
            is_cat[int(key)] = True
        trees.append(
            Tree(
                feature=feature,
                threshold=np.array(
                    [math.nan if v is None else v for v in t["threshold"]], dtype=np.float64
                ),
                left=np.array(t["left"], dtype=np.int64),
                right=np.array(t["right"], dtype=np.int64),
                value=np.array(
                    [math.nan if v is None else v for v in t["value"]], dtype=np.float64
                ),
                is_cat=is_cat,
                members=members,
            )
        )
    return ForestModel(
        trees=tuple(trees),
        schema=schema,
        config=ForestConfig(**payload["config"]),
        label_min=payload["label_min"],
        label_max=payload["label_max"],
    )
