"""Forest engine: label augmentation, variance-reducing splits, ensemble
prediction, determinism, serialization."""

from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from stylebench.als import AlsConfig, FactorModel, build_confidence
from stylebench.data import Dataset, FeatureColumn, FeatureTable, InteractionEvent, Kind
from stylebench.errors import DegenerateTableWarning, MissingFeatures, SchemaMismatch
from stylebench.forest import (
    AugmentedTable,
    FeatureSchema,
    FeatureSpec,
    ForestConfig,
    _mask_seed,
    augment_labels,
    fit_forest,
    load_forest,
    predict_forest,
    save_forest,
)

T0 = datetime(2022, 1, 1, tzinfo=timezone.utc)


def ev(user, item, kind, hours=0, quantity=1):
    return InteractionEvent(user, item, kind, T0 + timedelta(hours=hours), quantity)


def numeric_table(n, seed=0, name="x"):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    schema = FeatureSchema(
        specs=(FeatureSpec(name=f"user.{name}", side="user", column=name, kind="numeric"),)
    )
    return x.reshape(-1, 1), schema


def table_from(x, y, schema):
    n = len(y)
    return AugmentedTable(
        user_ids=tuple(f"u{i}" for i in range(n)),
        item_ids=tuple("i0" for _ in range(n)),
        features=np.asarray(x, dtype=np.float64),
        labels=np.asarray(y, dtype=np.float64),
        schema=schema,
    )


class TestAugmentLabels:
    def _fixture(self):
        users = FeatureTable(
            ids=("u1", "u2"),
            columns={"age": FeatureColumn(kind="numeric", values=np.array([30.0, 40.0]))},
        )
        items = FeatureTable(
            ids=("iA", "iB", "iC"),
            columns={"price": FeatureColumn(kind="numeric", values=np.array([10.0, 20.0, 30.0]))},
        )
        train = Dataset.from_events(
            [
                ev("u1", "iA", Kind.VIEW, 0),
                ev("u2", "iB", Kind.SALE, 1),
                ev("u2", "iC", Kind.VIEW, 2),
            ],
            users,
            items,
        )
        cfg = AlsConfig()
        cm = build_confidence(train, cfg)
        # hand-built factors so unobserved scores are known exactly
        factors = FactorModel(
            user_factors=np.array([[1.7], [0.3]]),
            item_factors=np.array([[0.0], [1.0], [1.0]]),
            users=cm.users,
            items=cm.items,
            loss_trace=(1.0,),
            config=AlsConfig(factors=1),
        )
        return train, cm, factors

    def test_observed_view_label(self):
        train, cm, factors = self._fixture()
        table = augment_labels(train, cm, factors, ForestConfig(negatives_per_user=2))
        labels = dict(zip(zip(table.user_ids, table.item_ids), table.labels))
        assert labels[("u1", "iA")] == pytest.approx(1.0)

    def test_observed_sale_label_keeps_weight(self):
        train, cm, factors = self._fixture()
        table = augment_labels(train, cm, factors, ForestConfig(negatives_per_user=2))
        labels = dict(zip(zip(table.user_ids, table.item_ids), table.labels))
        assert labels[("u2", "iB")] == pytest.approx(5.0)
        assert labels[("u2", "iC")] == pytest.approx(1.0)

    def test_unobserved_scores_clamped(self):
        train, cm, factors = self._fixture()
        # u1 x iB and u1 x iC both score 1.7 -> clamped to 1.0
        table = augment_labels(train, cm, factors, ForestConfig(negatives_per_user=2))
        labels = dict(zip(zip(table.user_ids, table.item_ids), table.labels))
        assert labels[("u1", "iB")] == pytest.approx(1.0)
        assert labels[("u1", "iC")] == pytest.approx(1.0)
        # u2's only unobserved item scores 0.0, inside the clamp range
        assert labels[("u2", "iA")] == pytest.approx(0.0)

    def test_feature_rows_concatenate_user_then_item(self):
        train, cm, factors = self._fixture()
        table = augment_labels(train, cm, factors, ForestConfig(negatives_per_user=1))
        row = dict(zip(zip(table.user_ids, table.item_ids), table.features.tolist()))
        assert row[("u1", "iA")] == [30.0, 10.0]

    def test_missing_features_named(self):
        users = FeatureTable(
            ids=("u1",),
            columns={"age": FeatureColumn(kind="numeric", values=np.array([30.0]))},
        )
        items = FeatureTable(
            ids=("iA",),
            columns={"price": FeatureColumn(kind="numeric", values=np.array([10.0]))},
        )
        train = Dataset.from_events(
            [ev("u1", "iA", Kind.VIEW, 0), ev("u9", "iA", Kind.VIEW, 1)], users, items
        )
        cfg = AlsConfig()
        cm = build_confidence(train, cfg)
        factors = FactorModel(
            user_factors=np.zeros((2, 1)),
            item_factors=np.zeros((1, 1)),
            users=cm.users,
            items=cm.items,
            loss_trace=(0.0,),
            config=AlsConfig(factors=1),
        )
        with pytest.raises(MissingFeatures) as exc:
            augment_labels(train, cm, factors, ForestConfig())
        assert "u9" in str(exc.value)

    def test_negative_sampling_deterministic(self):
        train, cm, factors = self._fixture()
        cfg = ForestConfig(negatives_per_user=1, seed=9)
        a = augment_labels(train, cm, factors, cfg)
        b = augment_labels(train, cm, factors, cfg)
        assert a.user_ids == b.user_ids and a.item_ids == b.item_ids
        assert np.array_equal(a.labels, b.labels)


class TestFitForest:
    def test_constant_labels_single_leaves(self):
        x, schema = numeric_table(40)
        table = table_from(x, np.full(40, 0.7), schema)
        with pytest.warns(DegenerateTableWarning):
            model = fit_forest(table, ForestConfig(n_trees=5, seed=0))
        preds = predict_forest(model, np.array([[0.1], [0.9], [2.5]]))
        np.testing.assert_allclose(preds, 0.7)
        assert all(t.n_nodes == 1 for t in model.trees)

    def test_step_function_mse(self):
        x, schema = numeric_table(1000, seed=1)
        y = (x[:, 0] > 0.5).astype(np.float64)
        table = table_from(x, y, schema)
        model = fit_forest(table, ForestConfig(n_trees=30, seed=2))
        grid = np.linspace(0.0, 1.0, 401).reshape(-1, 1)
        truth = (grid[:, 0] > 0.5).astype(np.float64)
        mse = float(np.mean((predict_forest(model, grid) - truth) ** 2))
        assert mse < 0.01

    def test_bit_identical_given_seed(self):
        x, schema = numeric_table(200, seed=3)
        y = np.sin(x[:, 0] * 6.0)
        table = table_from(x, y, schema)
        a = fit_forest(table, ForestConfig(n_trees=8, seed=4))
        b = fit_forest(table, ForestConfig(n_trees=8, seed=4))
        for ta, tb in zip(a.trees, b.trees):
            assert np.array_equal(ta.feature, tb.feature)
            assert np.array_equal(ta.threshold, tb.threshold, equal_nan=True)
            assert np.array_equal(ta.value, tb.value, equal_nan=True)

    def test_thread_count_does_not_change_model(self):
        x, schema = numeric_table(150, seed=5)
        y = x[:, 0] ** 2
        table = table_from(x, y, schema)
        a = fit_forest(table, ForestConfig(n_trees=6, seed=6), threads=1)
        b = fit_forest(table, ForestConfig(n_trees=6, seed=6), threads=2)
        for ta, tb in zip(a.trees, b.trees):
            assert np.array_equal(ta.feature, tb.feature)
            assert np.array_equal(ta.threshold, tb.threshold, equal_nan=True)
            assert np.array_equal(ta.value, tb.value, equal_nan=True)

    def test_features_per_split_cannot_exceed_width(self):
        x, schema = numeric_table(30)
        table = table_from(x, x[:, 0], schema)
        with pytest.raises(ValueError):
            fit_forest(table, ForestConfig(n_trees=2, features_per_split=3, seed=0))

    def test_min_leaf_respected(self):
        x, schema = numeric_table(60, seed=7)
        y = np.sin(x[:, 0] * 9.0)
        cfg = ForestConfig(n_trees=4, min_leaf=7, seed=8)
        model = fit_forest(table_from(x, y, schema), cfg)
        for t, tree in enumerate(model.trees):
            rng = np.random.default_rng(
                np.random.SeedSequence([_mask_seed(cfg.seed), 1, t])
            )
            boot = rng.integers(0, 60, size=60)
            counts = _leaf_counts(tree, x[boot])
            assert min(counts.values()) >= 7

    def test_variance_reduction_on_every_split(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(size=(300, 2))
        y = np.where(x[:, 0] > 0.6, 2.0, 0.0) + rng.normal(scale=0.3, size=300)
        schema = FeatureSchema(
            specs=(
                FeatureSpec(name="user.a", side="user", column="a", kind="numeric"),
                FeatureSpec(name="user.b", side="user", column="b", kind="numeric"),
            )
        )
        cfg = ForestConfig(n_trees=5, features_per_split=2, seed=11)
        model = fit_forest(table_from(x, y, schema), cfg)
        for t, tree in enumerate(model.trees):
            tree_rng = np.random.default_rng(
                np.random.SeedSequence([_mask_seed(cfg.seed), 1, t])
            )
            boot = tree_rng.integers(0, len(y), size=len(y))
            _assert_children_reduce_variance(tree, x[boot], y[boot])

    def test_variance_shrinks_with_ensemble_size(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(size=(400, 1))
        y = np.sin(x[:, 0] * 6.28) + rng.normal(scale=0.4, size=400)
        schema = FeatureSchema(
            specs=(FeatureSpec(name="user.x", side="user", column="x", kind="numeric"),)
        )
        table = table_from(x, y, schema)
        grid = np.linspace(0.01, 0.99, 60).reshape(-1, 1)
        spreads = []
        for n_trees in (4, 16, 64):
            preds = np.stack([
                predict_forest(
                    fit_forest(table, ForestConfig(n_trees=n_trees, seed=s)), grid
                )
                for s in range(8)
            ])
            spreads.append(float(preds.var(axis=0).mean()))
        assert spreads[0] > spreads[1] > spreads[2]


class TestCategoricalSplits:
    def _cat_table(self, n_levels, n_rows, seed):
        rng = np.random.default_rng(seed)
        levels = tuple(f"lv{c:02d}" for c in range(n_levels))
        codes = rng.integers(0, n_levels, size=n_rows)
        level_means = rng.uniform(0.0, 4.0, size=n_levels)
        y = level_means[codes] + rng.normal(scale=0.05, size=n_rows)
        schema = FeatureSchema(
            specs=(
                FeatureSpec(
                    name="item.color", side="item", column="color",
                    kind="categorical", levels=levels,
                ),
            )
        )
        return codes.reshape(-1, 1).astype(np.float64), y, schema, level_means

    @pytest.mark.parametrize("n_levels", [5, 20])
    def test_learns_level_means(self, n_levels):
        x, y, schema, level_means = self._cat_table(n_levels, 1200, seed=13)
        model = fit_forest(table_from(x, y, schema), ForestConfig(n_trees=20, seed=14))
        grid = np.arange(n_levels, dtype=np.float64).reshape(-1, 1)
        preds = predict_forest(model, grid)
        assert float(np.mean((preds - level_means) ** 2)) < 0.05

    def test_subset_split_exact_when_few_levels(self):
        # two clusters of levels; an exact subset split separates them at the root
        levels = ("a", "b", "c", "d")
        codes = np.tile(np.arange(4), 100)
        y = np.where(np.isin(codes, (0, 2)), 5.0, 1.0) + np.random.default_rng(15).normal(
            scale=0.01, size=400
        )
        schema = FeatureSchema(
            specs=(
                FeatureSpec(
                    name="item.c", side="item", column="c",
                    kind="categorical", levels=levels,
                ),
            )
        )
        model = fit_forest(
            table_from(codes.reshape(-1, 1).astype(float), y, schema),
            ForestConfig(n_trees=1, seed=16),
        )
        tree = model.trees[0]
        assert tree.is_cat[0]
        left_levels = set(np.flatnonzero(tree.members[0]))
        assert left_levels in ({0, 2}, {1, 3})


class TestPredictForest:
    def _model(self, n_trees=10):
        x, schema = numeric_table(300, seed=17)
        y = np.cos(x[:, 0] * 3.0)
        return fit_forest(table_from(x, y, schema), ForestConfig(n_trees=n_trees, seed=18)), y

    def test_bounded_by_training_labels(self):
        model, y = self._model()
        rows = np.array([[v] for v in (-10.0, 0.0, 0.5, 1.0, 10.0)])
        preds = predict_forest(model, rows)
        assert np.all(preds >= y.min() - 1e-12)
        assert np.all(preds <= y.max() + 1e-12)

    def test_single_tree_equals_leaf_mean(self):
        model, _ = self._model(n_trees=1)
        rows = np.array([[0.3], [0.8]])
        np.testing.assert_array_equal(
            predict_forest(model, rows), model.trees[0].predict(rows)
        )

    def test_matches_external_tree_average(self):
        model, _ = self._model(n_trees=100)
        rows = np.random.default_rng(19).uniform(size=(50, 1))
        external = np.mean([t.predict(rows) for t in model.trees], axis=0)
        np.testing.assert_allclose(predict_forest(model, rows), external, atol=1e-12)

    def test_schema_mismatch(self):
        model, _ = self._model(n_trees=2)
        with pytest.raises(SchemaMismatch):
            predict_forest(model, np.zeros((3, 2)))


class TestForestSerialization:
    def test_round_trip_predictions_identical(self, tmp_path):
        rng = np.random.default_rng(20)
        x = np.hstack([
            rng.uniform(size=(250, 1)),
            rng.integers(0, 4, size=(250, 1)).astype(float),
        ])
        y = x[:, 0] * 2 + (x[:, 1] == 2) * 1.5
        schema = FeatureSchema(
            specs=(
                FeatureSpec(name="user.x", side="user", column="x", kind="numeric"),
                FeatureSpec(
                    name="item.c", side="item", column="c",
                    kind="categorical", levels=("p", "q", "r", "s"),
                ),
            )
        )
        model = fit_forest(table_from(x, y, schema), ForestConfig(n_trees=7, seed=21))
        path = tmp_path / "forest.json"
        save_forest(model, path)
        again = load_forest(path)
        rows = np.hstack([
            rng.uniform(size=(40, 1)),
            rng.integers(0, 4, size=(40, 1)).astype(float),
        ])
        np.testing.assert_array_equal(
            predict_forest(model, rows), predict_forest(again, rows)
        )
        assert again.schema == model.schema
        assert again.config == model.config


def _leaf_counts(tree, rows):
    counts = {}
    for row in rows:
        node = 0
        while tree.feature[node] >= 0:
            value = row[tree.feature[node]]
            if tree.is_cat[node]:
                go_left = bool(tree.members[node, int(value)])
            else:
                go_left = value <= tree.threshold[node]
            node = tree.left[node] if go_left else tree.right[node]
        counts[node] = counts.get(node, 0) + 1
    return counts


def _assert_children_reduce_variance(tree, x, y):
    def recurse(node, idx):
        if tree.feature[node] < 0:
            return
        values = x[idx, tree.feature[node]]
        if tree.is_cat[node]:
            go_left = tree.members[node, values.astype(int)]
        else:
            go_left = values <= tree.threshold[node]
        left_idx, right_idx = idx[go_left], idx[~go_left]
        assert len(left_idx) and len(right_idx)
        parent_var = y[idx].var()
        weighted = (
            len(left_idx) * y[left_idx].var() + len(right_idx) * y[right_idx].var()
        ) / len(idx)
        assert weighted <= parent_var + 1e-10
        recurse(tree.left[node], left_idx)
        recurse(tree.right[node], right_idx)

    recurse(0, np.arange(len(y)))
