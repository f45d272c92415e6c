"""End-to-end evaluation pipeline.

Runs split -> segmentation -> training -> recommendation -> metrics and
assembles the per-(segment x algorithm x metric) report grid, plus the
short-head sales analysis. Every random choice flows from the master
seed, so reruns (at any thread count) produce byte-identical reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable

import numpy as np

from . import als as als_mod
from . import forest as forest_mod
from .data import (
    Dataset,
    Kind,
    PopularityTable,
    Segment,
    dataset_stats,
    format_timestamp,
    parse_timestamp,
    popularity_table,
    segment_users,
    temporal_split,
)
from .errors import AllUndefined, DataError, StylebenchError, ZeroSales
from .metrics import (
    GRADING_MODES,
    avg_distinct_sampled,
    build_relevance,
    micro_average_ndcg,
    percent_over_random,
    random_baseline_ndcg,
    relative_popularity,
    tie_aware_ndcg_arrays,
)
from .recommend import (
    ALGORITHMS,
    RankedList,
    _top_k_indices,
    score_cb_users,
    score_mp,
)

SEGMENT_ROWS = ("sale_users", "view_users", "new_users", "average")
METRICS = ("ndcg", "ad", "rp")


def derive_seed(master: int, *tokens) -> int:
    """Stable named sub-seed: hash of the master seed and a token path."""
    digest = hashlib.sha256(repr((master,) + tokens).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class EvalConfig:
    """Everything one evaluation run depends on."""

    boundary: datetime | None = None
    k: int = 10
    seed: int = 0
    grading: str = "graded"
    algorithms: tuple[str, ...] = ALGORITHMS
    exclude_purchased: bool = False
    bootstrap_resamples: int = 1000
    threads: int = 1
    als: als_mod.AlsConfig = field(default_factory=als_mod.AlsConfig)
    forest: forest_mod.ForestConfig = field(default_factory=forest_mod.ForestConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.grading not in GRADING_MODES:
            raise ValueError(f"grading must be one of {GRADING_MODES}")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms {sorted(unknown)}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.bootstrap_resamples < 1:
            raise ValueError("bootstrap_resamples must be >= 1")

    def to_dict(self) -> dict:
        return {
            "boundary": format_timestamp(self.boundary) if self.boundary else None,
            "k": self.k,
            "seed": self.seed,
            "grading": self.grading,
            "algorithms": list(self.algorithms),
            "exclude_purchased": self.exclude_purchased,
            "bootstrap_resamples": self.bootstrap_resamples,
            "threads": self.threads,
            "als_factors": self.als.factors,
            "als_regularization": self.als.regularization,
            "als_alpha": self.als.alpha,
            "als_sale_weight": self.als.sale_weight,
            "als_iterations": self.als.iterations,
            "forest_trees": self.forest.n_trees,
            "forest_max_depth": self.forest.max_depth,
            "forest_min_leaf": self.forest.min_leaf,
            "forest_features_per_split": self.forest.features_per_split,
            "forest_negatives_per_user": self.forest.negatives_per_user,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalConfig":
        known = {
            "boundary", "k", "seed", "grading", "algorithms", "exclude_purchased",
            "bootstrap_resamples", "threads", "als_factors", "als_regularization",
            "als_alpha", "als_sale_weight", "als_iterations", "forest_trees",
            "forest_max_depth", "forest_min_leaf", "forest_features_per_split",
            "forest_negatives_per_user",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        boundary = raw.get("boundary")
        if isinstance(boundary, str):
            boundary = parse_timestamp(boundary)
        algorithms = raw.get("algorithms", list(ALGORITHMS))
        if isinstance(algorithms, str):
            algorithms = [a.strip() for a in algorithms.split(",") if a.strip()]
        return cls(
            boundary=boundary,
            k=int(raw.get("k", 10)),
            seed=int(raw.get("seed", 0)),
            grading=raw.get("grading", "graded"),
            algorithms=tuple(algorithms),
            exclude_purchased=bool(raw.get("exclude_purchased", False)),
            bootstrap_resamples=int(raw.get("bootstrap_resamples", 1000)),
            threads=int(raw.get("threads", 1)),
            als=als_mod.AlsConfig(
                factors=int(raw.get("als_factors", 32)),
                regularization=float(raw.get("als_regularization", 0.1)),
                alpha=float(raw.get("als_alpha", 40.0)),
                sale_weight=float(raw.get("als_sale_weight", 5.0)),
                iterations=int(raw.get("als_iterations", 15)),
            ),
            forest=forest_mod.ForestConfig(
                n_trees=int(raw.get("forest_trees", 100)),
                max_depth=int(raw.get("forest_max_depth", 12)),
                min_leaf=int(raw.get("forest_min_leaf", 5)),
                features_per_split=(
                    int(raw["forest_features_per_split"])
                    if raw.get("forest_features_per_split") is not None
                    else None
                ),
                negatives_per_user=int(raw.get("forest_negatives_per_user", 50)),
            ),
        )


@dataclass(frozen=True, eq=False)
class ShortHeadCurve:
    """Cumulative sales share over items ordered by descending sales."""

    items: tuple[str, ...]
    cumulative_share: np.ndarray
    short_head_fraction: float
    n_short_head_items: int
    total_sales: int


@dataclass(frozen=True)
class EvaluationReport:
    """The canonical report payload (what report.json serializes)."""

    payload: dict

    def cell(self, metric: str, segment: str, algorithm: str):
        return self.payload["cells"][metric][segment][algorithm]

    def to_json(self) -> str:
        return json.dumps(self.payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls(payload=json.loads(text))


@contextmanager
def _stage(name: str):
    try:
        yield
    except StylebenchError as exc:
        exc.args = (f"stage {name}: {exc.args[0] if exc.args else ''}",)
        raise


def short_head_curve(pop: PopularityTable) -> ShortHeadCurve:
    """Fraction of the catalog covering one third of all units sold.

    The denominator is every item in the popularity table, sold or not.
    """
    total = pop.total_sold
    if total <= 0:
        raise ZeroSales("short-head analysis needs at least one sale")
    quantities = np.array([pop.quantities[i] for i in pop.ranking], dtype=np.float64)
    cumulative = np.cumsum(quantities) / total
    threshold = total / 3.0
    n_head = int(np.searchsorted(np.cumsum(quantities), threshold, side="left")) + 1
    return ShortHeadCurve(
        items=pop.ranking,
        cumulative_share=cumulative,
        short_head_fraction=n_head / len(pop.ranking),
        n_short_head_items=n_head,
        total_sales=total,
    )


# ---------------------------------------------------------------------------
# Per-algorithm scoring
# ---------------------------------------------------------------------------


class _AlgoResult:
    """Per-user ranked lists and NDCG values for one algorithm."""

    def __init__(self, name: str):
        self.name = name
        self.lists: dict[str, RankedList] = {}
        self.ndcg: dict[str, float | None] = {}

    @property
    def covered(self) -> set[str]:
        return set(self.lists)


def _purchased_in_train(train: Dataset) -> dict[str, set[str]]:
    bought: dict[str, set[str]] = {}
    for e in train.events:
        if e.kind is Kind.SALE:
            bought.setdefault(e.user_id, set()).add(e.item_id)
    return bought


def _consume_scores(
    result: _AlgoResult,
    user: str,
    vec: np.ndarray,
    candidates: list[str],
    rvals: np.ndarray,
    k: int,
    mask_idx: np.ndarray | None,
) -> None:
    if mask_idx is not None and len(mask_idx):
        vec = vec.copy()
        vec[mask_idx] = -np.inf
    top = _top_k_indices(vec, k)
    result.lists[user] = RankedList(
        user_id=user,
        items=tuple(candidates[i] for i in top),
        scores=tuple(float(vec[i]) for i in top),
        algorithm=result.name,
    )
    result.ndcg[user] = tie_aware_ndcg_arrays(vec, rvals, k)


def run_evaluation(cfg: EvalConfig, data: Dataset) -> EvaluationReport:
    """Execute the full pipeline and assemble the report grid."""
    if cfg.boundary is None:
        raise DataError("evaluation requires a split boundary timestamp")
    with _stage("temporal_split"):
        split = temporal_split(data, cfg.boundary)
        if not split.train.events:
            raise DataError("no training events before the boundary")
        if not split.test.events:
            raise DataError("no test events at or after the boundary")
    with _stage("segment_users"):
        seg = segment_users(split)
        stats = dataset_stats(split, seg)
    with _stage("popularity"):
        pop = popularity_table(split.train)

    candidates = sorted(split.train.items)
    test_users = sorted(split.test.users)
    k = cfg.k

    with _stage("relevance"):
        rel = build_relevance(split.test, candidates, cfg.grading)
    rel_vectors = {
        u: np.array([rel[u].get(i, 0.0) for i in candidates], dtype=np.float64)
        for u in test_users
    }
    baselines = {
        u: random_baseline_ndcg(rel[u], len(candidates), k) for u in test_users
    }

    mask_by_user: dict[str, np.ndarray] = {}
    if cfg.exclude_purchased:
        cand_pos = {item: i for i, item in enumerate(candidates)}
        for user, items in _purchased_in_train(split.train).items():
            mask_by_user[user] = np.array(
                sorted(cand_pos[i] for i in items if i in cand_pos), dtype=np.int64
            )

    results: dict[str, _AlgoResult] = {}
    uncovered: dict[str, list[str]] = {}

    if "MP" in cfg.algorithms:
        with _stage("recommend_mp"):
            result = _AlgoResult("MP")
            mp_vec = score_mp(pop, candidates)
            for user in test_users:
                _consume_scores(
                    result, user, mp_vec, candidates, rel_vectors[user], k,
                    mask_by_user.get(user),
                )
            results["MP"] = result
            uncovered["MP"] = []

    factor_model = None
    confidence = None
    if "CF" in cfg.algorithms or "CB" in cfg.algorithms:
        with _stage("fit_als"):
            als_cfg = dataclasses.replace(cfg.als, seed=derive_seed(cfg.seed, "als"))
            confidence = als_mod.build_confidence(split.train, als_cfg)
            factor_model = als_mod.fit_als(confidence, als_cfg)

    if "CF" in cfg.algorithms:
        with _stage("recommend_cf"):
            result = _AlgoResult("CF")
            cand_idx = np.array(
                [factor_model.item_index[i] for i in candidates], dtype=np.int64
            )
            missing: list[str] = []
            for user in test_users:
                if user not in factor_model.user_index:
                    missing.append(user)
                    continue
                vec = factor_model.scores_for_user(user, cand_idx)
                _consume_scores(
                    result, user, vec, candidates, rel_vectors[user], k,
                    mask_by_user.get(user),
                )
            results["CF"] = result
            uncovered["CF"] = missing

    if "CB" in cfg.algorithms:
        with _stage("fit_forest"):
            forest_cfg = dataclasses.replace(
                cfg.forest, seed=derive_seed(cfg.seed, "forest")
            )
            table = forest_mod.augment_labels(
                split.train, confidence, factor_model, forest_cfg
            )
            forest_model = forest_mod.fit_forest(table, forest_cfg, threads=cfg.threads)
        with _stage("recommend_cb"):
            result = _AlgoResult("CB")
            for user, vec in score_cb_users(
                forest_model, test_users, candidates,
                data.user_features, data.item_features,
            ):
                _consume_scores(
                    result, user, vec, candidates, rel_vectors[user], k,
                    mask_by_user.get(user),
                )
            results["CB"] = result
            uncovered["CB"] = []

    with _stage("short_head"):
        head = short_head_curve(pop)

    segment_members = {
        "sale_users": seg.users_in(Segment.SALE),
        "view_users": seg.users_in(Segment.VIEW),
        "new_users": seg.users_in(Segment.NEW),
        "average": test_users,
    }

    cells: dict[str, dict[str, dict[str, dict | None]]] = {
        metric: {row: {} for row in SEGMENT_ROWS} for metric in METRICS
    }
    for algo in cfg.algorithms:
        result = results[algo]
        for row in SEGMENT_ROWS:
            # CF cannot cover new users, so its new-user and pooled rows
            # stay unavailable
            if algo == "CF" and row in ("new_users", "average"):
                for metric in METRICS:
                    cells[metric][row][algo] = None
                continue
            members = [u for u in segment_members[row] if u in result.covered]
            cells["ndcg"][row][algo] = _ndcg_cell(result, baselines, members)
            cells["ad"][row][algo] = _ad_cell(result, members, k, cfg, row, algo)
            cells["rp"][row][algo] = _rp_cell(result, members, pop, k, cfg, row, algo)

    # threads is an execution detail; keeping it out of the echo keeps
    # report.json byte-identical across --threads settings
    config_echo = {k: v for k, v in cfg.to_dict().items() if k != "threads"}
    payload = {
        "config": config_echo,
        "dataset": stats.as_dict(),
        "coverage": {
            algo: {
                "covered": len(results[algo].covered),
                "uncovered": len(uncovered[algo]),
            }
            for algo in cfg.algorithms
        },
        "short_head": {
            "short_head_fraction": head.short_head_fraction,
            "n_short_head_items": head.n_short_head_items,
            "n_items": len(head.items),
            "total_sales": head.total_sales,
        },
        "cells": cells,
    }
    return EvaluationReport(payload=payload)


def _ndcg_cell(result: _AlgoResult, baselines, members: list[str]) -> dict | None:
    if not members:
        return None
    try:
        micro = micro_average_ndcg(result.ndcg[u] for u in members)
    except AllUndefined:
        return None
    defined = [u for u in members if result.ndcg[u] is not None]
    baseline = float(np.mean([baselines[u] for u in defined]))
    return {
        "value": micro.value,
        "pct_over_random": percent_over_random(micro.value, baseline),
        "random_baseline": baseline,
        "n_users": micro.n_users,
        "n_excluded": micro.n_excluded,
    }


def _ad_cell(result, members, k, cfg: EvalConfig, row, algo) -> dict | None:
    if len(members) < 2:
        return None
    lists = [result.lists[u] for u in members]
    value = avg_distinct_sampled(
        lists, k,
        seed=derive_seed(cfg.seed, "ad", row, algo),
        resamples=cfg.bootstrap_resamples,
    )
    return {
        "point": value.point,
        "sd": value.dispersion,
        "ci_low": value.ci_low,
        "ci_high": value.ci_high,
        "n_pairs": value.n_units,
    }


def _rp_cell(result, members, pop, k, cfg: EvalConfig, row, algo) -> dict | None:
    if not members:
        return None
    lists = [result.lists[u] for u in members]
    value = relative_popularity(
        lists, pop, k,
        seed=derive_seed(cfg.seed, "rp", row, algo),
        resamples=cfg.bootstrap_resamples,
    )
    return {
        "point": value.point,
        "sd": value.dispersion,
        "ci_low": value.ci_low,
        "ci_high": value.ci_high,
        "n_users": value.n_units,
    }


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_ROW_TITLES = {
    "sale_users": "Sale Users",
    "view_users": "View Users",
    "new_users": "New Users",
    "average": "Average",
}


def _fmt(value: float, decimals: int) -> str:
    """Round and drop a trailing all-zero fraction (1.00 -> 1)."""
    rounded = round(value, decimals)
    if rounded == int(rounded):
        return str(int(rounded))
    return f"{rounded:.{decimals}f}"


def format_cell(metric: str, cell: dict | None) -> str:
    """Render one grid cell the way the result tables print them."""
    if cell is None:
        return "-"
    if metric == "ndcg":
        return f"{cell['value']:.3f}({cell['pct_over_random']:.1f}%)"
    if metric == "ad":
        return f"{_fmt(cell['point'], 1)}({_fmt(cell['sd'], 1)})"
    return f"{_fmt(cell['point'], 2)}({_fmt(cell['sd'], 2)})"


def _metric_table_rows(report: EvaluationReport, metric: str) -> list[list[str]]:
    algorithms = report.payload["config"]["algorithms"]
    rows = [["segment"] + list(algorithms)]
    for row in SEGMENT_ROWS:
        cells = report.payload["cells"][metric][row]
        rows.append(
            [_ROW_TITLES[row]] + [format_cell(metric, cells.get(a)) for a in algorithms]
        )
    return rows


def render_report(
    report: EvaluationReport,
    out_dir: str | Path,
    formats: Iterable[str] = ("json", "csv", "markdown"),
) -> list[Path]:
    """Write report files; returns the paths written.

    JSON carries full precision; CSV and Markdown render the
    ``value(SD)`` / ``value(pct-over-random)`` cell style with ``-`` for
    unavailable cells.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    unknown = formats - {"json", "csv", "markdown"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    written: list[Path] = []
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(report.to_json(), encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        tables = out_dir / "tables"
        tables.mkdir(exist_ok=True)
        for metric in METRICS:
            path = tables / f"{metric}.csv"
            lines = [",".join(r) for r in _metric_table_rows(report, metric)]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
    if "markdown" in formats:
        path = out_dir / "report.md"
        path.write_text(_render_markdown(report), encoding="utf-8")
        written.append(path)
    return written


_METRIC_TITLES = {
    "ndcg": "NDCG@k (pct over random)",
    "ad": "Average distinct @k (SD)",
    "rp": "Relative popularity @k (SD)",
}


def _render_markdown(report: EvaluationReport) -> str:
    out = ["# Evaluation report", ""]
    cfg = report.payload["config"]
    out.append(f"k = {cfg['k']}, seed = {cfg['seed']}, boundary = {cfg['boundary']}")
    out.append("")
    cov = report.payload["coverage"]
    out.append(
        "Coverage: "
        + ", ".join(f"{a}: {c['covered']} covered / {c['uncovered']} uncovered"
                    for a, c in sorted(cov.items()))
    )
    head = report.payload["short_head"]
    out.append(
        f"Short head: {head['n_short_head_items']} of {head['n_items']} items "
        f"({100 * head['short_head_fraction']:.1f}%) cover a third of "
        f"{head['total_sales']} units sold."
    )
    out.append("")
    for metric in METRICS:
        out.append(f"## {_METRIC_TITLES[metric]}")
        out.append("")
        rows = _metric_table_rows(report, metric)
        out.append("| " + " | ".join(rows[0]) + " |")
        out.append("|" + "---|" * len(rows[0]))
        for row in rows[1:]:
            out.append("| " + " | ".join(row) + " |")
        out.append("")
    return "\n".join(out)
