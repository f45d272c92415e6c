"""Command-line entry point.

Subcommands: ``synth`` writes a generated dataset, ``stats`` prints the
descriptive tables, ``split`` materializes the temporal split, ``train``
fits and serializes one model, ``evaluate`` runs the full pipeline, and
``report`` re-renders tables from a canonical report.json.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error. Flags
override config-file values; every run writes a manifest with the
resolved config and input digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import als as als_mod
from . import forest as forest_mod
from .data import (
    dataset_stats,
    format_timestamp,
    load_events,
    parse_timestamp,
    segment_users,
    sidecar_paths,
    temporal_split,
    write_events,
)
from .errors import DataError, StylebenchError
from .harness import EvalConfig, EvaluationReport, derive_seed, render_report, run_evaluation
from .synth import SynthConfig, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_SYNTH_KEYS = {
    "synth_users", "synth_items", "synth_months", "synth_boundary_month",
    "synth_skew", "synth_sparsity", "synth_segment_new", "synth_segment_view",
    "synth_segment_sale", "synth_latent_dim",
}
_PATH_KEYS = {"data", "out"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse usage failures to exit code 1
        raise _UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such config file: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise DataError(f"config {p} must hold a JSON object")
    return raw


def _split_config(raw: dict) -> tuple[dict, dict, dict]:
    """Partition a flat config into evaluate, synth, and path keys."""
    synth = {k: v for k, v in raw.items() if k in _SYNTH_KEYS}
    paths = {k: v for k, v in raw.items() if k in _PATH_KEYS}
    rest = {k: v for k, v in raw.items() if k not in _SYNTH_KEYS | _PATH_KEYS}
    return rest, synth, paths


def _synth_config(raw: dict, args) -> SynthConfig:
    new = raw.get("synth_segment_new", 0.70)
    view = raw.get("synth_segment_view", 0.22)
    sale = raw.get("synth_segment_sale", 0.08)
    return SynthConfig(
        n_users=int(_flag(args, "users", raw.get("synth_users", 5000))),
        n_items=int(_flag(args, "items", raw.get("synth_items", 400))),
        months=int(raw.get("synth_months", 12)),
        boundary_month=int(raw.get("synth_boundary_month", 8)),
        popularity_skew=float(_flag(args, "skew", raw.get("synth_skew", 1.0))),
        target_sparsity=float(raw.get("synth_sparsity", 0.99)),
        segment_targets=(float(new), float(view), float(sale)),
        latent_dim=int(raw.get("synth_latent_dim", 4)),
        seed=int(_flag(args, "seed", raw.get("seed", 0))),
    )


def _flag(args, name: str, fallback):
    value = getattr(args, name, None)
    return fallback if value is None else value


def _eval_config(raw: dict, args) -> EvalConfig:
    merged = dict(raw)
    for key in ("seed", "k", "threads", "boundary", "grading"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    try:
        return EvalConfig.from_dict(merged)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _resolve_boundary(args, raw: dict, data_path: Path):
    """Boundary from flag, config, or the manifest next to the data file."""
    if getattr(args, "boundary", None):
        return parse_timestamp(args.boundary)
    if raw.get("boundary"):
        return parse_timestamp(raw["boundary"])
    manifest = data_path.parent / "manifest.json"
    if manifest.exists():
        try:
            recorded = json.loads(manifest.read_text(encoding="utf-8")).get("boundary")
        except json.JSONDecodeError:
            recorded = None
        if recorded:
            return parse_timestamp(recorded)
    raise DataError(
        "no split boundary: pass --boundary, set it in the config, "
        "or keep the generator manifest next to the data file"
    )


def _write_manifest(out_dir: Path, payload: dict) -> None:
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _input_digests(data_path: Path) -> dict:
    digests = {data_path.name: _sha256(data_path)}
    for side in sidecar_paths(data_path):
        if side.exists():
            digests[side.name] = _sha256(side)
    return digests


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    raw_all = _load_config(args.config)
    _, synth_raw, paths = _split_config(raw_all)
    cfg = _synth_config(synth_raw, args)
    out_dir = Path(_flag(args, "out", paths.get("out")) or "synth_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg)
    data_path = out_dir / "interactions.csv"
    write_events(data, data_path)
    _write_manifest(
        out_dir,
        {
            "command": "synth",
            "boundary": format_timestamp(cfg.boundary),
            "synth_config": {
                "n_users": cfg.n_users,
                "n_items": cfg.n_items,
                "months": cfg.months,
                "boundary_month": cfg.boundary_month,
                "popularity_skew": cfg.popularity_skew,
                "target_sparsity": cfg.target_sparsity,
                "segment_targets": list(cfg.segment_targets),
                "latent_dim": cfg.latent_dim,
                "seed": cfg.seed,
            },
            "files": _input_digests(data_path),
        },
    )
    print(f"wrote {len(data.events)} events to {data_path}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    raw_all = _load_config(args.config)
    raw, _, paths = _split_config(raw_all)
    data_path = Path(_require(args.data or paths.get("data"), "--data"))
    data = load_events(data_path)
    boundary = _resolve_boundary(args, raw, data_path)
    split = temporal_split(data, boundary)
    seg = segment_users(split)
    stats = dataset_stats(split, seg).as_dict()
    train, test = stats["train"], stats["test"]
    print(f"boundary: {format_timestamp(boundary)}")
    print(
        f"train: users={train['users']} products={train['products']} "
        f"sales={train['sales']}({train['sales_pct']:.2f}%) "
        f"views={train['views']}({train['views_pct']:.2f}%) "
        f"unobserved={train['unobserved']}({train['unobserved_pct']:.1f}%)"
    )
    print(
        f"test:  users={test['users']} products={test['products']} "
        f"sales={test['sales']}({test['sales_pct']:.2f}%) "
        f"views={test['views']}({test['views_pct']:.2f}%) "
        f"unobserved={test['unobserved']}({test['unobserved_pct']:.1f}%)"
    )
    for name, seg_stats in test["segments"].items():
        print(f"  {name}: {seg_stats['users']} ({seg_stats['pct']:.1f}%)")
    return EXIT_OK


def _cmd_split(args) -> int:
    raw_all = _load_config(args.config)
    raw, _, paths = _split_config(raw_all)
    data_path = Path(_require(args.data or paths.get("data"), "--data"))
    out_dir = Path(_require(_flag(args, "out", paths.get("out")), "--out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_events(data_path)
    boundary = _resolve_boundary(args, raw, data_path)
    split = temporal_split(data, boundary)
    write_events(split.train, out_dir / "train.csv")
    write_events(split.test, out_dir / "test.csv")
    print(
        f"train: {len(split.train.events)} events, "
        f"test: {len(split.test.events)} events"
    )
    return EXIT_OK


def _cmd_train(args) -> int:
    raw_all = _load_config(args.config)
    raw, _, paths = _split_config(raw_all)
    data_path = Path(_require(args.data or paths.get("data"), "--data"))
    out_path = Path(_require(_flag(args, "out", paths.get("out")), "--out"))
    data = load_events(data_path)
    boundary = _resolve_boundary(args, raw, data_path)
    cfg = _eval_config({k: v for k, v in raw.items() if k != "boundary"}, args)
    split = temporal_split(data, boundary)
    als_cfg = als_mod.AlsConfig(
        factors=cfg.als.factors,
        regularization=cfg.als.regularization,
        alpha=cfg.als.alpha,
        sale_weight=cfg.als.sale_weight,
        iterations=cfg.als.iterations,
        seed=derive_seed(cfg.seed, "als"),
    )
    confidence = als_mod.build_confidence(split.train, als_cfg)
    model = als_mod.fit_als(confidence, als_cfg)
    if args.algo == "als":
        als_mod.save_model(model, out_path)
    else:
        forest_cfg = forest_mod.ForestConfig(
            n_trees=cfg.forest.n_trees,
            max_depth=cfg.forest.max_depth,
            min_leaf=cfg.forest.min_leaf,
            features_per_split=cfg.forest.features_per_split,
            negatives_per_user=cfg.forest.negatives_per_user,
            seed=derive_seed(cfg.seed, "forest"),
        )
        table = forest_mod.augment_labels(split.train, confidence, model, forest_cfg)
        forest = forest_mod.fit_forest(table, forest_cfg, threads=cfg.threads)
        forest_mod.save_forest(forest, out_path)
    print(f"wrote {args.algo} model to {out_path}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    raw_all = _load_config(args.config)
    raw, _, paths = _split_config(raw_all)
    data_path = Path(_require(args.data or paths.get("data"), "--data"))
    out_dir = Path(_flag(args, "out", paths.get("out")) or "eval_out")
    if not data_path.exists():
        raise DataError(f"no such data file: {data_path}")
    data = load_events(data_path)
    boundary = _resolve_boundary(args, raw, data_path)
    cfg = _eval_config({**raw, "boundary": format_timestamp(boundary)}, args)
    report = run_evaluation(cfg, data)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = render_report(report, out_dir)
    _write_manifest(
        out_dir,
        {
            "command": "evaluate",
            "config": cfg.to_dict(),
            "inputs": _input_digests(data_path),
        },
    )
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    report_path = Path(args.report)
    if not report_path.exists():
        raise DataError(f"no such report file: {report_path}")
    report = EvaluationReport.from_json(report_path.read_text(encoding="utf-8"))
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    out_dir = Path(args.out or report_path.parent)
    written = render_report(report, out_dir, formats=formats)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _require(value, flag: str):
    if value in (None, ""):
        raise _UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="stylebench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, help="master seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--out", help="output directory")
    p_synth.add_argument("--users", type=int, help="user pool size")
    p_synth.add_argument("--items", type=int, help="catalog size")
    p_synth.add_argument("--skew", type=float, help="popularity Zipf exponent")

    p_stats = sub.add_parser("stats", help="print descriptive statistics")
    common(p_stats)
    p_stats.add_argument("--data", help="interactions file")
    p_stats.add_argument("--boundary", help="RFC 3339 split boundary")

    p_split = sub.add_parser("split", help="write the temporal split")
    common(p_split)
    p_split.add_argument("--data", help="interactions file")
    p_split.add_argument("--boundary", help="RFC 3339 split boundary")
    p_split.add_argument("--out", help="output directory")

    p_train = sub.add_parser("train", help="fit and serialize one model")
    common(p_train)
    p_train.add_argument("--data", help="interactions file")
    p_train.add_argument("--boundary", help="RFC 3339 split boundary")
    p_train.add_argument("--algo", choices=("als", "forest"), required=True)
    p_train.add_argument("--out", help="model output path")
    p_train.add_argument("--threads", type=int, help="worker cap")

    p_eval = sub.add_parser("evaluate", help="run the full evaluation pipeline")
    common(p_eval)
    p_eval.add_argument("--data", help="interactions file")
    p_eval.add_argument("--boundary", help="RFC 3339 split boundary")
    p_eval.add_argument("--out", help="report output directory")
    p_eval.add_argument("--k", type=int, help="recommendation list length")
    p_eval.add_argument("--threads", type=int, help="worker cap")
    p_eval.add_argument("--grading", choices=("graded", "binary", "sales_only"))

    p_report = sub.add_parser("report", help="re-render tables from report.json")
    p_report.add_argument("--report", required=True, help="canonical report.json")
    p_report.add_argument("--out", help="output directory (default: alongside input)")
    p_report.add_argument("--format", default="csv,markdown")

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "stats": _cmd_stats,
    "split": _cmd_split,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StylebenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
