"""Command-line entry point: ``geoact <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (YAML mapping of flag names to
values); explicit flags win over the file. The effective configuration and
its hash are written into every output artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from geoact.errors import GeoActError, MissingArtifactError

log = logging.getLogger("geoact")

EXIT_USAGE = 64


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Effective settings of one command invocation."""

    command: str
    settings: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "settings": self.settings}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# helpers ---------------------------------------------------------------------


def _slug(city: str) -> str:
    return city.lower().replace(" ", "_")


def _dataset_path(workdir: str | Path, city: str) -> Path:
    return Path(workdir) / f"{_slug(city)}.dataset.jsonl"


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _parse_range(text: str) -> list[int]:
    out: list[int] = []
    for part in str(text).split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out += list(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def _feature_spec(args):
    from geoact.features import FeatureSpec
    from geoact.grid import ResolutionLadder

    ladder = ResolutionLadder.build(args.families.split(","), _parse_range(args.resolutions))
    return FeatureSpec(ladder)


def _load_city(workdir: str, name: str):
    """Dataset plus the city config recorded next to it at ingest time."""
    from geoact.geodesy import GeoPoint
    from geoact.ingest import CityConfig, read_dataset

    ds = read_dataset(_require(_dataset_path(workdir, name), f"dataset for {name}"))
    summary = json.loads(_require(Path(workdir) / "summary.json", "ingest summary").read_text())
    for c in summary["config"]["settings"]["city_configs"]:
        if c["name"] == name:
            return ds, CityConfig(c["name"], GeoPoint(c["lat"], c["lon"]), c["radius_km"])
    raise MissingArtifactError(f"city {name!r} not listed in {workdir}/summary.json")


def _model_params(args) -> dict:
    params: dict = {}
    if getattr(args, "best", None):
        best = json.loads(_require(args.best, "best-config file").read_text())
        params.update(best["best"]["config"]["params"])
    if getattr(args, "params", None):
        params.update(json.loads(args.params))
    return params


def _settings(args, skip=("func", "config", "command", "threads", "log_level")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    from geoact.ingest import load_cities
    from geoact.synthetic import generate_cities, write_tsv

    cities = load_cities(args.cities)
    records = generate_cities(cities, args.checkins_per_city, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(records, out)
    print(f"wrote {len(records)} synthetic check-ins for {len(cities)} cities to {out}")
    return 0


def cmd_ingest(args) -> int:
    from geoact.ingest import (
        ActivityTaxonomy,
        build_dataset,
        load_cities,
        parse_checkins_report,
        split_dataset,
        table_summary,
        write_dataset,
    )

    src = _require(args.input, "input file")
    cities = load_cities(_require(args.cities, "cities file") if args.cities else None)
    if args.taxonomy:
        _require(args.taxonomy, "taxonomy file")
    tax = ActivityTaxonomy.load(args.taxonomy)
    settings = _settings(args)
    settings["city_configs"] = [c.to_dict() for c in cities]
    cfg = RunConfig("ingest", settings)

    report = parse_checkins_report(src)
    datasets = build_dataset(report.records, cities, tax, args.anon_resolution, args.unknown_policy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in datasets.items():
        ds = split_dataset(ds, args.test_fraction, args.split_seed) if len(ds) >= 2 else ds
        write_dataset(ds, _dataset_path(out, name), cfg.hash)
    summary = table_summary(datasets.values())
    summary.update(
        {
            "input_lines": report.total_lines,
            "malformed_lines": report.malformed,
            "config": cfg.to_dict(),
            "config_hash": cfg.hash,
        }
    )
    _write_json(out / "summary.json", summary)
    for row in summary["cities"]:
        print(f"{row['city']:<16} {row['checkins']:>9} {row['venues']:>8} {row['users']:>7}")
    return 0


def cmd_train(args) -> int:
    from geoact.features import FeatureExtractor
    from geoact.models import ModelSpec, fit

    ds, city = _load_city(args.workdir, args.city)
    spec = _feature_spec(args)
    mspec = ModelSpec(args.model, _model_params(args), args.seed)
    cfg = RunConfig("train", {**_settings(args), "params": mspec.params, "feature_spec": spec.to_dict()})
    train = ds.train
    X = FeatureExtractor(spec, city).fit_transform(train)
    model = fit(mspec, X, train.activity, fingerprint=spec.fingerprint())
    model.context = {
        "city": city.to_dict(),
        "feature_spec": spec.to_dict(),
        "workdir": str(args.workdir),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
    }
    out = Path(args.out or Path(args.workdir) / f"{_slug(args.city)}.{args.model}.model")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"saved {args.model} model ({X.shape[0]} rows x {X.shape[1]} features) to {out}")
    return 0


def cmd_tune(args) -> int:
    from geoact.features import FeatureExtractor
    from geoact.tuning import Budget, default_space, load_spaces, search

    ds, city = _load_city(args.workdir, args.city)
    spec = _feature_spec(args)
    space = load_spaces(args.space)[args.model] if args.space else default_space(args.model)
    if args.fixed:
        space.fixed.update(json.loads(args.fixed))
    cfg = RunConfig("tune", {**_settings(args), "space": space.to_dict(), "feature_spec": spec.to_dict()})
    train = ds.train
    X = FeatureExtractor(spec, city).fit_transform(train)
    out = Path(args.out or Path(args.workdir) / f"tune_{_slug(args.city)}_{args.model}")
    out.mkdir(parents=True, exist_ok=True)
    budget = Budget(args.trials, args.wall_clock)
    result = search(space, X, train.activity, budget, args.seed, log_path=out / "trials.jsonl")
    best = result.best.to_dict()
    best.pop("duration")  # keep the file reproducible byte for byte
    _write_json(
        out / "best.json",
        {"best": best, "n_trials": len(result.trials), "config": cfg.to_dict(), "config_hash": cfg.hash},
    )
    print(f"best of {len(result.trials)} trials: mean CV log loss {result.best.mean:.5f} (trial {result.best.trial})")
    return 0


def _load_model_and_data(args):
    from geoact.features import FeatureExtractor, FeatureSpec
    from geoact.geodesy import GeoPoint
    from geoact.ingest import CityConfig, read_dataset
    from geoact.models import load_model

    model = load_model(_require(args.model, "model file"))
    ctx = model.context
    if not ctx:
        raise MissingArtifactError(f"{args.model} carries no training context")
    spec = FeatureSpec.from_dict(ctx["feature_spec"])
    c = ctx["city"]
    city = CityConfig(c["name"], GeoPoint(c["lat"], c["lon"]), c["radius_km"])
    workdir = args.workdir or ctx["workdir"]
    ds = read_dataset(_require(_dataset_path(workdir, city.name), f"dataset for {city.name}"))
    part = ds.test if args.split == "test" else ds.train
    ext = FeatureExtractor(spec, city).fit(ds.train)
    if spec.fingerprint() != model.fingerprint:
        raise GeoActError("feature fingerprint mismatch between model and its recorded spec")
    return model, part, ext.transform(part), ds


def cmd_evaluate(args) -> int:
    from geoact.evaluation import confusion, metrics_report, split_fingerprint, write_confusion_csv, write_metrics_json

    model, part, X, ds = _load_model_and_data(args)
    cfg = RunConfig("evaluate", {**_settings(args), "model_config_hash": model.context.get("config_hash")})
    probs = model.predict_proba(X)
    seed = model.spec.seed if model.spec else None
    report = metrics_report(probs, part.activity, model.fingerprint, seed, split_fingerprint(ds))
    out = Path(args.out or Path(args.model).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", report, cfg.hash, cfg.to_dict())
    cm = confusion(probs.argmax(axis=1), part.activity)
    write_confusion_csv(out / "confusion.csv", out / "confusion_normalized.csv", cm, cfg.hash)
    print(f"{args.split}: macro-F1 {report.macro_f1:.4f}  log loss {report.log_loss:.4f}  accuracy {report.accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from geoact.evaluation import AblationPlan, run_ablation, write_ablation_csv
    from geoact.models import ModelSpec

    ds, city = _load_city(args.workdir, args.city)
    base = _feature_spec(args)
    plan = AblationPlan.for_axis(args.axis, base)
    mspec = ModelSpec(args.model, _model_params(args), args.seed)
    cfg = RunConfig("ablate", {**_settings(args), "params": mspec.params, "feature_spec": base.to_dict()})
    rows = run_ablation(plan, ds, city, mspec)
    out = Path(args.out or Path(args.workdir) / f"ablation_{_slug(args.city)}")
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", args.axis, rows, cfg.hash)
    _write_json(out / "ablation.json", {"config": cfg.to_dict(), "config_hash": cfg.hash})
    for r in rows:
        score = f"{r.report.macro_f1:.4f}" if r.report else f"failed ({r.error})"
        print(f"{r.variant:<24} {score}")
    return 0


def cmd_export_map(args) -> int:
    from geoact.evaluation import export_geojson, write_geojson

    model, part, X, _ = _load_model_and_data(args)
    cfg = RunConfig("export-map", {**_settings(args), "model_config_hash": model.context.get("config_hash")})
    preds = model.predict(X)
    export = export_geojson(part.cell, preds, part.activity, args.resolution, args.family, cfg.hash)
    out = Path(args.out or Path(args.model).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_geojson(out / "inferred.geojson", export.inferred)
    write_geojson(out / "ground_truth.geojson", export.truth)
    print(f"{export.n_cells} cells, modal agreement {export.agreement_rate:.4f}")
    return 0


# parser ----------------------------------------------------------------------


def _add_feature_flags(p):
    p.add_argument("--families", default="gh,ogh", help="comma-separated grid families (default: gh,ogh)")
    p.add_argument("--resolutions", default="4-10", help="resolution list, e.g. 4-10 or 5,7,9 (default: 4-10)")


def _add_city_flags(p):
    p.add_argument("--workdir", required=True, help="directory written by `ingest`")
    p.add_argument("--city", required=True, help="city name as configured at ingest")


def build_parser() -> ArgumentParser:
    from geoact.evaluation import AXES
    from geoact.models.base import FAMILIES

    parser = ArgumentParser(prog="geoact", description="Offline activity inference from check-ins.")
    parser.add_argument("--threads", type=int, default=None, help="worker thread cap (env GEOACT_THREADS)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="YAML file of flag defaults; explicit flags win")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a synthetic check-in file for the configured cities")
    p.add_argument("--out", required=True)
    p.add_argument("--cities", default=None)
    p.add_argument("--checkins-per-city", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)

    p = command("ingest", cmd_ingest, "parse, filter, anonymize and split check-ins per city")
    p.add_argument("--input", required=True)
    p.add_argument("--cities", default=None, help="city YAML (default: bundled six cities)")
    p.add_argument("--taxonomy", default=None, help="category -> activity TSV (default: bundled)")
    p.add_argument("--out", required=True)
    p.add_argument("--anon-resolution", type=int, default=10)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--unknown-policy", choices=("drop", "error"), default="drop")

    p = command("train", cmd_train, "train one model on a city's training split")
    _add_city_flags(p)
    _add_feature_flags(p)
    p.add_argument("--model", choices=FAMILIES, required=True)
    p.add_argument("--params", help="JSON hyperparameter overrides")
    p.add_argument("--best", help="best.json from `tune` to take hyperparameters from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = command("tune", cmd_tune, "random-search hyperparameters with 3-fold CV")
    _add_city_flags(p)
    _add_feature_flags(p)
    p.add_argument("--model", choices=FAMILIES, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--wall-clock", type=float, default=48 * 3600.0, help="seconds")
    p.add_argument("--space", help="YAML search-space file")
    p.add_argument("--fixed", help="JSON hyperparameters held fixed in every trial")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "score a saved model and write metrics and confusion matrices"),
        ("export-map", cmd_export_map, "write per-cell inferred and ground-truth GeoJSON maps"),
    ):
        p = command(name, func, help_)
        p.add_argument("--model", required=True, help="model file from `train`")
        p.add_argument("--workdir", help="override the workdir recorded in the model")
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.add_argument("--out")
        if name == "export-map":
            p.add_argument("--resolution", type=int, default=7)
            p.add_argument("--family", default="gh")

    p = command("ablate", cmd_ablate, "run one feature-ablation axis")
    _add_city_flags(p)
    _add_feature_flags(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--model", choices=FAMILIES, default="gbt")
    p.add_argument("--params", help="JSON hyperparameter overrides")
    p.add_argument("--best", help="best.json from `tune`")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def _apply_config_file(parser: ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # find the subcommand and --config first: the file may supply required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads")
    pre.add_argument("--log-level")
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    first, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices  # type: ignore[union-attr]
    if not first.config or first.command not in subs or {"-h", "--help"} & set(argv):
        return parser.parse_args(argv)
    cfg = yaml.safe_load(_require(first.config, "config file").read_text()) or {}
    sub = subs[first.command]
    known = {a.dest for a in sub._actions}
    unknown = set(k.replace("-", "_") for k in cfg) - known
    if unknown:
        parser.error(f"unknown keys in {first.config}: {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    # re-parse so explicit flags override the file; required flags may now come from it
    for action in sub._actions:
        if action.dest in {k.replace("-", "_") for k in cfg}:
            action.required = False
    return parser.parse_args(argv)


def _set_threads(n: int | None) -> None:
    if n is None and os.environ.get("GEOACT_THREADS"):
        n = int(os.environ["GEOACT_THREADS"])
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except MissingArtifactError as exc:
        print(f"geoact: error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except GeoActError as exc:
        print(f"geoact: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
