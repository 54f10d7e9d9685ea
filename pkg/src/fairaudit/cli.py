"""Command-line workflow: prepare, train-model, score, train-gan, audit, report.

Every command works on one output directory. ``audit`` runs the earlier
stages and then generates canonical sets for the requested modes. Each
command refreshes ``manifest.json``, which lists every artifact with its
sha256.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml

from . import data as fdata
from .blackbox import (MLPClassifier, ScoredTable, SubprocessModel, load_scored_csv, score_table, train_mlp,
                       write_scored_csv)
from .data import DataError, RawTable, TableSchema
from .lucid import InverseDesignConfig, lucid_compare, lucid_generate
from .lucidgan import CanonicalSet, GenerationError, LucidGAN, TrainConfig, TrainingDivergence, train_lucidgan
from .metrics import disparity, distribution_distance, group_metrics, intersectional_crosstab, summarize_pair
from .report import MissingArtifact, render, slug

logger = logging.getLogger("fairaudit")

MODES = ("direct", "proxy", "intersectional", "lucid")
SOURCES = ("train_mlp", "scored_csv", "external_scorer")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4, 5

DEFAULT_FIXED = {
    "adult": {"axis": "Race", "fixed": [{"Sex": "Male"}, {"Sex": "Female"},
                                        {"Sex": "Male", "Marital Status": "Married"},
                                        {"Sex": "Female", "Marital Status": "Married"}]},
    "compas": {"axis": "Race", "fixed": [{"Sex": "Male"}, {"Sex": "Female"}]},
}

# proxy audits drop these from the model inputs unless the config says otherwise
DEFAULT_WITHHELD = {"adult": ["Sex", "Race"], "compas": ["Sex", "Race"]}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "adult"
    train_csv: str | None = None
    test_csv: str | None = None
    schema: str | None = None
    test_fraction: float = 0.2
    model_source: str = "train_mlp"
    scored_csv: dict[str, str] = field(default_factory=dict)
    scorer: str | None = None
    modes: list[str] = field(default_factory=lambda: ["direct"])
    withheld: list[str] | None = None
    intersectional: dict[str, Any] = field(default_factory=dict)
    gan: dict[str, Any] = field(default_factory=dict)
    lucid: dict[str, Any] = field(default_factory=dict)
    mlp: dict[str, Any] = field(default_factory=dict)
    samples: int = 1000
    epochs: int | None = None
    seed: int = 0
    out: str = "audit"

    @classmethod
    def from_mapping(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("scored_csv"), str):
            d["scored_csv"] = {"direct": d["scored_csv"]}
        if isinstance(d.get("modes"), str):
            d["modes"] = [m.strip() for m in d["modes"].split(",") if m.strip()]
        return cls(**{k: v for k, v in d.items() if v is not None})

    def validate(self) -> None:
        if self.dataset not in ("adult", "compas", "csv"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "csv" and not (self.train_csv and self.schema):
            raise ConfigError("dataset 'csv' needs train_csv and schema")
        if not self.modes:
            raise ConfigError("no audit modes given")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; choose from {list(MODES)}")
        if self.model_source not in SOURCES:
            raise ConfigError(f"model_source must be one of {list(SOURCES)}")
        if self.model_source == "scored_csv" and not self.scored_csv:
            raise ConfigError("model_source 'scored_csv' needs scored_csv paths")
        if self.model_source == "external_scorer" and not self.scorer:
            raise ConfigError("model_source 'external_scorer' needs a scorer command")
        if self.model_source != "train_mlp" and self.scorer and self.scored_csv:
            raise ConfigError("give either scored_csv or scorer, not both")
        if "lucid" in self.modes and self.model_source != "train_mlp":
            raise ConfigError("mode 'lucid' needs input gradients, so model_source must be train_mlp")
        if self.samples <= 0:
            raise ConfigError("samples must be positive")
        if self.epochs is not None and self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        for key, cls in (("gan", TrainConfig), ("lucid", InverseDesignConfig)):
            names = {f.name for f in dataclasses.fields(cls)}
            extra = set(getattr(self, key)) - names
            if extra:
                raise ConfigError(f"unknown {key} settings: {sorted(extra)}")

    def validate_schema(self, schema: TableSchema) -> None:
        """Checks that need the feature list."""
        for name in self.withheld or []:
            if name not in schema:
                raise ConfigError(f"withheld feature {name!r} is not in the schema")
        if "proxy" in self.modes and not any(schema[w].protected for w in self.withheld_features(schema)):
            raise ConfigError("proxy mode needs at least one withheld protected feature")
        if "intersectional" in self.modes:
            spec = self.intersectional_spec()
            if spec["axis"] not in schema or not schema[spec["axis"]].is_categorical:
                raise ConfigError(f"intersectional axis {spec['axis']!r} is not a categorical feature")
            if not spec["fixed"]:
                raise ConfigError("intersectional mode needs fixed-category lists")
            for fixed in spec["fixed"]:
                for k, v in fixed.items():
                    if k not in schema or not schema[k].is_categorical or v not in schema[k].categories:
                        raise ConfigError(f"fixed category {k}={v!r} is not in the schema")

    def withheld_features(self, schema: TableSchema) -> list[str]:
        if self.withheld is not None:
            return list(self.withheld)
        return list(DEFAULT_WITHHELD.get(self.dataset, schema.protected))

    def intersectional_spec(self) -> dict[str, Any]:
        spec = dict(DEFAULT_FIXED.get(self.dataset, {"axis": None, "fixed": []}))
        spec.update(self.intersectional)
        return spec

    def train_config(self) -> TrainConfig:
        kw = dict(self.gan)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if self.epochs is not None:
            kw["epochs"] = self.epochs
        kw.setdefault("seed", self.seed)
        return TrainConfig(**kw)

    def lucid_config(self) -> InverseDesignConfig:
        kw = dict(self.lucid)
        kw.setdefault("n_samples", self.samples)
        kw.setdefault("seed", self.seed)
        return InverseDesignConfig(**kw)

    def variants(self) -> list[str]:
        """Subject-model variants: ``direct`` sees every feature, ``proxy`` lacks the withheld ones."""
        out = []
        if {"direct", "intersectional", "lucid"} & set(self.modes):
            out.append("direct")
        if "proxy" in self.modes:
            out.append("proxy")
        return out


# helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self.fingerprints: dict[str, str] = {}

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {p}; run the earlier stage first")
        return p

    def schema(self) -> TableSchema:
        return fdata.load_schema(self.need("data", "schema.yaml"))

    def variant_schema(self, variant: str) -> TableSchema:
        schema = self.schema()
        if variant == "proxy":
            return schema.with_withheld(self.cfg.withheld_features(schema))
        return schema

    def table(self, part: str, schema: TableSchema | None = None) -> RawTable:
        schema = schema or self.schema()
        return fdata.load_csv(self.need("data", f"{part}.csv"), schema)

    def write_manifest(self, command: str) -> Path:
        path = self.root / "manifest.json"
        old = json.loads(path.read_text()) if path.exists() else {}
        timings = {**old.get("runtime_seconds", {}), **self.timings}
        fps = {**old.get("fingerprints", {}), **self.fingerprints}
        files = {
            str(p.relative_to(self.root)): sha256(p)
            for p in sorted(self.root.rglob("*"))
            if p.is_file() and p.name not in ("manifest.json", "error.json")
        }
        manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "seed": self.cfg.seed,
            "config": dataclasses.asdict(self.cfg),
            "fingerprints": fps,
            "runtime_seconds": timings,
            "artifacts": files,
            "history": old.get("history", []) + [{"command": command, "time": time.time()}],
        }
        path.write_text(json.dumps(manifest, indent=1, default=str))
        return path


class _timed:
    def __init__(self, ws: Workspace, name: str):
        self.ws, self.name = ws, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("%s ...", self.name)

    def __exit__(self, *exc):
        self.ws.timings[self.name] = round(time.perf_counter() - self.t0, 3)


def _write_table(table: RawTable, path: Path) -> None:
    df = table.rows.copy()
    if table.labels is not None:
        df[table.schema.label_column or "label"] = table.labels.to_numpy()
    df.to_csv(path, index=False)


# stages


def stage_prepare(ws: Workspace) -> None:
    cfg = ws.cfg
    with _timed(ws, "prepare"):
        if cfg.dataset == "adult":
            train, test = fdata.load_adult()
        elif cfg.dataset == "compas":
            train, test = fdata.load_compas(seed=cfg.seed, test_fraction=cfg.test_fraction)
        else:
            schema = fdata.load_schema(cfg.schema)
            full = fdata.load_csv(cfg.train_csv, schema)
            if cfg.test_csv:
                train, test = full, fdata.load_csv(cfg.test_csv, schema, unknown="drop")
            else:
                train, test = fdata.split(full, cfg.test_fraction, cfg.seed)
        schema = train.schema
        if schema.label_column is None:
            schema = TableSchema(schema.features, schema.positive_label, "label")
            train, test = RawTable(schema, train.rows, train.labels), RawTable(schema, test.rows, test.labels)
        cfg.validate_schema(schema)
        fdata.save_schema(schema, ws.path("data", "schema.yaml"))
        _write_table(train, ws.path("data", "train.csv"))
        _write_table(test, ws.path("data", "test.csv"))
        ws.fingerprints["schema"] = schema.fingerprint()
        logger.info("prepared %d train / %d test rows", len(train), len(test))


def stage_train_model(ws: Workspace) -> None:
    cfg = ws.cfg
    if cfg.model_source != "train_mlp":
        logger.info("model source is %s; nothing to train", cfg.model_source)
        return
    for variant in cfg.variants():
        schema = ws.variant_schema(variant)
        with _timed(ws, f"train-model:{variant}"):
            model = train_mlp(ws.table("train", schema), seed=cfg.seed, **cfg.mlp)
            model.save(ws.path("models", f"{variant}.pt"))
        ws.path("models", f"{variant}.json").write_text(json.dumps(
            {"hidden": model.hidden, "validation_accuracy": model.validation_accuracy,
             "inputs": schema.model_inputs}, indent=1))
        logger.info("%s model %s: validation accuracy %.4f", variant, model.hidden, model.validation_accuracy)


def stage_score(ws: Workspace) -> None:
    cfg = ws.cfg
    for variant in cfg.variants():
        schema = ws.variant_schema(variant)
        dest = ws.path("scored", f"{variant}.csv")
        with _timed(ws, f"score:{variant}"):
            if cfg.model_source == "scored_csv":
                if variant not in cfg.scored_csv:
                    raise ConfigError(f"no scored_csv given for the {variant} audit")
                scored = load_scored_csv(cfg.scored_csv[variant], schema)
            else:
                test = ws.table("test", schema)
                if cfg.model_source == "train_mlp":
                    model = MLPClassifier.load(ws.need("models", f"{variant}.pt"), schema)
                else:
                    model = SubprocessModel(cfg.scorer)
                scored = score_table(model, test)
            write_scored_csv(scored, dest)


def _scored(ws: Workspace, variant: str) -> ScoredTable:
    return load_scored_csv(ws.need("scored", f"{variant}.csv"), ws.variant_schema(variant))


def stage_train_gan(ws: Workspace) -> None:
    cfg = ws.cfg
    tc = cfg.train_config()
    for variant in cfg.variants():
        scored = _scored(ws, variant)
        with _timed(ws, f"train-gan:{variant}"):
            gan = train_lucidgan(scored, tc)
        gan.save(ws.path("gan", f"{variant}.pt"))
        log = pd.DataFrame([dataclasses.asdict(e) for e in gan.log])
        log.to_csv(ws.path("gan", f"{variant}_log.csv"), index=False)
        ws.fingerprints[f"gan:{variant}"] = gan.fingerprint()
        ws.fingerprints[f"encoder:{variant}"] = gan.encoder.fingerprint()


def _write_pair(ws: Workspace, mode: str, pos: CanonicalSet, neg: CanonicalSet) -> None:
    pos.to_csv(ws.path("canonical", mode, "positive.csv"))
    neg.to_csv(ws.path("canonical", mode, "negative.csv"))


def _pair_metrics(pos: CanonicalSet, neg: CanonicalSet, schema: TableSchema) -> dict[str, Any]:
    out: dict[str, Any] = {"n_positive": len(pos), "n_negative": len(neg),
                           "condition_match_rate": {"positive": pos.condition_match_rate,
                                                    "negative": neg.condition_match_rate}}
    if len(pos) and len(neg):
        paired = summarize_pair(pos, neg, schema)
        out["wasserstein1"] = distribution_distance(paired.positive, paired.negative, "wasserstein1")
        out["jensen_shannon"] = distribution_distance(paired.positive, paired.negative, "jensen_shannon")
        out["frequencies"] = paired.to_dict()
    return out


def stage_generate(ws: Workspace) -> dict[str, Any]:
    cfg = ws.cfg
    n, seed = cfg.samples, cfg.seed
    schema = ws.schema()
    report: dict[str, Any] = {}
    gans = {v: LucidGAN.load(ws.need("gan", f"{v}.pt")) for v in cfg.variants()}
    for mode in cfg.modes:
        with _timed(ws, f"generate:{mode}"):
            if mode in ("direct", "proxy"):
                pos, neg = gans[mode].canonical_pair(n, seed=seed)
                _write_pair(ws, mode, pos, neg)
                report[mode] = _pair_metrics(pos, neg, schema)
            elif mode == "intersectional":
                spec = cfg.intersectional_spec()
                target = float(spec.get("prediction_target", 1.0))
                sets = [gans["direct"].generate(target, n, fixed, seed=seed + i)
                        for i, fixed in enumerate(spec["fixed"])]
                for s in sets:
                    name = slug("_".join(f"{k}_{v}" for k, v in s.fixed_categories.items()))
                    s.to_csv(ws.path("canonical", "intersectional", f"{name}.csv"))
                tab = intersectional_crosstab(sets, spec["axis"], schema)
                tab.percentages.to_csv(ws.path("tables", f"intersectional_{slug(spec['axis'])}.csv"))
                report[mode] = {"axis": spec["axis"], "prediction_target": target,
                                "percentages": tab.percentages.to_dict(orient="index"),
                                "condition_match_rate": {lab: s.condition_match_rate
                                                         for lab, s in zip(tab.percentages.index, sets)}}
            elif mode == "lucid":
                model = MLPClassifier.load(ws.need("models", "direct.pt"), schema)
                lc = cfg.lucid_config()
                res_pos = lucid_generate(model, "positive", lc)
                res_neg = lucid_generate(model, "negative", dataclasses.replace(lc, seed=lc.seed + 1))
                _write_pair(ws, "lucid", res_pos.canonical, res_neg.canonical)
                res_pos.initial.to_csv(ws.path("canonical", "lucid", "initial.csv"))
                report[mode] = _pair_metrics(res_pos.canonical, res_neg.canonical, schema)
                report[mode]["converged"] = {"positive": res_pos.n_converged, "negative": res_neg.n_converged}
                cmp_ = lucid_compare(res_pos.canonical, res_pos.initial, schema)
                for feat, delta in cmp_.categorical.items():
                    delta.rename("delta").to_csv(ws.path("tables", f"lucid_delta_{slug(feat)}.csv"))
    return report


def stage_group_metrics(ws: Workspace) -> dict[str, Any]:
    """Table-1 style rates of the direct subject model on the scored test set."""
    cfg = ws.cfg
    out: dict[str, Any] = {"groups": {}, "disparity": {}, "validation_accuracy": {}}
    for variant in cfg.variants():
        meta = ws.root / "models" / f"{variant}.json"
        if meta.exists():
            out["validation_accuracy"][variant] = json.loads(meta.read_text())["validation_accuracy"]
    variant = "direct" if "direct" in cfg.variants() else cfg.variants()[0]
    scored = _scored(ws, variant)
    if scored.table.labels is None:
        scored = ScoredTable(ws.table("test", scored.schema), scored.predictions)
    y = scored.table.y
    out["test_accuracy"] = {variant: float(((scored.predictions >= 0.5) == (y == 1)).mean())}
    for feat in scored.schema.protected:
        gm = group_metrics(scored, feat)
        out["groups"][feat] = gm.to_dict()
        dp = disparity(gm, "DP")
        try:
            eop = disparity(gm, "EOP").max_gap
        except DataError:
            eop = None
        out["disparity"][feat] = {"DP": dp.max_gap, "EOP": eop}
    return out


# commands


def cmd_prepare(ws: Workspace) -> None:
    stage_prepare(ws)


def cmd_train_model(ws: Workspace) -> None:
    stage_train_model(ws)


def cmd_score(ws: Workspace) -> None:
    stage_score(ws)


def cmd_train_gan(ws: Workspace) -> None:
    stage_train_gan(ws)


def cmd_audit(ws: Workspace) -> None:
    stage_prepare(ws)
    stage_train_model(ws)
    stage_score(ws)
    stage_train_gan(ws)
    metrics = stage_group_metrics(ws)
    metrics["modes"] = stage_generate(ws)
    metrics["seed"] = ws.cfg.seed
    ws.path("metrics.json").write_text(json.dumps(metrics, indent=1, default=_json_default))
    pd.DataFrame(
        [(f, c, g["support"], g["PR"], g["TPR"], g["low_support"])
         for f, gs in metrics["groups"].items() for c, g in gs.items()],
        columns=["feature", "category", "support", "PR", "TPR", "low_support"],
    ).to_csv(ws.path("tables", "group_metrics.csv"), index=False)


def cmd_report(ws: Workspace) -> None:
    with _timed(ws, "report"):
        render(ws.root)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


COMMANDS = {
    "prepare": cmd_prepare,
    "train-model": cmd_train_model,
    "score": cmd_score,
    "train-gan": cmd_train_gan,
    "audit": cmd_audit,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairaudit", description="Audit a binary classifier with canonical sets.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="YAML file of run settings; flags override its keys")
    p.add_argument("--dataset", choices=["adult", "compas", "csv"])
    p.add_argument("--mode", help="comma-separated audit modes: " + ",".join(MODES))
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="generator training epochs")
    p.add_argument("--samples", type=int, help="canonical-set size (default 1000)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    flags = {"dataset": args.dataset, "modes": args.mode, "out": args.out, "seed": args.seed,
             "epochs": args.epochs, "samples": args.samples}
    raw.update({k: v for k, v in flags.items() if v is not None})
    try:
        cfg = RunConfig.from_mapping(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg.validate()
    return cfg


def _exit_code(e: BaseException) -> int:
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, MissingArtifact):
        return EXIT_MISSING
    if isinstance(e, (TrainingDivergence, GenerationError)):
        return EXIT_DIVERGED
    if isinstance(e, (DataError, ValueError)):
        return EXIT_DATA
    if isinstance(e, FileNotFoundError):
        return EXIT_MISSING
    raise e


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = None
    try:
        cfg = load_config(args)
        ws = Workspace(cfg)
        COMMANDS[args.command](ws)
        ws.write_manifest(args.command)
        return EXIT_OK
    except (ConfigError, DataError, MissingArtifact, TrainingDivergence, GenerationError,
            ValueError, FileNotFoundError) as e:
        code = _exit_code(e)
        record = {"command": args.command, "error": type(e).__name__, "message": str(e), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        if ws is not None:
            (ws.root / "error.json").write_text(json.dumps(record, indent=1))
        return code


if __name__ == "__main__":
    sys.exit(main())
