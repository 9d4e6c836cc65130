"""Command-line entry points: synth, extract, train, eval, grid.

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Failures
are also logged to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .backbone import (
    BackboneModel,
    FineTuneConfig,
    RegistryEntry,
    fine_tune,
    load_from_registry,
    load_registry,
    replace_head,
    write_registry,
)
from .cache import FeatureCache
from .classifiers import GLOBAL_GRID_CLASSIFIERS, ClassifierSpec, TrainedClassifier, fit
from .dataset import load_image, load_manifest
from .evaluation import evaluate, summarize_repeats
from .features_global import KINDS
from .pipeline import FeatureStore, feature_spec, fit_and_evaluate, grid_sweep

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("eventverify")

TUNED_REGISTRY = "tuned_backbones.toml"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifests: dict[str, Path]
    registry: Path
    backbones: list[str]
    features: list[str]
    classifiers: list[ClassifierSpec]
    out: Path
    cache: Path
    seed: int = 0
    repeats: int = 1
    average: str = "macro"
    feature_params: dict[str, Any] = field(default_factory=dict)
    finetune: dict[str, Any] | None = None
    plots: bool = False

    def validate(self) -> None:
        for name, path in self.manifests.items():
            if not path.is_file():
                raise ConfigError(f"manifest {name!r} not found: {path}")
        if not self.registry.is_file():
            raise ConfigError(f"backbone registry not found: {self.registry}")
        known = load_registry(self.registry)
        missing = [b for b in self.backbones if b not in known]
        if missing:
            raise ConfigError(f"backbones not in registry: {', '.join(missing)}")
        bad = [k for k in self.features if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown feature kinds: {', '.join(bad)}")
        if not self.classifiers:
            raise ConfigError("no classifiers configured")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.average not in ("macro", "micro"):
            raise ConfigError("average must be macro or micro")

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifests": {k: str(v) for k, v in self.manifests.items()},
            "registry": str(self.registry),
            "backbones": self.backbones,
            "features": self.features,
            "classifiers": [c.to_dict() for c in self.classifiers],
            "seed": self.seed,
            "repeats": self.repeats,
            "average": self.average,
            "feature_params": self.feature_params,
            "finetune": self.finetune,
        }


def load_config(path: str | Path, overrides: argparse.Namespace | None = None) -> RunConfig:
    """Parse a TOML run config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    if "manifests" in raw:
        manifests = {k: resolve(v) for k, v in raw["manifests"].items()}
    elif "manifest" in raw:
        manifests = {"default": resolve(raw["manifest"])}
    else:
        raise ConfigError("config needs 'manifest' or a [manifests] table")
    for key in ("registry", "backbones"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    try:
        classifiers = [ClassifierSpec.from_dict(c) for c in raw.get("classifiers", [])]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad classifier entry: {exc}") from exc
    if not classifiers:
        classifiers = list(GLOBAL_GRID_CLASSIFIERS)
    out = resolve(raw.get("out", "runs/default"))
    cfg = RunConfig(
        manifests=manifests,
        registry=resolve(raw["registry"]),
        backbones=list(raw["backbones"]),
        features=list(raw.get("features", ["global_intermediate"])),
        classifiers=classifiers,
        out=out,
        cache=resolve(raw["cache"]) if "cache" in raw else out / "cache",
        seed=int(raw.get("seed", 0)),
        repeats=int(raw.get("repeats", 1)),
        average=raw.get("average", "macro"),
        feature_params=dict(raw.get("feature_params", {})),
        finetune=raw.get("finetune"),
        plots=bool(raw.get("plots", False)),
    )
    if overrides is not None:
        if getattr(overrides, "backbone", None):
            cfg.backbones = list(overrides.backbone)
        if getattr(overrides, "features", None):
            cfg.features = list(overrides.features)
        if getattr(overrides, "seed", None) is not None:
            cfg.seed = overrides.seed
        if getattr(overrides, "repeats", None) is not None:
            cfg.repeats = overrides.repeats
        if getattr(overrides, "out", None):
            cfg.out = Path(overrides.out)
            if "cache" not in raw:
                cfg.cache = cfg.out / "cache"
    cfg.validate()
    return cfg


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def _backbones(cfg: RunConfig) -> list[BackboneModel]:
    registry = load_registry(cfg.registry)
    models = [load_from_registry(registry, name) for name in cfg.backbones]
    tuned = cfg.out / "backbones" / TUNED_REGISTRY
    if tuned.is_file():
        treg = load_registry(tuned)
        models += [load_from_registry(treg, name) for name in treg]
    return models


def _manifests(cfg: RunConfig):
    return {name: load_manifest(p) for name, p in cfg.manifests.items()}


def _model_path(cfg: RunConfig, ds: str, backbone: str, kind: str, clf: ClassifierSpec, seed: int) -> Path:
    return (
        cfg.out / "models" / _slug(ds) / _slug(backbone) / kind / f"{_slug(clf.label)}_s{seed}.evclf"
    )


def cmd_extract(cfg: RunConfig) -> dict[str, Any]:
    cache = FeatureCache(cfg.cache)
    store = FeatureStore(cache)
    summary = []
    for ds, manifest in _manifests(cfg).items():
        for model in _backbones(cfg):
            for kind in cfg.features:
                spec = feature_spec(kind, model, cfg.feature_params)
                for rec in manifest.records:
                    store.get(model, rec, spec)
                summary.append({"dataset": ds, "backbone": model.name, "features": spec.to_dict()})
                log.info("extracted %s / %s / %s", ds, model.name, kind)
    doc = {"config": cfg.to_dict(), "extracted": summary, "cache": cache.stats(), "computed": store.computed}
    _write_json(cfg.out / "extract.json", doc)
    return doc


def _finetune(cfg: RunConfig) -> list[RegistryEntry]:
    ft = dict(cfg.finetune or {})
    if not ft.get("enabled", True):
        return []
    entries = []
    out_dir = cfg.out / "backbones"
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = load_registry(cfg.registry)
    for name in ft.get("backbones", cfg.backbones[:1]):
        for ds, manifest in _manifests(cfg).items():
            base = load_from_registry(registry, name)
            ftc = FineTuneConfig(
                num_classes=len(manifest.events),
                learning_rate=float(ft.get("learning_rate", 1e-4)),
                epochs=int(ft.get("epochs", 10)),
                batch_size=int(ft.get("batch_size", 32)),
                seed=int(ft.get("seed", cfg.seed)),
                freeze_body=bool(ft.get("freeze_body", False)),
            )
            head = replace_head(base, ftc.num_classes, seed=ftc.seed)
            train = [(load_image(r.path), manifest.event_index(r.event)) for r in manifest.train]
            tuned, trace = fine_tune(head, train, ftc)
            tuned.name = f"{name}-tuned-{_slug(ds)}"
            path = out_dir / f"{tuned.name}.onnx"
            entry = tuned.save(path)
            entries.append(entry)
            _write_json(out_dir / f"{tuned.name}.json", tuned.describe() | {"loss_trace": trace})
            log.info("fine-tuned %s on %s: loss %s", name, ds, ", ".join(f"{v:.4f}" for v in trace))
    write_registry(out_dir / TUNED_REGISTRY, entries)
    return entries


def cmd_train(cfg: RunConfig) -> dict[str, Any]:
    tuned = _finetune(cfg) if cfg.finetune else []
    if tuned:
        # tuned backbones need their own features before classifiers can fit
        cmd_extract(cfg)
    store = FeatureStore(FeatureCache(cfg.cache))
    written = []
    for ds, manifest in _manifests(cfg).items():
        ytr = [r.event for r in manifest.train]
        for model in _backbones(cfg):
            for kind in cfg.features:
                spec = feature_spec(kind, model, cfg.feature_params)
                Xtr = store.matrix(model, manifest.train, spec, compute=False)
                for clf in cfg.classifiers:
                    for r in range(cfg.repeats):
                        fitted = fit(clf.with_seed(cfg.seed + r), Xtr, ytr)
                        fitted.feature_spec = spec.to_dict()
                        path = _model_path(cfg, ds, model.name, kind, clf, cfg.seed + r)
                        path.parent.mkdir(parents=True, exist_ok=True)
                        fitted.save(path)
                        written.append(str(path.relative_to(cfg.out)))
    doc = {"config": cfg.to_dict(), "models": written, "tuned_backbones": [e.name for e in tuned]}
    _write_json(cfg.out / "train.json", doc)
    return doc


def cmd_eval(cfg: RunConfig) -> dict[str, Any]:
    store = FeatureStore(FeatureCache(cfg.cache))
    manifests = _manifests(cfg)
    models = _backbones(cfg)
    # features first, so a skipped extract is reported as such
    test_X = {}
    for ds, manifest in manifests.items():
        for model in models:
            for kind in cfg.features:
                spec = feature_spec(kind, model, cfg.feature_params)
                test_X[ds, model.name, kind] = (store.matrix(model, manifest.test, spec, compute=False), spec)
    cells = []
    for ds, manifest in manifests.items():
        yte = [r.event for r in manifest.test]
        for model in models:
            for kind in cfg.features:
                Xte, spec = test_X[ds, model.name, kind]
                for clf in cfg.classifiers:
                    aucs = []
                    for r in range(cfg.repeats):
                        path = _model_path(cfg, ds, model.name, kind, clf, cfg.seed + r)
                        if not path.is_file():
                            raise FileNotFoundError(f"missing model {path}; run train first")
                        fitted = TrainedClassifier.load(path)
                        report = evaluate(
                            fitted,
                            list(zip(Xte, yte)),
                            cfg.average,
                            {
                                "dataset": ds,
                                "feature_spec": spec.to_dict(),
                                "backbone": model.describe(),
                                "seed": cfg.seed + r,
                                "model_file": str(path.relative_to(cfg.out)),
                            },
                        )
                        rdir = cfg.out / "reports" / _slug(ds) / _slug(model.name) / kind
                        stem = f"{_slug(clf.label)}_s{cfg.seed + r}"
                        report.write(rdir, stem)
                        if cfg.plots and report.curves:
                            report.plot(rdir / f"{stem}_roc.png")
                        aucs.append(report)
                    summary = summarize_repeats([a.summary_auc for a in aucs])
                    cells.append(
                        {
                            "dataset": ds,
                            "backbone": model.name,
                            "features": kind,
                            "classifier": clf.label,
                            "auc": summary["mean"],
                            "spread": summary,
                            "per_event_auc": aucs[0].per_event_auc,
                            "diagnostics": aucs[0].diagnostics,
                        }
                    )
    doc = {"schema_version": 1, "config": cfg.to_dict(), "cells": cells}
    _write_json(cfg.out / "report.json", doc)
    return doc


def cmd_grid(cfg: RunConfig) -> dict[str, Any]:
    result = grid_sweep(
        _manifests(cfg),
        _backbones(cfg),
        cfg.features,
        cfg.classifiers,
        cache=FeatureCache(cfg.cache),
        seed=cfg.seed,
        repeats=cfg.repeats,
        average=cfg.average,
        feature_params=cfg.feature_params,
    )
    paths = result.write(cfg.out / "grid")
    return {"paths": {k: str(v) for k, v in paths.items()}, "cells": len(result.cells)}


def cmd_synth(out: Path, n_train: int, n_test: int, seed: int) -> Path:
    """Write a synthetic corpus, three tiny backbones and a ready-to-run config."""
    from .synthetic import build_demo_backbones, generate_corpus

    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_corpus(out / "data", n_train, n_test, seed)
    registry = build_demo_backbones(out / "backbones")
    config = out / "run.toml"
    config.write_text(
        "\n".join(
            [
                f'manifest = "{manifest.relative_to(out).as_posix()}"',
                f'registry = "{registry.relative_to(out).as_posix()}"',
                'backbones = ["tiny_a", "tiny_b", "tiny_c"]',
                'features = ["global_intermediate", "global_both"]',
                'out = "runs/demo"',
                f"seed = {seed}",
                "repeats = 1",
                "",
                "[[classifiers]]",
                'family = "extra_trees"',
                'name = "ET"',
                "",
                "[[classifiers]]",
                'family = "random_forest"',
                'name = "RF"',
                "",
                "[[classifiers]]",
                'family = "knn"',
                "k = 1",
                'metric = "L1"',
                'name = "L1"',
                "",
                "[[classifiers]]",
                'family = "knn"',
                "k = 4",
                'metric = "L2"',
                'name = "4NN"',
                "",
            ]
        )
    )
    return config


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eventverify", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("extract", "compute and cache features for every manifest record"),
        ("train", "fit classifiers from cached features (and optionally fine-tune)"),
        ("eval", "evaluate trained classifiers and write ROC/AUC reports"),
        ("grid", "run the backbone x classifier sweep and render the AUC table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--backbone", action="append", metavar="NAME", help="override backbones")
        p.add_argument("--features", action="append", metavar="KIND", choices=KINDS)
        p.add_argument("--seed", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--out", metavar="DIR")
    p = sub.add_parser("synth", help="write a synthetic demo corpus, backbones and config")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--train", type=int, default=40, help="training images per event")
    p.add_argument("--test", type=int, default=20, help="test images per event")
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"extract": cmd_extract, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid}


def _error(stage: str, exc: BaseException) -> None:
    print(
        json.dumps({"level": "error", "stage": stage, "error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "synth":
        try:
            config = cmd_synth(Path(args.out), args.train, args.test, args.seed)
        except Exception as exc:
            _error("synth", exc)
            return 2
        print(config)
        return 0
    try:
        cfg = load_config(args.config, args)
    except (ConfigError, ValueError, KeyError) as exc:
        _error("config", exc)
        return 1
    try:
        result = COMMANDS[args.command](cfg)
    except Exception as exc:
        log.debug("stage %s failed", args.command, exc_info=True)
        _error(args.command, exc)
        return 2
    print(json.dumps({"command": args.command, "out": str(cfg.out)} | _brief(result), sort_keys=True))
    return 0


def _brief(result: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in result.items() if k in ("paths", "cells", "cache", "computed")} | (
        {"cells": len(result["cells"])} if isinstance(result.get("cells"), list) else {}
    )


if __name__ == "__main__":
    sys.exit(main())
