"""Command-line driver: ``conformal-shapley <command> --config run.yaml``.

Commands: synth, shapley, intervals, select, path, test. Every command reads
one YAML run file, writes UTF-8 JSON/CSV with sorted keys into ``--out`` and
a ``manifest.json`` holding the config hash and library version.
Exit codes: 0 success, 1 domain error, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .conformal import ConformalConfig, ConformalShapley, selection_path
from .data import (MultimodalDataset, SyntheticConfig, generate_synthetic_regression, holdout,
                   load_dataset, save_dataset)
from .errors import ConfigError, ConformalShapleyError
from .learners import LearnerSpec
from .quantile import KernelSpec

log = logging.getLogger("conformal_shapley")

COMMANDS = ("synth", "shapley", "intervals", "select", "path", "test")


# ---------------------------------------------------------------- run config

def _only(block, allowed, where):
    block = block or {}
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(block).__name__}")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return block


def _names(cls):
    return [f.name for f in fields(cls)]


@dataclass
class RunConfig:
    """Everything a command needs; round-trips through YAML losslessly.

    ``data`` holds either ``{"synthetic": {...}}`` or ``{"path": csv}``;
    ``test`` holds ``{"holdout": k}``, ``{"path": csv}`` (labeled, same
    layout) or ``{"features": csv}`` (unlabeled features with a header).
    """
    seed: int = 0
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    test: dict = field(default_factory=dict)
    learner: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    conformal: dict = field(default_factory=dict)
    path: dict = field(default_factory=dict)
    hypothesis: dict = field(default_factory=dict)
    out: str = "out"
    verbose: bool = False

    @classmethod
    def from_dict(cls, raw) -> "RunConfig":
        raw = _only(raw, _names(cls), "config")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(raw or {})

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")

    def provenance(self) -> dict:
        """Result-determining part of the config (output location and verbosity dropped)."""
        d = self.to_dict()
        del d["out"], d["verbose"]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.provenance(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    # -- typed views ----------------------------------------------------
    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        data = _only(self.data, ("synthetic", "path"), "data")
        if len(data) != 1:
            raise ConfigError("data: give exactly one of 'synthetic' or 'path'")
        _only(self.test, ("holdout", "path", "features"), "test")
        if len(self.test) > 1:
            raise ConfigError("test: give at most one source")
        _only(self.path, ("q_values",), "path")
        _only(self.hypothesis, ("subgroups", "columns"), "hypothesis")
        try:
            self.synthetic()
            self.conformal_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        except ConformalShapleyError as exc:
            raise ConfigError(str(exc)) from exc

    def synthetic(self) -> Optional[SyntheticConfig]:
        if "synthetic" not in self.data:
            return None
        block = dict(_only(self.data["synthetic"], _names(SyntheticConfig), "data.synthetic"))
        block.setdefault("seed", self.seed)
        return SyntheticConfig(**block)

    def conformal_config(self) -> ConformalConfig:
        block = dict(_only(self.conformal, [n for n in _names(ConformalConfig)
                                            if n not in ("learner", "kernel", "seed")],
                           "conformal"))
        if "lambda_grid" in block:
            block["lambda_grid"] = tuple(tuple(map(float, g)) for g in block["lambda_grid"])
        if isinstance(block.get("d_omega"), list):
            block["d_omega"] = tuple(block["d_omega"])
        learner = LearnerSpec(**_only(self.learner, _names(LearnerSpec), "learner"))
        kernel = KernelSpec(**_only(self.kernel, _names(KernelSpec), "kernel"))
        return ConformalConfig(learner=learner, kernel=kernel, seed=self.seed, **block)


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply ``key.sub=value`` overrides (values parsed as YAML scalars/lists)."""
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a mapping")
        try:
            node[parts[-1]] = yaml.safe_load(val)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
    return raw


# ---------------------------------------------------------------- outputs

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _write_manifest(out: Path, command: str, cfg: RunConfig, outputs, extra=None):
    manifest = {"command": command, "version": __version__, "config_hash": cfg.digest(),
                "config": cfg.provenance(), "outputs": sorted(outputs)}
    if extra:
        manifest.update(extra)
    _write_json(out / "manifest.json", manifest)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------- data sources

def _dataset(cfg: RunConfig):
    syn = cfg.synthetic()
    if syn is not None:
        return generate_synthetic_regression(syn)
    return load_dataset(cfg.data["path"]), None


def _train_and_test(cfg: RunConfig, need_labels: bool):
    """Return ``(train dataset, test features, test labels or None)``."""
    ds, _ = _dataset(cfg)
    src = cfg.test
    if not src:
        raise ConfigError("this command needs a 'test' block (holdout, path or features)")
    if "holdout" in src:
        fit_rows, test_rows = holdout(ds.n, int(src["holdout"]), cfg.seed)
        return ds.subset(fit_rows), ds.X[test_rows], ds.y[test_rows]
    if "path" in src:
        te = load_dataset(src["path"], layout=ds.layout, task=ds.task, n_classes=ds.n_classes)
        return ds, te.X, te.y
    if need_labels:
        raise ConfigError("this command needs labeled test rows ('holdout' or 'path')")
    try:
        X = np.loadtxt(src["features"], delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConformalShapleyError(f"cannot read test features {src['features']}: {exc}")
    return ds, X, None


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, out: Path):
    syn = cfg.synthetic()
    if syn is None:
        raise ConfigError("synth needs a data.synthetic block")
    ds, truth = generate_synthetic_regression(syn)
    save_dataset(ds, out / "data.csv")
    _write_json(out / "truth.json", _jsonable(truth))
    return ["data.csv", "data.layout.json", "truth.json"], {"n": ds.n, "p": ds.p}


def cmd_shapley(cfg: RunConfig, out: Path):
    ds, _ = _dataset(cfg)
    pipe = ConformalShapley(cfg.conformal_config())
    splits = pipe._split(ds)
    cache = pipe._train(ds, splits.I1)
    table = pipe._shapley(ds, splits.I2, cache)
    table.to_csv(out / "shapley.csv")
    table.summary_json(out / "shapley_summary.json")
    return ["shapley.csv", "shapley_summary.json"], {"m": table.m, "p": table.p}


def cmd_intervals(cfg: RunConfig, out: Path):
    train, X_test, _ = _train_and_test(cfg, need_labels=False)
    conf = cfg.conformal_config()
    pipe = ConformalShapley(conf).fit(train)
    levels = conf.levels(pipe.p)
    records = []
    for i, row in enumerate(pipe.intervals(X_test)):
        records.extend({"point": i, **iv.to_dict()} for iv in row)
    _write_json(out / "intervals.json", {"alpha": conf.alpha, "q": conf.q or pipe.p,
                                         "levels": list(levels), "test_mode": conf.test_mode,
                                         "records": records})
    return ["intervals.json"], {"levels": list(levels)}


def cmd_select(cfg: RunConfig, out: Path):
    train, X_test, _ = _train_and_test(cfg, need_labels=False)
    conf = cfg.conformal_config()
    pipe = ConformalShapley(conf).fit(train)
    q = conf.q or pipe.p
    records = [{"point": i, **s.to_dict()} for i, s in enumerate(pipe.select(X_test, q))]
    _write_json(out / "selection.json", {"q": q, "levels": list(conf.levels(pipe.p, q)),
                                         "records": records})
    return ["selection.json"], {"q": q}


def cmd_path(cfg: RunConfig, out: Path, q_values=None):
    if q_values is None:
        q_values = cfg.path.get("q_values")
    train, X_test, y_test = _train_and_test(cfg, need_labels=True)
    if q_values is None:
        q_values = list(range(1, train.p + 1))
    q_values = [int(q) for q in q_values]
    if not q_values:
        raise ConfigError("q list is empty")
    test = MultimodalDataset(train.layout, X_test, y_test, train.task, train.n_classes)
    report = selection_path(train, test, cfg.conformal_config(), q_values)
    names = report.metric_names
    with open(out / "path.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q"] + names + ["mean_selected"])
        for r in report.rows:
            w.writerow([r["q"]] + [repr(r[k]) for k in names] + [repr(r["mean_selected"])])
    _write_json(out / "path.json", {"rows": report.rows, "full_model": report.full_model})
    return ["path.csv", "path.json"], {"q_values": q_values}


def _parse_subgroups(spec):
    if spec is None:
        return [{"name": "all", "fix": {}}]
    out = []
    for k, sg in enumerate(spec):
        sg = _only(sg, ("name", "fix"), f"hypothesis.subgroups[{k}]")
        fix = {int(i): float(v) for i, v in (sg.get("fix") or {}).items()}
        out.append({"name": sg.get("name", f"subgroup{k}"), "fix": fix})
    return out


def cmd_test(cfg: RunConfig, out: Path):
    ds, _ = _dataset(cfg)
    subgroups = _parse_subgroups(cfg.hypothesis.get("subgroups"))
    pipe = ConformalShapley(cfg.conformal_config()).fit(ds)
    results = pipe.hypothesis_tests(subgroups, cfg.hypothesis.get("columns"))
    _write_json(out / "hypothesis.json", {"records": [_jsonable(r.to_dict()) for r in results]})
    return ["hypothesis.json"], {"n_tests": len(results)}


HANDLERS = {"synth": cmd_synth, "shapley": cmd_shapley, "intervals": cmd_intervals,
            "select": cmd_select, "path": cmd_path, "test": cmd_test}


# ---------------------------------------------------------------- entry point

def _q_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-shapley",
                                     description="Conformal Shapley intervals for modalities.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run file (defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides 'out')")
        p.add_argument("--seed", type=int, help="master seed (overrides 'seed')")
        p.add_argument("--threads", type=int, help="BLAS thread cap")
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. conformal.alpha=0.2")
        if name == "path":
            p.add_argument("--q", type=_q_list, help="comma-separated q values")
    return parser


def _load(args) -> RunConfig:
    raw = {}
    if args.config:
        raw = RunConfig.load(args.config).to_dict()
    raw = apply_overrides(raw, args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.verbose:
        raw["verbose"] = True
    return RunConfig.from_dict(raw)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return 1
    kwargs = {"q_values": args.q} if args.command == "path" and args.q is not None else {}
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            outputs, extra = HANDLERS[args.command](cfg, out, **kwargs)
        _write_manifest(out, args.command, cfg, outputs, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConformalShapleyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s wrote %s", args.command, out)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
