"""Command-line harness: ``statdetect {train,attack,stat,defend,repro}``.

Exit status: 0 success, 2 configuration or usage error, 3 runtime or data
error. Every command writes a ``manifest.json`` listing its outputs with
64-bit blake2b content digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, attacks, data, defense, experiments, models, stats
from .attacks import AttackSpec
from .data import Dataset, FormatError, SplitSpec
from .models import TrainConfig
from .numerics import ContractError, KernelSpec, UnsupportedOperation, derive_seed

CRAFTED_HEADER = ("original_label", "predicted_label", "features_changed")


class ConfigError(Exception):
    """Invalid configuration; the message starts with the offending field path."""


# ---------------------------------------------------------------- config

def load_schema() -> dict:
    return json.loads(resources.files("statdetect").joinpath("config_schema.json").read_text())


def _field(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def validate_config(cfg: dict, base: Path = Path(".")) -> dict:
    """Schema check plus existence of every referenced file."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_field(e.absolute_path)}: {e.message}")
    ds = cfg.get("dataset", {})
    for key in ("images", "labels", "path"):
        if key in ds and not (base / ds[key]).exists():
            raise ConfigError(f"dataset.{key}: file not found: {ds[key]}")
    return cfg


def read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path(".")
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"--config: invalid JSON at line {e.lineno}: {e.msg}") from None
    return validate_config(cfg, p.parent), p.parent


def _require(cfg: dict, key: str, command: str):
    if key not in cfg:
        raise ConfigError(f"{key}: required by '{command}'")
    return cfg[key]


@dataclass
class ExperimentConfig:
    raw: dict
    base: Path
    seed: int
    out: Path
    threads: int

    @classmethod
    def build(cls, args) -> "ExperimentConfig":
        raw, base = read_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            raw["seed"] = args.seed
        seed = raw.get("seed", 0)
        out = Path(args.out if getattr(args, "out", None) else raw.get("out", "out"))
        threads = getattr(args, "threads", None) or raw.get("threads") or os.cpu_count() or 1
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        return cls(raw, base, seed, out, threads)

    def dataset(self) -> Dataset:
        ds = _require(self.raw, "dataset", "this command")
        src, dseed = ds["source"], ds.get("seed", self.seed)
        if src == "synth_digits":
            return data.synth_digits(ds.get("per_class", 100), dseed, ds.get("noise", 0.1))
        if src == "synth_binary_malware":
            return data.synth_binary_malware(ds.get("n_benign", 500), ds.get("n_malicious", 500), ds.get("d", 50), dseed)
        if src == "synth_tabular":
            return data.synth_tabular(ds.get("n_per_class", 500), dseed)
        if src == "idx":
            return data.load_idx_images(self.base / ds["images"], self.base / ds["labels"])
        return data.load_csv(self.base / ds["path"], ds.get("label_column", -1), ds.get("header", False),
                             ds.get("ignore_columns", ()), ds.get("domain"))

    def split(self) -> tuple[Dataset, Dataset]:
        sp = self.raw.get("split", {})
        return data.split(self.dataset(), SplitSpec(sp.get("test_fraction", 0.1), sp.get("seed", self.seed)))

    def family(self) -> str:
        return _require(self.raw, "model", "this command")["family"]

    def train_config(self) -> TrainConfig:
        tc = dict(self.raw.get("model", {}).get("train", {}))
        tc.setdefault("seed", self.seed)
        if "hidden" in tc:
            tc["hidden"] = tuple(tc["hidden"])
        return TrainConfig(**tc)

    def attacks(self, key: str = "attacks", section: dict | None = None) -> list[AttackSpec]:
        items = (section if section is not None else self.raw).get(key, [])
        return [AttackSpec.from_dict(a) for a in items]


# ---------------------------------------------------------------- outputs

def digest(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=8).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    out: Path
    timings: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.timings[name] = time.perf_counter() - t0

    def write_json(self, name: str, obj) -> Path:
        p = self.out / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.out / name
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.files.append(name)
        return p

    def write_records(self, name: str, records: list[dict]) -> Path:
        header = list(records[0]) if records else []
        return self.write_csv(name, header, ([r[h] for h in header] for r in records))

    def save_model(self, name: str, model) -> Path:
        models.save(model, self.out / name)
        self.files.append(name)
        return self.out / name

    def to_dict(self) -> dict:
        return {"tool": "statdetect", "version": __version__, "command": self.command, "config": self.config,
                "timings": self.timings,
                "files": [{"path": f, "digest": digest(self.out / f)} for f in self.files]}

    def finish(self) -> Path:
        p = self.out / "manifest.json"
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return p


def verify_manifest(path) -> bool:
    """True when every listed file exists and matches its digest."""
    path = Path(path)
    m = json.loads(path.read_text())
    return all((path.parent / f["path"]).exists() and digest(path.parent / f["path"]) == f["digest"]
               for f in m["files"])


def write_crafted(man: RunManifest, name: str, res: attacks.CraftResult, d: int) -> Path:
    header = list(CRAFTED_HEADER) + [f"x{j}" for j in range(d)]
    rows = ([o.source, o.pred_after, o.features_changed, *map(float, o.x_adv)] for o in res.outcomes)
    return man.write_csv(name, header, rows)


@dataclass
class Table:
    """A data file for ``stat``: features plus whatever labels it carries."""
    features: np.ndarray
    labels: np.ndarray
    original: np.ndarray | None = None
    predicted: np.ndarray | None = None


def read_table(path: str, label_column: int = -1, header: bool = False) -> Table:
    """Crafted-set CSVs (detected by their header) keep their numeric label
    columns; other CSVs go through ``load_csv``."""
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{path}: file not found")
    with p.open(newline="") as fh:
        first = next(csv.reader(fh), [])
    if tuple(first[:3]) == CRAFTED_HEADER:
        ds = data.load_csv(p, label_column=0, has_header=True, ignore_columns=[1, 2])
        cols = np.loadtxt(p, delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2).astype(np.int64)
        return Table(ds.features, ds.labels, cols[:, 0], cols[:, 1])
    ds = data.load_csv(p, label_column, header)
    return Table(ds.features, ds.labels)


def _csv_floats(text: str, flag: str, cast=float) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected a comma-separated list, got {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = ExperimentConfig.build(args)
    cfg.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("train", cfg.raw, cfg.out)
    with man.stage("data"):
        tr, te = cfg.split()
    with man.stage("train"):
        model = models.train(cfg.family(), tr, cfg.train_config())
    man.save_model("model.json", model)
    metrics = {"train_accuracy": models.accuracy(model, tr), "test_accuracy": models.accuracy(model, te),
               "n_train": len(tr), "n_test": len(te)}
    man.write_json("metrics.json", metrics)
    man.finish()
    print(f"train accuracy {metrics['train_accuracy']:.4f}")
    print(f"test accuracy {metrics['test_accuracy']:.4f}")
    return 0


def _attack_spec(cfg: ExperimentConfig, args) -> AttackSpec:
    base = cfg.raw["attacks"][0] if cfg.raw.get("attacks") else {}
    d = dict(base)
    if args.attack:
        if args.attack != base.get("kind"):
            d = {}
        d["kind"] = args.attack
    if "kind" not in d:
        raise ConfigError("attacks: no attack given (use --attack or a config attack list)")
    if args.epsilon is not None:
        d["epsilon"] = args.epsilon
    if args.budget is not None:
        d["budget"] = args.budget
    if args.target is not None:
        d["target"] = int(args.target) if args.target.isdigit() else args.target
    try:
        return AttackSpec.from_dict(d)
    except ContractError as e:
        raise ConfigError(f"attacks.0: {e}") from None


def cmd_attack(args) -> int:
    cfg = ExperimentConfig.build(args)
    spec = _attack_spec(cfg, args)
    cfg.out.mkdir(parents=True, exist_ok=True)
    cfg.raw["attack"] = spec.to_dict()
    man = RunManifest("attack", cfg.raw, cfg.out)
    model = models.load(args.model)
    with man.stage("data"):
        if args.data:
            ds = data.load_csv(args.data, args.label_column, args.header)
        elif "dataset" in cfg.raw:
            ds = cfg.split()[1]
        else:
            raise ConfigError("dataset: give --data or a config with a dataset")
        if args.limit is not None:
            ds = ds.subset(np.arange(min(args.limit, len(ds))))
    if len(ds) and ds.dim != model.n_inputs:
        raise ContractError(f"dataset has {ds.dim} features, model expects {model.n_inputs}")
    with man.stage("craft"):
        res = attacks.craft_batch(model, ds, spec)
    write_crafted(man, "adversarial.csv", res, model.n_inputs)
    summary = res.summary()
    man.write_json("summary.json", summary)
    man.finish()
    rate = summary["success_rate"]
    print(f"{spec.label}: {summary['succeeded']}/{summary['n']} succeeded"
          + (f" (rate {rate:.4f})" if rate is not None else ""))
    return 0


def cmd_stat(args) -> int:
    cfg = ExperimentConfig.build(args)
    t = cfg.raw.setdefault("test", {})
    for key in ("alpha", "bootstrap", "repetitions", "method", "bandwidth"):
        if getattr(args, key, None) is not None:
            t[key] = getattr(args, key)
    if args.sizes:
        t["sizes"] = _csv_floats(args.sizes, "--sizes", int)
    if args.fractions:
        t["fractions"] = _csv_floats(args.fractions, "--fractions")
    validate_config(cfg.raw, cfg.base)
    alpha, boot = t.get("alpha", 0.05), t.get("bootstrap", 1000)
    reps, method = t.get("repetitions", 200), t.get("method", "permutation")
    kernel = KernelSpec(bandwidth=t.get("bandwidth"))
    cfg.raw["stat"] = {"mode": args.mode, "reference": args.reference, "candidate": args.candidate,
                       "benign": args.benign, "grouping": args.grouping}
    cfg.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("stat", cfg.raw, cfg.out)

    with man.stage("load"):
        if args.reference:
            ref = read_table(args.reference, args.label_column, args.header)
        elif "dataset" in cfg.raw:
            d = cfg.dataset()
            ref = Table(d.features, d.labels)
        else:
            raise ConfigError("reference: give --reference or a config with a dataset")
        cand = read_table(args.candidate, args.label_column, args.header)
    rng = derive_seed(cfg.seed, 0)
    kw = dict(kernel=kernel, bootstrap=boot, alpha=alpha, rng=rng, method=method, threads=cfg.threads)
    with man.stage(args.mode):
        if args.mode == "test":
            rep = stats.two_sample_test(ref.features, cand.features, kernel, boot, alpha, rng, method)
            man.write_json("report.json", rep.to_dict())
            print(f"mmd {rep.statistic:.6g}")
            print(f"p-value {rep.p_value:.6g}")
            print(rep.decision)
        else:
            sizes = t.get("sizes")
            if not sizes:
                raise ConfigError("test.sizes: required for mode " + args.mode)
            if args.mode == "sweep":
                sw = stats.confident_detection_sweep(ref.features, cand.features, sizes, reps, **kw)
                man.write_json("report.json", sw.to_dict())
                man.write_records("sweep.csv", sw.rows())
                print(f"minimal confident size: {experiments.fmt(sw.minimal_size)}")
            elif args.mode == "mixture":
                if not args.benign:
                    raise ConfigError("--benign: required for mode mixture")
                ben = read_table(args.benign, args.label_column, args.header)
                fr = t.get("fractions", list(experiments.FRACTIONS))
                grid = stats.mixture_sweep(ref.features, cand.features, ben.features, fr, sizes, reps, **kw)
                man.write_json("report.json", {"fractions": list(grid.fractions), "sizes": list(grid.sizes),
                                                "acceptance": grid.acceptance.tolist(), "repetitions": reps,
                                                "monotone": grid.monotone()})
                man.write_records("mixture.csv", grid.rows())
                print(f"monotone in benign fraction: {grid.monotone()}")
            else:
                labels = cand.predicted if args.grouping == "P" else cand.original
                if labels is None:
                    raise ConfigError("--candidate: class-wise mode needs a crafted-set CSV")
                refds = Dataset(ref.features, ref.labels, int(max(ref.labels.max(initial=0), labels.max(initial=0))) + 1)
                cw = stats.classwise_test(refds, cand.features, labels, args.grouping, sizes, reps, **kw)
                man.write_json("report.json", cw.to_dict())
                man.write_records("classwise.csv", [{"class": c, **r} for c, sw in cw.per_class.items()
                                                    for r in sw.rows()])
                for w in cw.warnings:
                    print(f"warning: {w}", file=sys.stderr)
                print(f"mean minimal confident size: {experiments.fmt(cw.mean_minimal_size)}")
    man.finish()
    return 0


def _rate_row(bd: defense.DetectionBreakdown, **extra) -> dict:
    return {**extra, "n": bd.n, "recovered": bd.recovered_rate, "detected": bd.detected_rate, "error": bd.error_rate}


def _confusion_rows(cm: np.ndarray) -> tuple[list[str], list[list[int]]]:
    return ["true_label"] + [f"pred_{j}" for j in range(cm.shape[1])], [[i, *map(int, r)] for i, r in enumerate(cm)]


def cmd_defend(args) -> int:
    cfg = ExperimentConfig.build(args)
    dcfg = cfg.raw.setdefault("defense", {})
    if args.adaptive:
        dcfg["adaptive"] = True
    if args.blackbox:
        dcfg["blackbox"] = [v for v in args.blackbox.split(",") if v]
    validate_config(cfg.raw, cfg.base)
    train_attacks = cfg.attacks()
    if not train_attacks:
        raise ConfigError("attacks: the defense needs at least one training attack")
    family, tc = cfg.family(), cfg.train_config()
    plan = defense.AugmentedTrainPlan(tc, train_attacks, dcfg.get("legit_fraction", 2 / 3),
                                      dcfg.get("include_failed", True))
    eval_attacks = cfg.attacks("eval_attacks", dcfg) or train_attacks
    cfg.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("defend", cfg.raw, cfg.out)

    with man.stage("data"):
        tr, te = cfg.split()
    with man.stage("train"):
        master = derive_seed(cfg.seed, 1)
        base = models.train(family, tr, replace(tc, seed=derive_seed(master, 0)))
        model = defense.train_augmented(family, tr, plan, master)
    man.save_model("model.json", model)
    with man.stage("evaluate"):
        rows = [_rate_row(defense.evaluate_detection(model, te, a), attack=a.kind, parameter=a.parameter)
                for a in eval_attacks]
    man.write_records("breakdown.csv", rows)
    if dcfg.get("adaptive"):
        with man.stage("adaptive"):
            table = defense.adaptive_matrix(model, eval_attacks, te)
        man.write_records("adaptive.csv", [r.to_dict() for r in table])
    if dcfg.get("blackbox"):
        transfer = cfg.attacks("transfer_attacks", dcfg) or eval_attacks
        bb_rows = []
        with man.stage("blackbox"):
            for kind in dcfg["blackbox"]:
                sub = defense.make_substitute(kind, family, tr, plan, derive_seed(cfg.seed, 2))
                for a in transfer:
                    res = defense.blackbox_transfer(model, sub, te, a)
                    bb_rows.append(_rate_row(res.result, substitute=kind, attack=a.kind, parameter=a.parameter,
                                             agreement=res.agreement))
        man.write_records("blackbox.csv", bb_rows)
    man.write_csv("confusion.csv", *_confusion_rows(defense.confusion_matrix(model, te)))
    man.write_csv("confusion_base.csv", *_confusion_rows(defense.confusion_matrix(base, te)))
    metrics = {"base_test_accuracy": models.accuracy(base, te), "augmented_test_accuracy": models.accuracy(model, te),
               "false_outlier_rate": defense.false_outlier_rate(model, te), "trained_on": model.meta["trained_on"]}
    man.write_json("metrics.json", metrics)
    man.finish()
    for r in rows:
        print(f"{r['attack']}:{r['parameter']} recovered {r['recovered']:.3f} "
              f"detected {r['detected']:.3f} error {r['error']:.3f}")
    print(f"benign accuracy base {metrics['base_test_accuracy']:.4f} "
          f"augmented {metrics['augmented_test_accuracy']:.4f}")
    return 0


def cmd_repro(args) -> int:
    cfg = ExperimentConfig.build(args)
    cfg.raw["repro"] = {"table": args.table, "per_class": args.per_class, "repetitions": args.repetitions,
                        "bootstrap": args.bootstrap, "sizes": args.sizes, "fractions": args.fractions}
    cfg.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("repro", cfg.raw, cfg.out)
    with man.stage("setup"):
        setup = experiments.digits_setup(cfg.seed, per_class=args.per_class)
    kw = {}
    if args.table in ("table2a", "table2b", "fig3"):
        kw = dict(repetitions=args.repetitions, bootstrap=args.bootstrap, threads=cfg.threads)
        if args.sizes:
            kw["sizes"] = _csv_floats(args.sizes, "--sizes", int)
        if args.fractions and args.table == "fig3":
            kw["fractions"] = _csv_floats(args.fractions, "--fractions")
    with man.stage(args.table):
        rep = experiments.TABLES[args.table](setup, **kw)
    man.write_records(f"{args.table}.csv", rep.rows)
    man.write_json("report.json", rep.to_dict())
    lines = [c.line() for c in rep.checks]
    (cfg.out / "report.txt").write_text("\n".join(lines) + "\n")
    man.files.append("report.txt")
    man.finish()
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="statdetect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"statdetect {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="worker cap (default: all cores)")
        sp.add_argument("--out", help="output directory (default: config 'out' or ./out)")

    def csv_flags(sp):
        sp.add_argument("--label-column", type=int, default=-1, help="label column index (default: last)")
        sp.add_argument("--header", action="store_true", help="CSV files have a header row")

    sp = sub.add_parser("train", help="train a classifier")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="craft adversarial inputs against a saved model")
    common(sp)
    sp.add_argument("--model", required=True, help="model file written by train")
    sp.add_argument("--data", help="CSV to attack (default: the config's test split)")
    csv_flags(sp)
    sp.add_argument("--attack", choices=attacks.ATTACK_KINDS, help="default: first attack in the config")
    sp.add_argument("--epsilon", type=float, help="step size for fgsm and svm_shift")
    sp.add_argument("--budget", type=int, help="feature budget for jsma and dt_path")
    sp.add_argument("--target", help="jsma target: a class index, second or auto")
    sp.add_argument("--limit", type=int, help="attack only the first N rows")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("stat", help="two-sample test, confidence sweep, mixture or class-wise analysis")
    common(sp)
    sp.add_argument("--reference", help="reference CSV (default: the config dataset)")
    sp.add_argument("--candidate", required=True, help="candidate CSV, plain or as written by attack")
    sp.add_argument("--benign", help="benign pool for mode mixture")
    csv_flags(sp)
    sp.add_argument("--mode", choices=("test", "sweep", "mixture", "classwise"), default="test",
                    help="single test, size sweep, benign mixture grid or per-class sweeps")
    sp.add_argument("--grouping", choices=("O", "P"), default="P",
                    help="class-wise grouping by original (O) or predicted (P) label")
    sp.add_argument("--sizes", help="comma-separated sample sizes, e.g. 10,50,100")
    sp.add_argument("--fractions", help="comma-separated benign fractions")
    sp.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    sp.add_argument("--bootstrap", type=int, help="resamples for the null distribution")
    sp.add_argument("--repetitions", type=int, help="repeated tests per size")
    sp.add_argument("--method", choices=("permutation", "bootstrap"), help="null resampling scheme")
    sp.add_argument("--bandwidth", type=float, help="gaussian bandwidth (default: median heuristic)")
    sp.set_defaults(func=cmd_stat)

    sp = sub.add_parser("defend", help="train and evaluate an outlier-class model")
    common(sp)
    sp.add_argument("--adaptive", action="store_true", help="cross-attack table over the eval attacks")
    sp.add_argument("--blackbox", help="substitutes to attack from, e.g. bb,bb+1")
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("repro", help="desk-scale analogue of a named experiment")
    common(sp)
    sp.add_argument("table", choices=list(experiments.TABLES))
    sp.add_argument("--per-class", type=int, default=100, help="training rows per digit class")
    sp.add_argument("--repetitions", type=int, default=200)
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--sizes")
    sp.add_argument("--fractions")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors exit 2; --help and --version exit 0
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ContractError, UnsupportedOperation, attacks.NoValidTarget,
            defense.EmptyAugmentation, models.TrainingDivergence, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
