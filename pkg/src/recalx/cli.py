"""Command-line entry point.

Every subcommand resolves its configuration as built-in defaults, then values
from ``--config FILE``, then explicit flags, and writes ``run.json`` next to
its artifacts. ``recalx replay DIR/run.json --out NEW`` re-executes a run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from recalx import __version__
from recalx._rng import derive_seed
from recalx.calibration import (
    ReCalXCalibrator,
    fit_recalx,
    fit_temperature,
    load_calibrator,
    temperature_scaling_calibrator,
)
from recalx.data import (
    Dataset,
    FiniteJoint,
    SplitSpec,
    feature_means,
    fixture_joint,
    load_csv_dataset,
    load_json,
    make_synthetic,
    split,
    write_csv_dataset,
    zscore,
)
from recalx.evaluation import drift_trend, make_explain_fn, roar, sensitivity
from recalx.explainers import METHODS, attributions_csv, global_importance, predicted_class
from recalx.metrics import ConditionalEstimatorSpec, decomposition_report, default_levels, per_level_profile
from recalx.model import (
    BayesOracle,
    LevelScaledClassifier,
    ScaledClassifier,
    TrainConfig,
    accuracy,
    load_classifier,
    mean_cross_entropy,
    train_mlp,
)
from recalx.perturbation import Coalition, PerturbationStrategy

RUN_VERSION = 1
BUILTIN_SPECS: dict[str, Callable[[], dict[str, Any]]] = {
    "fixture": lambda: fixture_joint().to_dict(),
    "planted": lambda: {"kind": "planted", "weights": [3.0, 1.0, 0.0], "version": 1},
    "moons": lambda: {"kind": "moons", "noise": 0.1, "version": 1},
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any] | None = str
    default: Any = None
    help: str = ""
    choices: tuple[str, ...] | None = None
    flag: bool = False
    path: bool = False


COMMON = [Opt("seed", int, 0, "global seed")]

TRAIN_OPTS = [
    Opt("hidden", str, "32", "comma-separated hidden layer sizes"),
    Opt("epochs", int, 30),
    Opt("batch_size", int, 64),
    Opt("lr", float, 0.05, "learning rate"),
    Opt("weight_decay", float, 0.0),
    Opt("momentum", float, 0.9),
]

DATA_OPTS = [
    Opt("data", str, None, "dataset CSV", path=True),
    Opt("label_column", str, "y"),
    Opt("n_classes", int, None, "number of classes (inferred from labels when omitted)"),
]

MODEL_OPTS = [
    Opt("model", str, None, "model JSON", path=True),
    Opt("calibrator", str, None, "calibrator JSON", path=True),
    Opt("strategy", str, None, "zero | noise:SIGMA | baseline:V1;V2;... | mean:CSV | strategy JSON path"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("spec", str, "fixture", "generator JSON path or one of: " + ", ".join(BUILTIN_SPECS)),
        Opt("n", int, 1000, "number of rows"),
        Opt("split", str, "0.6,0.2,0.2", "train,val,test fractions"),
        Opt("zscore", None, False, "standardize features (not allowed for finite joints)", flag=True),
    ],
    "train": DATA_OPTS
    + TRAIN_OPTS
    + [
        Opt("eval_data", str, None, "held-out CSV for reported metrics", path=True),
        Opt("bayes_oracle", None, False, "emit the exact Bayes oracle of --joint instead of training", flag=True),
        Opt("joint", str, None, "finite joint JSON (for --bayes-oracle)", path=True),
        Opt("strategy", str, "zero", "strategy for the Bayes oracle"),
        Opt("scale", float, 1.0, "multiply all logits by this factor"),
        Opt("level_scale", float, None, "multiply logits by this factor above --level-threshold"),
        Opt("level_threshold", float, 0.5),
    ],
    "calibrate": DATA_OPTS
    + MODEL_OPTS[:1]
    + MODEL_OPTS[2:]
    + [
        Opt("method", str, "recalx", choices=("ts", "recalx")),
        Opt("bins", int, 10),
        Opt("reps", int, 10, "perturbed copies per validation row and bin"),
        Opt("ts_pool", str, "perturbed", "data used by --method ts", choices=("perturbed", "clean")),
    ],
    "measure": DATA_OPTS
    + MODEL_OPTS
    + [
        Opt("levels", str, "11", "level count or comma-separated levels in [0,1]"),
        Opt("reps", int, 1),
        Opt("estimator", str, "kernel", choices=("kernel", "groupby")),
        Opt("bandwidth", float, 0.05),
        Opt("emit_plotdata", None, False, "also write tidy plotdata.csv", flag=True),
    ],
    "explain": DATA_OPTS
    + MODEL_OPTS
    + [
        Opt("method", str, "shapley", choices=METHODS),
        Opt("n", int, 10, "rows to explain"),
        Opt("n_samples", int, 256, "coalitions for kernelshap/lime"),
        Opt("kernel_width", float, None),
        Opt("ridge_lambda", float, 1e-3),
    ],
    "eval-roar": DATA_OPTS
    + TRAIN_OPTS
    + [
        Opt("ranking", str, None, "comma-separated feature order or global.json path"),
        Opt("k", str, "0,1", "comma-separated removal counts"),
        Opt("seeds", str, "0,1,2", "comma-separated retrain seeds"),
        Opt("split", str, "0.8,0.0,0.2"),
    ],
    "eval-sensitivity": DATA_OPTS
    + MODEL_OPTS
    + [
        Opt("method", str, "shapley", choices=METHODS),
        Opt("n", int, 10, "rows to probe"),
        Opt("radius", float, 0.05),
        Opt("probes", int, 10),
        Opt("n_samples", int, 256),
    ],
    "verify-decomposition": [
        Opt("joint", str, None, "finite joint JSON (default: built-in fixture)", path=True),
        Opt("strategy", str, "zero"),
        Opt("scale", float, 1.0, "oracle logit multiplier"),
        Opt("model", str, None, "explain this model instead of the scaled oracle", path=True),
    ],
    "verify-bound": [
        Opt("joint", str, None, "finite joint JSON (default: built-in fixture)", path=True),
        Opt("strategy", str, "zero"),
        Opt("delta", float, 0.1),
        Opt("trials", int, 200),
        Opt("scales", str, "1,2,4,8"),
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


COMMAND_HELP = {
    "gen-data": "generate a synthetic dataset and its splits",
    "train": "train an MLP or export a Bayes oracle",
    "calibrate": "fit temperature scaling or ReCalX",
    "measure": "calibration error per perturbation level",
    "explain": "local attributions and global ranking",
    "eval-roar": "remove-and-retrain curve for a ranking",
    "eval-sensitivity": "attribution sensitivity under input probes",
    "verify-decomposition": "exact predictive-power decomposition on the fixture",
    "verify-bound": "attribution drift against the oracle bound",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recalx", description="Perturbation-aware recalibration for explanations.")
    parser.add_argument("--version", action="version", version=f"recalx {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=COMMAND_HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file with option values (flags win)")
        p.add_argument("--workers", type=int, help="worker threads (env RECALX_WORKERS)")
        for opt in COMMON + opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.flag:
                p.add_argument(flag, dest=opt.name, action="store_true", help=opt.help)
            else:
                p.add_argument(flag, dest=opt.name, type=opt.type, choices=opt.choices, help=opt.help)
    replay = sub.add_parser("replay", help="re-run a command from its run.json")
    replay.add_argument("run_json")
    replay.add_argument("--out", required=True)
    return parser


def _opts(command: str) -> dict[str, Opt]:
    return {o.name: o for o in COMMON + COMMANDS[command]}


def resolve_config(command: str, given: dict[str, Any], config_file: str | None) -> dict[str, Any]:
    opts = _opts(command)
    resolved = {name: opt.default for name, opt in opts.items()}
    if config_file:
        doc = load_json(config_file)
        values = doc.get("config", doc) if isinstance(doc, dict) else None
        if not isinstance(values, dict):
            raise UsageError(f"{config_file}: expected a JSON object")
        for key, value in values.items():
            if key not in opts:
                raise UsageError(f"{config_file}: unknown option {key!r} for {command}")
            resolved[key] = value
    resolved.update({k: v for k, v in given.items() if k in opts})
    for name, opt in opts.items():
        value = resolved[name]
        if opt.choices and value not in opt.choices:
            raise UsageError(f"--{name.replace('_', '-')}: invalid choice {value!r} (choose from {', '.join(opt.choices)})")
        if opt.path and value is not None:
            resolved[name] = str(Path(value).resolve())
    return resolved


def config_hash(config: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


class Run:
    """Output directory plus provenance for one command invocation."""

    def __init__(self, command: str, config: dict[str, Any], out: str, workers: int) -> None:
        self.command = command
        self.config = config
        self.out = Path(out)
        self.workers = workers
        self.hash = config_hash(config)
        self.seed = int(config["seed"])

    @property
    def provenance(self) -> dict[str, Any]:
        return {"version": RUN_VERSION, "seed": self.seed, "config_hash": self.hash}

    def write_text(self, name: str, text: str) -> None:
        (self.out / name).write_text(text, encoding="utf-8")

    def write_json(self, name: str, doc: dict[str, Any]) -> None:
        doc = {**doc, "provenance": self.provenance}
        self.write_text(name, json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")

    def start(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        run_doc = {
            "version": RUN_VERSION,
            "tool_version": __version__,
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.hash,
        }
        self.write_text("run.json", json.dumps(run_doc, indent=1, sort_keys=True) + "\n")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _load_data(cfg: dict[str, Any], key: str = "data") -> Dataset:
    path = cfg.get(key)
    if not path:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    n_classes = cfg.get("n_classes")
    if n_classes is None:
        probe = load_csv_dataset(path, cfg["label_column"], 1 << 30)
        n_classes = int(probe.labels.max()) + 1
        return Dataset(probe.features, probe.labels, probe.feature_names, n_classes, probe.n_rejected)
    return load_csv_dataset(path, cfg["label_column"], int(n_classes))


def parse_strategy(text: str | None, d: int, label_column: str = "y") -> PerturbationStrategy:
    if not text:
        raise UsageError("--strategy is required")
    text = str(text)
    if text == "zero":
        return PerturbationStrategy.zero_baseline(d)
    if text.startswith("noise:"):
        return PerturbationStrategy.gaussian_noise(float(text.split(":", 1)[1]))
    if text.startswith("baseline:"):
        return PerturbationStrategy.fixed_baseline([float(v) for v in text.split(":", 1)[1].split(";")])
    if text.startswith("mean:"):
        src = load_csv_dataset(text.split(":", 1)[1], label_column, 1 << 30)
        return PerturbationStrategy.mean_replacement(feature_means(src))
    path = Path(text)
    if path.is_file():
        return PerturbationStrategy.from_dict(load_json(path))
    raise UsageError(f"cannot interpret strategy {text!r}")


def _strategy_cfg(value: str | None) -> str | None:
    # file-backed strategies are stored as absolute paths so replays work from any directory
    if value is None:
        return None
    for prefix in ("mean:",):
        if value.startswith(prefix):
            return prefix + str(Path(value[len(prefix):]).resolve())
    if Path(value).is_file():
        return str(Path(value).resolve())
    return value


def _load_model_and_calib(cfg: dict[str, Any]):
    if not cfg.get("model"):
        raise UsageError("--model is required")
    m = load_classifier(cfg["model"])
    calib = load_calibrator(cfg["calibrator"]) if cfg.get("calibrator") else None
    return m, calib


def _train_config(cfg: dict[str, Any], seed: int) -> TrainConfig:
    return TrainConfig(
        hidden_sizes=tuple(_ints(cfg["hidden"])),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["lr"]),
        weight_decay=float(cfg["weight_decay"]),
        momentum=float(cfg["momentum"]),
        seed=seed,
    )


def cmd_gen_data(run: Run) -> None:
    cfg = run.config
    name = cfg["spec"]
    spec = BUILTIN_SPECS[name]() if name in BUILTIN_SPECS else load_json(name)
    if cfg["zscore"] and spec.get("kind") == "finite":
        raise UsageError("--zscore would break the finite joint's alphabet")
    ds, joint = make_synthetic(spec, int(cfg["n"]), derive_seed(run.seed, "gen-data"))
    stats: dict[str, Any] = {"zscore": bool(cfg["zscore"])}
    if cfg["zscore"]:
        ds, mu, sd = zscore(ds)
        stats.update({"mean": mu.tolist(), "std": sd.tolist()})
    parts = split(ds, SplitSpec(tuple(_floats(cfg["split"])), derive_seed(run.seed, "split")))
    write_csv_dataset(ds, run.out / "data.csv")
    for part_name, part in zip(("train", "val", "test"), parts):
        if part.n:
            write_csv_dataset(part, run.out / f"{part_name}.csv")
    if joint is not None:
        run.write_json("joint.json", joint.to_dict())
    run.write_json(
        "meta.json",
        {
            "spec": spec,
            "n": ds.n,
            "d": ds.d,
            "n_classes": ds.n_classes,
            "parts": {p: part.n for p, part in zip(("train", "val", "test"), parts)},
            "preprocessing": stats,
        },
    )


def cmd_train(run: Run) -> None:
    cfg = run.config
    if cfg["bayes_oracle"]:
        joint = FiniteJoint.from_dict(load_json(cfg["joint"])) if cfg.get("joint") else fixture_joint()
        model = BayesOracle(joint, parse_strategy(cfg["strategy"], joint.d))
        data = _load_data(cfg) if cfg.get("data") else joint.sample(1000, derive_seed(run.seed, "train-eval"))
    else:
        data = _load_data(cfg)
        model = train_mlp(data, _train_config(cfg, derive_seed(run.seed, "train")))
        run.write_json("strategy_mean.json", PerturbationStrategy.mean_replacement(feature_means(data)).to_dict())
    if cfg["scale"] != 1.0:
        model = ScaledClassifier(model, cfg["scale"])
    if cfg.get("level_scale") is not None:
        model = LevelScaledClassifier(model, cfg["level_scale"], cfg["level_threshold"])
    run.write_json("model.json", model.to_dict())
    metrics = {"train": {"cross_entropy": mean_cross_entropy(model, data), "accuracy": accuracy(model, data), "n": data.n}}
    if cfg.get("eval_data"):
        held = _load_data(cfg, "eval_data")
        metrics["eval"] = {"cross_entropy": mean_cross_entropy(model, held), "accuracy": accuracy(model, held), "n": held.n}
    run.write_json("metrics.json", metrics)


def cmd_calibrate(run: Run) -> None:
    cfg = run.config
    data = _load_data(cfg)
    m = load_classifier(cfg["model"]) if cfg.get("model") else None
    if m is None:
        raise UsageError("--model is required")
    strategy = parse_strategy(cfg["strategy"], data.d, cfg["label_column"])
    seed = derive_seed(run.seed, "calibrate")
    if cfg["method"] == "ts" and cfg["ts_pool"] == "clean":
        calib = temperature_scaling_calibrator(fit_temperature(m, data), strategy.name, seed)
        report = {"method": "ts", "pool": "clean", "temperature": calib.temperatures[0]}
    else:
        bins = 1 if cfg["method"] == "ts" else int(cfg["bins"])
        calib, fit = fit_recalx(m, data, strategy, bins, int(cfg["reps"]), seed)
        if cfg["method"] == "ts":
            calib = ReCalXCalibrator(calib.temperatures, calib.strategy, calib.seed, {**calib.metadata, "method": "ts"})
        report = {"method": cfg["method"], "pool": "perturbed", **fit.to_dict()}
    run.write_json("calibrator.json", calib.to_dict())
    run.write_json("fit_report.json", report)


def _levels(text: str) -> list[float]:
    text = str(text)
    if "," not in text and "." not in text:
        return default_levels(int(text))
    return _floats(text)


def cmd_measure(run: Run) -> None:
    cfg = run.config
    data = _load_data(cfg)
    m, calib = _load_model_and_calib(cfg)
    strategy = parse_strategy(cfg["strategy"], data.d, cfg["label_column"])
    spec = (
        ConditionalEstimatorSpec("exact-groupby", leave_one_out=False)
        if cfg["estimator"] == "groupby"
        else ConditionalEstimatorSpec("kernel", float(cfg["bandwidth"]), True)
    )
    levels = _levels(cfg["levels"])
    seed = derive_seed(run.seed, "measure")
    profile = per_level_profile(m, calib, data, strategy, levels, int(cfg["reps"]), seed, spec)
    rows = [("uncalibrated" if calib is None else f"calibrated_B{calib.B}", profile)]
    if calib is not None:
        rows.insert(0, ("uncalibrated", per_level_profile(m, None, data, strategy, levels, int(cfg["reps"]), seed, spec)))
    run.write_json("profile.json", profile.to_dict())
    run.write_text("profile.csv", profile.to_csv())
    base_max = rows[0][1].ce_max
    table = ["model,ce_avg,ce_max,reduction_max_pct"]
    for name, prof in rows:
        reduction = 0.0 if base_max == 0 else 100.0 * (base_max - prof.ce_max) / base_max
        table.append(f"{name},{prof.ce_avg!r},{prof.ce_max!r},{reduction!r}")
    run.write_text("table.csv", "\n".join(table) + "\n")
    if cfg["emit_plotdata"]:
        lines = ["series,level,ce"]
        for name, prof in rows:
            lines += [f"{name},{lvl!r},{ce!r}" for lvl, ce in zip(prof.levels, prof.ce_per_level)]
        run.write_text("plotdata.csv", "\n".join(lines) + "\n")


def cmd_explain(run: Run) -> None:
    cfg = run.config
    data = _load_data(cfg)
    m, calib = _load_model_and_calib(cfg)
    strategy = parse_strategy(cfg["strategy"], data.d, cfg["label_column"])
    opts = {"n_samples": int(cfg["n_samples"]), "kernel_width": cfg["kernel_width"], "ridge_lambda": float(cfg["ridge_lambda"])}
    gi = global_importance(
        m, calib, data, cfg["method"], strategy, min(int(cfg["n"]), data.n), derive_seed(run.seed, "explain"), run.workers, **opts
    )
    run.write_text("attributions.csv", attributions_csv(gi.sample_ids, gi.attributions))
    run.write_json("global.json", gi.to_dict())


def _ranking(text: str) -> list[int]:
    path = Path(str(text))
    if path.is_file():
        return [int(v) for v in load_json(path)["ranking"]]
    return _ints(text)


def cmd_eval_roar(run: Run) -> None:
    cfg = run.config
    if not cfg.get("ranking"):
        raise UsageError("--ranking is required")
    data = _load_data(cfg)
    curve = roar(
        data,
        _ranking(cfg["ranking"]),
        _ints(cfg["k"]),
        _train_config(cfg, 0),
        _ints(cfg["seeds"]),
        SplitSpec(tuple(_floats(cfg["split"])), derive_seed(run.seed, "roar-split")),
    )
    run.write_text("roar.csv", curve.to_csv())
    run.write_json("roar.json", curve.to_dict())


def cmd_eval_sensitivity(run: Run) -> None:
    cfg = run.config
    data = _load_data(cfg)
    m, calib = _load_model_and_calib(cfg)
    strategy = parse_strategy(cfg["strategy"], data.d, cfg["label_column"])
    n = min(int(cfg["n"]), data.n)
    per_sample = []
    for row in range(n):
        x = data.features[row]
        fn = make_explain_fn(m, calib, cfg["method"], strategy, predicted_class(m, x), n_samples=int(cfg["n_samples"]))
        rep = sensitivity(fn, x, float(cfg["radius"]), int(cfg["probes"]), derive_seed(run.seed, "sensitivity", row))
        per_sample.append(rep.to_dict())
    run.write_json(
        "sensitivity.json",
        {
            "method": cfg["method"],
            "radius": float(cfg["radius"]),
            "n_probes": int(cfg["probes"]),
            "norm": "L2",
            "s_avg": float(np.mean([r["s_avg"] for r in per_sample])),
            "s_max": float(np.mean([r["s_max"] for r in per_sample])),
            "per_sample": per_sample,
        },
    )


def _joint(cfg: dict[str, Any]) -> FiniteJoint:
    return FiniteJoint.from_dict(load_json(cfg["joint"])) if cfg.get("joint") else fixture_joint()


def cmd_verify_decomposition(run: Run) -> None:
    cfg = run.config
    joint = _joint(cfg)
    strategy = parse_strategy(cfg["strategy"], joint.d)
    if cfg.get("model"):
        m = load_classifier(cfg["model"])
    else:
        m = BayesOracle(joint, strategy)
        if cfg["scale"] != 1.0:
            m = ScaledClassifier(m, cfg["scale"])
    reports = [decomposition_report(m, joint, Coalition(mask, joint.d), strategy).to_dict() for mask in range(1 << joint.d)]
    run.write_json(
        "decomposition.json",
        {"mode": "exact", "subsets": reports, "max_abs_residual": max(abs(r["residual"]) for r in reports)},
    )


def cmd_verify_bound(run: Run) -> None:
    cfg = run.config
    joint = _joint(cfg)
    strategy = parse_strategy(cfg["strategy"], joint.d)
    trend = drift_trend(joint, strategy, _floats(cfg["scales"]), float(cfg["delta"]), int(cfg["trials"]), derive_seed(run.seed, "bound"))
    run.write_json("bound.json", trend)


HANDLERS: dict[str, Callable[[Run], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "measure": cmd_measure,
    "explain": cmd_explain,
    "eval-roar": cmd_eval_roar,
    "eval-sensitivity": cmd_eval_sensitivity,
    "verify-decomposition": cmd_verify_decomposition,
    "verify-bound": cmd_verify_bound,
}


def _workers(given: int | None) -> int:
    if given is not None:
        return max(1, given)
    return max(1, int(os.environ.get("RECALX_WORKERS", "1")))


def execute(command: str, config: dict[str, Any], out: str, workers: int = 1) -> None:
    config = dict(config)
    if "strategy" in config:
        config["strategy"] = _strategy_cfg(config["strategy"])
    if command == "eval-roar" and config.get("ranking") and Path(str(config["ranking"])).is_file():
        config["ranking"] = str(Path(config["ranking"]).resolve())
    if command == "gen-data" and config["spec"] not in BUILTIN_SPECS:
        config["spec"] = str(Path(config["spec"]).resolve())
    run = Run(command, config, out, workers)
    run.start()
    HANDLERS[command](run)


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command", None)
        if command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("recalx: error: a subcommand is required")
        out = args.pop("out")
        if command == "replay":
            doc = load_json(args["run_json"])
            command, config = doc["command"], doc["config"]
            if command not in COMMANDS:
                raise UsageError(f"unknown command {command!r} in {args['run_json']}")
            workers = _workers(None)
        else:
            workers = _workers(args.pop("workers", None))
            config = resolve_config(command, args, args.pop("config", None))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            execute(command, config, out, workers)
    except UsageError as exc:
        print(f"recalx {command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"recalx {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())
