"""Command-line entry point.

Usage::

    fnlab validate   --config run.ini --out results/
    fnlab train      --config run.ini --out results/ [--seed 3]
    fnlab fit-simple --config run.ini --out results/
    fnlab fit-ap     --config run.ini --out results/
    fnlab bench      --config run.ini --out results/

Exit codes: 0 success, 1 error, 2 dataset has conflicting duplicate labels.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adaptive, apfourier, bench, datagate, netcore, simplefn
from .errors import ConfigError, FnlabError, FormatError

log = logging.getLogger("fnlab")

EXIT_OK, EXIT_ERROR, EXIT_NO_FUNCTION = 0, 1, 2
COMMANDS = ("validate", "train", "fit-simple", "fit-ap", "bench")


# -- config schema ----------------------------------------------------------

@dataclass(frozen=True)
class Key:
    kind: str  # str, int, float, bool, ints
    default: object
    check: str = ""  # ge0, gt0, ge1, open01, or "choice:a|b"

    def parse(self, raw: str):
        raw = raw.strip()
        if self.kind == "str":
            return raw
        if self.kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if self.kind == "int":
            return int(raw)
        if self.kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(f"expected a finite number, got {raw!r}")
            return value
        if self.kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        raise AssertionError(self.kind)

    def format(self, value) -> str:
        if self.kind == "bool":
            return "true" if value else "false"
        if self.kind == "float":
            return repr(float(value))
        if self.kind == "ints":
            return ",".join(str(v) for v in value)
        return str(value)

    def violation(self, value) -> str | None:
        c = self.check
        if not c:
            return None
        if c.startswith("choice:"):
            options = c[len("choice:"):].split("|")
            return None if str(value) in options else f"must be one of {', '.join(options)}"
        values = value if isinstance(value, tuple) else (value,)
        for v in values:
            if c == "ge0" and not v >= 0:
                return "must be >= 0"
            if c == "gt0" and not v > 0:
                return "must be > 0"
            if c == "ge1" and not v >= 1:
                return "must be >= 1"
            if c == "open01" and not 0 < v < 1:
                return "must lie strictly between 0 and 1"
        return None


_policy = adaptive.GrowthPolicy()

SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "path": Key("str", ""),
        "val_path": Key("str", ""),
        "signal_path": Key("str", ""),
        "quant_tol": Key("float", 0.0, "ge0"),
        "epsilon": Key("float", 1e-9, "gt0"),
        "validation_fraction": Key("float", 0.2, "open01"),
        "seed": Key("int", 0),
        "average_duplicates": Key("bool", True),
    },
    "net": {
        "hidden": Key("ints", (16,), "ge1"),
        "active": Key("ints", ()),
        "dormant_layers": Key("int", 0, "ge0"),
        "activation": Key("str", netcore.LEAKY_RELU, "choice:" + "|".join(netcore.KINDS)),
        "alpha": Key("float", 0.01),
    },
    "train": {
        "optimizer": Key("str", "adam", "choice:adam|sgd"),
        "learning_rate": Key("float", 1e-3, "gt0"),
        "epochs": Key("int", 100, "ge1"),
        "batch_size": Key("int", 32, "ge0"),
        "loss_p": Key("int", 2, "choice:1|2"),
        "monotone": Key("bool", False),
        "backtrack_factor": Key("float", 0.5, "open01"),
        "max_backtracks": Key("int", 20, "ge0"),
        "adaptive": Key("bool", False),
    },
    "adaptive": {
        "grad_threshold": Key("float", _policy.grad_threshold, "ge0"),
        "rel_improve_threshold": Key("float", _policy.rel_improve_threshold, "ge0"),
        "window": Key("int", _policy.window, "ge1"),
        "width_step": Key("int", _policy.width_step, "ge1"),
        "target_val_loss": Key("float", _policy.target_val_loss),
        "prune_threshold": Key("float", _policy.prune_threshold, "ge0"),
        "prune_patience": Key("int", _policy.prune_patience, "ge1"),
        "max_active_width": Key("int", _policy.max_active_width, "ge1"),
        "max_active_depth": Key("int", _policy.max_active_depth, "ge1"),
    },
    "simplefn": {
        "max_depth": Key("int", 20, "ge0"),
        "var_tol": Key("float", 0.0, "ge0"),
        "min_count": Key("int", 1, "ge1"),
    },
    "ap": {
        "eta_max": Key("float", 3.0, "gt0"),
        "grid_step": Key("float", 0.0, "ge0"),
        "amp_threshold": Key("float", 0.1, "gt0"),
        "eta_min": Key("float", 0.0),
        "forecast_horizon": Key("float", 0.0, "ge0"),
        "forecast_points": Key("int", 1000, "ge1"),
    },
    "bench": {
        "experiment": Key("str", "sin_inverse", "choice:" + "|".join(bench.EXPERIMENTS)),
        "seeds": Key("ints", (0,)),
        "epochs": Key("int", 0, "ge0"),
        "n_train": Key("int", 0, "ge0"),
        "depth": Key("int", 20, "ge1"),
        "timing": Key("bool", False),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration: every section with every key filled in."""

    sections: dict
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.sections == other.sections

    def path(self, section: str, key: str) -> Path | None:
        raw = self.sections[section][key]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p


def defaults() -> dict:
    return {sec: {k: spec.default for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    """Strictly parse sectioned ``key = value`` text.

    Unknown sections or keys, unparsable values and constraint violations
    raise :class:`ConfigError` naming ``[section].key``.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = defaults()
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"[{sec}]: unknown section (expected one of {', '.join(SCHEMA)})")
        for key, raw in parser.items(sec):
            spec = SCHEMA[sec].get(key)
            if spec is None:
                raise ConfigError(f"[{sec}].{key}: unknown key")
            try:
                value = spec.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}].{key}: expected {spec.kind} ({exc})") from None
            problem = spec.violation(value)
            if problem:
                raise ConfigError(f"[{sec}].{key}: {problem} (got {raw.strip()})")
            sections[sec][key] = value
    _cross_check(sections)
    return RunConfig(sections, Path(base_dir))


def _cross_check(s: dict) -> None:
    net = s["net"]
    if net["active"] and len(net["active"]) != len(net["hidden"]):
        raise ConfigError("[net].active: must list one width per entry of [net].hidden")
    if any(a < 0 or a > h for a, h in zip(net["active"], net["hidden"])):
        raise ConfigError("[net].active: widths must lie in [0, hidden]")
    if net["activation"] == netcore.LEAKY_RELU and not 0 < net["alpha"] < 1:
        raise ConfigError("[net].alpha: must lie strictly between 0 and 1 for leaky_relu")


def serialize_config(config: RunConfig) -> str:
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for key, spec in keys.items():
            out.append(f"{key} = {spec.format(config.sections[sec][key])}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(text, path.parent)


# -- model persistence ------------------------------------------------------

def save_model(model, path) -> None:
    if isinstance(model, netcore.NetworkState):
        netcore.save_network(model, path)
    elif isinstance(model, simplefn.PiecewiseConstantModel):
        simplefn.save_model(model, path)
    elif isinstance(model, apfourier.TrigPolynomialModel):
        apfourier.save_model(model, path)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def load_model(path):
    """Load any model file, recognised by its leading bytes."""
    path = Path(path)
    try:
        head = path.read_bytes()[:16]
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if head.startswith(netcore.MAGIC):
        return netcore.load_network(path)
    if head.startswith(b"# k="):
        return simplefn.load_model(path)
    if head.startswith(b"eta,re,im"):
        return apfourier.load_model(path)
    raise FormatError(f"{path}: unrecognised model format")


# -- commands ---------------------------------------------------------------

def _require(config: RunConfig, section: str, key: str) -> Path:
    p = config.path(section, key)
    if p is None:
        raise ConfigError(f"[{section}].{key}: required for this command")
    return p


def _consistency(config: RunConfig, data: datagate.LabeledDataset) -> datagate.ConsistencyReport:
    d = config["data"]
    groups = datagate.find_duplicate_groups(data, d["quant_tol"])
    return datagate.check_consistency(data, groups, d["epsilon"])


def cmd_validate(config: RunConfig, out: Path) -> int:
    data = datagate.load_dataset(_require(config, "data", "path"))
    report = _consistency(config, data)
    (out / "consistency.csv").write_text(datagate.format_report_csv(report), encoding="utf-8")
    log.info("verdict=%s groups=%d conflicts=%d", report.verdict.value, len(report.groups),
             len(report.hard_conflicts))
    return EXIT_NO_FUNCTION if report.verdict is datagate.Verdict.NO_FUNCTION else EXIT_OK


def _prepared(config: RunConfig) -> tuple[datagate.LabeledDataset, datagate.LabeledDataset | None] | int:
    d = config["data"]
    data = datagate.load_dataset(_require(config, "data", "path"))
    report = _consistency(config, data)
    if report.verdict is datagate.Verdict.NO_FUNCTION:
        log.error("dataset has %d conflicting duplicate groups; no function fits it", len(report.hard_conflicts))
        return EXIT_NO_FUNCTION
    if report.groups and d["average_duplicates"]:
        data = datagate.average_duplicates(data, report.groups)
    val_path = config.path("data", "val_path")
    if val_path is not None:
        return data, datagate.load_dataset(val_path)
    if len(data) < 2:
        return data, None
    return datagate.split(data, d["validation_fraction"], d["seed"])


def _train_config(config: RunConfig) -> netcore.TrainConfig:
    t = config["train"]
    return netcore.TrainConfig(optimizer=t["optimizer"], learning_rate=t["learning_rate"], epochs=t["epochs"],
                               batch_size=t["batch_size"], loss_p=t["loss_p"], monotone=t["monotone"],
                               backtrack_factor=t["backtrack_factor"], max_backtracks=t["max_backtracks"],
                               seed=config["data"]["seed"])


def cmd_train(config: RunConfig, out: Path) -> int:
    prepared = _prepared(config)
    if isinstance(prepared, int):
        return prepared
    train, val = prepared
    n = config["net"]
    net = netcore.build_network(train.k, list(n["hidden"]), train.l, activation=n["activation"], alpha=n["alpha"],
                                active=list(n["active"]) or None, dormant_layers=n["dormant_layers"],
                                seed=config["data"]["seed"])
    tcfg = _train_config(config)
    if config["train"]["adaptive"]:
        policy = adaptive.GrowthPolicy(**config["adaptive"])
        net, events, history = adaptive.train_adaptive(train, val, net, policy, tcfg,
                                                       growth_seed=config["data"]["seed"])
        (out / "growth_log.csv").write_text(adaptive.format_growth_log(events), encoding="utf-8")
    else:
        net, history = netcore.train(net, train, val, tcfg)
    (out / "training_log.csv").write_text(netcore.format_training_log(history), encoding="utf-8")
    save_model(net, out / "model.mnl")
    last = history[-1]
    log.info("trained %d epochs: train_loss=%.6g val_loss=%.6g active_params=%d",
             last.epoch, last.train_loss, last.val_loss, last.active_params)
    return EXIT_OK


def cmd_fit_simple(config: RunConfig, out: Path) -> int:
    prepared = _prepared(config)
    if isinstance(prepared, int):
        return prepared
    train, val = prepared
    s = config["simplefn"]
    model = simplefn.fit_simple(train, s["max_depth"], s["var_tol"], s["min_count"])
    save_model(model, out / "simple_model.txt")
    train_mse = netcore.loss(model.predict(train.inputs), train.labels)
    val_mse = netcore.loss(model.predict(val.inputs), val.labels) if val is not None else float("nan")
    log.info("simple function: %d leaves, train_mse=%.6g val_mse=%.6g", len(model.leaves()), train_mse, val_mse)
    return EXIT_OK


def cmd_fit_ap(config: RunConfig, out: Path) -> int:
    signal = apfourier.load_signal(_require(config, "data", "signal_path"))
    a = config["ap"]
    scan = apfourier.ScanConfig(a["eta_max"], a["grid_step"] or None, a["amp_threshold"], a["eta_min"])
    model = apfourier.fit_ap(signal, scan)
    save_model(model, out / "ap_model.csv")
    if a["forecast_horizon"] > 0:
        start = signal.x0 + signal.tau
        xs = np.linspace(start, start + a["forecast_horizon"], a["forecast_points"])
        pred = apfourier.predict_ap(model, xs)
        lines = ["x,re,im"] + [f"{x!r},{p.real!r},{p.imag!r}" for x, p in zip(xs.tolist(), pred.tolist())]
        (out / "forecast.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("almost-periodic fit: %d terms, residual=%.6g", len(model), model.residual_norm)
    return EXIT_OK


def cmd_bench(config: RunConfig, out: Path) -> int:
    b = config["bench"]
    if b["experiment"] not in bench.EXPERIMENTS:
        raise ConfigError(f"[bench].experiment: unknown experiment {b['experiment']!r} "
                          f"(expected one of {', '.join(bench.EXPERIMENTS)})")
    cfg_cls, run = bench.EXPERIMENTS[b["experiment"]]
    reports = []
    for seed in b["seeds"]:
        overrides = {"seed": seed, "timing": b["timing"]}
        names = {f.name for f in dataclasses.fields(cfg_cls)}
        if b["epochs"]:
            overrides["foil_epochs" if "foil_epochs" in names else "epochs"] = b["epochs"]
        if b["n_train"] and "n_train" in names:
            overrides["n_train"] = b["n_train"]
        if "depth" in names:
            overrides["depth"] = b["depth"]
        report = run(cfg_cls(**overrides))
        bench.emit_report(report, out / b["experiment"] / f"seed_{seed}" / "report.csv")
        reports.append(report)
        for row in report.rows:
            log.info("seed=%d %-16s challenge=%.4g far=%.4g near=%.4g", seed, row.method,
                     row.eval_mse_challenge, row.eval_mse_far, row.eval_mse_near)
    bench.emit_report(bench.merge_reports(reports), out / b["experiment"] / "report.csv")
    return EXIT_OK


HANDLERS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "fit-simple": cmd_fit_simple,
    "fit-ap": cmd_fit_ap,
    "bench": cmd_bench,
}


def dispatch(config: RunConfig, command: str, out: Path | str) -> int:
    """Run ``command`` and map the outcome to a process exit code."""
    if command not in HANDLERS:
        log.error("unknown command %r (expected one of %s)", command, ", ".join(COMMANDS))
        return EXIT_ERROR
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[command](config, out)
    except (FnlabError, OSError, ValueError) as exc:
        log.error("%s: %s", command, exc)
        return EXIT_ERROR


def apply_seed(config: RunConfig, seed: int) -> None:
    config["data"]["seed"] = seed
    config["bench"]["seeds"] = (seed,)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fnlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the sectioned key = value config file")
    parser.add_argument("--out", default="fnlab_out", help="output directory (default: fnlab_out)")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    if args.seed is not None:
        apply_seed(config, args.seed)
    return dispatch(config, args.command, args.out)


if __name__ == "__main__":
    sys.exit(main())
