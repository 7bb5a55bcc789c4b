"""Desk-scale reproductions of the sin(1/x), parity-set and almost-periodic experiments.

Each ``run_*`` function trains every approximator for one seed and returns
an :class:`ExperimentReport`.  Reports are deterministic functions of their
config; wall-clock time is only recorded when ``timing`` is switched on.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adaptive, apfourier, netcore, simplefn
from .datagate import LabeledDataset, split
from .errors import FormatError, InvalidRange

REPORT_COLUMNS = ["experiment", "method", "config_digest", "train_mse", "eval_mse_challenge",
                  "eval_mse_far", "eval_mse_near", "params", "seconds", "seed"]


@dataclass
class MethodResult:
    method: str
    config_digest: str
    train_mse: float
    eval_mse_challenge: float
    eval_mse_far: float
    eval_mse_near: float
    params: int
    seconds: float
    seed: int


@dataclass
class ExperimentReport:
    experiment: str
    rows: list[MethodResult] = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    def row(self, method: str, seed: int | None = None) -> MethodResult:
        for r in self.rows:
            if r.method == method and (seed is None or r.seed == seed):
                return r
        raise KeyError(method)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})


def config_digest(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:12]


def mse(pred, truth) -> float:
    d = np.asarray(pred) - np.asarray(truth)
    return float(np.mean(np.abs(d) ** 2))


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.start = time.perf_counter()
        self.seconds = 0.0
        return self

    def __exit__(self, *exc):
        if self.enabled:
            self.seconds = time.perf_counter() - self.start


# -- data -------------------------------------------------------------------

def sample_sin_inverse(n: int, lo: float, hi: float, seed: int) -> LabeledDataset:
    """``n`` inputs uniform in ``(lo, hi)`` labelled with ``sin(1/x)``."""
    if not (0 < lo < hi and math.isfinite(hi)):
        raise InvalidRange(f"need 0 < lo < hi, got ({lo}, {hi})")
    if n < 1:
        raise InvalidRange(f"need n >= 1, got {n}")
    x = np.random.default_rng(seed).uniform(lo, hi, size=n)
    x = np.where(x <= lo, np.nextafter(lo, hi), x)
    return LabeledDataset(x.reshape(-1, 1), np.sin(1.0 / x).reshape(-1, 1))


def pathological_indicator(x, depth: int):
    """Parity indicator of the first ``depth`` binary digits of ``x`` in ``[0, 1]``.

    Returns 1 where the count of 1-bits is even, 0 where it is odd.  ``x = 1``
    counts as all-zero digits.  Accepts scalars or arrays.
    """
    if not 1 <= depth <= 52:
        raise ValueError(f"depth must lie in [1, 52], got {depth}")
    xs = np.asarray(x, dtype=np.float64)
    if np.any((xs < 0) | (xs > 1)):
        raise ValueError("pathological_indicator is defined on [0, 1]")
    digits = np.floor(np.ldexp(xs, depth)).astype(np.uint64) & np.uint64((1 << depth) - 1)
    parity = np.bitwise_count(digits) & 1
    out = (1 - parity).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def sample_pathological(n: int, depth: int, seed: int, lo: float = 0.0, hi: float = 1.0) -> LabeledDataset:
    x = np.random.default_rng(seed).uniform(lo, hi, size=n)
    return LabeledDataset(x.reshape(-1, 1), pathological_indicator(x, depth).astype(np.float64).reshape(-1, 1))


# -- approximators ----------------------------------------------------------

@dataclass
class Scaled:
    """Network with a fixed affine input map ``u = (x - center) / scale``."""

    net: netcore.NetworkState
    center: float
    scale: float

    def predict(self, x):
        u = (np.asarray(x, dtype=np.float64).reshape(-1, 1) - self.center) / self.scale
        return netcore.forward_batch(self.net, u)


def _scaled_data(data: LabeledDataset, center: float, scale: float) -> LabeledDataset:
    return LabeledDataset((data.inputs - center) / scale, data.labels)


@dataclass
class NetSpec:
    name: str
    hidden: tuple[int, ...]


@dataclass
class AdaptiveSpec:
    capacity: int = 64
    start_width: int = 16
    layers: int = 2
    dormant_layers: int = 2
    grad_threshold: float = 1e-3
    rel_improve_threshold: float = 0.01
    window: int = 10
    width_step: int = 8
    max_active_depth: int = 4


def _train_fixed(spec: NetSpec, train: LabeledDataset, val: LabeledDataset, cfg: netcore.TrainConfig,
                 center: float, scale: float, seed: int) -> Scaled:
    net = netcore.build_network(train.k, list(spec.hidden), train.l, seed=seed)
    net, _ = netcore.train(net, _scaled_data(train, center, scale), _scaled_data(val, center, scale), cfg)
    return Scaled(net, center, scale)


def _train_adaptive(spec: AdaptiveSpec, train: LabeledDataset, val: LabeledDataset, cfg: netcore.TrainConfig,
                    center: float, scale: float, seed: int) -> tuple[Scaled, list]:
    net = netcore.build_network(train.k, [spec.capacity] * spec.layers, train.l,
                                active=[spec.start_width] * spec.layers,
                                dormant_layers=spec.dormant_layers, seed=seed)
    policy = adaptive.GrowthPolicy(grad_threshold=spec.grad_threshold,
                                   rel_improve_threshold=spec.rel_improve_threshold,
                                   window=spec.window, width_step=spec.width_step,
                                   max_active_width=spec.capacity, max_active_depth=spec.max_active_depth)
    tr, va = _scaled_data(train, center, scale), _scaled_data(val, center, scale)
    net, events, _ = adaptive.train_adaptive(tr, va, net, policy, cfg, growth_seed=seed)
    return Scaled(net, center, scale), events


def _leaf_params(model: simplefn.PiecewiseConstantModel) -> int:
    return len(model.leaves()) * model.l


# -- sin(1/x) ---------------------------------------------------------------

@dataclass
class SinInverseConfig:
    seed: int = 0
    n_train: int = 10_000
    lo: float = 0.001
    hi: float = 0.011
    validation_fraction: float = 0.2
    n_eval: int = 1000
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    fixed_nets: tuple = (NetSpec("fixed_4x64", (64,) * 4), NetSpec("fixed_8x32", (32,) * 8))
    adaptive: AdaptiveSpec = field(default_factory=AdaptiveSpec)
    simple_var_tol: float = 0.01
    simple_max_depth: int = 40
    radius: float = 0.002
    timing: bool = False


CHALLENGE = (0.0, 0.01)
FAR = (0.002, 0.01)
NEAR = (0.0, 0.001)


def _uniform_open(rng, lo, hi, n):
    x = rng.uniform(lo, hi, size=n)
    return np.where(x <= lo, np.nextafter(lo, hi), x)


def run_sin_inverse_experiment(config: SinInverseConfig) -> ExperimentReport:
    """Train every approximator on sin(1/x) samples and score three regions.

    Regions: the challenge interval (0, 0.01), the far interval
    (0.002, 0.01) and the near-singularity interval (0, 0.001), each with
    ``n_eval`` fresh uniform points.  Networks see inputs mapped affinely
    from the training interval onto (-1, 1).
    """
    c = config
    data = sample_sin_inverse(c.n_train, c.lo, c.hi, c.seed)
    train, val = split(data, c.validation_fraction, c.seed)
    rng = np.random.default_rng(c.seed + 1)
    regions = {name: _uniform_open(rng, lo, hi, c.n_eval) for name, (lo, hi) in
               (("challenge", CHALLENGE), ("far", FAR), ("near", NEAR))}
    truth = {name: np.sin(1.0 / x) for name, x in regions.items()}
    center, scale = 0.5 * (c.lo + c.hi), 0.5 * (c.hi - c.lo)
    tcfg = netcore.TrainConfig(optimizer="adam", learning_rate=c.learning_rate, epochs=c.epochs,
                               batch_size=c.batch_size, seed=c.seed)
    report = ExperimentReport("sin_inverse")

    def add(method, predict, params, seconds, digest_src):
        pred = {name: np.asarray(predict(x)).reshape(-1) for name, x in regions.items()}
        report.rows.append(MethodResult(
            method, config_digest(digest_src), mse(np.asarray(predict(train.inputs)).reshape(-1), train.labels[:, 0]),
            mse(pred["challenge"], truth["challenge"]), mse(pred["far"], truth["far"]),
            mse(pred["near"], truth["near"]), int(params), seconds, c.seed))
        order = np.argsort(regions["challenge"])
        report.curves[method] = (regions["challenge"][order], truth["challenge"][order], pred["challenge"][order])

    base = {"n_train": c.n_train, "lo": c.lo, "hi": c.hi, "seed": c.seed}
    for spec in c.fixed_nets:
        with _Clock(c.timing) as clk:
            model = _train_fixed(spec, train, val, tcfg, center, scale, c.seed)
        add(spec.name, model.predict, netcore.effective_params(model.net), clk.seconds,
            {**base, "hidden": spec.hidden, "train": asdict(tcfg)})

    with _Clock(c.timing) as clk:
        model, _ = _train_adaptive(c.adaptive, train, val, tcfg, center, scale, c.seed)
    add("adaptive", model.predict, netcore.effective_params(model.net), clk.seconds,
        {**base, "adaptive": asdict(c.adaptive), "train": asdict(tcfg)})

    with _Clock(c.timing) as clk:
        tree = simplefn.fit_simple(train, c.simple_max_depth, c.simple_var_tol, 1)
    add("simple_fn", tree.predict, _leaf_params(tree), clk.seconds,
        {**base, "max_depth": c.simple_max_depth, "var_tol": c.simple_var_tol})

    fallback = float(np.mean(train.labels))
    add("radius_avg", lambda x: simplefn.radius_average_batch(train, x, c.radius, fallback=fallback),
        train.n * (train.k + train.l), 0.0, {**base, "radius": c.radius})
    report.rows.sort(key=lambda r: r.method)
    return report


# -- pathological parity set ------------------------------------------------

@dataclass
class PathologicalConfig:
    seed: int = 0
    depth: int = 20
    n_train: int = 10_000
    n_eval: int = 10_000
    validation_fraction: float = 0.2
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    fixed_nets: tuple = (NetSpec("fixed_4x64", (64,) * 4),)
    adaptive: AdaptiveSpec = field(default_factory=lambda: AdaptiveSpec(capacity=32, start_width=4, window=4,
                                                                         width_step=4))
    simple_var_tol: float = 0.0
    simple_max_depth: int = 30
    radius: float = 1e-3
    timing: bool = False


def run_pathological_experiment(config: PathologicalConfig) -> ExperimentReport:
    """Fit the parity indicator and score held-out points.

    Columns: ``eval_mse_challenge`` on [0, 1], ``eval_mse_far`` on
    [0.5, 1] and ``eval_mse_near`` on [0, 0.5].
    """
    c = config
    if c.depth < 1:
        raise ValueError("depth must be >= 1")
    data = sample_pathological(c.n_train, c.depth, c.seed)
    train, val = split(data, c.validation_fraction, c.seed)
    rng = np.random.default_rng(c.seed + 1)
    x_eval = rng.uniform(0.0, 1.0, size=c.n_eval)
    y_eval = pathological_indicator(x_eval, c.depth).astype(np.float64)
    upper = x_eval >= 0.5
    tcfg = netcore.TrainConfig(optimizer="adam", learning_rate=c.learning_rate, epochs=c.epochs,
                               batch_size=c.batch_size, seed=c.seed)
    report = ExperimentReport("pathological")
    base = {"depth": c.depth, "n_train": c.n_train, "seed": c.seed}

    def add(method, predict, params, seconds, digest_src):
        p = np.asarray(predict(x_eval)).reshape(-1)
        report.rows.append(MethodResult(
            method, config_digest(digest_src), mse(np.asarray(predict(train.inputs)).reshape(-1), train.labels[:, 0]),
            mse(p, y_eval), mse(p[upper], y_eval[upper]), mse(p[~upper], y_eval[~upper]),
            int(params), seconds, c.seed))
        order = np.argsort(x_eval)
        report.curves[method] = (x_eval[order], y_eval[order], p[order])

    add("constant_half", lambda x: np.full(np.shape(x)[0], 0.5), 1, 0.0, {**base, "value": 0.5})
    for spec in c.fixed_nets:
        with _Clock(c.timing) as clk:
            model = _train_fixed(spec, train, val, tcfg, 0.5, 0.5, c.seed)
        add(spec.name, model.predict, netcore.effective_params(model.net), clk.seconds,
            {**base, "hidden": spec.hidden, "train": asdict(tcfg)})
    with _Clock(c.timing) as clk:
        model, _ = _train_adaptive(c.adaptive, train, val, tcfg, 0.5, 0.5, c.seed)
    add("adaptive", model.predict, netcore.effective_params(model.net), clk.seconds,
        {**base, "adaptive": asdict(c.adaptive), "train": asdict(tcfg)})
    with _Clock(c.timing) as clk:
        tree = simplefn.fit_simple(train, c.simple_max_depth, c.simple_var_tol, 1)
    add("simple_fn", tree.predict, _leaf_params(tree), clk.seconds,
        {**base, "max_depth": c.simple_max_depth, "var_tol": c.simple_var_tol})
    fallback = float(np.mean(train.labels))
    add("radius_avg", lambda x: simplefn.radius_average_batch(train, x, c.radius, fallback=fallback),
        train.n * (train.k + train.l), 0.0, {**base, "radius": c.radius})
    report.rows.sort(key=lambda r: r.method)
    return report


# -- almost-periodic sequence -----------------------------------------------

SQRT2 = math.sqrt(2.0)


def two_tone_signal(x):
    return np.exp(1j * x) + np.exp(1j * SQRT2 * x)


@dataclass
class APConfig:
    seed: int = 0
    tau: float = 400 * math.pi
    dx: float = 0.01
    horizon: float = 100.0
    n_eval: int = 2000
    eta_max: float = 2.0
    amp_threshold: float = 0.5
    foil_hidden: tuple = (32, 32)
    foil_samples: int = 4000
    foil_epochs: int = 30
    foil_batch_size: int = 64
    foil_learning_rate: float = 3e-3
    timing: bool = False


def run_ap_experiment(config: APConfig) -> ExperimentReport:
    """Fit exp(ix) + exp(i sqrt2 x) on [0, tau) and forecast [tau, tau + horizon].

    ``eval_mse_challenge`` is the forecast MSE over the whole horizon,
    ``eval_mse_near`` and ``eval_mse_far`` its first and second halves.
    The feed-forward foil regresses (Re f, Im f) on x / tau.
    """
    c = config
    n = int(round(c.tau / c.dx))
    sig = apfourier.SampledSignal.from_function(two_tone_signal, 0.0, c.dx, n)
    x_eval = np.linspace(sig.tau, sig.tau + c.horizon, c.n_eval)
    y_eval = two_tone_signal(x_eval)
    half = x_eval < sig.tau + 0.5 * c.horizon
    report = ExperimentReport("almost_periodic")
    base = {"tau": c.tau, "dx": c.dx, "seed": c.seed}

    def add(method, predict, train_mse, params, seconds, digest_src):
        p = np.asarray(predict(x_eval)).reshape(-1)
        report.rows.append(MethodResult(method, config_digest(digest_src), train_mse, mse(p, y_eval),
                                        mse(p[~half], y_eval[~half]), mse(p[half], y_eval[half]),
                                        int(params), seconds, c.seed))
        report.curves[method] = (x_eval, y_eval.real, p.real)

    with _Clock(c.timing) as clk:
        model = apfourier.fit_ap(sig, apfourier.ScanConfig(c.eta_max, amp_threshold=c.amp_threshold))
    add("ap_fourier", lambda x: apfourier.predict_ap(model, x), model.residual_norm ** 2, 3 * len(model),
        clk.seconds, {**base, "eta_max": c.eta_max, "amp_threshold": c.amp_threshold})

    rng = np.random.default_rng(c.seed)
    idx = np.sort(rng.choice(n, size=min(c.foil_samples, n), replace=False))
    xs = sig.x[idx]
    ys = np.column_stack([sig.values[idx].real, sig.values[idx].imag])
    data = LabeledDataset(xs.reshape(-1, 1), ys)
    tcfg = netcore.TrainConfig(optimizer="adam", learning_rate=c.foil_learning_rate, epochs=c.foil_epochs,
                               batch_size=c.foil_batch_size, seed=c.seed)
    with _Clock(c.timing) as clk:
        net = netcore.build_network(1, list(c.foil_hidden), 2, seed=c.seed)
        net, _ = netcore.train(net, _scaled_data(data, 0.0, sig.tau), None, tcfg)
    foil = Scaled(net, 0.0, sig.tau)

    def foil_predict(x):
        out = foil.predict(x)
        return out[:, 0] + 1j * out[:, 1]

    add("feedforward_foil", foil_predict, mse(foil_predict(xs), sig.values[idx]),
        netcore.effective_params(net), clk.seconds, {**base, "hidden": c.foil_hidden, "train": asdict(tcfg)})
    report.rows.sort(key=lambda r: r.method)
    return report


EXPERIMENTS = {
    "sin_inverse": (SinInverseConfig, run_sin_inverse_experiment),
    "pathological": (PathologicalConfig, run_pathological_experiment),
    "almost_periodic": (APConfig, run_ap_experiment),
}


# -- report files -----------------------------------------------------------

def format_report(report: ExperimentReport) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(",".join([
            report.experiment, r.method, r.config_digest, repr(r.train_mse), repr(r.eval_mse_challenge),
            repr(r.eval_mse_far), repr(r.eval_mse_near), str(r.params), repr(r.seconds), str(r.seed)]))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> ExperimentReport:
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise FormatError("line 1: unexpected report header")
    report = ExperimentReport("")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(REPORT_COLUMNS):
            raise FormatError(f"line {lineno}: expected {len(REPORT_COLUMNS)} fields, got {len(row)}")
        try:
            report.experiment = row[0]
            report.rows.append(MethodResult(row[1], row[2], float(row[3]), float(row[4]), float(row[5]),
                                            float(row[6]), int(row[7]), float(row[8]), int(row[9])))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    return report


def emit_report(report: ExperimentReport, path) -> list[Path]:
    """Write the report CSV and one ``<method>_curve.csv`` per curve beside it."""
    path = Path(path)
    written = []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_report(report), encoding="utf-8")
        written.append(path)
        for method in sorted(report.curves):
            x, y_true, y_pred = report.curves[method]
            lines = ["x,y_true,y_pred"]
            lines += [f"{a!r},{b!r},{p!r}" for a, b, p in
                      zip(np.asarray(x).tolist(), np.asarray(y_true).tolist(), np.asarray(y_pred).tolist())]
            curve = path.parent / f"{method}_curve.csv"
            curve.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(curve)
    except OSError as exc:
        raise OSError(f"failed writing report to {path}: {exc}") from exc
    return written


def merge_reports(reports: list[ExperimentReport]) -> ExperimentReport:
    """Concatenate rows of per-seed reports (curves are not merged)."""
    merged = ExperimentReport(reports[0].experiment if reports else "")
    for rep in reports:
        merged.rows.extend(rep.rows)
    return merged
