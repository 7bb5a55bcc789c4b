"""Dense feed-forward networks with per-neuron and per-layer dormancy.

Every layer computes ``z = W a_prev + b`` followed by an elementwise
activation with ``P(0) = 0``.  Neurons whose mask bit is off are held at
zero incoming weights and bias, so they emit exactly 0 and are skipped in
both the forward pass and the gradient.  A dormant layer is square and acts
as an exact pass-through until it is switched on.

The forward pass always multiplies over the full layer width.  Dormant
positions then only add exact zeros, and the matrix kernel sees the same
shapes before and after a growth switch, which is what lets growth preserve
the computed function bit for bit.  Gradients and updates touch active
parameters only.
"""
from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagate import LabeledDataset
from .errors import DivergenceError, EmptyBatch, FormatError, ShapeError

IDENTITY = "identity"
LEAKY_RELU = "leaky_relu"
PRELU = "prelu"
KINDS = (IDENTITY, LEAKY_RELU, PRELU)

_TAGS = {IDENTITY: 0, LEAKY_RELU: 1, PRELU: 2}
_KIND_OF_TAG = {v: k for k, v in _TAGS.items()}


@dataclass
class Activation:
    """Elementwise activation. All kinds satisfy ``P(0) = 0``.

    ``alpha`` is the negative-side slope for leaky ReLU and PReLU (trainable
    only for PReLU).  ``derivative_at_zero`` is the slope used when the
    pre-activation is exactly 0.
    """

    kind: str = LEAKY_RELU
    alpha: float = 0.01
    derivative_at_zero: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == LEAKY_RELU and not 0 < self.alpha < 1:
            raise ValueError(f"leaky_relu alpha must lie in (0, 1), got {self.alpha}")

    @property
    def trainable(self) -> bool:
        return self.kind == PRELU

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == IDENTITY:
            return z
        return np.where(z >= 0, z, self.alpha * z)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self.kind == IDENTITY:
            return np.ones_like(z)
        return np.where(z > 0, 1.0, np.where(z < 0, self.alpha, self.derivative_at_zero))


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = field(default_factory=Activation)
    mask: np.ndarray | None = None
    dormant: bool = False

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.mask is None:
            self.mask = np.ones(self.weight.shape[0], dtype=bool)
        self.mask = np.array(self.mask, dtype=bool).reshape(-1)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class NetworkState:
    layers: list[Layer]
    input_dim: int

    def __post_init__(self):
        self.validate()

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def depth(self) -> int:
        return len(self.layers)

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.fan_in != width:
                raise ShapeError(f"layer {i}: fan_in {layer.fan_in} does not match incoming width {width}")
            if layer.bias.shape != (layer.fan_out,) or layer.mask.shape != (layer.fan_out,):
                raise ShapeError(f"layer {i}: bias/mask length must equal fan_out {layer.fan_out}")
            if layer.dormant and layer.fan_in != layer.fan_out:
                raise ShapeError(f"layer {i}: dormant layers must be square")
            off = ~layer.mask
            if np.any(layer.weight[off] != 0) or np.any(layer.bias[off] != 0):
                raise ValueError(f"layer {i}: masked-off neurons must have zero weights and bias")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))
                    and math.isfinite(layer.activation.alpha)):
                raise ValueError(f"layer {i}: non-finite parameters")
            width = layer.fan_out

    def live_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if not layer.dormant]

    def active_inputs(self, index: int) -> np.ndarray:
        """Indices of the active signals feeding layer ``index``.

        Dormant layers are pass-throughs, so the feeding signal is the output
        of the closest live layer below (or the network input).
        """
        for j in range(index - 1, -1, -1):
            if not self.layers[j].dormant:
                return np.flatnonzero(self.layers[j].mask)
        return np.arange(self.input_dim)

    def next_live(self, index: int) -> int | None:
        for j in range(index + 1, len(self.layers)):
            if not self.layers[j].dormant:
                return j
        return None


@dataclass(frozen=True)
class LossSpec:
    p: int = 2
    reduction: str = "mean"

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"loss exponent p must be 1 or 2, got {self.p}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class LayerGrad:
    """Gradient of the active block of one live layer.

    ``weight`` has shape ``(len(rows), len(cols))``; entries for dormant
    neurons are absent rather than zero.
    """

    rows: np.ndarray
    cols: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    alpha: float | None = None


Grads = list  # list[LayerGrad | None], aligned with net.layers


# -- construction -----------------------------------------------------------

def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def build_network(
    input_dim: int,
    hidden: list[int],
    output_dim: int,
    *,
    activation: str = LEAKY_RELU,
    alpha: float = 0.01,
    active: list[int] | None = None,
    dormant_layers: int = 0,
    seed: int = 0,
) -> NetworkState:
    """Build a dense network with optional dormant capacity.

    ``hidden`` lists layer capacities and ``active`` the number of initially
    active neurons in each (default: all).  ``dormant_layers`` square
    pass-through layers of the last hidden width are inserted before the
    output layer.  Active weights are uniform in ``[-s, s]`` with
    ``s = sqrt(6 / (fan_in + fan_out))`` over active fans; biases start at 0.
    """
    rng = np.random.default_rng(seed)
    active = list(hidden) if active is None else list(active)
    if len(active) != len(hidden) or any(not 0 <= a <= h for a, h in zip(active, hidden)):
        raise ShapeError("active widths must match hidden capacities")
    if dormant_layers and not hidden:
        raise ShapeError("dormant layers need at least one hidden layer")

    caps = list(hidden) + [output_dim]
    acts = list(active) + [output_dim]
    layers = []
    prev_cap, prev_act = input_dim, input_dim
    for i, (cap, act) in enumerate(zip(caps, acts)):
        is_out = i == len(caps) - 1
        w = np.zeros((cap, prev_cap))
        s = glorot_limit(prev_act, act) if act and prev_act else 0.0
        w[:act, :prev_act] = rng.uniform(-s, s, size=(act, prev_act))
        mask = np.zeros(cap, dtype=bool)
        mask[:act] = True
        kind = Activation(IDENTITY) if is_out else Activation(activation, alpha)
        if is_out and dormant_layers:
            width = hidden[-1]
            for _ in range(dormant_layers):
                layers.append(Layer(np.zeros((width, width)), np.zeros(width), Activation(PRELU, 1.0),
                                    np.zeros(width, dtype=bool), dormant=True))
        layers.append(Layer(w, np.zeros(cap), kind, mask))
        prev_cap, prev_act = cap, act
    return NetworkState(layers, input_dim)


# -- forward ----------------------------------------------------------------

def _affine(layer: Layer, a_prev: np.ndarray) -> np.ndarray:
    """Full-width ``a_prev @ W.T + b`` over every neuron of the layer.

    The product always spans the whole fan-in, so switching a neuron on or
    off never changes the shapes handed to the matrix kernel; dormant
    positions only ever contribute exact zero terms.
    """
    return a_prev @ layer.weight.T + layer.bias


def _as_batch(net: NetworkState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if net.input_dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected inputs with {net.input_dim} coordinates, got shape {np.shape(x)}")
    return x


def _forward_trace(net: NetworkState, x: np.ndarray):
    a = x
    trace = []
    for i, layer in enumerate(net.layers):
        if layer.dormant:
            continue
        rows = np.flatnonzero(layer.mask)
        cols = net.active_inputs(i)
        z = _affine(layer, a)[:, rows]
        out = np.zeros((a.shape[0], layer.fan_out))
        out[:, rows] = layer.activation(z)
        trace.append((i, rows, cols, a, z))
        a = out
    return a, trace


def forward_batch(net: NetworkState, x) -> np.ndarray:
    """Evaluate the network on a batch of shape ``(N, k)``; returns ``(N, l)``."""
    out, _ = _forward_trace(net, _as_batch(net, x))
    return out


def forward(net: NetworkState, x) -> np.ndarray:
    """Evaluate the network on one input vector of length ``k``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.input_dim:
        raise ShapeError(f"expected {net.input_dim} input coordinates, got {x.shape[0]}")
    return forward_batch(net, x.reshape(1, -1))[0]


# -- loss and gradients -----------------------------------------------------

def loss(pred, target, spec: LossSpec = LossSpec()) -> float:
    """l^p loss raised to the power p.

    One sample contributes ``sum_i |pred_i - target_i|^p``; for 2-D input the
    per-sample values are averaged or summed according to ``spec.reduction``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    d = np.abs(pred - target)
    per = d ** spec.p if spec.p != 1 else d
    if per.ndim <= 1:
        return float(np.sum(per))
    per_sample = np.sum(per, axis=1)
    return float(np.mean(per_sample) if spec.reduction == "mean" else np.sum(per_sample))


def lp_norm(d, p: float) -> float:
    """``(sum |d_i|^p)^(1/p)``, scaled by the largest entry to avoid underflow."""
    d = np.abs(np.asarray(d, dtype=np.float64)).reshape(-1)
    if p == 1:
        return float(np.sum(d))
    top = float(np.max(d)) if d.size else 0.0
    if top == 0.0 or not math.isfinite(top):
        return top
    return top * float(np.sum((d / top) ** p) ** (1.0 / p))


def dataset_loss(net: NetworkState, data: LabeledDataset, spec: LossSpec = LossSpec()) -> float:
    return loss(forward_batch(net, data.inputs), data.labels, spec)


def backprop(net: NetworkState, batch: LabeledDataset, spec: LossSpec = LossSpec()) -> tuple[float, Grads]:
    """Loss on ``batch`` and its exact gradient with respect to active parameters.

    Returns a list aligned with ``net.layers``: ``None`` for dormant layers,
    otherwise a :class:`LayerGrad` over the active rows and active input
    columns of that layer.
    """
    if batch is None or len(batch) == 0:
        raise EmptyBatch("backprop needs a nonempty batch")
    x = _as_batch(net, batch.inputs)
    y = batch.labels
    if y.shape[1] != net.output_dim:
        raise ShapeError(f"labels have {y.shape[1]} coordinates, network outputs {net.output_dim}")
    out, trace = _forward_trace(net, x)
    value = loss(out, y, spec)

    d = out - y
    scale = 1.0 / x.shape[0] if spec.reduction == "mean" else 1.0
    upstream = (2.0 * d if spec.p == 2 else np.sign(d)) * scale

    grads: Grads = [None] * len(net.layers)
    for i, rows, cols, a_prev, z in reversed(trace):
        layer = net.layers[i]
        g_out = upstream[:, rows]
        delta = g_out * layer.activation.derivative(z)
        galpha = None
        if layer.activation.trainable:
            galpha = float(np.sum(np.where(z < 0, g_out * z, 0.0)))
        gw = delta.T @ a_prev[:, cols]
        gb = np.sum(delta, axis=0)
        grads[i] = LayerGrad(rows, cols, gw, gb, galpha)
        upstream = np.zeros_like(a_prev)
        upstream[:, cols] = delta @ layer.weight[np.ix_(rows, cols)]
    return value, grads


def grad_norm(grads: Grads) -> float:
    acc = 0.0
    for g in grads:
        if g is None:
            continue
        acc += float(np.sum(g.weight * g.weight)) + float(np.sum(g.bias * g.bias))
        if g.alpha is not None:
            acc += g.alpha * g.alpha
    return math.sqrt(acc)


def _check_finite(grads: Grads) -> None:
    for g in grads:
        if g is None:
            continue
        if not (np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias))
                and (g.alpha is None or math.isfinite(g.alpha))):
            raise DivergenceError("non-finite gradient")


# -- optimizers -------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments stored at full layer shape; only active entries move."""

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def step_fixed(net: NetworkState, grads: Grads, learning_rate: float,
               state: OptimizerState | None = None, optimizer: str = "sgd") -> OptimizerState:
    """Apply one SGD or Adam update in place; dormant parameters never move."""
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    _check_finite(grads)
    state = state if state is not None else OptimizerState()
    if optimizer == "sgd":
        for layer, g in zip(net.layers, grads):
            if g is None:
                continue
            ix = np.ix_(g.rows, g.cols)
            layer.weight[ix] -= learning_rate * g.weight
            layer.bias[g.rows] -= learning_rate * g.bias
            if g.alpha is not None:
                layer.activation.alpha -= learning_rate * g.alpha
        return state

    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for i, (layer, g) in enumerate(zip(net.layers, grads)):
        if g is None:
            continue
        ix = np.ix_(g.rows, g.cols)
        blocks = [("w", layer.weight.shape, ix, g.weight), ("b", layer.bias.shape, g.rows, g.bias)]
        for name, shape, where, grad in blocks:
            key = (i, name)
            if key not in state.m or state.m[key].shape != shape:
                state.m[key] = np.zeros(shape)
                state.v[key] = np.zeros(shape)
            m, v = state.m[key], state.v[key]
            m[where] = ADAM_BETA1 * m[where] + (1 - ADAM_BETA1) * grad
            v[where] = ADAM_BETA2 * v[where] + (1 - ADAM_BETA2) * grad * grad
            step = learning_rate * (m[where] / c1) / (np.sqrt(v[where] / c2) + ADAM_EPS)
            if name == "w":
                layer.weight[where] -= step
            else:
                layer.bias[where] -= step
        if g.alpha is not None:
            key = (i, "alpha")
            m, v = state.m.get(key, 0.0), state.v.get(key, 0.0)
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g.alpha
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g.alpha * g.alpha
            state.m[key], state.v[key] = m, v
            layer.activation.alpha -= learning_rate * (m / c1) / (math.sqrt(v / c2) + ADAM_EPS)
    return state


def apply_gradient(net: NetworkState, grads: Grads, rate: float) -> NetworkState:
    """Return a copy of ``net`` moved by ``-rate * grads``."""
    trial = net.copy()
    for layer, g in zip(trial.layers, grads):
        if g is None:
            continue
        layer.weight[np.ix_(g.rows, g.cols)] -= rate * g.weight
        layer.bias[g.rows] -= rate * g.bias
        if g.alpha is not None:
            layer.activation.alpha -= rate * g.alpha
    return trial


def backtracking_rates(initial_rate: float, backtrack_factor: float, max_backtracks: int):
    for j in range(max_backtracks + 1):
        yield initial_rate * backtrack_factor ** j


def step_monotone(net: NetworkState, batch: LabeledDataset, spec: LossSpec = LossSpec(),
                  initial_rate: float = 1.0, backtrack_factor: float = 0.5,
                  max_backtracks: int = 20) -> tuple[NetworkState, float]:
    """Full-batch gradient step that only accepts a strict loss decrease.

    Rates ``initial_rate * backtrack_factor**j`` for ``j = 0..max_backtracks``
    are tried in turn.  If none lowers the loss the network is returned
    unchanged with an accepted rate of 0.
    """
    if not initial_rate > 0:
        raise ValueError(f"initial_rate must be > 0, got {initial_rate}")
    if not 0 < backtrack_factor < 1:
        raise ValueError(f"backtrack_factor must lie in (0, 1), got {backtrack_factor}")
    current, grads = backprop(net, batch, spec)
    _check_finite(grads)
    if grad_norm(grads) == 0:
        return net, 0.0
    for rate in backtracking_rates(initial_rate, backtrack_factor, max_backtracks):
        trial = apply_gradient(net, grads, rate)
        if dataset_loss(trial, batch, spec) < current:
            return trial, rate
    return net, 0.0


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    loss_p: int = 2
    monotone: bool = False
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    seed: int = 0

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss_p)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    grad_norm: float
    active_params: int


def effective_params(net: NetworkState) -> int:
    """Number of trainable parameters attached to active neurons of live layers."""
    total = 0
    for i, layer in enumerate(net.layers):
        if layer.dormant:
            continue
        rows = int(np.count_nonzero(layer.mask))
        cols = len(net.active_inputs(i))
        total += rows * cols + rows
        if layer.activation.trainable:
            total += 1
    return total


class Trainer:
    """Epoch-level driver shared by fixed and adaptive training."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.spec = config.loss_spec
        self.rng = np.random.default_rng(config.seed)
        self.state = OptimizerState()

    def run_epoch(self, net: NetworkState, data: LabeledDataset) -> NetworkState:
        cfg = self.config
        if cfg.monotone:
            net, _ = step_monotone(net, data, self.spec, cfg.learning_rate, cfg.backtrack_factor, cfg.max_backtracks)
            return net
        n = len(data)
        bs = n if cfg.batch_size <= 0 else min(cfg.batch_size, n)
        order = self.rng.permutation(n)
        for start in range(0, n, bs):
            batch = data.subset(order[start:start + bs])
            _, grads = backprop(net, batch, self.spec)
            step_fixed(net, grads, cfg.learning_rate, self.state, cfg.optimizer)
        return net

    def record(self, epoch: int, net: NetworkState, train: LabeledDataset,
               val: LabeledDataset | None) -> tuple[EpochRecord, Grads]:
        train_loss, grads = backprop(net, train, self.spec)
        val_loss = dataset_loss(net, val, self.spec) if val is not None else float("nan")
        rec = EpochRecord(epoch, train_loss, val_loss, grad_norm(grads), effective_params(net))
        return rec, grads


def train(net: NetworkState, train_data: LabeledDataset, val_data: LabeledDataset | None,
          config: TrainConfig) -> tuple[NetworkState, list[EpochRecord]]:
    """Train ``net`` (modified in place for fixed-step optimizers).

    The log holds one record per epoch, computed on the full training set
    after the epoch's updates.
    """
    trainer = Trainer(config)
    log = []
    for epoch in range(1, config.epochs + 1):
        net = trainer.run_epoch(net, train_data)
        rec, _ = trainer.record(epoch, net, train_data, val_data)
        if not math.isfinite(rec.train_loss):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        log.append(rec)
    return net, log


def format_training_log(log: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss,grad_norm,active_params"]
    for r in log:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.grad_norm!r},{r.active_params}")
    return "\n".join(lines) + "\n"


# -- serialization ----------------------------------------------------------

MAGIC = b"MNL"
FORMAT_VERSION = 1


def to_bytes(net: NetworkState) -> bytes:
    parts = [MAGIC + str(FORMAT_VERSION).encode(), struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIBdB", layer.fan_in, layer.fan_out, _TAGS[layer.activation.kind],
                                 layer.activation.alpha, int(layer.dormant)))
        parts.append(layer.mask.astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> NetworkState:
    if len(data) < 4 or data[:3] != MAGIC:
        raise FormatError("not an MNL model file (bad magic)")
    version = data[3:4].decode("ascii", errors="replace")
    if version != str(FORMAT_VERSION):
        raise FormatError(f"unsupported model format version {version!r}; this build reads version {FORMAT_VERSION}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated model file at byte {pos} (need {n} more bytes)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    if count == 0:
        raise FormatError("model file declares zero layers")
    layers = []
    for _ in range(count):
        fan_in, fan_out, tag, alpha, dormant = struct.unpack("<IIBdB", take(struct.calcsize("<IIBdB")))
        if tag not in _KIND_OF_TAG:
            raise FormatError(f"unknown activation tag {tag}")
        mask = np.frombuffer(take(fan_out), dtype=np.uint8).astype(bool)
        w = np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in).copy()
        b = np.frombuffer(take(8 * fan_out), dtype="<f8").copy()
        kind = _KIND_OF_TAG[tag]
        try:
            act = Activation(kind, alpha)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        layers.append(Layer(w, b, act, mask, bool(dormant)))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after model data")
    try:
        return NetworkState(layers, layers[0].fan_in)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"inconsistent model file: {exc}") from None


def save_network(net: NetworkState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(net))
    tmp.replace(path)


def load_network(path) -> NetworkState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        return from_bytes(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
