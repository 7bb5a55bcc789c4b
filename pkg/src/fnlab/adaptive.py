"""Self-growing networks.

Capacity is allocated up front as dormant neurons and dormant pass-through
layers.  Switching a neuron on sets its incoming weights and bias to zero
and its outgoing weights to small random values, so it emits ``P(0) = 0``
and the network function is unchanged while the incoming weights still
receive gradient.  Switching a layer on installs an identity matrix with a
PReLU of slope 1, again an exact identity.  Pruning is the reverse switch.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .datagate import LabeledDataset
from .errors import CapacityExhausted
from .netcore import (
    PRELU,
    Activation,
    EpochRecord,
    NetworkState,
    OptimizerState,
    TrainConfig,
    Trainer,
    effective_params,
    forward_batch,
)

OUTGOING_INIT = 0.01
PROBE_SIZE = 1000
ROUNDOFF_SLACK = 8 * np.finfo(np.float64).eps


@dataclass
class GrowthPolicy:
    """Switch thresholds. A threshold of 0 disables its criterion."""

    grad_threshold: float = 1e-3
    rel_improve_threshold: float = 1e-3
    window: int = 20
    width_step: int = 1
    target_val_loss: float = 0.0
    prune_threshold: float = 0.0
    prune_patience: int = 10
    max_active_width: int = 64
    max_active_depth: int = 8

    def __post_init__(self):
        for name in ("grad_threshold", "rel_improve_threshold", "prune_threshold"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.width_step < 1:
            raise ValueError(f"width_step must be >= 1, got {self.width_step}")
        if self.prune_patience < 1:
            raise ValueError(f"prune_patience must be >= 1, got {self.prune_patience}")
        if self.max_active_width < 1 or self.max_active_depth < 1:
            raise ValueError("max_active_width and max_active_depth must be >= 1")


class Decision(enum.Enum):
    NONE = "None"
    GROW_WIDTH = "GrowWidth"
    GROW_DEPTH = "GrowDepth"


WIDTH_GROW = "WidthGrow"
DEPTH_GROW = "DepthGrow"
PRUNE = "Prune"


@dataclass(frozen=True)
class GrowthEvent:
    epoch: int
    kind: str
    layer: int
    count: int
    pre_loss: float
    post_loss: float
    function_drift: float
    active_params: int
    neuron: int | None = None
    drift_bound: float | None = None


def default_probe(net: NetworkState, seed: int = 0, size: int = PROBE_SIZE) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(size, net.input_dim))


def function_drift(before: NetworkState, after: NetworkState, probe: np.ndarray) -> float:
    return float(np.max(np.abs(forward_batch(after, probe) - forward_batch(before, probe))))


def _loss_or_nan(net, data):
    return netcore.dataset_loss(net, data) if data is not None else float("nan")


def hidden_live_layers(net: NetworkState) -> list[int]:
    return [i for i in net.live_layers() if net.next_live(i) is not None]


# -- switches ---------------------------------------------------------------

def grow_width(net: NetworkState, layer_index: int, count: int, seed: int, *,
               probe: np.ndarray | None = None, data: LabeledDataset | None = None,
               epoch: int = 0) -> tuple[NetworkState, GrowthEvent]:
    """Activate ``count`` dormant neurons of a live hidden layer.

    Incoming weights and bias stay exactly 0; outgoing weights into the next
    live layer's active neurons are drawn uniform in ``[-0.01, 0.01]``.
    """
    layer = net.layers[layer_index]
    nxt = net.next_live(layer_index)
    if layer.dormant or nxt is None:
        raise ValueError(f"layer {layer_index} is not a live hidden layer")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    idle = np.flatnonzero(~layer.mask)
    if len(idle) < count:
        raise CapacityExhausted(f"layer {layer_index} has {len(idle)} dormant neurons, {count} requested")
    probe = default_probe(net) if probe is None else probe
    new = idle[:count]

    grown = net.copy()
    g_layer, g_next = grown.layers[layer_index], grown.layers[nxt]
    g_layer.mask[new] = True
    g_layer.weight[new, :] = 0.0
    g_layer.bias[new] = 0.0
    rows = np.flatnonzero(g_next.mask)
    rng = np.random.default_rng(seed)
    g_next.weight[np.ix_(rows, new)] = rng.uniform(-OUTGOING_INIT, OUTGOING_INIT, size=(len(rows), len(new)))

    event = GrowthEvent(epoch, WIDTH_GROW, layer_index, count, _loss_or_nan(net, data), _loss_or_nan(grown, data),
                        function_drift(net, grown, probe), effective_params(grown))
    return grown, event


def grow_depth(net: NetworkState, seed: int = 0, *, probe: np.ndarray | None = None,
               data: LabeledDataset | None = None, epoch: int = 0) -> tuple[NetworkState, GrowthEvent]:
    """Switch on the shallowest dormant layer as an exact identity map.

    ``seed`` is accepted for symmetry with :func:`grow_width`; the identity
    initialisation draws no random numbers.
    """
    del seed
    dormant = [i for i, layer in enumerate(net.layers) if layer.dormant]
    if not dormant:
        raise CapacityExhausted("no dormant layers left")
    probe = default_probe(net) if probe is None else probe
    index = dormant[0]
    grown = net.copy()
    layer = grown.layers[index]
    width = layer.fan_out
    layer.weight = np.eye(width)
    layer.bias = np.zeros(width)
    layer.activation = Activation(PRELU, 1.0)
    layer.mask = np.ones(width, dtype=bool)
    layer.dormant = False

    event = GrowthEvent(epoch, DEPTH_GROW, index, 1, _loss_or_nan(net, data), _loss_or_nan(grown, data),
                        function_drift(net, grown, probe), effective_params(grown))
    return grown, event


def _lipschitz(layer: netcore.Layer) -> float:
    if layer.activation.kind == netcore.IDENTITY:
        return 1.0
    return max(1.0, abs(layer.activation.alpha))


def _downstream_bound(net: NetworkState, nxt: int) -> float:
    """Lipschitz bound of everything after the pre-activation of layer ``nxt``."""
    bound = _lipschitz(net.layers[nxt])
    j = net.next_live(nxt)
    while j is not None:
        layer = net.layers[j]
        rows = np.flatnonzero(layer.mask)
        cols = net.active_inputs(j)
        block = layer.weight[np.ix_(rows, cols)]
        op = float(np.linalg.norm(block, 2)) if block.size else 0.0
        bound *= op * _lipschitz(layer)
        j = net.next_live(j)
    return bound


@dataclass
class PruneTracker:
    """Consecutive-epoch counters of neurons whose outgoing weights stay small."""

    below: dict = field(default_factory=dict)

    def reset(self, layer: int, neurons) -> None:
        for n in neurons:
            self.below.pop((layer, int(n)), None)


def _layer_outputs(net: NetworkState, index: int, probe: np.ndarray) -> np.ndarray:
    _, trace = netcore._forward_trace(net, probe)
    for i, rows, _, _, z in trace:
        if i == index:
            out = np.zeros((probe.shape[0], net.layers[i].fan_out))
            out[:, rows] = net.layers[i].activation(z)
            return out
    raise ValueError(f"layer {index} is not live")


def prune(net: NetworkState, policy: GrowthPolicy, tracker: PruneTracker | None = None, *,
          probe: np.ndarray | None = None, data: LabeledDataset | None = None,
          epoch: int = 0) -> tuple[NetworkState, list[GrowthEvent]]:
    """Deactivate neurons whose outgoing l1 weight norm stayed small.

    A neuron is pruned once its outgoing norm has been below
    ``policy.prune_threshold`` for ``policy.prune_patience`` consecutive
    calls sharing ``tracker``.  Each layer keeps at least one active neuron.
    Every event records its measured drift and the bound
    ``norm * max|activation| * L`` where ``L`` is the downstream Lipschitz
    product, plus a few ulps of the output magnitude for round-off.
    """
    tracker = tracker if tracker is not None else PruneTracker()
    if policy.prune_threshold <= 0:
        return net, []
    probe = default_probe(net) if probe is None else probe

    candidates = []
    for i in hidden_live_layers(net):
        nxt = net.next_live(i)
        layer, nlayer = net.layers[i], net.layers[nxt]
        rows = np.flatnonzero(nlayer.mask)
        for n in np.flatnonzero(layer.mask):
            key = (i, int(n))
            norm = float(np.sum(np.abs(nlayer.weight[rows, n])))
            if norm < policy.prune_threshold:
                tracker.below[key] = tracker.below.get(key, 0) + 1
                if tracker.below[key] >= policy.prune_patience:
                    candidates.append(key)
            else:
                tracker.below.pop(key, None)

    events = []
    current = net
    for i, n in candidates:
        layer = current.layers[i]
        if np.count_nonzero(layer.mask) <= 1:
            continue
        nxt = current.next_live(i)
        norm = float(np.sum(np.abs(current.layers[nxt].weight[:, n])))
        peak = float(np.max(np.abs(_layer_outputs(current, i, probe)[:, n])))
        # Round-off of the two forward passes is added to the exact-arithmetic bound.
        scale = float(np.max(np.abs(forward_batch(current, probe))))
        bound = norm * peak * _downstream_bound(current, nxt) + ROUNDOFF_SLACK * scale

        pruned = current.copy()
        pl = pruned.layers[i]
        pl.mask[n] = False
        pl.weight[n, :] = 0.0
        pl.bias[n] = 0.0
        pruned.layers[nxt].weight[:, n] = 0.0
        events.append(GrowthEvent(epoch, PRUNE, i, 1, _loss_or_nan(current, data), _loss_or_nan(pruned, data),
                                  function_drift(current, pruned, probe), effective_params(pruned),
                                  neuron=n, drift_bound=bound))
        tracker.reset(i, [n])
        current = pruned
    return current, events


# -- plateau detection ------------------------------------------------------

def relative_improvement(losses) -> float:
    first, last = float(losses[0]), float(losses[-1])
    if first == 0:
        return 0.0
    return (first - last) / first


def detect_plateau(history: list[EpochRecord], policy: GrowthPolicy, *,
                   width_available: bool = True, depth_available: bool = True) -> Decision:
    """Decide whether training has stalled enough to add capacity.

    Growth is signalled when the latest gradient norm is below
    ``grad_threshold`` or the relative loss improvement over the last
    ``window`` records is below ``rel_improve_threshold``, provided the
    validation loss (training loss when no validation loss was recorded)
    is still above ``target_val_loss``.  Width is preferred over depth.
    """
    if len(history) < policy.window:
        return Decision.NONE
    recent = history[-policy.window:]
    last = recent[-1]
    val = last.val_loss if math.isfinite(last.val_loss) else last.train_loss
    if not val > policy.target_val_loss:
        return Decision.NONE
    stalled_grad = policy.grad_threshold > 0 and last.grad_norm < policy.grad_threshold
    stalled_loss = (policy.rel_improve_threshold > 0
                    and relative_improvement([r.train_loss for r in recent]) < policy.rel_improve_threshold)
    if not (stalled_grad or stalled_loss):
        return Decision.NONE
    if width_available:
        return Decision.GROW_WIDTH
    if depth_available:
        return Decision.GROW_DEPTH
    return Decision.NONE


def width_target(net: NetworkState, policy: GrowthPolicy) -> int | None:
    """Narrowest live hidden layer that may still grow (shallowest on ties)."""
    best = None
    for i in hidden_live_layers(net):
        layer = net.layers[i]
        active = int(np.count_nonzero(layer.mask))
        if active < layer.fan_out and active < policy.max_active_width:
            if best is None or active < best[0]:
                best = (active, i)
    return None if best is None else best[1]


def depth_available(net: NetworkState, policy: GrowthPolicy) -> bool:
    has_dormant = any(layer.dormant for layer in net.layers)
    return has_dormant and len(hidden_live_layers(net)) < policy.max_active_depth


def _reset_moments(state: OptimizerState, layer: int, rows=None, cols=None) -> None:
    for name in ("w", "b"):
        key = (layer, name)
        if key not in state.m:
            continue
        for arr in (state.m[key], state.v[key]):
            if name == "w":
                if rows is not None:
                    arr[rows, :] = 0.0
                if cols is not None:
                    arr[:, cols] = 0.0
            elif rows is not None:
                arr[rows] = 0.0


# -- training ---------------------------------------------------------------

def train_adaptive(train: LabeledDataset, val: LabeledDataset | None, seed_net: NetworkState,
                   policy: GrowthPolicy, config: TrainConfig, epochs: int | None = None, *,
                   growth_seed: int = 0, probe: np.ndarray | None = None,
                   ) -> tuple[NetworkState, list[GrowthEvent], list[EpochRecord]]:
    """Train while switching capacity on and off.

    Per epoch: one optimisation pass, a prune pass, a full-batch record, then
    at most one growth event when :func:`detect_plateau` fires.  The plateau
    window restarts after every growth event.
    """
    epochs = config.epochs if epochs is None else epochs
    if probe is None:
        probe = train.inputs[:PROBE_SIZE]
    net = seed_net.copy()
    trainer = Trainer(config)
    tracker = PruneTracker()
    growth_log: list[GrowthEvent] = []
    train_log: list[EpochRecord] = []
    since_growth: list[EpochRecord] = []

    for epoch in range(1, epochs + 1):
        net = trainer.run_epoch(net, train)
        net, pruned = prune(net, policy, tracker, probe=probe, data=train, epoch=epoch)
        for ev in pruned:
            nxt = net.next_live(ev.layer)
            _reset_moments(trainer.state, ev.layer, rows=[ev.neuron])
            _reset_moments(trainer.state, nxt, cols=[ev.neuron])
        growth_log.extend(pruned)

        rec, _ = trainer.record(epoch, net, train, val)
        if not math.isfinite(rec.train_loss):
            raise netcore.DivergenceError(f"training loss became non-finite at epoch {epoch}")
        train_log.append(rec)
        since_growth.append(rec)

        target = width_target(net, policy)
        decision = detect_plateau(since_growth, policy, width_available=target is not None,
                                  depth_available=depth_available(net, policy))
        seed = growth_seed * 1_000_003 + epoch
        if decision is Decision.GROW_WIDTH:
            layer = net.layers[target]
            room = min(layer.fan_out, policy.max_active_width) - int(np.count_nonzero(layer.mask))
            count = min(policy.width_step, room)
            net, event = grow_width(net, target, count, seed, probe=probe, data=train, epoch=epoch)
            new = np.flatnonzero(net.layers[target].mask & ~layer.mask)
            tracker.reset(target, new)
            _reset_moments(trainer.state, net.next_live(target), cols=new)
        elif decision is Decision.GROW_DEPTH:
            net, event = grow_depth(net, seed, probe=probe, data=train, epoch=epoch)
        else:
            continue
        growth_log.append(event)
        since_growth = []
    return net, growth_log, train_log


def format_growth_log(events: list[GrowthEvent]) -> str:
    lines = ["epoch,kind,layer,count,pre_loss,post_loss,function_drift,active_params"]
    for e in events:
        lines.append(f"{e.epoch},{e.kind},{e.layer},{e.count},{e.pre_loss!r},{e.post_loss!r},"
                     f"{e.function_drift!r},{e.active_params}")
    return "\n".join(lines) + "\n"
