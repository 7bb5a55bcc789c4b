"""Piecewise-constant (simple function) approximation.

The fitted model is a lookup table over axis-aligned cells: the bounding box
of the training inputs is bisected recursively at the midpoint of its widest
side, and every leaf stores the mean label of the samples inside it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagate import LabeledDataset
from .errors import EmptyDataset, EmptyNeighborhood, FormatError

BOX_INFLATE = 1e-9


@dataclass
class Cell:
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    value: np.ndarray
    count: int
    axis: int | None = None
    threshold: float | None = None
    left: "Cell | None" = None
    right: "Cell | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class PiecewiseConstantModel:
    root: Cell
    max_depth: int
    var_tol: float
    min_count: int
    k: int
    l: int  # noqa: E741
    _leaves: list = field(default=None, repr=False)

    def leaves(self) -> list[Cell]:
        if self._leaves is None:
            out, stack = [], [self.root]
            while stack:
                c = stack.pop()
                if c.is_leaf:
                    out.append(c)
                else:
                    stack.extend((c.right, c.left))
            self._leaves = out
        return self._leaves

    @property
    def depth(self) -> int:
        return max(c.depth for c in self.leaves())

    def predict(self, x) -> np.ndarray:
        """Vectorised :func:`eval_simple` over a batch of shape ``(N, k)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.k)
        x = np.clip(x, self.root.lo, self.root.hi)
        out = np.empty((x.shape[0], self.l))
        stack = [(self.root, np.arange(x.shape[0]))]
        while stack:
            cell, idx = stack.pop()
            if cell.is_leaf:
                out[idx] = cell.value
                continue
            go_right = x[idx, cell.axis] >= cell.threshold
            stack.append((cell.left, idx[~go_right]))
            stack.append((cell.right, idx[go_right]))
        return out


def _variance(labels: np.ndarray, mean: np.ndarray) -> float:
    d = labels - mean
    return float(np.mean(np.sum(d * d, axis=1)))


def _split_geometry(lo: np.ndarray, hi: np.ndarray) -> tuple[int, float]:
    axis = int(np.argmax(hi - lo))
    return axis, 0.5 * (lo[axis] + hi[axis])


def fit_simple(train: LabeledDataset, max_depth: int = 20, var_tol: float = 0.0,
               min_count: int = 1) -> PiecewiseConstantModel:
    """Fit a piecewise-constant model by recursive midpoint bisection.

    A cell is split while its label variance exceeds ``var_tol``, it holds at
    least ``2 * min_count`` samples and its depth is below ``max_depth``.
    Points on a split plane go to the upper cell.  A cell that receives no
    samples inherits its parent's value.
    """
    if train is None or len(train) == 0:
        raise EmptyDataset("cannot fit a simple function to an empty dataset")
    if max_depth < 0 or var_tol < 0 or min_count < 1:
        raise ValueError("need max_depth >= 0, var_tol >= 0 and min_count >= 1")
    x, y = train.inputs, train.labels
    lo = x.min(axis=0) - BOX_INFLATE
    hi = x.max(axis=0) + BOX_INFLATE

    def build(idx, lo, hi, depth, fallback):
        if len(idx):
            value = np.mean(y[idx], axis=0)
        else:
            value = fallback.copy()
        cell = Cell(lo, hi, depth, value, len(idx))
        if (depth < max_depth and len(idx) >= 2 * min_count
                and _variance(y[idx], value) > var_tol):
            axis, mid = _split_geometry(lo, hi)
            right = x[idx, axis] >= mid
            lhi, rlo = hi.copy(), lo.copy()
            lhi[axis] = mid
            rlo[axis] = mid
            cell.axis, cell.threshold = axis, mid
            cell.left = build(idx[~right], lo, lhi, depth + 1, value)
            cell.right = build(idx[right], rlo, hi, depth + 1, value)
        return cell

    root = build(np.arange(len(train)), lo, hi, 0, np.zeros(train.l))
    return PiecewiseConstantModel(root, max_depth, var_tol, min_count, train.k, train.l)


def eval_simple(model: PiecewiseConstantModel, x) -> np.ndarray:
    """Value of the leaf containing ``x``, clamped to the bounding box first."""
    return model.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


def radius_average_predict(train: LabeledDataset, x, r: float) -> np.ndarray:
    """Mean label of the training points within Euclidean distance ``r`` of ``x``."""
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = train.inputs - x
    inside = np.flatnonzero(np.sqrt(np.sum(d * d, axis=1)) <= r)
    if len(inside) == 0:
        raise EmptyNeighborhood(f"no training point within radius {r} of {x.tolist()}")
    return np.mean(train.labels[inside], axis=0)


def _settle(xs: np.ndarray, q: np.ndarray, r: float, edge: np.ndarray, lower: bool) -> np.ndarray:
    """Move window edges until they agree with the exact test ``|x - q| <= r``.

    ``q - r`` is rounded, so the searchsorted edge can be off by a few
    points; stepping over whole runs of equal values keeps duplicates together.
    """
    n = len(xs)
    edge = edge.copy()
    while True:
        if lower:
            inner_bad = (edge < n) & (np.abs(xs[np.minimum(edge, n - 1)] - q) > r) & (xs[np.minimum(edge, n - 1)] < q)
            outer_ok = (edge > 0) & (np.abs(xs[np.maximum(edge - 1, 0)] - q) <= r)
            edge[inner_bad] = np.searchsorted(xs, xs[edge[inner_bad]], side="right")
            edge[outer_ok] = np.searchsorted(xs, xs[edge[outer_ok] - 1], side="left")
        else:
            inner_bad = (edge > 0) & (np.abs(xs[np.maximum(edge - 1, 0)] - q) > r) & (xs[np.maximum(edge - 1, 0)] > q)
            outer_ok = (edge < n) & (np.abs(xs[np.minimum(edge, n - 1)] - q) <= r)
            edge[inner_bad] = np.searchsorted(xs, xs[edge[inner_bad] - 1], side="left")
            edge[outer_ok] = np.searchsorted(xs, xs[edge[outer_ok]], side="right")
        if not (inner_bad.any() or outer_ok.any()):
            return edge


def radius_average_batch(train: LabeledDataset, xs, r: float, fallback=None) -> np.ndarray:
    """:func:`radius_average_predict` over a batch of 1-D queries.

    Uses a sorted sweep, so it only supports ``k == 1``.  Queries with an
    empty neighborhood get ``fallback`` or raise :class:`EmptyNeighborhood`.
    """
    if train.k != 1:
        return np.array([radius_average_predict(train, q, r) for q in np.asarray(xs).reshape(len(xs), -1)])
    order = np.argsort(train.inputs[:, 0], kind="stable")
    xs_sorted = train.inputs[order, 0]
    csum = np.vstack([np.zeros(train.l), np.cumsum(train.labels[order], axis=0)])
    q = np.asarray(xs, dtype=np.float64).reshape(-1)
    lo = _settle(xs_sorted, q, r, np.searchsorted(xs_sorted, q - r, side="left"), lower=True)
    hi = _settle(xs_sorted, q, r, np.searchsorted(xs_sorted, q + r, side="right"), lower=False)
    counts = hi - lo
    if np.any(counts == 0) and fallback is None:
        bad = q[counts == 0][0]
        raise EmptyNeighborhood(f"no training point within radius {r} of {bad!r}")
    out = np.empty((len(q), train.l))
    ok = counts > 0
    out[ok] = (csum[hi[ok]] - csum[lo[ok]]) / counts[ok, None]
    if fallback is not None:
        out[~ok] = fallback
    return out


# -- text format ------------------------------------------------------------

def dumps(model: PiecewiseConstantModel) -> str:
    """One leaf per line: ``depth,lo_1..lo_k,hi_1..hi_k,count,value_1..value_l``."""
    lines = [f"# k={model.k} l={model.l} max_depth={model.max_depth} "
             f"var_tol={model.var_tol!r} min_count={model.min_count}"]
    for c in model.leaves():
        fields = [str(c.depth)] + [repr(v) for v in c.lo.tolist()] + [repr(v) for v in c.hi.tolist()]
        fields += [str(c.count)] + [repr(v) for v in c.value.tolist()]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def loads(text: str) -> PiecewiseConstantModel:
    """Rebuild a model from :func:`dumps` output.

    Internal nodes are not stored; the split geometry is deterministic given
    the root box, so the tree is regrown until each leaf's box is reached.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise FormatError("line 1: missing simple-function header")
    try:
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        k, l = int(meta["k"]), int(meta["l"])  # noqa: E741
        max_depth, var_tol, min_count = int(meta["max_depth"]), float(meta["var_tol"]), int(meta["min_count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"line 1: bad header ({exc})") from None

    leaves = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2 + 2 * k + l:
            raise FormatError(f"line {lineno}: expected {2 + 2 * k + l} fields, got {len(parts)}")
        try:
            depth = int(parts[0])
            lo = tuple(float(v) for v in parts[1:1 + k])
            hi = tuple(float(v) for v in parts[1 + k:1 + 2 * k])
            count = int(parts[1 + 2 * k])
            value = np.array([float(v) for v in parts[2 + 2 * k:]])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        leaves[(lo, hi)] = (depth, count, value)
    if not leaves:
        raise FormatError("model has no leaves")

    root_lo = np.min([np.array(b[0]) for b in leaves], axis=0)
    root_hi = np.max([np.array(b[1]) for b in leaves], axis=0)
    used = 0

    def rebuild(lo, hi, depth):
        nonlocal used
        key = (tuple(lo.tolist()), tuple(hi.tolist()))
        if key in leaves:
            d, count, value = leaves[key]
            if d != depth:
                raise FormatError(f"leaf {key} recorded at depth {d}, expected {depth}")
            used += 1
            return Cell(lo, hi, depth, value, count)
        if depth >= max_depth:
            raise FormatError("leaf boxes do not tile the bounding box")
        axis, mid = _split_geometry(lo, hi)
        lhi, rlo = hi.copy(), lo.copy()
        lhi[axis] = mid
        rlo[axis] = mid
        left = rebuild(lo, lhi, depth + 1)
        right = rebuild(rlo, hi, depth + 1)
        return Cell(lo, hi, depth, np.zeros(l), left.count + right.count, axis, mid, left, right)

    root = rebuild(root_lo, root_hi, 0)
    if used != len(leaves):
        raise FormatError("model file contains leaves outside the reconstructed tree")
    return PiecewiseConstantModel(root, max_depth, var_tol, min_count, k, l)


def save_model(model: PiecewiseConstantModel, path) -> None:
    Path(path).write_text(dumps(model), encoding="utf-8")


def load_model(path) -> PiecewiseConstantModel:
    path = Path(path)
    try:
        return loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
