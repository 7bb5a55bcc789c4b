"""Dataset existence checks.

A labeled sample set can only be the graph of a function if equal inputs
carry equal labels.  This module finds repeated inputs, decides whether the
label disagreement among them is within a noise tolerance, collapses the
duplicates to their mean label and produces deterministic train/validation
splits.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetTooSmall, EmptyDataset, FormatError, InvalidTolerance, ShapeError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """N samples ``(x_j, y_j)`` with ``x_j`` in R^k and ``y_j`` in R^l.

    Both arrays are stored as 2-D float64 arrays of shape ``(N, k)`` and
    ``(N, l)``.  1-D arrays are read as one coordinate per sample.
    """

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.ndim != 2 or y.ndim != 2:
            raise ShapeError("inputs and labels must be 1-D or 2-D arrays")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if x.shape[0] == 0:
            raise EmptyDataset("dataset has no samples")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite coordinates")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def k(self) -> int:
        return self.inputs.shape[1]

    @property
    def l(self) -> int:  # noqa: E743
        return self.labels.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx])

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.inputs.shape == other.inputs.shape
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class DuplicateGroup:
    member_indices: tuple[int, ...]
    representative_input: tuple[float, ...]
    label_spread: float


class Verdict(enum.Enum):
    FUNCTION_EXISTS = "FunctionExists"
    NOISY_BUT_AVERAGABLE = "NoisyButAveragable"
    NO_FUNCTION = "NoFunction"


@dataclass(frozen=True)
class ConsistencyReport:
    groups: list[DuplicateGroup]
    epsilon: float
    hard_conflicts: list[DuplicateGroup] = field(default_factory=list)
    verdict: Verdict = Verdict.FUNCTION_EXISTS


def _max_pairwise_l2(labels: np.ndarray) -> float:
    best = 0.0
    for i in range(len(labels)):
        d = labels[i + 1:] - labels[i]
        if len(d):
            best = max(best, float(np.sqrt(np.max(np.sum(d * d, axis=1)))))
    return best


def find_duplicate_groups(dataset: LabeledDataset, quant_tol: float = 0.0) -> list[DuplicateGroup]:
    """Group samples whose inputs coincide.

    With ``quant_tol == 0`` inputs must be equal coordinatewise.  With a
    positive tolerance each coordinate is snapped to the grid cell
    ``floor(c / quant_tol)`` and samples sharing a cell form a group, which
    keeps the relation transitive.  Groups are returned ordered by their
    smallest member index.
    """
    if dataset is None or dataset.n == 0:
        raise EmptyDataset("dataset has no samples")
    if quant_tol < 0 or not math.isfinite(quant_tol):
        raise InvalidTolerance(f"quant_tol must be a finite value >= 0, got {quant_tol}")

    if quant_tol == 0:
        keys = [tuple(row) for row in dataset.inputs.tolist()]
    else:
        cells = np.floor(dataset.inputs / quant_tol)
        keys = [tuple(row) for row in cells.tolist()]

    members: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        members.setdefault(key, []).append(i)

    groups = []
    for idx in members.values():
        if len(idx) < 2:
            continue
        groups.append(
            DuplicateGroup(
                member_indices=tuple(idx),
                representative_input=tuple(dataset.inputs[idx[0]].tolist()),
                label_spread=_max_pairwise_l2(dataset.labels[idx]),
            )
        )
    groups.sort(key=lambda g: g.member_indices[0])
    return groups


def check_consistency(dataset: LabeledDataset, groups: list[DuplicateGroup], epsilon: float) -> ConsistencyReport:
    """Classify the dataset given its duplicate groups and a noise level."""
    if not epsilon > 0 or not math.isfinite(epsilon):
        raise InvalidTolerance(f"epsilon must be a finite value > 0, got {epsilon}")
    for g in groups:
        if max(g.member_indices) >= dataset.n:
            raise ValueError("duplicate group refers to an index outside the dataset")

    conflicts = [g for g in groups if g.label_spread >= epsilon]
    if conflicts:
        verdict = Verdict.NO_FUNCTION
    elif all(g.label_spread == 0 for g in groups):
        verdict = Verdict.FUNCTION_EXISTS
    else:
        verdict = Verdict.NOISY_BUT_AVERAGABLE
    return ConsistencyReport(groups=list(groups), epsilon=float(epsilon), hard_conflicts=conflicts, verdict=verdict)


def average_duplicates(dataset: LabeledDataset, groups: list[DuplicateGroup]) -> LabeledDataset:
    """Replace every duplicate group by one sample carrying the mean label.

    The merged sample takes the position of the group's first member.  Means
    are accumulated in ascending index order.
    """
    if not groups:
        return dataset
    first_of = {}
    dropped = set()
    for g in groups:
        first_of[g.member_indices[0]] = g
        dropped.update(g.member_indices[1:])

    xs, ys = [], []
    for i in range(dataset.n):
        if i in dropped:
            continue
        g = first_of.get(i)
        if g is None:
            xs.append(dataset.inputs[i])
            ys.append(dataset.labels[i])
            continue
        acc = np.zeros(dataset.l)
        for j in g.member_indices:
            acc = acc + dataset.labels[j]
        xs.append(np.asarray(g.representative_input, dtype=np.float64))
        ys.append(acc / len(g.member_indices))
    return LabeledDataset(np.array(xs), np.array(ys))


def split_sizes(n: int, validation_fraction: float) -> tuple[int, int]:
    n_val = int(round(n * validation_fraction))
    n_val = min(max(n_val, 1), n - 1)
    return n - n_val, n_val


def split(dataset: LabeledDataset, validation_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Shuffle with ``seed`` and cut off ``round(N * fraction)`` validation samples.

    The validation size is clamped to ``[1, N - 1]``.  Both parts keep the
    original sample order.
    """
    if dataset.n < 2:
        raise DatasetTooSmall(f"need at least 2 samples to split, got {dataset.n}")
    if not 0 < validation_fraction < 1:
        raise ValueError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    _, n_val = split_sizes(dataset.n, validation_fraction)
    perm = np.random.default_rng(seed).permutation(dataset.n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


# -- file formats -----------------------------------------------------------

def parse_dataset_csv(text: str) -> LabeledDataset:
    """Parse ``x1,...,xk,y1,...,yl`` CSV text."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("line 1: missing header")
    header = [h.strip() for h in rows[0]]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not xcols or not ycols or len(xcols) + len(ycols) != len(header) or max(xcols) > min(ycols):
        raise FormatError(f"line 1: header must be x1..xk,y1..yl, got {','.join(header)}")
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"line {lineno}: non-finite value")
        xs.append([vals[i] for i in xcols])
        ys.append([vals[i] for i in ycols])
    if not xs:
        raise EmptyDataset("dataset file has no samples")
    return LabeledDataset(np.array(xs), np.array(ys))


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        return parse_dataset_csv(text)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def format_dataset_csv(dataset: LabeledDataset) -> str:
    header = [f"x{i + 1}" for i in range(dataset.k)] + [f"y{i + 1}" for i in range(dataset.l)]
    lines = [",".join(header)]
    for x, y in zip(dataset.inputs.tolist(), dataset.labels.tolist()):
        lines.append(",".join(repr(v) for v in x + y))
    return "\n".join(lines) + "\n"


def save_dataset(dataset: LabeledDataset, path) -> None:
    Path(path).write_text(format_dataset_csv(dataset), encoding="utf-8")


def format_report_csv(report: ConsistencyReport) -> str:
    conflict_ids = {id(g) for g in report.hard_conflicts}
    out = ["group_id,member_indices,label_spread,conflict"]
    for gid, g in enumerate(report.groups):
        members = " ".join(str(i) for i in g.member_indices)
        out.append(f"{gid},{members},{g.label_spread!r},{int(id(g) in conflict_ids)}")
    out.append(f"# verdict={report.verdict.value} epsilon={report.epsilon!r}")
    return "\n".join(out) + "\n"
