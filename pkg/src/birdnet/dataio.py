"""CSV loading, stratified fold plans, standardization, ANOVA F preselection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LabeledDataset",
    "Standardizer",
    "FoldPlan",
    "load_csv",
    "stratified_kfold",
    "anova_f_select",
    "fit_standardizer",
    "apply_standardizer",
]


@dataclass
class LabeledDataset:
    """A real-valued feature matrix with named features and k-class labels."""

    values: np.ndarray  # (n, d) float64
    feature_names: list[str]
    sample_ids: list[str]
    labels: np.ndarray  # (n,) int class indices in [0, k)
    class_names: list[str]
    n_rejected_rows: int = 0

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> int:
        return len(self.class_names)

    def subset(self, row_idx: np.ndarray, col_idx: np.ndarray | None = None) -> "LabeledDataset":
        cols = np.arange(self.d) if col_idx is None else np.asarray(col_idx)
        return LabeledDataset(
            values=self.values[np.ix_(np.asarray(row_idx), cols)],
            feature_names=[self.feature_names[c] for c in cols],
            sample_ids=[self.sample_ids[r] for r in np.asarray(row_idx)],
            labels=self.labels[np.asarray(row_idx)],
            class_names=list(self.class_names),
        )


@dataclass
class Standardizer:
    """Per-feature affine map (x - mean) / stddev, fitted on training rows only.

    Population (1/n) standard deviation; zero-variance features get stddev 1
    and are flagged constant, so they map to exactly 0.
    """

    means: np.ndarray
    stddevs: np.ndarray
    constant: np.ndarray  # bool, per feature


@dataclass
class FoldPlan:
    """Stratified fold assignment plus an early-stop validation mask."""

    fold_of_sample: np.ndarray  # (n,) int in [0, F)
    val_mask: np.ndarray  # (n,) bool
    seed: int
    folds: int

    def to_text(self) -> str:
        """Line-oriented audit format: one fold index per line."""
        return "\n".join(str(int(f)) for f in self.fold_of_sample) + "\n"


def load_csv(
    path: str,
    label_column: str,
    id_column: str | None = None,
    drop_columns: tuple[str, ...] = (),
) -> LabeledDataset:
    """Load a comma-separated, header-first CSV into a LabeledDataset.

    Every column other than the label (and optional id / dropped columns)
    must be numeric; a non-parseable cell is a hard error naming the cell.
    Rows that parse to NaN or +-inf are rejected and counted.
    Labels are factorized into class indices by first appearance.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise FileNotFoundError(f"cannot open dataset file {path!r}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row")
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        skip = set(drop_columns) | {label_column}
        if id_column is not None:
            if id_column not in header:
                raise ValueError(f"{path}: id column {id_column!r} not in header")
            skip.add(id_column)
        feat_cols = [i for i, name in enumerate(header) if name not in skip]
        label_col = header.index(label_column)
        id_col = header.index(id_column) if id_column is not None else None

        rows: list[list[float]] = []
        ids: list[str] = []
        raw_labels: list[str] = []
        n_rejected = 0
        for row_num, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: row {row_num} has {len(row)} cells, header has {len(header)}"
                )
            vals = []
            finite = True
            for c in feat_cols:
                cell = row[c].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric value {cell!r} at row {row_num}, "
                        f"column {header[c]!r}"
                    ) from None
                if not math.isfinite(v):
                    finite = False
                vals.append(v)
            label = row[label_col].strip()
            if label == "":
                raise ValueError(f"{path}: missing label at row {row_num}")
            if not finite:
                n_rejected += 1
                continue
            rows.append(vals)
            raw_labels.append(label)
            ids.append(row[id_col].strip() if id_col is not None else f"row{row_num}")

    if not rows:
        raise ValueError(f"{path}: no usable data rows")
    class_names: list[str] = []
    class_index: dict[str, int] = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        if lab not in class_index:
            class_index[lab] = len(class_names)
            class_names.append(lab)
        labels[i] = class_index[lab]
    feature_names = [header[c] for c in feat_cols]
    return LabeledDataset(
        values=np.asarray(rows, dtype=np.float64),
        feature_names=feature_names,
        sample_ids=ids,
        labels=labels,
        class_names=class_names,
        n_rejected_rows=n_rejected,
    )


def stratified_kfold(labels: np.ndarray, folds: int, seed: int, val_fraction: float = 0.15) -> FoldPlan:
    """Deterministic stratified fold plan with a per-fold early-stop mask.

    Per class, members are permuted by a PCG64 generator seeded with `seed`
    and dealt round-robin, so per-fold class counts are balanced within 1.
    `val_mask` marks a stratified `val_fraction` of each (fold, class) cell,
    giving every training fold (union of the other folds) the same fraction.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    rng = np.random.Generator(np.random.PCG64(seed))
    fold_of_sample = np.full(n, -1, dtype=np.int64)
    val_mask = np.zeros(n, dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < folds:
            raise ValueError(
                f"class {int(c)} has only {members.size} members, fewer than {folds} folds"
            )
        perm = rng.permutation(members)
        fold_of_sample[perm] = np.arange(perm.size) % folds
        for f in range(folds):
            cell = perm[np.arange(perm.size) % folds == f]
            n_val = int(round(val_fraction * cell.size))
            n_val = min(n_val, max(cell.size - 1, 0))
            val_mask[cell[:n_val]] = True
    return FoldPlan(fold_of_sample=fold_of_sample, val_mask=val_mask, seed=seed, folds=folds)


def stratified_holdout(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask marking a stratified held-out subset of the given fraction.

    Per class, a seeded permutation selects round(fraction * size) members,
    capped so at least one member stays out of the held-out set.
    """
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_held = min(int(round(fraction * members.size)), members.size - 1)
        mask[members[:n_held]] = True
    return mask


def anova_f_select(data: LabeledDataset, m: int) -> np.ndarray:
    """Indices of the m features with largest between/within class variance ratio.

    F = [sum_c n_c (xbar_c - xbar)^2 / (k-1)] / [sum_c sum_{i in c} (x_i - xbar_c)^2 / (n-k)].
    Zero within-class variance with nonzero between-class variance ranks as +inf;
    zero between-class variance gives F = 0. Ties break toward the lower index.
    """
    X, y = data.values, data.labels
    n, d = X.shape
    if m > d:
        raise ValueError(f"requested m={m} features but only d={d} available")
    classes = np.unique(y)
    k = classes.size
    if k < 2:
        raise ValueError("ANOVA F selection needs at least 2 classes")
    grand = X.mean(axis=0)
    between = np.zeros(d)
    within = np.zeros(d)
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        between += Xc.shape[0] * (mc - grand) ** 2
        within += ((Xc - mc) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = (between / (k - 1)) / (within / (n - k))
    F = np.where(between == 0.0, 0.0, F)
    F = np.where((within == 0.0) & (between > 0.0), np.inf, F)
    order = np.lexsort((np.arange(d), -F))  # stable: descending F, then lower index
    return np.sort(order[:m])


def fit_standardizer(rows: np.ndarray) -> Standardizer:
    """Fit per-feature mean and population stddev on training rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        raise ValueError("standardizer needs at least 2 training rows")
    means = rows.mean(axis=0)
    std = rows.std(axis=0)  # population (1/n)
    constant = std == 0.0
    std = np.where(constant, 1.0, std)
    return Standardizer(means=means, stddevs=std, constant=constant)


def apply_standardizer(s: Standardizer, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != s.means.shape[0]:
        raise ValueError(
            f"standardizer fitted on {s.means.shape[0]} features, got {rows.shape[1]}"
        )
    return (rows - s.means) / s.stddevs


def selection_to_text(indices: np.ndarray) -> str:
    """Line-oriented audit format for a feature selection: one index per line."""
    return "\n".join(str(int(i)) for i in indices) + "\n"
