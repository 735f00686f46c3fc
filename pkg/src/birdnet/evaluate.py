"""Metrics and the cross-validated evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from birdnet.dataio import (
    LabeledDataset,
    anova_f_select,
    apply_standardizer,
    fit_standardizer,
    stratified_holdout,
    stratified_kfold,
)
from birdnet.builder import ConstructionReport, build_birdnet
from birdnet.explain import RuleRecord, extract_rules
from birdnet.mining import MiningConfig
from birdnet.network import BirNetwork, active_param_count, to_matched_mlp
from birdnet.trainer import TrainConfig, train

__all__ = [
    "PipelineConfig",
    "FoldResult",
    "CVResult",
    "auroc_macro_ovr",
    "accuracy",
    "cross_validate",
    "holdout_rules_run",
]


@dataclass
class PipelineConfig:
    mining: MiningConfig = field(default_factory=MiningConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    preselect_m: int | None = None  # None: auto (2000 when d > 2000)
    depth: int = 2
    head_hidden: int = 32
    seed: int = 42
    val_fraction: float = 0.15
    rule_min_support: int = 10
    threads: int = 1


def auroc_macro_ovr(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """One-vs-rest macro AUROC with midrank tie handling.

    Scores may be logits or probabilities (AUROC is rank-based). Classes
    without both a positive and a negative are skipped; their indices are
    returned alongside the mean over evaluable classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    k = scores.shape[1]
    aucs = []
    skipped = []
    for c in range(k):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = pos.shape[0] - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        col = scores[:, c]
        order = np.argsort(col, kind="stable")
        ranks = np.empty(col.shape[0])
        sorted_col = col[order]
        # midranks over tied groups
        i = 0
        while i < sorted_col.shape[0]:
            j = i
            while j + 1 < sorted_col.shape[0] and sorted_col[j + 1] == sorted_col[i]:
                j += 1
            ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise ValueError("no class with both positives and negatives")
    return float(np.mean(aucs)), skipped


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    preds = np.asarray(scores).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


@dataclass
class FoldResult:
    fold: int
    auroc: float
    acc: float
    skipped_classes: list[int]
    accounting: dict[str, int]
    net: BirNetwork
    report: ConstructionReport


@dataclass
class CVResult:
    folds: list[FoldResult]
    matched_folds: list[FoldResult] | None = None

    @staticmethod
    def _agg(vals: list[float]) -> tuple[float, float]:
        a = np.asarray(vals)
        return float(a.mean()), float(a.std())  # population std across folds

    def summary(self) -> dict[str, float]:
        auroc_m, auroc_s = self._agg([f.auroc for f in self.folds])
        acc_m, acc_s = self._agg([f.acc for f in self.folds])
        out = {
            "auroc_mean": auroc_m,
            "auroc_std": auroc_s,
            "acc_mean": acc_m,
            "acc_std": acc_s,
        }
        for key in ("width", "bir_active", "total_active"):
            out[f"{key}_mean"] = float(np.mean([f.accounting[key] for f in self.folds]))
        if self.matched_folds is not None:
            m_auroc, _ = self._agg([f.auroc for f in self.matched_folds])
            m_acc, _ = self._agg([f.acc for f in self.matched_folds])
            out["matched_auroc_mean"] = m_auroc
            out["matched_acc_mean"] = m_acc
            matched_total = float(
                np.mean([f.accounting["total_active"] for f in self.matched_folds])
            )
            out["matched_total_active_mean"] = matched_total
            out["compression_ratio"] = matched_total / out["total_active_mean"]
        return out

    def to_csv(self) -> str:
        lines = ["fold,model,auroc,accuracy,width,bir_active,total_active"]

        def rows(folds, name):
            for f in folds:
                a = f.accounting
                lines.append(
                    f"{f.fold},{name},{f.auroc!r},{f.acc!r},"
                    f"{a['width']},{a['bir_active']},{a['total_active']}"
                )

        rows(self.folds, "birdnet")
        if self.matched_folds is not None:
            rows(self.matched_folds, "matched_mlp")
        s = self.summary()
        lines.append(f"mean,birdnet,{s['auroc_mean']!r},{s['acc_mean']!r},,,")
        lines.append(f"std,birdnet,{s['auroc_std']!r},{s['acc_std']!r},,,")
        if self.matched_folds is not None:
            lines.append(
                f"mean,matched_mlp,{s['matched_auroc_mean']!r},{s['matched_acc_mean']!r},,,"
            )
            lines.append(f"ratio,matched_over_birdnet,{s['compression_ratio']!r},,,,")
        return "\n".join(lines) + "\n"


def _prepare_fold(dataset: LabeledDataset, train_rows: np.ndarray, cfg: PipelineConfig):
    """Feature selection and standardization, fitted on training rows only."""
    train_ds = dataset.subset(train_rows)
    m = cfg.preselect_m
    if m is None and dataset.d > 2000:
        m = 2000
    if m is not None and m < dataset.d:
        cols = anova_f_select(train_ds, m)
    else:
        cols = np.arange(dataset.d)
    std = fit_standardizer(dataset.values[np.ix_(train_rows, cols)])
    return cols, std


def _fit_fold(
    dataset: LabeledDataset,
    train_rows: np.ndarray,
    val_mask: np.ndarray,
    cfg: PipelineConfig,
    matched: bool,
):
    cols, std = _prepare_fold(dataset, train_rows, cfg)
    names = [dataset.feature_names[c] for c in cols]
    X_train_full = apply_standardizer(std, dataset.values[np.ix_(train_rows, cols)])
    y_train_full = dataset.labels[train_rows]
    net, report = build_birdnet(
        X_train_full,
        names,
        dataset.class_names,
        cfg.mining,
        depth=cfg.depth,
        head_hidden=cfg.head_hidden,
        seed=cfg.seed,
        dropout=cfg.training.dropout,
        threads=cfg.threads,
    )
    if matched:
        net = to_matched_mlp(net, seed=cfg.seed)
    val_local = val_mask[train_rows]
    net, history = train(
        net,
        X_train_full[~val_local],
        y_train_full[~val_local],
        X_train_full[val_local],
        y_train_full[val_local],
        cfg.training,
    )
    net.meta["trained"] = True
    net.meta["standardizer"] = {
        "means": std.means.tolist(),
        "stddevs": std.stddevs.tolist(),
        "constant": std.constant.astype(int).tolist(),
    }
    net.meta["selected_features"] = [int(c) for c in cols]
    return net, report, history, cols, std


def cross_validate(
    dataset: LabeledDataset, cfg: PipelineConfig, include_matched: bool = False
) -> CVResult:
    """Stratified k-fold evaluation per the standard protocol: preselect,
    standardize, and mine on each training fold only; hold out a stratified
    15% of the training fold for early stopping; score on the test fold."""
    plan = stratified_kfold(dataset.labels, cfg.folds, cfg.seed, cfg.val_fraction)
    results: list[FoldResult] = []
    matched_results: list[FoldResult] = []
    for f in range(cfg.folds):
        test_rows = np.flatnonzero(plan.fold_of_sample == f)
        train_rows = np.flatnonzero(plan.fold_of_sample != f)
        for is_matched, sink in ((False, results), (True, matched_results)):
            if is_matched and not include_matched:
                continue
            net, report, _, cols, std = _fit_fold(
                dataset, train_rows, plan.val_mask, cfg, matched=is_matched
            )
            X_test = apply_standardizer(std, dataset.values[np.ix_(test_rows, cols)])
            logits, _ = net.forward(X_test, mode="eval")
            auroc, skipped = auroc_macro_ovr(logits, dataset.labels[test_rows])
            acc = accuracy(logits, dataset.labels[test_rows])
            sink.append(
                FoldResult(
                    fold=f,
                    auroc=auroc,
                    acc=acc,
                    skipped_classes=skipped,
                    accounting=active_param_count(net),
                    net=net,
                    report=report,
                )
            )
    return CVResult(folds=results, matched_folds=matched_results if include_matched else None)


def holdout_rules_run(
    dataset: LabeledDataset,
    cfg: PipelineConfig,
    test_fraction: float = 0.2,
) -> tuple[BirNetwork, list[RuleRecord], ConstructionReport]:
    """Single stratified split: train on (1 - test_fraction) of the data,
    estimate rule precision/recall/lift/support on the held-out remainder."""
    test_mask = stratified_holdout(dataset.labels, test_fraction, cfg.seed)
    train_rows = np.flatnonzero(~test_mask)
    val_mask = np.zeros(dataset.n, dtype=bool)
    val_mask[train_rows] = stratified_holdout(
        dataset.labels[train_rows], cfg.val_fraction, cfg.seed + 1
    )
    net, report, _, cols, std = _fit_fold(dataset, train_rows, val_mask, cfg, matched=False)
    test_rows = np.flatnonzero(test_mask)
    X_test = apply_standardizer(std, dataset.values[np.ix_(test_rows, cols)])
    rules = extract_rules(net, X_test, dataset.labels[test_rows], cfg.rule_min_support)
    return net, rules, report
