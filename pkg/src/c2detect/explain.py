"""Interpretability for a trained forest.

Permutation importance (OOB accuracy drop), minimal-depth statistics over the
tree structure, and partial dependence curves.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .forest import ForestModel, _unpack, oob_votes


class UnknownFeature(KeyError):
    pass


def _feature_index(model: ForestModel, feature) -> int:
    if isinstance(feature, (int, np.integer)):
        if not 0 <= feature < len(model.feature_names):
            raise UnknownFeature(feature)
        return int(feature)
    try:
        return model.feature_names.index(feature)
    except ValueError:
        raise UnknownFeature(feature) from None


def _oob_accuracy(mal, cnt, y) -> float:
    seen = cnt > 0
    pred = 2 * mal[seen] >= cnt[seen]
    return float(np.mean(pred == (y[seen] == 1))) if seen.any() else 0.0


def _all_tree_votes(model: ForestModel, X, y, trees=None):
    trees = range(model.n_trees) if trees is None else trees
    mal = np.zeros(len(X), dtype=np.int64)
    for t in trees:
        mal += model.trees[t].predict(X)
    return mal, np.full(len(X), len(trees), dtype=np.int64)


def permutation_importance(model: ForestModel, dataset, rng=None, repeats: int = 5,
                           oob: bool = True) -> np.ndarray:
    """Mean drop in forest OOB accuracy when one column is shuffled.

    Only trees that split on the feature can change their votes, so the others
    are reused from the unpermuted pass. A feature no tree uses scores 0.
    ``rng`` needs a ``permutation(n)`` method. With ``oob=False`` every tree
    votes on every row, for data the model was not trained on.
    """
    X, y, _, _ = _unpack(dataset)
    rng = np.random.default_rng(0) if rng is None else rng
    votes = oob_votes if oob else _all_tree_votes
    base_mal, base_cnt = votes(model, X, y)
    base_acc = _oob_accuracy(base_mal, base_cnt, y)
    vimp = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        users = [t for t, tree in enumerate(model.trees) if np.any(tree.feature == j)]
        if not users:
            continue
        old_mal, _ = votes(model, X, y, trees=users)
        drops = []
        for _ in range(repeats):
            Xp = X.copy()
            Xp[:, j] = X[rng.permutation(len(X)), j]
            new_mal, _ = votes(model, Xp, y, trees=users)
            acc = _oob_accuracy(base_mal - old_mal + new_mal, base_cnt, y)
            drops.append(base_acc - acc)
        vimp[j] = float(np.mean(drops))
    return vimp


def tree_min_depths(tree, n_features: int) -> np.ndarray:
    """Shallowest depth of a node splitting on each feature; depth(tree) + 1
    where the feature never splits."""
    depth = tree.node_depths()
    out = np.full(n_features, float(depth.max() + 1))
    internal = np.flatnonzero(tree.feature >= 0)
    for i in internal:
        f = tree.feature[i]
        out[f] = min(out[f], depth[i])
    return out


@dataclass
class ImportanceReport:
    feature_names: tuple[str, ...]
    mean_min_depth: np.ndarray
    times_a_root: np.ndarray
    n_nodes: np.ndarray
    vimp: np.ndarray
    is_top: np.ndarray

    def rows(self):
        for i, name in enumerate(self.feature_names):
            yield {
                "feature": name,
                "mean_min_depth": float(self.mean_min_depth[i]),
                "times_a_root": int(self.times_a_root[i]),
                "n_nodes": int(self.n_nodes[i]),
                "vimp": float(self.vimp[i]),
                "is_top": bool(self.is_top[i]),
            }


def minimal_depth_stats(model: ForestModel):
    """(mean_min_depth, times_a_root, n_nodes) arrays indexed by feature."""
    d = len(model.feature_names)
    if model.n_trees == 0:
        raise ValueError("model has no trees")
    depths = np.zeros(d)
    roots = np.zeros(d, dtype=np.int64)
    nodes = np.zeros(d, dtype=np.int64)
    for tree in model.trees:
        depths += tree_min_depths(tree, d)
        split = tree.feature[tree.feature >= 0]
        nodes += np.bincount(split, minlength=d)
        if tree.feature[0] >= 0:
            roots[tree.feature[0]] += 1
    return depths / model.n_trees, roots, nodes


def top_k_mask(mean_min_depth, k: int) -> np.ndarray:
    order = np.argsort(mean_min_depth, kind="stable")
    mask = np.zeros(len(mean_min_depth), dtype=bool)
    mask[order[:k]] = True
    return mask


def importance_report(model: ForestModel, dataset=None, rng=None, repeats: int = 5,
                      top_k: int = 11, oob: bool = True) -> ImportanceReport:
    mmd, roots, nodes = minimal_depth_stats(model)
    if dataset is not None:
        vimp = permutation_importance(model, dataset, rng, repeats, oob=oob)
    else:
        vimp = np.zeros(len(model.feature_names))
    return ImportanceReport(tuple(model.feature_names), mmd, roots, nodes, vimp,
                            top_k_mask(mmd, top_k))


MULTIWAY_COLUMNS = ("feature", "mean_min_depth", "times_a_root", "n_nodes", "vimp", "is_top")


def export_multiway_importance(report: ImportanceReport | None, path) -> None:
    """CSV table for a multi-way importance plot; ``None`` writes the header only."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MULTIWAY_COLUMNS)
        if report is None:
            return
        for r in report.rows():
            w.writerow([r["feature"], repr(r["mean_min_depth"]), r["times_a_root"],
                        r["n_nodes"], repr(r["vimp"]), int(r["is_top"])])


@dataclass
class PDPCurve:
    feature: str
    grid: np.ndarray
    avg_prediction: np.ndarray

    @property
    def total_variation(self) -> float:
        return float(np.abs(np.diff(self.avg_prediction)).sum())

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid", "avg_prediction"])
            for g, p in zip(self.grid, self.avg_prediction):
                w.writerow([repr(float(g)), repr(float(p))])

    def to_dict(self) -> dict:
        return {"feature": self.feature, "grid": self.grid.tolist(),
                "avg_prediction": self.avg_prediction.tolist()}


def quantile_grid(values, grid_size: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if not len(v):
        return np.zeros(0)
    return np.unique(np.quantile(v, np.linspace(0.0, 1.0, grid_size)))


def partial_dependence(model: ForestModel, dataset, feature, grid_size: int = 20,
                       grid=None) -> PDPCurve:
    """Average malicious vote fraction as ``feature`` sweeps a quantile grid,
    all other columns kept at their observed values."""
    j = _feature_index(model, feature)
    X, _, _, _ = _unpack(dataset)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    grid = quantile_grid(X[:, j], grid_size) if grid is None else np.unique(np.asarray(grid, float))
    avg = np.empty(len(grid))
    Xg = X.copy()
    for g, value in enumerate(grid):
        Xg[:, j] = value
        avg[g] = model.vote_fraction(Xg).mean()
    return PDPCurve(model.feature_names[j], grid, avg)


def explain_summary(report: ImportanceReport, curves) -> dict:
    return {
        "importance": list(report.rows()),
        "pdp": [c.to_dict() for c in curves],
    }


def write_summary(path, report: ImportanceReport, curves) -> None:
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, list):
            return [clean(v) for v in o]
        return o

    with open(path, "w") as fh:
        json.dump(clean(explain_summary(report, curves)), fh, indent=2)
        fh.write("\n")
