"""CART classification trees and a down-sampled (balanced) random forest.

Classes are binary: 1 = malicious (positive), 0 = unknown. Missing feature
values (NaN) always route to the left child. Every tree draws its bootstrap
and its split features from independent RNG streams derived from
``(seed, tree_index)``, so the thread count never changes the model.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

MODEL_VERSION = "c2detect-forest/1"


class SingleClassDataset(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


class EmptyGrid(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 2500
    mtry: int = 10
    min_leaf_size: int = 1
    max_depth: int | None = None
    seed: int = 0
    balance: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 when given")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in ("n_trees", "mtry", "min_leaf_size", "max_depth", "seed", "balance") if k in d}
        return cls(**known)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=bool)
        y_pred = np.asarray(y_pred, dtype=bool)
        return cls(
            tp=int(np.sum(y_true & y_pred)),
            fp=int(np.sum(~y_true & y_pred)),
            tn=int(np.sum(~y_true & ~y_pred)),
            fn=int(np.sum(y_true & ~y_pred)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _rate(num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def accuracy(self) -> float:
        return self._rate(self.tp + self.tn, self.total)

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy if self.total else 0.0

    @property
    def tpr(self) -> float:
        return self._rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self._rate(self.fp, self.fp + self.tn)

    @property
    def fnr(self) -> float:
        return self._rate(self.fn, self.fn + self.tp)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "error": self.error,
            "tpr": self.tpr, "fpr": self.fpr, "fnr": self.fnr,
        }


# -- bootstrap ---------------------------------------------------------------

def balanced_bootstrap(y, rng, balance: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Draw one tree's in-bag multiset.

    With ``balance`` the minority class (size m) is bootstrapped m times and
    the majority class sampled m times with replacement; otherwise n rows are
    drawn from all n. Returns (sorted in-bag indices, sorted OOB indices).
    """
    y = np.asarray(y)
    n = len(y)
    if balance:
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == 0)
        if len(pos) == 0 or len(neg) == 0:
            raise SingleClassDataset("balanced bootstrap needs both classes")
        minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
        m = len(minority)
        in_bag = np.concatenate([
            minority[rng.integers(0, m, size=m)],
            majority[rng.integers(0, len(majority), size=m)],
        ])
    else:
        in_bag = rng.integers(0, n, size=n)
    in_bag.sort()
    drawn = np.zeros(n, dtype=bool)
    drawn[in_bag] = True
    return in_bag, np.flatnonzero(~drawn)


def tree_streams(seed: int, tree_index: int):
    """Independent (bootstrap, growth) generators for one tree."""
    boot, grow = np.random.SeedSequence(seed, spawn_key=(tree_index,)).spawn(2)
    return np.random.default_rng(boot), np.random.default_rng(grow)


# -- trees -------------------------------------------------------------------

@dataclass
class DecisionTree:
    """Array-encoded binary tree in depth-first preorder; node 0 is the root.

    Leaves have ``feature == -1``. ``counts[i]`` holds weighted (unknown,
    malicious) in-bag counts reaching node i.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    in_bag: np.ndarray | None = field(default=None, repr=False)
    oob: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def leaf_class(self) -> np.ndarray:
        # ties go to malicious
        return (self.counts[:, 1] >= self.counts[:, 0]).astype(np.int64)

    def node_depths(self) -> np.ndarray:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):  # preorder: parents precede children
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return depth

    @property
    def depth(self) -> int:
        return int(self.node_depths().max())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = rows
        while len(active):
            f = self.feature[node[active]]
            internal = f >= 0
            active = active[internal]
            if not len(active):
                break
            cur = node[active]
            x = X[active, self.feature[cur]]
            go_left = np.isnan(x) | (x <= self.threshold[cur])
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    def predict(self, X) -> np.ndarray:
        return self.leaf_class[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({
                    "feature_index": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "missing_goes_left": True,
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                    "vote_counts": [int(c) for c in self.counts[i]],
                })
            else:
                nodes.append({
                    "class": int(self.leaf_class[i]),
                    "vote_counts": [int(c) for c in self.counts[i]],
                })
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        nodes = d["nodes"]
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        counts = np.zeros((n, 2), dtype=np.int64)
        for i, nd in enumerate(nodes):
            counts[i] = nd["vote_counts"]
            if "feature_index" in nd:
                feature[i] = nd["feature_index"]
                threshold[i] = nd["threshold"]
                left[i] = nd["left"]
                right[i] = nd["right"]
        return cls(feature, threshold, left, right, counts)


def _midpoint(a: float, b: float) -> float:
    mid = a + (b - a) / 2.0
    return mid if a <= mid < b else a


def best_split(X, y, w, rows, features, min_leaf_size: int = 1):
    """Best (feature, threshold, score) over ``features`` for the node ``rows``.

    ``score`` is the sum over children of (sum of squared class weights / child
    weight); maximising it minimises the weighted Gini impurity of the
    children. Returns None when no candidate split improves on the parent.
    Ties keep the first feature in ``features`` and the lowest threshold.
    """
    features = np.asarray(features)
    wr = w[rows]
    w1 = wr * y[rows]
    w0 = wr - w1
    t0, t1 = w0.sum(), w1.sum()
    total = t0 + t1
    parent = (t0 * t0 + t1 * t1) / total
    if len(rows) < 2:
        return None
    x = X[np.ix_(rows, features)]
    nan = np.isnan(x)
    order = np.argsort(x, axis=0, kind="stable")  # NaN sorts last
    xs = np.take_along_axis(x, order, axis=0)
    # comparisons against NaN are False, so the NaN tail never yields a split
    distinct = xs[:-1] < xs[1:]
    n0 = (w0[:, None] * nan).sum(axis=0)
    n1 = (w1[:, None] * nan).sum(axis=0)
    c0 = np.cumsum(w0[order], axis=0)[:-1] + n0
    c1 = np.cumsum(w1[order], axis=0)[:-1] + n1
    nl = c0 + c1
    nr = total - nl
    valid = distinct & (nl >= min_leaf_size) & (nr >= min_leaf_size)
    r0 = t0 - c0
    r1 = t1 - c1
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (c0 * c0 + c1 * c1) / nl + (r0 * r0 + r1 * r1) / nr
    score[~valid] = -np.inf
    pos = np.argmax(score, axis=0)
    col_best = score[pos, np.arange(len(features))]
    best = None
    best_score = parent + 1e-12 * total  # guard against float noise posing as gain
    for k in range(len(features)):
        if col_best[k] > best_score:
            best_score = col_best[k]
            i = pos[k]
            best = (int(features[k]), _midpoint(xs[i, k], xs[i + 1, k]), float(col_best[k]))
    return best


def train_tree(X, y, in_bag, config: TrainConfig, rng) -> DecisionTree:
    """Grow one unpruned CART tree on the in-bag multiset."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if config.mtry > d:
        raise ValueError(f"mtry={config.mtry} exceeds feature count {d}")
    in_bag = np.asarray(in_bag)
    if len(in_bag) == 0:
        raise ValueError("in_bag must not be empty")
    w = np.bincount(in_bag, minlength=n).astype(np.float64)
    root_rows = np.flatnonzero(w > 0)

    feature, threshold, left, right, counts = [], [], [], [], []
    # (parent, is_left, rows, depth); right pushed first so ids come out preorder
    stack = [(-1, True, root_rows, 0)]
    while stack:
        parent, is_left, rows, depth = stack.pop()
        node = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        c1 = float(w[rows] @ y[rows])
        c0 = float(w[rows].sum()) - c1
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append((int(c0), int(c1)))
        if c0 == 0 or c1 == 0:
            continue
        if c0 + c1 < 2 * config.min_leaf_size:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        feats = rng.choice(d, size=config.mtry, replace=False)
        split = best_split(X, y, w, rows, feats, config.min_leaf_size)
        if split is None:
            continue
        f, thr, _ = split
        x = X[rows, f]
        go_left = np.isnan(x) | (x <= thr)
        feature[node] = f
        threshold[node] = thr
        stack.append((node, False, rows[~go_left], depth + 1))
        stack.append((node, True, rows[go_left], depth + 1))
    return DecisionTree(
        np.array(feature, dtype=np.int64), np.array(threshold),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.int64).reshape(-1, 2),
    )


# -- forest ------------------------------------------------------------------

def _label_digest(y) -> str:
    return hashlib.sha256(np.asarray(y, dtype=np.int8).tobytes()).hexdigest()


def _data_digest(X, y) -> str:
    h = hashlib.sha256(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.asarray(y, dtype=np.int8).tobytes())
    return h.hexdigest()


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    feature_names: tuple[str, ...]
    config: TrainConfig
    schema_version: str = ""
    oob_stats: ConfusionMatrix | None = None
    oob_excluded: int = 0
    per_tree_rates: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(
                f"model expects {len(self.feature_names)} features, got {X.shape[1]}"
            )
        return X

    def vote_fraction(self, X) -> np.ndarray:
        """Fraction of trees voting malicious for each row."""
        X = self._check(X)
        votes = np.zeros(len(X), dtype=np.int64)
        for t in self.trees:
            votes += t.predict(X)
        return votes / self.n_trees

    def predict_scores(self, X, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """(labels, scores); a row is malicious when score >= threshold."""
        scores = self.vote_fraction(X)
        return (scores >= threshold).astype(np.int64), scores

    def trained_on(self, dataset) -> bool:
        """True when ``dataset`` is exactly the training data (same rows, order)."""
        X, y, _, _ = _unpack(dataset)
        return self.training.get("data_digest") == _data_digest(X, y)

    def oob_rows(self, t: int, y) -> tuple[np.ndarray, np.ndarray]:
        """(in-bag, OOB) indices of tree ``t``, regenerated from the seed when
        the model was loaded from disk."""
        tree = self.trees[t]
        if tree.oob is not None:
            return tree.in_bag, tree.oob
        if self.training.get("label_digest") not in (None, _label_digest(y)):
            raise SchemaMismatch("dataset labels differ from the training labels")
        boot, _ = tree_streams(self.config.seed, t)
        return balanced_bootstrap(y, boot, self.config.balance)

    # -- persistence --

    def to_json(self) -> str:
        doc = {
            "version": MODEL_VERSION,
            "schema_version": self.schema_version,
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "training": self.training,
            "oob_stats": None if self.oob_stats is None else self.oob_stats.to_dict(),
            "oob_excluded": self.oob_excluded,
            "per_tree_rates": self.per_tree_rates,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("version") != MODEL_VERSION:
            raise SchemaMismatch(f"unsupported model version {doc.get('version')!r}")
        oob = doc.get("oob_stats")
        return cls(
            trees=[DecisionTree.from_dict(t) for t in doc["trees"]],
            feature_names=tuple(doc["feature_names"]),
            config=TrainConfig.from_dict(doc["config"]),
            schema_version=doc.get("schema_version", ""),
            oob_stats=None if oob is None else ConfusionMatrix(
                oob["tp"], oob["fp"], oob["tn"], oob["fn"]),
            oob_excluded=doc.get("oob_excluded", 0),
            per_tree_rates=doc.get("per_tree_rates", {}),
            training=doc.get("training", {}),
        )

    @classmethod
    def load(cls, path) -> "ForestModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _fit_one(X, y, config: TrainConfig, t: int) -> DecisionTree:
    boot, grow = tree_streams(config.seed, t)
    in_bag, oob = balanced_bootstrap(y, boot, config.balance)
    tree = train_tree(X, y, in_bag, config, grow)
    tree.in_bag, tree.oob = in_bag, oob
    return tree


def train_forest(dataset, config: TrainConfig, threads: int = 1) -> ForestModel:
    """Fit ``config.n_trees`` trees and record OOB statistics.

    ``dataset`` is a :class:`~c2detect.labels.LabeledDataset` or an ``(X, y)``
    pair.
    """
    X, y, names, schema = _unpack(dataset)
    if len(np.unique(y)) < 2:
        raise SingleClassDataset("training data must contain both classes")
    if config.mtry > X.shape[1]:
        raise ValueError(f"mtry={config.mtry} exceeds feature count {X.shape[1]}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(lambda t: _fit_one(X, y, config, t), range(config.n_trees)))
    else:
        trees = [_fit_one(X, y, config, t) for t in range(config.n_trees)]
    model = ForestModel(
        trees=trees, feature_names=names, config=config, schema_version=schema,
        training={"n_rows": int(len(y)), "n_malicious": int(y.sum()),
                  "label_digest": _label_digest(y), "data_digest": _data_digest(X, y)},
    )
    cm, excluded = oob_evaluate(model, (X, y))
    model.oob_stats, model.oob_excluded = cm, excluded
    model.per_tree_rates = per_tree_oob_rates(model, (X, y))
    return model


def _unpack(dataset):
    if isinstance(dataset, tuple):
        X, y = dataset
        X = np.asarray(X, dtype=np.float64)
        return X, np.asarray(y, dtype=np.int64), tuple(f"x{i}" for i in range(X.shape[1])), ""
    return dataset.X, dataset.y, tuple(dataset.feature_names), dataset.schema_version


def predict(model: ForestModel, fv, threshold: float = 0.5) -> tuple[int, float]:
    """Majority vote for one feature vector; ties count as malicious."""
    x = fv.as_array() if hasattr(fv, "as_array") else np.asarray(fv, dtype=np.float64)
    if x.shape != (len(model.feature_names),):
        raise SchemaMismatch(
            f"feature vector has {x.size} values, model expects {len(model.feature_names)}"
        )
    labels, scores = model.predict_scores(x[None, :], threshold)
    return int(labels[0]), float(scores[0])


def oob_votes(model: ForestModel, X, y, trees=None, overrides=None):
    """Per-row (malicious votes, OOB tree count) from trees holding the row OOB.

    ``overrides`` maps a tree index to a replacement matrix used for that
    tree's OOB rows (for permutation importance).
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(y)
    mal = np.zeros(n, dtype=np.int64)
    cnt = np.zeros(n, dtype=np.int64)
    for t in range(model.n_trees) if trees is None else trees:
        _, oob = model.oob_rows(t, y)
        if not len(oob):
            continue
        src = X if overrides is None else overrides.get(t, X)
        mal[oob] += model.trees[t].predict(src[oob])
        cnt[oob] += 1
    return mal, cnt


def oob_evaluate(model: ForestModel, dataset) -> tuple[ConfusionMatrix, int]:
    """Forest-level OOB confusion matrix and the number of rows never OOB."""
    X, y, _, _ = _unpack(dataset)
    mal, cnt = oob_votes(model, X, y)
    seen = cnt > 0
    pred = 2 * mal[seen] >= cnt[seen]
    return ConfusionMatrix.from_predictions(y[seen] == 1, pred), int((~seen).sum())


def per_tree_oob_rates(model: ForestModel, dataset) -> dict:
    """Mean of each tree's own OOB error, FNR and FPR."""
    X, y, _, _ = _unpack(dataset)
    rates = []
    for t, tree in enumerate(model.trees):
        _, oob = model.oob_rows(t, y)
        if not len(oob):
            continue
        cm = ConfusionMatrix.from_predictions(y[oob] == 1, tree.predict(X[oob]) == 1)
        rates.append((cm.error, cm.fnr, cm.fpr))
    if not rates:
        return {"error": None, "fnr": None, "fpr": None, "n_trees": 0}
    e, fnr, fpr = np.mean(rates, axis=0)
    return {"error": float(e), "fnr": float(fnr), "fpr": float(fpr), "n_trees": len(rates)}


def tune_mtry(dataset, grid, config: TrainConfig, n_trees: int | None = None,
              threads: int = 1) -> tuple[int, dict[int, float]]:
    """Pick mtry by OOB error; ties resolve to the smaller value."""
    values = sorted(set(int(g) for g in grid))
    if not values:
        raise EmptyGrid("mtry grid is empty")
    X, _, _, _ = _unpack(dataset)
    if values[-1] > X.shape[1]:
        raise ValueError(f"mtry grid value {values[-1]} exceeds feature count {X.shape[1]}")
    errors = {}
    for m in values:
        cfg = config.replace(mtry=m, n_trees=n_trees or config.n_trees)
        errors[m] = train_forest(dataset, cfg, threads=threads).oob_stats.error
    best = min(values, key=lambda m: (errors[m], m))
    return best, errors
