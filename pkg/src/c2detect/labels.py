"""Blacklist loading, labelled datasets and training-set construction."""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FEATURE_NAMES, SCHEMA_VERSION, FeatureVector, format_value

logger = logging.getLogger(__name__)

MALICIOUS = 1
UNKNOWN = 0


class MalformedEntry(ValueError):
    pass


class NoMaliciousRows(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    entries: Mapping[str, str]
    source: str = ""
    loaded_at: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, ip) -> bool:
        return ip in self.entries

    def family(self, ip: str) -> str | None:
        return self.entries.get(ip)


def load_blacklist(path, source: str | None = None) -> LabelSet:
    """Read a CSV of (ip, family). A leading ``ip,family`` header is skipped.

    Duplicate addresses keep the first family seen.
    """
    entries: dict[str, str] = {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not any(c.strip() for c in row):
                continue
            if line_no == 1 and row[0].strip().lower() == "ip":
                continue
            if len(row) != 2:
                raise MalformedEntry(f"{path}:{line_no}: expected 2 fields, got {len(row)}")
            ip, family = row[0].strip(), row[1].strip()
            try:
                ip = str(ipaddress.IPv4Address(ip))
            except ValueError:
                raise MalformedEntry(f"{path}:{line_no}: invalid IPv4 address {ip!r}") from None
            if not family:
                raise MalformedEntry(f"{path}:{line_no}: empty family name")
            if ip in entries:
                logger.warning("%s:%d: duplicate address %s ignored", path, line_no, ip)
                continue
            entries[ip] = family
    return LabelSet(entries, source=source or str(path), loaded_at=time.time())


def write_blacklist(path, labels: Mapping[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ip", "family"])
        for ip in sorted(labels, key=lambda s: int(ipaddress.IPv4Address(s))):
            w.writerow([ip, labels[ip]])


@dataclass
class LabeledDataset:
    """Feature matrix with binary labels (1 = malicious, 0 = unknown).

    ``families`` keeps the blacklist family name for malicious rows ("" for
    unknown); it is metadata only and never used for training.
    """

    host_ips: list[str]
    X: np.ndarray
    y: np.ndarray
    families: list[str] = field(default_factory=list)
    days: np.ndarray | None = None
    feature_names: tuple[str, ...] = FEATURE_NAMES
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.host_ips), -1)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.families:
            self.families = ["" for _ in self.host_ips]
        if self.days is None:
            self.days = np.zeros(len(self.host_ips), dtype=np.int64)
        if not (len(self.host_ips) == len(self.y) == len(self.families) == len(self.days)):
            raise ValueError("dataset columns have different lengths")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError("feature matrix width does not match feature names")

    def __len__(self) -> int:
        return len(self.host_ips)

    @property
    def n_malicious(self) -> int:
        return int(self.y.sum())

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            [self.host_ips[i] for i in idx], self.X[idx], self.y[idx],
            [self.families[i] for i in idx], self.days[idx],
            self.feature_names, self.schema_version,
        )

    def with_column(self, name: str, values) -> "LabeledDataset":
        X = np.column_stack([self.X, np.asarray(values, dtype=np.float64)])
        return LabeledDataset(list(self.host_ips), X, self.y.copy(), list(self.families),
                              self.days.copy(), (*self.feature_names, name), self.schema_version)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = list(parts)
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValueError("cannot concatenate datasets with different schemas")
        return cls(
            [h for p in parts for h in p.host_ips],
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            [f for p in parts for f in p.families],
            np.concatenate([p.days for p in parts]),
            names, parts[0].schema_version,
        )


def label_rows(rows, labels: LabelSet | None, day: int = 0) -> LabeledDataset:
    """Turn (host_ip, FeatureVector) pairs into a dataset labelled by blacklist
    membership."""
    rows = list(rows)
    hosts = [h for h, _ in rows]
    if len(set(hosts)) != len(hosts):
        raise ValueError("duplicate host_ip within one day")
    X = np.array([fv.as_array() for _, fv in rows]).reshape(len(rows), len(FEATURE_NAMES))
    fam = [(labels.family(h) if labels else None) or "" for h in hosts]
    y = np.array([1 if f else 0 for f in fam], dtype=np.int64)
    return LabeledDataset(hosts, X, y, fam, np.full(len(rows), day, dtype=np.int64))


def write_dataset_csv(path, ds: LabeledDataset) -> None:
    """Feature CSV with one row per dataset row; the label column holds the
    family for malicious rows and ``unknown`` otherwise."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["host_ip", "label", *ds.feature_names])
        for i, host in enumerate(ds.host_ips):
            w.writerow([host, ds.families[i] or "unknown", *map(format_value, ds.X[i])])


def feature_vector(ds: LabeledDataset, i: int) -> FeatureVector:
    return FeatureVector(ds.X[i])


def build_training_set(days: Sequence[LabeledDataset], unknown_per_day: int = 1000,
                       seed: int = 0) -> LabeledDataset:
    """Every malicious row from every day plus up to ``unknown_per_day`` unknown
    rows sampled per day without replacement; shuffled under ``seed``."""
    if not days:
        raise ValueError("need at least one day")
    rng = np.random.default_rng(seed)
    parts = []
    for ds in days:
        mal = np.flatnonzero(ds.y == MALICIOUS)
        unk = np.flatnonzero(ds.y == UNKNOWN)
        k = min(unknown_per_day, len(unk))
        picked = np.sort(rng.choice(unk, size=k, replace=False)) if k else unk[:0]
        parts.append(ds.subset(np.concatenate([mal, picked])))
    out = LabeledDataset.concat(parts)
    if out.n_malicious == 0:
        raise NoMaliciousRows("no malicious rows: a classifier cannot be trained")
    return out.subset(rng.permutation(len(out)))


@dataclass
class MatchReport:
    rows: list[dict]
    n_predictions: int
    n_matched: int
    median_matched_score: float | None

    @property
    def match_rate(self) -> float:
        return self.n_matched / self.n_predictions if self.n_predictions else 0.0

    def summary(self) -> dict:
        return {
            "n_predictions": self.n_predictions,
            "n_matched": self.n_matched,
            "match_rate": self.match_rate,
            "median_matched_score": self.median_matched_score,
        }

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["host_ip", "score", "matched_lists", "families"])
            for r in self.rows:
                w.writerow([r["host_ip"], repr(r["score"]), ";".join(r["lists"]),
                            ";".join(r["families"])])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2)
                fh.write("\n")


def match_predictions(predicted, lists: Sequence[LabelSet]) -> MatchReport:
    """Cross-check (host_ip, score) predictions against blacklists."""
    rows, matched_scores = [], []
    for host, score in predicted:
        hits = [ls for ls in lists if host in ls]
        rows.append({
            "host_ip": host,
            "score": float(score),
            "lists": [ls.source for ls in hits],
            "families": sorted({ls.family(host) for ls in hits}),
        })
        if hits:
            matched_scores.append(float(score))
    med = float(np.median(matched_scores)) if matched_scores else None
    return MatchReport(rows, len(rows), len(matched_scores), med)
