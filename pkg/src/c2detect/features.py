"""Per-host flow-size and beaconing features, plus the 288-bin matrix export.

All statistics are computed per :class:`~c2detect.aggregate.HostTrafficView`.
Conventions used throughout:

* bytes-per-packet ratios are quantised to hundredths (integer arithmetic,
  round half up) before any frequency or run analysis;
* standard deviations use the population form (divide by ``n``);
* medians and quartiles are order statistics, ``sorted(x)[floor(p * (n - 1))]``;
* a feature that is undefined for a view is NaN (written as an empty cell).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregate import N_BINS, BinnedCounts, HostTrafficView, bin_flows, initiator_codes
from .flows import NetworkConfig

SCHEMA_VERSION = "c2detect-features/1"

FLOW_SIZE_FEATURES = (
    "total_bytes",
    "total_packets",
    "avg_bytes_per_packet",
    "dominant_ratio_count_90",
    "dominant_ratio_count_75",
    "dominant_ratio_count_65",
    "packets_per_flow",
    "bytes_per_flow",
    "iqr_ratio",
    "sd_ratio",
    "dominant_flow_count_90",
    "total_duration_ms",
    "dur_max_ms",
    "dur_med_ms",
    "dominant_sport",
    "dominant_dport",
    "flow_frequency",
    "ct_max",
    "ct_med",
    "initiator_device_fraction",
    "dominant_sport_count",
    "dominant_dport_count",
    "unique_device_count",
)
BEACONING_FEATURES = (
    "periodicity_cv",
    "time_gap_mean_ms",
    "sd_packets",
    "sd_interarrival_ms",
)
FEATURE_NAMES = FLOW_SIZE_FEATURES + BEACONING_FEATURES
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

MISSING = float("nan")


class EmptyView(ValueError):
    pass


class AllBinsEmpty(ValueError):
    pass


class TooFewFlows(ValueError):
    pass


class FeatureVector(Mapping[str, float]):
    """Immutable, ordered feature values for one host. NaN marks missing."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected {len(FEATURE_NAMES)} values, got {arr.shape}")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "FeatureVector":
        return cls([d.get(n, MISSING) for n in FEATURE_NAMES])

    def __getitem__(self, name: str) -> float:
        return float(self._values[FEATURE_INDEX[name]])

    def __iter__(self):
        return iter(FEATURE_NAMES)

    def __len__(self) -> int:
        return len(FEATURE_NAMES)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        # NaN == NaN here: both missing
        return np.array_equal(self._values, other._values, equal_nan=True)

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        body = ", ".join(f"{n}={self[n]:g}" for n in FEATURE_NAMES)
        return f"FeatureVector({body})"

    def as_array(self) -> np.ndarray:
        return self._values

    def is_missing(self, name: str) -> bool:
        return math.isnan(self[name])


# -- small exact helpers ----------------------------------------------------

def _mean(x) -> float:
    return math.fsum(x) / len(x)


def _pop_sd(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = _mean(x)
    return math.sqrt(math.fsum((x - m) ** 2) / len(x))


def _order_stat(x, p: float):
    s = np.sort(np.asarray(x))
    return s[int(math.floor(p * (len(s) - 1)))]


def lower_median(x):
    return _order_stat(x, 0.5)


def quantized_ratios(bytes_, packets) -> np.ndarray:
    """bytes/packets in integer hundredths, rounded half up. Zero-packet flows
    count as ratio 0."""
    b = np.asarray(bytes_, dtype=np.int64)
    p = np.asarray(packets, dtype=np.int64)
    safe = np.where(p > 0, p, 1)
    return np.where(p > 0, (200 * b + safe) // (2 * safe), 0)


def flow_ratios(bytes_, packets) -> np.ndarray:
    b = np.asarray(bytes_, dtype=np.float64)
    p = np.asarray(packets, dtype=np.float64)
    return np.divide(b, p, out=np.zeros_like(b), where=p > 0)


def cover_count(values: Iterable, percentile: float) -> int:
    """Smallest k such that the k most frequent values cover >= percentile% of
    the items."""
    counts = sorted(Counter(values).values(), reverse=True)
    if not counts:
        raise ValueError("no values")
    need = percentile * sum(counts)  # compare in integer-scaled units
    covered = 0
    for k, c in enumerate(counts, start=1):
        covered += c
        if covered * 100 >= need:
            return k
    return len(counts)


# -- per-view operations ----------------------------------------------------

def _require_flows(view: HostTrafficView) -> None:
    if len(view) == 0:
        raise EmptyView(f"view for {view.host_ip} has no flows")


def dominant_ratio_count(view: HostTrafficView, percentile: int) -> int:
    if percentile not in (65, 75, 90):
        raise ValueError("percentile must be one of 65, 75, 90")
    _require_flows(view)
    return cover_count(quantized_ratios(view.flows.bytes, view.flows.packets).tolist(), percentile)


@dataclass(frozen=True)
class RunLengthSummary:
    runs: tuple[tuple[float, int], ...]

    @property
    def max_run(self) -> int:
        return max(length for _, length in self.runs)


def run_lengths(view: HostTrafficView) -> RunLengthSummary:
    """Streaks of equal quantised bytes-per-packet over time-ordered flows."""
    _require_flows(view)
    q = quantized_ratios(view.flows.bytes, view.flows.packets)
    change = np.flatnonzero(np.diff(q)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(q)]])
    return RunLengthSummary(
        tuple((int(q[s]) / 100, int(e - s)) for s, e in zip(starts, ends))
    )


def dominant_flow_count(bins: BinnedCounts, percentile: int = 90) -> int:
    nonempty = bins.nonempty_counts()
    if len(nonempty) == 0:
        raise AllBinsEmpty("every 5-minute bin is empty")
    return cover_count(nonempty.tolist(), percentile)


def interarrival_stats(view_or_times) -> tuple[float, float, float]:
    """(mean gap, population SD of gaps, CV) over successive flow start times.

    Accepts a view or a sorted sequence of start times in milliseconds.
    """
    if isinstance(view_or_times, HostTrafficView):
        t = view_or_times.flows.start_time
    else:
        t = np.asarray(view_or_times, dtype=np.int64)
    if len(t) < 2:
        raise TooFewFlows("inter-arrival statistics need at least 2 flows")
    d = np.diff(t)
    mean = int(t[-1] - t[0]) / len(d)
    sd = math.sqrt(math.fsum((d - mean) ** 2) / len(d))
    cv = sd / mean if mean > 0 else 0.0
    return mean, sd, cv


def _mode_with_count(values: np.ndarray) -> tuple[int, int]:
    vals, counts = np.unique(values, return_counts=True)
    i = int(np.argmax(counts))  # ties -> smallest value
    return int(vals[i]), int(counts[i])


def extract_features(view: HostTrafficView, config: NetworkConfig | None = None) -> FeatureVector:
    _require_flows(view)
    well_known = config.well_known_ports if config is not None else frozenset({80, 443, 53, 25})
    f = view.flows
    n = len(f)
    byts, pkts = f.bytes, f.packets
    ratios = flow_ratios(byts, pkts)
    qratios = quantized_ratios(byts, pkts).tolist()
    dur = f.end_time - f.start_time
    bins = bin_flows(view, config)
    ct = bins.nonempty_counts()
    init = initiator_codes(view, well_known)
    decided = int(np.count_nonzero(init))
    sport, sport_n = _mode_with_count(view.host_port)
    dport, dport_n = _mode_with_count(view.device_port)

    out = {
        "total_bytes": int(byts.sum()),
        "total_packets": int(pkts.sum()),
        "avg_bytes_per_packet": _mean(ratios),
        "dominant_ratio_count_90": cover_count(qratios, 90),
        "dominant_ratio_count_75": cover_count(qratios, 75),
        "dominant_ratio_count_65": cover_count(qratios, 65),
        "packets_per_flow": int(pkts.sum()) / n,
        "bytes_per_flow": int(byts.sum()) / n,
        "iqr_ratio": float(_order_stat(ratios, 0.75) - _order_stat(ratios, 0.25)),
        "sd_ratio": _pop_sd(ratios),
        "dominant_flow_count_90": dominant_flow_count(bins, 90),
        "total_duration_ms": int(dur.sum()),
        "dur_max_ms": int(dur.max()),
        "dur_med_ms": int(lower_median(dur)),
        "dominant_sport": sport,
        "dominant_dport": dport,
        "flow_frequency": n,
        "ct_max": int(ct.max()),
        "ct_med": int(lower_median(ct)),
        "initiator_device_fraction": (
            int(np.count_nonzero(init == 1)) / decided if decided else MISSING
        ),
        "dominant_sport_count": sport_n,
        "dominant_dport_count": dport_n,
        "unique_device_count": len(view.device_ips),
        "sd_packets": _pop_sd(pkts),
    }
    if n >= 2:
        mean, sd, cv = interarrival_stats(f.start_time)
        out.update(time_gap_mean_ms=mean, sd_interarrival_ms=sd, periodicity_cv=cv)
    return FeatureVector.from_dict(out)


def extract_all(views: Sequence[HostTrafficView], config: NetworkConfig | None = None):
    """Feature vectors for every view, ordered by host address."""
    return [(v.host_ip, extract_features(v, config)) for v in views]


# -- file formats -------------------------------------------------------------

def format_value(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return ""
    if value == int(value) and abs(value) < 2**53:
        return str(int(value))
    return repr(value)


def write_feature_csv(path, rows, labels: Mapping[str, str] | None = None) -> None:
    """rows: iterable of (host_ip, FeatureVector). ``labels`` maps host to label
    text; hosts missing from it are ``unknown``. Without labels the column is empty."""
    default = "" if labels is None else "unknown"
    labels = labels or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["host_ip", "label", *FEATURE_NAMES])
        for host, fv in rows:
            w.writerow([host, labels.get(host, default), *(format_value(v) for v in fv.as_array())])


def read_feature_csv(path) -> list[tuple[str, str, FeatureVector]]:
    """Returns (host_ip, label, FeatureVector) triples. Raises ValueError on a
    header that does not match the schema."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None:
            return []
        if tuple(header[2:]) != FEATURE_NAMES or header[:2] != ["host_ip", "label"]:
            raise ValueError(f"{path}: feature header does not match schema {SCHEMA_VERSION}")
        rows = []
        for rec in r:
            vals = [float(v) if v != "" else MISSING for v in rec[2:]]
            rows.append((rec[0], rec[1], FeatureVector(vals)))
        return rows


def timeseries_row(view: HostTrafficView, config: NetworkConfig | None = None) -> np.ndarray:
    """864 values: (flow_count, packet_sum, byte_sum) for each of 288 bins."""
    return bin_flows(view, config).as_matrix().reshape(-1)


def timeseries_header() -> list[str]:
    cols = ["host_ip", "label"]
    for b in range(N_BINS):
        cols += [f"flows_{b}", f"packets_{b}", f"bytes_{b}"]
    return cols


def export_timeseries_matrix(path, views, config: NetworkConfig | None = None,
                             labels: Mapping[str, str] | None = None) -> int:
    """Write one row per host; returns the number of rows written."""
    labels = labels or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(timeseries_header())
        for v in views:
            w.writerow([v.host_ip, labels.get(v.host_ip, ""), *timeseries_row(v, config).tolist()])
    return len(views)
