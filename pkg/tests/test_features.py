import csv
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from c2detect.aggregate import bin_flows, group_by_external_host
from c2detect.features import (
    FEATURE_NAMES,
    AllBinsEmpty,
    EmptyView,
    FeatureVector,
    TooFewFlows,
    cover_count,
    dominant_flow_count,
    dominant_ratio_count,
    export_timeseries_matrix,
    extract_features,
    interarrival_stats,
    quantized_ratios,
    read_feature_csv,
    run_lengths,
    write_feature_csv,
)
from c2detect.aggregate import BinnedCounts, make_view
from c2detect.flows import FlowRecord, FlowTable, ip_to_int

from strategies import CONFIG, DAY0, flow, view_records

A = "93.184.216.34"


def view_of(records):
    (v,) = group_by_external_host(records, CONFIG).views
    return v


def ratio_flows(ratios_hundredths, packets=4):
    """One flow per ratio, in time order; bytes chosen so bytes/packets is exact."""
    return [flow("10.0.0.5", A, bytes_=r * packets // 100, packets=packets, start=i * 1000)
            for i, r in enumerate(ratios_hundredths)]


def test_schema_has_27_fixed_fields():
    assert len(FEATURE_NAMES) == 27 == len(set(FEATURE_NAMES))
    assert FEATURE_NAMES[0] == "total_bytes" and FEATURE_NAMES[-1] == "sd_interarrival_ms"


# -- dominant ratio count ------------------------------------------------------

def test_dominant_ratio_two_sizes():
    v = view_of(ratio_flows([10275] * 8 + [9800] * 2))
    assert dominant_ratio_count(v, 90) == 2
    assert dominant_ratio_count(v, 75) == 1


@pytest.mark.parametrize("p", [65, 75, 90])
def test_dominant_ratio_single_value(p):
    assert dominant_ratio_count(view_of(ratio_flows([6400] * 10)), p) == 1


def test_dominant_ratio_all_distinct():
    v = view_of(ratio_flows([100 * (i + 1) for i in range(10)]))
    assert dominant_ratio_count(v, 90) == 9
    assert dominant_ratio_count(v, 90) == oracles.cover(list(range(10)), 90)


def test_dominant_ratio_rejects_other_percentiles():
    with pytest.raises(ValueError):
        dominant_ratio_count(view_of(ratio_flows([100])), 50)


def test_ratio_rounding_half_up():
    # 1/8 = 0.125 -> 0.13 ; 1001/8 = 125.125 -> 125.13 ; 2/3 -> 0.67
    assert list(quantized_ratios([1, 1001, 2, 5], [8, 8, 3, 0])) == [13, 12513, 67, 0]


@settings(max_examples=300)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=12), st.integers(1, 100))
def test_cover_count_matches_subset_search(values, p):
    assert cover_count(values, p) == oracles.cover(values, p)


# -- run lengths ---------------------------------------------------------------

def test_run_lengths_example():
    s = run_lengths(view_of(ratio_flows([500, 500, 500, 700, 500, 500])))
    assert s.runs == ((5.0, 3), (7.0, 1), (5.0, 2)) and s.max_run == 3


def test_run_lengths_degenerate():
    assert run_lengths(view_of(ratio_flows([300]))).runs == ((3.0, 1),)
    assert run_lengths(view_of(ratio_flows([300] * 7))).runs == ((3.0, 7),)


@settings(max_examples=200)
@given(view_records(max_flows=15))
def test_run_lengths_invariants(sample):
    host, recs = sample
    s = run_lengths(view_of(recs))
    assert sum(n for _, n in s.runs) == len(recs)
    assert all(a[0] != b[0] for a, b in zip(s.runs, s.runs[1:]))
    assert list(s.runs) == oracles.runs(host, recs)


# -- dominant flow count -------------------------------------------------------

def _bins(counts):
    fc = np.zeros(288, dtype=np.int64)
    fc[:len(counts)] = counts
    return BinnedCounts(fc, fc * 5, fc * 1000)


def test_dominant_flow_count_examples():
    assert dominant_flow_count(_bins([1] * 9 + [7])) == 1
    assert dominant_flow_count(_bins([3] * 6)) == 1
    assert dominant_flow_count(_bins(list(range(1, 11)))) == 9


def test_dominant_flow_count_ignores_empty_bins():
    assert dominant_flow_count(_bins([0, 0, 2, 0, 2, 0])) == 1
    with pytest.raises(AllBinsEmpty):
        dominant_flow_count(_bins([]))


# -- inter-arrival -------------------------------------------------------------

def test_interarrival_perfect_beacon():
    assert interarrival_stats([0, 1000, 2000, 3000]) == (1000.0, 0.0, 0.0)


def test_interarrival_hand_example():
    mean, sd, cv = interarrival_stats([0, 1000, 11000])
    assert (mean, sd) == (5500.0, 4500.0)
    assert cv == pytest.approx(0.8181818, abs=1e-7)


def test_interarrival_same_instant():
    assert interarrival_stats([5, 5, 5]) == (0.0, 0.0, 0.0)


def test_interarrival_needs_two_flows():
    with pytest.raises(TooFewFlows):
        interarrival_stats([0])


@settings(max_examples=100)
@given(st.integers(2, 200), st.integers(1, 10**6), st.integers(0, 10**9))
def test_perfect_beacons_have_zero_cv(n, gap, t0):
    recs = [flow("10.0.0.5", A, start=(t0 + i * gap) % (24 * 3600 * 1000)) for i in range(n)]
    times = sorted(r.start_time for r in recs)
    if any(b - a != gap for a, b in zip(times, times[1:])):
        return  # wrapped past the end of the day
    fv = extract_features(view_of(recs), CONFIG)
    assert fv["periodicity_cv"] == 0 and fv["sd_interarrival_ms"] == 0
    assert fv["time_gap_mean_ms"] == gap


# -- full extraction -----------------------------------------------------------

def test_two_identical_bot_flows():
    fv = extract_features(view_of([flow("10.0.0.5", A, start=0),
                                   flow("10.0.0.6", A, start=680)]), CONFIG)
    assert fv["packets_per_flow"] == 5 and fv["bytes_per_flow"] == 1000
    assert fv["sd_packets"] == 0 and fv["sd_ratio"] == 0
    assert fv["time_gap_mean_ms"] == 680
    assert fv["initiator_device_fraction"] == 1.0
    assert fv["unique_device_count"] == 2


def test_single_flow_view():
    fv = extract_features(view_of([flow("10.0.0.5", A, dur=250)]), CONFIG)
    assert (fv["total_duration_ms"], fv["dur_max_ms"], fv["dur_med_ms"]) == (250, 250, 250)
    for name in ("periodicity_cv", "time_gap_mean_ms", "sd_interarrival_ms"):
        assert fv.is_missing(name)
    assert fv["sd_packets"] == 0


def test_normal_host_exact_values():
    recs = [flow("10.0.0.5", A, 50000 + i, 443, bytes_=b, packets=p, start=i * 60_000)
            for i, (b, p) in enumerate([(12000, 17), (16000, 21), (14000, 19)])]
    fv = extract_features(view_of(recs), CONFIG)
    assert fv["packets_per_flow"] == 19 and fv["bytes_per_flow"] == 14000


def test_undecidable_initiator_is_missing():
    fv = extract_features(view_of([flow("10.0.0.5", A, 50000, 50001)]), CONFIG)
    assert fv.is_missing("initiator_device_fraction")


def test_empty_view_raises():
    empty = make_view(ip_to_int(A), FlowTable.empty(), CONFIG)
    with pytest.raises(EmptyView):
        extract_features(empty, CONFIG)
    with pytest.raises(EmptyView):
        dominant_ratio_count(empty, 90)


def _assert_same(fv: FeatureVector, expected: dict):
    for name in FEATURE_NAMES:
        got, want = fv[name], float(expected[name])
        if math.isnan(want):
            assert math.isnan(got), name
        else:
            assert got == want, (name, got, want)


@settings(max_examples=300)
@given(view_records())
def test_extraction_matches_oracle(sample):
    host, recs = sample
    _assert_same(extract_features(view_of(recs), CONFIG), oracles.features(host, recs, DAY0))


@settings(max_examples=200)
@given(view_records(max_flows=20), st.randoms(use_true_random=False))
def test_extraction_is_permutation_safe(sample, rnd):
    _, recs = sample
    base = extract_features(view_of(recs), CONFIG)
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert extract_features(view_of(shuffled), CONFIG) == base


SCALED = {"total_bytes", "bytes_per_flow", "avg_bytes_per_packet"}
RATIO_SHAPE = {"iqr_ratio", "sd_ratio"}  # also scale, but not exactly by 2 in floating point


@settings(max_examples=200)
@given(view_records(max_flows=20))
def test_doubling_bytes(sample):
    _, recs = sample
    doubled = [FlowRecord(r.src_ip, r.dst_ip, r.src_port, r.dst_port, 2 * r.bytes, r.packets,
                          r.start_time, r.end_time, r.protocol, r.flag) for r in recs]
    a = extract_features(view_of(recs), CONFIG)
    b = extract_features(view_of(doubled), CONFIG)
    for name in FEATURE_NAMES:
        if name in SCALED:
            assert b[name] == pytest.approx(2 * a[name], rel=1e-12)
        elif name in RATIO_SHAPE or name.startswith("dominant_ratio_count"):
            continue
        elif a.is_missing(name):
            assert b.is_missing(name)
        else:
            assert b[name] == a[name], name


@settings(max_examples=200)
@given(view_records(max_flows=20))
def test_ratio_cover_monotone_and_ranges(sample):
    _, recs = sample
    v = view_of(recs)
    fv = extract_features(v, CONFIG)
    assert fv["dominant_ratio_count_65"] <= fv["dominant_ratio_count_75"] <= fv["dominant_ratio_count_90"]
    assert fv["unique_device_count"] == len(v.device_ips)
    f = fv["initiator_device_fraction"]
    assert math.isnan(f) or 0 <= f <= 1
    for name in FEATURE_NAMES:
        assert math.isnan(fv[name]) or fv[name] >= 0, name


# -- file formats --------------------------------------------------------------

def test_feature_csv_round_trip(tmp_path):
    rng = random.Random(0)
    rows = []
    for h in ("23.0.0.1", "23.0.0.8"):
        recs = [flow("10.0.0.5", h, bytes_=rng.randint(100, 9000), packets=rng.randint(1, 30),
                     start=rng.randint(0, 10**7)) for _ in range(rng.randint(1, 5))]
        (v,) = group_by_external_host(recs, CONFIG).views
        rows.append((h, extract_features(v, CONFIG)))
    rows.append(("23.0.0.15", extract_features(view_of([flow("10.0.0.5", "23.0.0.15")]), CONFIG)))
    path = tmp_path / "f.csv"
    write_feature_csv(path, rows, {"23.0.0.1": "zeus"})
    back = read_feature_csv(path)
    assert [(h, fv) for h, _, fv in back] == rows
    assert [lab for _, lab, _ in back] == ["zeus", "unknown", "unknown"]
    cells = path.read_text().splitlines()[-1].split(",")[2:]
    missing = [n for n, c in zip(FEATURE_NAMES, cells) if c == ""]
    assert missing == ["periodicity_cv", "time_gap_mean_ms", "sd_interarrival_ms"]


def test_feature_csv_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("host_ip,label,total_bytes\n")
    with pytest.raises(ValueError):
        read_feature_csv(p)


def test_timeseries_single_flow(tmp_path):
    v = view_of([flow("10.0.0.5", A, bytes_=1000, packets=5, start=0)])
    path = tmp_path / "ts.csv"
    assert export_timeseries_matrix(path, [v], CONFIG, {A: "zeus"}) == 1
    header, row = list(csv.reader(open(path)))
    assert len(header) == len(row) == 2 + 864
    assert row[:5] == [A, "zeus", "1", "5", "1000"]
    assert set(row[5:]) == {"0"}


def test_timeseries_empty_day(tmp_path):
    path = tmp_path / "ts.csv"
    assert export_timeseries_matrix(path, [], CONFIG) == 0
    assert len(open(path).read().splitlines()) == 1


@settings(max_examples=100)
@given(view_records(max_flows=30))
def test_timeseries_conservation(sample):
    import tempfile
    _, recs = sample
    v = view_of(recs)
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/ts.csv"
        export_timeseries_matrix(path, [v], CONFIG)
        _, row = list(csv.reader(open(path)))
    vals = np.array(row[2:], dtype=np.int64).reshape(288, 3)
    assert vals[:, 0].sum() == len(recs)
    assert vals[:, 1].sum() == sum(r.packets for r in recs)
    assert vals[:, 2].sum() == sum(r.bytes for r in recs)
    assert (vals == bin_flows(v).as_matrix()).all()
