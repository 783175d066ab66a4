import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2detect.flows import (
    EndpointRole,
    FlowRecord,
    FlowTable,
    InvariantViolation,
    MalformedLine,
    NetworkConfig,
    classify_endpoint,
    parse_flow_csv,
    read_flow_file,
    read_flow_lines,
    write_flow_file,
)

from strategies import CONFIG, HOSTS, mixed_records

LINE = "10.0.0.5,93.184.216.34,49152,80,1000,5,1700000000000,1700000001000,6,S"


def test_parse_maps_fields():
    r = parse_flow_csv(LINE)
    assert (r.src_ip, r.dst_ip, r.src_port, r.dst_port) == ("10.0.0.5", "93.184.216.34", 49152, 80)
    assert (r.bytes, r.packets) == (1000, 5)
    assert (r.start_time, r.end_time, r.protocol, r.flag) == (1700000000000, 1700000001000, 6, "S")


def test_nine_fields_is_malformed():
    with pytest.raises(MalformedLine) as exc:
        parse_flow_csv(LINE.rsplit(",", 1)[0], line_no=7)
    assert exc.value.line_no == 7


def test_end_before_start_is_invariant_violation():
    bad = LINE.replace("1700000001000", "1699999999999")
    with pytest.raises(InvariantViolation) as exc:
        parse_flow_csv(bad, line_no=3)
    assert exc.value.line_no == 3


@pytest.mark.parametrize("line", [
    LINE.replace("10.0.0.5", "10.0.0.256"),
    LINE.replace("49152", "4915x"),
    LINE.replace(",1000,", ",1e3,"),
    LINE.replace("93.184.216.34", "::1"),
])
def test_unparseable_values_are_malformed(line):
    with pytest.raises(MalformedLine):
        parse_flow_csv(line)


@pytest.mark.parametrize("line", [
    LINE.replace("49152", "70000"),
    LINE.replace(",1000,5,", ",-1,5,"),
    LINE.replace(",1000,5,", ",1000,0,"),
    LINE.replace("49152", "0"),
])
def test_impossible_values_violate_invariants(line):
    with pytest.raises(InvariantViolation):
        parse_flow_csv(line)


def test_port_zero_allowed_for_icmp():
    r = parse_flow_csv(LINE.replace("49152,80", "0,0").replace(",6,S", ",1,"))
    assert r.src_port == 0 and r.protocol == 1


@pytest.mark.parametrize("ip,role", [
    ("10.0.0.5", EndpointRole.INTERNAL),
    ("93.184.216.34", EndpointRole.EXTERNAL),
    ("10.255.255.255", EndpointRole.INTERNAL),
    ("11.0.0.0", EndpointRole.EXTERNAL),
    ("9.255.255.255", EndpointRole.EXTERNAL),
])
def test_classify_endpoint(ip, role):
    assert classify_endpoint(ip, NetworkConfig(["10.0.0.0/8"])) is role


def test_config_rejects_overlapping_or_empty_ranges():
    with pytest.raises(ValueError):
        NetworkConfig(["10.0.0.0/8", "10.1.0.0/16"])
    with pytest.raises(ValueError):
        NetworkConfig([])


def test_config_dict_round_trip():
    cfg = NetworkConfig(["10.0.0.0/8", "172.16.0.0/12"], day_start=5, well_known_ports={80, 8443})
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=50))
def test_vectorised_membership_matches_classify(ints):
    import numpy as np
    from c2detect.flows import int_to_ip
    cfg = NetworkConfig(["10.0.0.0/8", "192.168.0.0/16", "100.64.0.0/10"])
    fast = cfg.is_internal(np.array(ints))
    slow = [classify_endpoint(int_to_ip(i), cfg) is EndpointRole.INTERNAL for i in ints]
    assert list(fast) == slow


@settings(max_examples=200)
@given(mixed_records())
def test_parse_serialise_round_trip(records):
    for r in records:
        assert parse_flow_csv(r.to_csv()) == r
    table = FlowTable.from_records(records)
    assert list(table) == records
    assert list(table.to_csv_lines()) == [r.to_csv() for r in records]


def test_lenient_counts_every_line():
    lines = [LINE, "garbage", LINE.replace("1700000001000", "1"), "", LINE]
    recs, report = read_flow_lines(lines)
    assert len(recs) == 2 and report.n_errors == 2
    assert len(recs) + report.n_errors == report.n_lines == 4
    assert [e.line_no for e in report.errors] == [2, 3]


def test_strict_raises_on_first_bad_line():
    with pytest.raises(MalformedLine):
        read_flow_lines([LINE, "garbage"], strict=True)


def test_header_row_is_skipped(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("src_ip,dst_ip,src_port,dst_port,bytes,packets,start_time,end_time,protocol,flag\n"
                 + LINE + "\n")
    recs, report = read_flow_file(p, header=True)
    assert len(recs) == 1 and report.n_errors == 0


def test_write_then_read(tmp_path):
    recs = [parse_flow_csv(LINE), parse_flow_csv(LINE.replace("10.0.0.5", "10.0.0.6"))]
    write_flow_file(tmp_path / "f.csv", recs)
    back, report = read_flow_file(tmp_path / "f.csv")
    assert back == recs and report.n_errors == 0


def test_records_are_immutable():
    r = parse_flow_csv(LINE)
    with pytest.raises(AttributeError):
        r.bytes = 1
    assert isinstance(r, FlowRecord)
    assert classify_endpoint(HOSTS[0], CONFIG) is EndpointRole.EXTERNAL
