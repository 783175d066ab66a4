"""C2-centric pivot: one traffic view per external host, 5-minute binning."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .flows import FlowTable, NetworkConfig, int_to_ip, ip_to_int

DAY_MS = 24 * 60 * 60 * 1000
BIN_MS = 5 * 60 * 1000
N_BINS = DAY_MS // BIN_MS  # 288


class Initiator(enum.Enum):
    DEVICE = "device"
    HOST = "host"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class HostTrafficView:
    """All flows between one external host and internal devices for one day.

    ``flows`` is sorted by start time. Integer-encoded per-flow columns for the
    host side and device side are precomputed since every feature needs them.
    """

    host_ip: str
    flows: FlowTable
    device_ips: frozenset[str]
    day_start: int
    host_port: np.ndarray = field(repr=False)
    device_port: np.ndarray = field(repr=False)
    device_is_src: np.ndarray = field(repr=False)

    @property
    def window(self) -> tuple[int, int]:
        return self.day_start, self.day_start + DAY_MS

    def __len__(self) -> int:
        return len(self.flows)


@dataclass
class Discard:
    line_ref: int
    reason: str


@dataclass
class GroupingResult:
    views: list[HostTrafficView]
    discards: list[Discard]


def _sort_order(t: FlowTable, device: np.ndarray) -> np.ndarray:
    # total order so shuffled input always yields the same view
    keys = (t.flag.astype(str), t.protocol, t.bytes, t.packets, t.dst_port,
            t.src_port, device, t.end_time, t.start_time)
    return np.lexsort(keys)


def make_view(host_ip: int, flows: FlowTable, config: NetworkConfig) -> HostTrafficView:
    """Build a view from flows already known to involve ``host_ip`` externally."""
    device_is_src = flows.dst_ip == host_ip
    device = np.where(device_is_src, flows.src_ip, flows.dst_ip)
    order = _sort_order(flows, device)
    flows = flows.take(order)
    device_is_src = device_is_src[order]
    device = device[order]
    host_port = np.where(device_is_src, flows.dst_port, flows.src_port)
    device_port = np.where(device_is_src, flows.src_port, flows.dst_port)
    return HostTrafficView(
        host_ip=int_to_ip(host_ip),
        flows=flows,
        device_ips=frozenset(int_to_ip(d) for d in np.unique(device)),
        day_start=config.day_start,
        host_port=host_port,
        device_port=device_port,
        device_is_src=device_is_src,
    )


def group_by_external_host(records, config: NetworkConfig) -> GroupingResult:
    """Partition flows by their single external endpoint.

    Flows with zero or two external endpoints, or starting outside the day
    window, go to the discard report (``line_ref`` is the 1-based input
    position). Views come back sorted by host address.
    """
    table = FlowTable.from_records(records)
    n = len(table)
    if n == 0:
        return GroupingResult([], [])
    src_int = config.is_internal(table.src_ip)
    dst_int = config.is_internal(table.dst_ip)
    in_window = (table.start_time >= config.day_start) & (
        table.start_time < config.day_start + DAY_MS
    )
    one_external = src_int != dst_int
    keep = one_external & in_window

    discards = []
    for i in np.flatnonzero(~keep):
        if src_int[i] and dst_int[i]:
            reason = "no_external_endpoint"
        elif not src_int[i] and not dst_int[i]:
            reason = "two_external_endpoints"
        else:
            reason = "outside_window"
        discards.append(Discard(int(i) + 1, reason))

    idx = np.flatnonzero(keep)
    host = np.where(src_int[idx], table.dst_ip[idx], table.src_ip[idx])
    order = np.argsort(host, kind="stable")
    idx, host = idx[order], host[order]
    hosts, starts = np.unique(host, return_index=True)
    bounds = list(starts[1:]) + [len(idx)]
    views = [
        make_view(int(h), table.take(idx[s:e]), config)
        for h, s, e in zip(hosts, starts, bounds)
    ]
    return GroupingResult(views, discards)


def write_discard_report(path, discards) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line_ref", "reason"])
        for d in discards:
            w.writerow([d.line_ref, d.reason])


@dataclass(frozen=True)
class BinnedCounts:
    flow_count: np.ndarray
    packet_sum: np.ndarray
    byte_sum: np.ndarray

    def nonempty_counts(self) -> np.ndarray:
        return self.flow_count[self.flow_count > 0]

    def as_matrix(self) -> np.ndarray:
        """(288, 3) array of (flow_count, packet_sum, byte_sum) per bin."""
        return np.column_stack([self.flow_count, self.packet_sum, self.byte_sum])


def bin_index(start_time, day_start: int) -> np.ndarray:
    return (np.asarray(start_time, dtype=np.int64) - day_start) // BIN_MS


def bin_flows(view: HostTrafficView, config: NetworkConfig | None = None) -> BinnedCounts:
    """Half-open 5-minute bins aligned to the day start, keyed on start time."""
    day_start = view.day_start if config is None else config.day_start
    f = view.flows
    b = bin_index(f.start_time, day_start)
    if len(b) and (b.min() < 0 or b.max() >= N_BINS):
        raise ValueError("flow start time outside the 24-hour window")
    return BinnedCounts(
        flow_count=np.bincount(b, minlength=N_BINS).astype(np.int64),
        packet_sum=np.bincount(b, weights=f.packets, minlength=N_BINS).astype(np.int64),
        byte_sum=np.bincount(b, weights=f.bytes, minlength=N_BINS).astype(np.int64),
    )


def _initiator(device_port: int, host_port: int, well_known) -> Initiator:
    if device_port >= 1024 and host_port in well_known:
        return Initiator.DEVICE
    if host_port >= 1024 and device_port in well_known:
        return Initiator.HOST
    return Initiator.UNKNOWN


def infer_initiator(flow, config: NetworkConfig) -> Initiator:
    """Port heuristic: the side on an ephemeral port talking to a well-known
    port is the initiator."""
    src_internal, dst_internal = config.is_internal(
        np.array([ip_to_int(flow.src_ip), ip_to_int(flow.dst_ip)])
    )
    if src_internal == dst_internal:
        raise ValueError("flow must have exactly one internal endpoint")
    if src_internal:
        return _initiator(flow.src_port, flow.dst_port, config.well_known_ports)
    return _initiator(flow.dst_port, flow.src_port, config.well_known_ports)


def initiator_codes(view: HostTrafficView, well_known) -> np.ndarray:
    """Per-flow initiator as +1 (device), -1 (host), 0 (unknown)."""
    wk = np.array(sorted(well_known), dtype=np.int64)
    dev_eph = view.device_port >= 1024
    host_eph = view.host_port >= 1024
    dev_wk = np.isin(view.device_port, wk)
    host_wk = np.isin(view.host_port, wk)
    return np.where(dev_eph & host_wk, 1, np.where(host_eph & dev_wk, -1, 0))
