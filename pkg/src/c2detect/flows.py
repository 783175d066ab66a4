"""NetFlow records, CSV ingestion and internal/external endpoint roles."""

from __future__ import annotations

import enum
import ipaddress
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOW_COLUMNS = (
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "bytes",
    "packets",
    "start_time",
    "end_time",
    "protocol",
    "flag",
)

DEFAULT_WELL_KNOWN_PORTS = frozenset({80, 443, 53, 25})

# protocols without a port concept
_PORTLESS_PROTOCOLS = frozenset({1, 58})


class FlowParseError(ValueError):
    """Base class for per-line ingestion failures."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        self.reason = message
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(where + message)


class MalformedLine(FlowParseError):
    pass


class InvariantViolation(FlowParseError):
    pass


def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(int(value)))


@dataclass(frozen=True)
class FlowRecord:
    """One unidirectional NetFlow row. Times are epoch milliseconds UTC."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    bytes: int
    packets: int
    start_time: int
    end_time: int
    protocol: int
    flag: str = ""

    def __post_init__(self):
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise InvariantViolation(f"{name} out of range: {port}")
        if not 0 <= self.protocol <= 255:
            raise InvariantViolation(f"protocol out of range: {self.protocol}")
        if self.bytes < 0:
            raise InvariantViolation(f"negative byte count: {self.bytes}")
        if self.packets < 0 or (self.bytes > 0 and self.packets < 1):
            raise InvariantViolation(
                f"packet count {self.packets} inconsistent with {self.bytes} bytes"
            )
        if self.end_time < self.start_time:
            raise InvariantViolation(
                f"end_time {self.end_time} precedes start_time {self.start_time}"
            )
        if (self.src_port == 0 or self.dst_port == 0) and self.protocol not in _PORTLESS_PROTOCOLS:
            raise InvariantViolation(
                f"port 0 used with protocol {self.protocol}, which has ports"
            )

    def to_csv(self) -> str:
        return ",".join(str(getattr(self, c)) for c in FLOW_COLUMNS)


def _parse_int(text: str, name: str, line_no: int | None) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedLine(f"unparseable {name}: {text!r}", line_no) from None


def parse_flow_csv(line: str, line_no: int | None = None) -> FlowRecord:
    """Parse one headerless CSV row in the canonical column order.

    Raises
    ------
    MalformedLine
        Wrong field count, a non-integer numeric field or an invalid IPv4 address.
    InvariantViolation
        The fields parse but describe an impossible flow (e.g. end before start).
    """
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != len(FLOW_COLUMNS):
        raise MalformedLine(
            f"expected {len(FLOW_COLUMNS)} fields, got {len(fields)}", line_no
        )
    src, dst = fields[0].strip(), fields[1].strip()
    for ip in (src, dst):
        try:
            ipaddress.IPv4Address(ip)
        except ValueError:
            raise MalformedLine(f"invalid IPv4 address: {ip!r}", line_no) from None
    nums = [_parse_int(fields[i].strip(), FLOW_COLUMNS[i], line_no) for i in range(2, 9)]
    try:
        return FlowRecord(src, dst, *nums, flag=fields[9].strip())
    except InvariantViolation as exc:
        raise InvariantViolation(exc.reason, line_no) from None


@dataclass
class ParseReport:
    n_lines: int = 0
    errors: list[FlowParseError] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return len(self.errors)


def read_flow_lines(
    lines: Iterable[str], strict: bool = False, header: bool = False
) -> tuple[list[FlowRecord], ParseReport]:
    """Parse an iterable of CSV lines.

    In lenient mode bad lines are logged and collected in the report; in strict
    mode the first bad line raises. Blank lines are ignored and not counted.
    """
    records: list[FlowRecord] = []
    report = ParseReport()
    for line_no, line in enumerate(lines, start=1):
        if header and line_no == 1:
            continue
        if not line.strip():
            continue
        report.n_lines += 1
        try:
            records.append(parse_flow_csv(line, line_no))
        except FlowParseError as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            report.errors.append(exc)
    return records, report


def read_flow_file(path, strict: bool = False, header: bool = False):
    with open(path, encoding="utf-8", newline="") as fh:
        return read_flow_lines(fh, strict=strict, header=header)


def write_flow_file(path, records: Iterable[FlowRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_csv())
            fh.write("\n")


class EndpointRole(enum.Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


@dataclass(frozen=True)
class NetworkConfig:
    internal_ranges: tuple[ipaddress.IPv4Network, ...]
    day_start: int = 0
    well_known_ports: frozenset[int] = DEFAULT_WELL_KNOWN_PORTS

    def __post_init__(self):
        nets = tuple(
            n if isinstance(n, ipaddress.IPv4Network) else ipaddress.IPv4Network(n)
            for n in self.internal_ranges
        )
        if not nets:
            raise ValueError("internal_ranges must not be empty")
        for i, a in enumerate(nets):
            for b in nets[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"internal ranges overlap: {a} and {b}")
        object.__setattr__(self, "internal_ranges", nets)
        object.__setattr__(self, "well_known_ports", frozenset(self.well_known_ports))
        # (lo, hi) inclusive integer bounds for vectorised membership tests
        bounds = np.array(
            [(int(n.network_address), int(n.broadcast_address)) for n in nets],
            dtype=np.int64,
        )
        object.__setattr__(self, "_bounds", bounds)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(
            internal_ranges=tuple(data.get("internal_ranges", ())),
            day_start=int(data.get("day_start", 0)),
            well_known_ports=frozenset(
                data.get("well_known_ports", DEFAULT_WELL_KNOWN_PORTS)
            ),
        )

    def to_dict(self) -> dict:
        return {
            "internal_ranges": [str(n) for n in self.internal_ranges],
            "day_start": self.day_start,
            "well_known_ports": sorted(self.well_known_ports),
        }

    def is_internal(self, ips: np.ndarray) -> np.ndarray:
        """Vectorised membership test for integer-encoded addresses."""
        ips = np.asarray(ips, dtype=np.int64)[..., None]
        lo, hi = self._bounds[:, 0], self._bounds[:, 1]
        return ((ips >= lo) & (ips <= hi)).any(axis=-1)


def classify_endpoint(ip, config: NetworkConfig) -> EndpointRole:
    addr = ipaddress.IPv4Address(ip)
    if any(addr in net for net in config.internal_ranges):
        return EndpointRole.INTERNAL
    return EndpointRole.EXTERNAL


_INT_COLUMNS = FLOW_COLUMNS[:9]


@dataclass(frozen=True)
class FlowTable:
    """Columnar flow storage; addresses are uint32-valued int64 arrays."""

    src_ip: np.ndarray
    dst_ip: np.ndarray
    src_port: np.ndarray
    dst_port: np.ndarray
    bytes: np.ndarray
    packets: np.ndarray
    start_time: np.ndarray
    end_time: np.ndarray
    protocol: np.ndarray
    flag: np.ndarray

    def __len__(self) -> int:
        return len(self.start_time)

    def __iter__(self) -> Iterator[FlowRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> FlowRecord:
        return FlowRecord(
            int_to_ip(self.src_ip[i]),
            int_to_ip(self.dst_ip[i]),
            int(self.src_port[i]),
            int(self.dst_port[i]),
            int(self.bytes[i]),
            int(self.packets[i]),
            int(self.start_time[i]),
            int(self.end_time[i]),
            int(self.protocol[i]),
            str(self.flag[i]),
        )

    def take(self, idx) -> "FlowTable":
        return FlowTable(**{c: getattr(self, c)[idx] for c in FLOW_COLUMNS})

    @classmethod
    def empty(cls) -> "FlowTable":
        cols = {c: np.zeros(0, dtype=np.int64) for c in _INT_COLUMNS}
        return cls(**cols, flag=np.zeros(0, dtype=object))

    @classmethod
    def from_records(cls, records: Sequence[FlowRecord]) -> "FlowTable":
        if isinstance(records, FlowTable):
            return records
        records = list(records)
        if not records:
            return cls.empty()
        cols = {
            "src_ip": np.array([ip_to_int(r.src_ip) for r in records], dtype=np.int64),
            "dst_ip": np.array([ip_to_int(r.dst_ip) for r in records], dtype=np.int64),
        }
        for c in _INT_COLUMNS[2:]:
            cols[c] = np.array([getattr(r, c) for r in records], dtype=np.int64)
        cols["flag"] = np.array([r.flag for r in records], dtype=object)
        return cls(**cols)

    @classmethod
    def concat(cls, tables: Sequence["FlowTable"]) -> "FlowTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(**{c: np.concatenate([getattr(t, c) for t in tables]) for c in FLOW_COLUMNS})

    def to_csv_lines(self) -> Iterator[str]:
        src = [int_to_ip(v) for v in self.src_ip]
        dst = [int_to_ip(v) for v in self.dst_ip]
        cols = [self.src_port, self.dst_port, self.bytes, self.packets,
                self.start_time, self.end_time, self.protocol]
        for i in range(len(self)):
            nums = ",".join(str(int(c[i])) for c in cols)
            yield f"{src[i]},{dst[i]},{nums},{self.flag[i]}"
