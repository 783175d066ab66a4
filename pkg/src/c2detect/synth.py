"""Labelled synthetic NetFlow days with bot-like and normal host behaviour.

Bot hosts (C2 servers) talk to their devices in one beaconing train: nearly
constant gaps, about five packets per flow, and a couple of dominant
bytes-per-packet values, with an occasional larger payload flow. Normal
servers serve bursty sessions with widely varying flow sizes.

A profile can also "blend" a fraction of its hosts: each such host mixes in
flows drawn from the opposite class's process, which produces the class
overlap a realistic benchmark needs.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregate import DAY_MS, group_by_external_host
from .features import extract_features
from .flows import FlowTable, NetworkConfig
from .labels import LabeledDataset, LabelSet, label_rows

BOT = "bot"
NORMAL = "normal"

DEFAULT_DAY_START = 1_699_920_000_000  # 2023-11-14T00:00:00Z
DEFAULT_FAMILIES = ("zeus", "necurs", "emotet", "trickbot")
_HOST_POOL_BASE = int(ipaddress.IPv4Address("23.0.0.0"))
_DEVICE_BASE = int(ipaddress.IPv4Address("10.0.0.0"))
_SERVICE_PORTS = np.array([443, 80, 53, 25, 8080, 993])
_SERVICE_WEIGHTS = np.array([0.45, 0.3, 0.08, 0.05, 0.07, 0.05])


class InvalidProfile(ValueError):
    pass


@dataclass(frozen=True)
class SynthProfile:
    kind: str
    n_hosts: int = 100
    devices_per_host: tuple[int, int] = (3, 30)
    flows_per_device_pair: float = 3.0  # Poisson mean, plus one
    packets_median: float = 5.0
    packets_dispersion: float = 0.1  # bot: P(+-1 packet) each side; normal: lognormal sigma
    bytes_per_flow: float = 1000.0
    dominant_ratio_values: tuple[float, ...] = (102.75, 98.0)
    payload_fraction: float = 0.1
    interarrival_mean_ms: float = 680.0
    jitter_cv: float = 0.05
    burst_mean_flows: float = 4.0
    burst_gap_ms: float = 1500.0
    blend_fraction: float = 0.0
    blend_range: tuple[float, float] = (0.0, 0.0)
    families: tuple[str, ...] = DEFAULT_FAMILIES

    def __post_init__(self):
        if self.kind not in (BOT, NORMAL):
            raise InvalidProfile(f"unknown profile kind {self.kind!r}")
        lo, hi = self.devices_per_host
        if self.n_hosts < 0 or lo < 1 or hi < lo:
            raise InvalidProfile("host and device counts must be positive")
        positive = (self.flows_per_device_pair, self.packets_median, self.bytes_per_flow,
                    self.interarrival_mean_ms, self.burst_mean_flows, self.burst_gap_ms)
        if min(positive) <= 0 or self.packets_dispersion < 0 or self.jitter_cv < 0:
            raise InvalidProfile("distribution parameters must be positive")
        if self.kind == BOT:
            if not 1 <= len(self.dominant_ratio_values) <= 3:
                raise InvalidProfile("a bot profile needs 1 to 3 dominant ratio values")
            if not 0 < self.payload_fraction < 1:
                raise InvalidProfile("payload_fraction must be in (0, 1)")
            if self.packets_dispersion > 0.5:
                raise InvalidProfile("bot packets_dispersion is a probability <= 0.5")
            if not self.families:
                raise InvalidProfile("a bot profile needs at least one family name")
        if not 0 <= self.blend_fraction <= 1:
            raise InvalidProfile("blend_fraction must be in [0, 1]")
        if not 0 <= self.blend_range[0] <= self.blend_range[1] <= 1:
            raise InvalidProfile("blend_range must satisfy 0 <= lo <= hi <= 1")


def bot_profile(**overrides) -> SynthProfile:
    return SynthProfile(kind=BOT, **overrides)


def normal_profile(**overrides) -> SynthProfile:
    base = dict(
        kind=NORMAL,
        n_hosts=900,
        devices_per_host=(5, 40),
        flows_per_device_pair=8.0,
        packets_median=19.0,
        packets_dispersion=0.8,
        bytes_per_flow=14000.0,
        dominant_ratio_values=(),
        payload_fraction=0.5,
    )
    base.update(overrides)
    return SynthProfile(**base)


# -- per-host flow processes -------------------------------------------------

def _device_sequence(rng, profile: SynthProfile):
    lo, hi = profile.devices_per_host
    n_dev = int(rng.integers(lo, hi + 1))
    devices = _DEVICE_BASE + rng.choice(2**24 - 2, size=n_dev, replace=False) + 1
    per_pair = 1 + rng.poisson(max(profile.flows_per_device_pair - 1, 0.0), size=n_dev)
    return np.repeat(devices, per_pair)


def _bot_flows(rng, profile: SynthProfile):
    """Columns for one beaconing host: device, packets, bytes, start offsets,
    durations and host port."""
    devices = _device_sequence(rng, profile)
    rng.shuffle(devices)
    n = len(devices)
    q = profile.packets_dispersion
    pkts = np.rint(profile.packets_median).astype(np.int64) + rng.choice(
        [-1, 0, 1], size=n, p=[q, 1 - 2 * q, q])
    pkts = np.maximum(pkts, 1)
    values = np.asarray(profile.dominant_ratio_values, dtype=np.float64)
    weights = np.full(len(values), 0.2 / max(len(values) - 1, 1))
    weights[0] = 0.8 if len(values) > 1 else 1.0
    ratio = rng.choice(values, size=n, p=weights)
    # payload flows carry the bytes needed to reach the target mean per flow
    mean_pkts = float(np.rint(profile.packets_median))
    heartbeat = mean_pkts * float(values @ weights)
    f = profile.payload_fraction
    payload_ratio = max((profile.bytes_per_flow - (1 - f) * heartbeat) / (f * mean_pkts), 1.0)
    payload = rng.random(n) < f
    ratio = np.where(payload, payload_ratio, ratio)
    byts = np.rint(pkts * ratio).astype(np.int64)
    gaps = profile.interarrival_mean_ms * (1 + profile.jitter_cv * rng.standard_normal(max(n - 1, 0)))
    gaps = np.maximum(np.rint(gaps), 1).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(gaps)])
    span = int(offsets[-1])
    start = int(rng.integers(0, max(DAY_MS - span - 1000, 1)))
    dur = rng.integers(10, 200, size=n)
    host_port = np.full(n, 443 if rng.random() < 0.7 else 80)
    dev_init = np.ones(n, dtype=bool)
    return devices, pkts, byts, start + offsets, dur, host_port, dev_init


def _normal_flows(rng, profile: SynthProfile):
    devices = _device_sequence(rng, profile)
    n = len(devices)
    sigma = profile.packets_dispersion
    pkt_scale = rng.lognormal(0.0, 0.25)
    ratio_scale = rng.lognormal(0.0, 0.25)
    # lognormal parameterised so the mean equals the target
    pkts = rng.lognormal(np.log(profile.packets_median * pkt_scale) - sigma**2 / 2, sigma, size=n)
    pkts = np.maximum(np.rint(pkts), 1).astype(np.int64)
    mean_ratio = profile.bytes_per_flow / profile.packets_median * ratio_scale
    ratio = rng.lognormal(np.log(mean_ratio) - 0.18, 0.6, size=n)
    byts = np.maximum(np.rint(pkts * ratio), pkts).astype(np.int64)

    # bursts: consecutive flows of one device pair share a burst
    order = np.argsort(devices, kind="stable")
    devices = devices[order]
    new_burst = np.ones(n, dtype=bool)
    new_burst[1:] = (devices[1:] != devices[:-1]) | (rng.random(n - 1) < 1 / profile.burst_mean_flows)
    burst_id = np.cumsum(new_burst) - 1
    n_bursts = int(burst_id[-1]) + 1
    burst_start = rng.integers(0, DAY_MS - 3_600_000, size=n_bursts)
    within = rng.exponential(profile.burst_gap_ms, size=n)
    within[new_burst] = 0.0
    # cumulative offset inside each burst
    cum = np.cumsum(within)
    base = cum[np.flatnonzero(new_burst)][burst_id]
    starts = burst_start[burst_id] + np.rint(cum - base).astype(np.int64)
    dur = np.rint(rng.lognormal(np.log(2000.0), 1.0, size=n)).astype(np.int64)
    service = rng.choice(_SERVICE_PORTS, p=_SERVICE_WEIGHTS)
    host_port = np.where(rng.random(n) < 0.9, service, rng.choice(_SERVICE_PORTS, size=n))
    dev_init = rng.random(n) < rng.uniform(0.2, 1.0)
    return devices, pkts, byts, starts, dur, host_port, dev_init


_PROCESSES = {BOT: _bot_flows, NORMAL: _normal_flows}


def host_flows(rng, profile: SynthProfile, other: SynthProfile, host_ip: int,
               day_start: int, blend: float = 0.0) -> FlowTable:
    """All flows for one host; ``blend`` is the share of flows taken from the
    ``other`` profile's process."""
    own = _PROCESSES[profile.kind](rng, profile)
    cols = own
    if blend > 0:
        n_own = len(own[0])
        n_keep = int(round((1 - blend) * n_own))
        foreign = _PROCESSES[other.kind](rng, other)
        n_foreign = int(round(blend * len(foreign[0])))
        keep = np.sort(rng.choice(n_own, size=max(n_keep, 1), replace=False))
        take = np.sort(rng.choice(len(foreign[0]), size=n_foreign, replace=False))
        cols = tuple(np.concatenate([a[keep], b[take]]) for a, b in zip(own, foreign))
    devices, pkts, byts, offsets, dur, host_port, dev_init = cols
    n = len(devices)
    offsets = np.clip(offsets, 0, DAY_MS - 1)
    eph = rng.integers(49152, 65536, size=n)
    dev_port = np.where(dev_init, eph, host_port)
    h_port = np.where(dev_init, host_port, eph)
    src = np.where(dev_init, devices, host_ip)
    dst = np.where(dev_init, host_ip, devices)
    sport = np.where(dev_init, dev_port, h_port)
    dport = np.where(dev_init, h_port, dev_port)
    start = day_start + offsets.astype(np.int64)
    flags = np.where(rng.random(n) < 0.8, "PA", "FA").astype(object)
    return FlowTable(
        src_ip=src.astype(np.int64), dst_ip=dst.astype(np.int64),
        src_port=sport.astype(np.int64), dst_port=dport.astype(np.int64),
        bytes=byts.astype(np.int64), packets=pkts.astype(np.int64),
        start_time=start, end_time=start + dur.astype(np.int64),
        protocol=np.full(n, 6, dtype=np.int64), flag=flags,
    )


def default_config(day_start: int = DEFAULT_DAY_START) -> NetworkConfig:
    return NetworkConfig(("10.0.0.0/8",), day_start=day_start)


@dataclass
class SynthDay:
    flows: FlowTable
    truth: LabelSet
    host_kind: dict[str, str] = field(default_factory=dict)
    blend: dict[str, float] = field(default_factory=dict)


def generate_day(bot: SynthProfile, normal: SynthProfile, config: NetworkConfig | None = None,
                 seed: int = 0) -> SynthDay:
    """One day of flows plus the truth blacklist of bot hosts.

    Host addresses come from one shuffled external pool so address order does
    not reveal the class. Each host draws from its own RNG stream.
    """
    if bot.kind != BOT or normal.kind != NORMAL:
        raise InvalidProfile("generate_day expects a bot profile and a normal profile")
    config = config or default_config()
    if not config.is_internal(np.array([_DEVICE_BASE + 1]))[0]:
        raise InvalidProfile("network config must treat 10.0.0.0/8 as internal")
    n_total = bot.n_hosts + normal.n_hosts
    pool_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    slots = pool_rng.permutation(n_total)
    tables, truth, kinds, blends = [], {}, {}, {}
    for h in range(n_total):
        is_bot = h < bot.n_hosts
        prof, other = (bot, normal) if is_bot else (normal, bot)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(h,)))
        ip = _HOST_POOL_BASE + int(slots[h]) * 7 + 1
        blend = 0.0
        if prof.blend_fraction and rng.random() < prof.blend_fraction:
            blend = float(rng.uniform(*prof.blend_range))
        tables.append(host_flows(rng, prof, other, ip, config.day_start, blend))
        name = str(ipaddress.IPv4Address(ip))
        kinds[name] = prof.kind
        if blend:
            blends[name] = blend
        if is_bot:
            truth[name] = prof.families[h % len(prof.families)]
    flows = FlowTable.concat(tables)
    order = np.argsort(flows.start_time, kind="stable")
    return SynthDay(flows.take(order), LabelSet(truth, source="synthetic"), kinds, blends)


def day_dataset(day: SynthDay, config: NetworkConfig, day_index: int = 0) -> LabeledDataset:
    """Group, extract and label one synthetic day."""
    views = group_by_external_host(day.flows, config).views
    rows = [(v.host_ip, extract_features(v, config)) for v in views]
    return label_rows(rows, day.truth, day=day_index)


def generate_month(bot: SynthProfile, normal: SynthProfile, n_days: int = 30, seed: int = 0,
                   day_start: int = DEFAULT_DAY_START) -> list[LabeledDataset]:
    """Labelled feature datasets for ``n_days`` consecutive synthetic days."""
    out = []
    for d in range(n_days):
        config = default_config(day_start + d * DAY_MS)
        day = generate_day(bot, normal, config, seed=seed * 1000 + d)
        out.append(day_dataset(day, config, day_index=d))
    return out


def benchmark_profiles(n_bot: int = 115, n_normal: int = 700):
    """Profiles with class overlap, used for the desk-scale classifier benchmark.

    Some bots hide part of their traffic among normal-looking sessions and some
    benign services beacon like bots, so neither class is perfectly separable.
    """
    bot = bot_profile(n_hosts=n_bot, blend_fraction=0.3, blend_range=(0.2, 1.0))
    normal = normal_profile(n_hosts=n_normal, blend_fraction=0.04, blend_range=(0.2, 1.0))
    return bot, normal


def with_hosts(profile: SynthProfile, n_hosts: int) -> SynthProfile:
    return replace(profile, n_hosts=n_hosts)
