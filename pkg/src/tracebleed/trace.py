"""Packet records, columnar traces, pcap/CSV ingestion and temporal splitting.

Traces are stored column-wise in numpy arrays. Timestamps are integer
microseconds so that export/ingest round trips are exact.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import ipaddress
import logging
import struct
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyTraceError, ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)

CSV_COLUMNS = ("timestamp", "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "pkt_len")
US_PER_S = 1_000_000


class Protocol(enum.IntEnum):
    TCP = 0
    UDP = 1
    OTHER = 2

    @classmethod
    def parse(cls, value: str | int | "Protocol") -> "Protocol":
        if isinstance(value, Protocol):
            return value
        if isinstance(value, str):
            text = value.strip().upper()
            if text in cls.__members__:
                return cls[text]
            if not text.isdigit():
                raise ValueError(f"unknown protocol {value!r}")
            value = int(text)
        return {6: cls.TCP, 17: cls.UDP}.get(int(value), cls.OTHER)


def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(int(value)))


@dataclasses.dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    pkt_len: int

    def __post_init__(self):
        if self.pkt_len < 1:
            raise ValueError(f"pkt_len must be >= 1, got {self.pkt_len}")
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")


@dataclasses.dataclass
class IngestReport:
    records: int = 0
    kept: int = 0
    dropped_ipv6: int = 0
    dropped_non_ip: int = 0
    dropped_filter: int = 0


_FIELDS = ("ts_us", "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "pkt_len")
_DTYPES = {
    "ts_us": np.int64,
    "src_ip": np.uint32,
    "dst_ip": np.uint32,
    "src_port": np.int32,
    "dst_port": np.int32,
    "protocol": np.uint8,
    "pkt_len": np.int32,
}


class Trace:
    """An immutable, timestamp-sorted packet trace.

    Columns are read-only numpy arrays: ``ts_us`` (int64 microseconds),
    ``src_ip``/``dst_ip`` (uint32), ``src_port``/``dst_port``, ``protocol``
    (a :class:`Protocol` code) and ``pkt_len``.
    """

    def __init__(self, columns: dict[str, np.ndarray], label: str = "", *, presorted: bool = False):
        cols = {}
        n = None
        for name in _FIELDS:
            arr = np.asarray(columns[name], dtype=_DTYPES[name])
            if arr.ndim != 1:
                raise ValueError(f"column {name} must be 1-D")
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise ValueError("columns have different lengths")
            cols[name] = arr
        if n and not presorted:
            order = np.argsort(cols["ts_us"], kind="stable")
            if np.any(order != np.arange(n)):
                cols = {k: v[order] for k, v in cols.items()}
        if n and np.any(np.diff(cols["ts_us"]) < 0):
            raise ValueError("timestamps must be nondecreasing")
        if n:
            if cols["pkt_len"].min() < 1:
                raise ValueError("pkt_len must be >= 1")
            for name in ("src_port", "dst_port"):
                if cols[name].min() < 0 or cols[name].max() > 65535:
                    raise ValueError(f"{name} out of range")
        for arr in cols.values():
            arr.flags.writeable = False
        self._cols = cols
        self.label = label
        self.ingest_report: IngestReport | None = None

    # -- construction ---------------------------------------------------
    @classmethod
    def empty(cls, label: str = "") -> "Trace":
        return cls({name: np.zeros(0, dtype=_DTYPES[name]) for name in _FIELDS}, label)

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord], label: str = "") -> "Trace":
        records = list(records)
        cols = {
            "ts_us": [round(r.timestamp * US_PER_S) for r in records],
            "src_ip": [ip_to_int(r.src_ip) for r in records],
            "dst_ip": [ip_to_int(r.dst_ip) for r in records],
            "src_port": [r.src_port for r in records],
            "dst_port": [r.dst_port for r in records],
            "protocol": [int(Protocol.parse(r.protocol)) for r in records],
            "pkt_len": [r.pkt_len for r in records],
        }
        if not records:
            return cls.empty(label)
        return cls(cols, label)

    def replace(self, label: str | None = None, **columns: np.ndarray) -> "Trace":
        """Return a new trace with some columns swapped (re-sorted by time)."""
        cols = dict(self._cols)
        cols.update(columns)
        return Trace(cols, self.label if label is None else label)

    def take(self, index: np.ndarray | slice, label: str | None = None) -> "Trace":
        cols = {k: v[index] for k, v in self._cols.items()}
        return Trace(cols, self.label if label is None else label, presorted=isinstance(index, slice))

    @staticmethod
    def concat(traces: Sequence["Trace"], label: str = "") -> "Trace":
        if not traces:
            return Trace.empty(label)
        cols = {name: np.concatenate([t._cols[name] for t in traces]) for name in _FIELDS}
        return Trace(cols, label)

    # -- access ---------------------------------------------------------
    def column(self, name: str) -> np.ndarray:
        return self._cols[name]

    @property
    def columns(self) -> dict[str, np.ndarray]:
        return dict(self._cols)

    ts_us = property(lambda self: self._cols["ts_us"])
    src_ip = property(lambda self: self._cols["src_ip"])
    dst_ip = property(lambda self: self._cols["dst_ip"])
    src_port = property(lambda self: self._cols["src_port"])
    dst_port = property(lambda self: self._cols["dst_port"])
    protocol = property(lambda self: self._cols["protocol"])
    pkt_len = property(lambda self: self._cols["pkt_len"])

    @property
    def timestamps(self) -> np.ndarray:
        return self._cols["ts_us"] / US_PER_S

    @property
    def duration(self) -> float:
        if len(self) == 0:
            return 0.0
        return (int(self.ts_us[-1]) - int(self.ts_us[0])) / US_PER_S

    def sources(self) -> list[str]:
        return [int_to_ip(v) for v in np.unique(self.src_ip)]

    def __len__(self) -> int:
        return len(self._cols["ts_us"])

    def record(self, i: int) -> PacketRecord:
        c = self._cols
        return PacketRecord(
            timestamp=int(c["ts_us"][i]) / US_PER_S,
            src_ip=int_to_ip(c["src_ip"][i]),
            dst_ip=int_to_ip(c["dst_ip"][i]),
            src_port=int(c["src_port"][i]),
            dst_port=int(c["dst_port"][i]),
            protocol=Protocol(int(c["protocol"][i])),
            pkt_len=int(c["pkt_len"][i]),
        )

    def __iter__(self) -> Iterator[PacketRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return len(self) == len(other) and all(
            np.array_equal(self._cols[k], other._cols[k]) for k in _FIELDS
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(packets={len(self)}, label={self.label!r})"


class SyntheticTrace(Trace):
    """A trace produced by a generator; same schema plus its volume relative to D."""

    def __init__(self, columns: dict[str, np.ndarray], label: str = "", *,
                 volume_multiplier: float = 1.0, presorted: bool = False):
        if volume_multiplier <= 0:
            raise ValueError("volume_multiplier must be positive")
        super().__init__(columns, label, presorted=presorted)
        self.volume_multiplier = volume_multiplier

    @classmethod
    def from_trace(cls, trace: Trace, volume_multiplier: float = 1.0, label: str | None = None) -> "SyntheticTrace":
        return cls(trace.columns, trace.label if label is None else label,
                   volume_multiplier=volume_multiplier, presorted=True)


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    T: Trace
    V: Trace
    D: Trace
    ratios: tuple[float, float]

    @property
    def R(self) -> Trace:
        return Trace.concat([self.T, self.V], label="R")


# -- pcap -----------------------------------------------------------------

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_RAW_ALT = 12
LINKTYPE_LINUX_SLL = 113


def _l3_offset(linktype: int, data: bytes) -> tuple[int | None, str]:
    """Return (offset of the IP header, family) for one captured frame."""
    if linktype == LINKTYPE_ETHERNET:
        if len(data) < 14:
            return None, "short"
        off = 12
        ethertype = struct.unpack_from("!H", data, off)[0]
        while ethertype in (0x8100, 0x88A8) and len(data) >= off + 6:
            off += 4
            ethertype = struct.unpack_from("!H", data, off)[0]
        off += 2
        if ethertype == 0x0800:
            return off, "ipv4"
        if ethertype == 0x86DD:
            return off, "ipv6"
        return None, "other"
    if linktype in (LINKTYPE_RAW, LINKTYPE_RAW_ALT):
        if not data:
            return None, "short"
        version = data[0] >> 4
        return 0, {4: "ipv4", 6: "ipv6"}.get(version, "other")
    if linktype == LINKTYPE_LINUX_SLL:
        if len(data) < 16:
            return None, "short"
        proto = struct.unpack_from("!H", data, 14)[0]
        return 16, {0x0800: "ipv4", 0x86DD: "ipv6"}.get(proto, "other")
    if linktype == LINKTYPE_NULL:
        if len(data) < 4:
            return None, "short"
        family = struct.unpack_from("<I", data, 0)[0]
        if family > 0xFFFF:
            family = struct.unpack_from(">I", data, 0)[0]
        if family == 2:
            return 4, "ipv4"
        if family in (10, 24, 28, 30):
            return 4, "ipv6"
        return None, "other"
    raise ParseError(f"unsupported link type {linktype}", offset=20)


def ingest_pcap(path: str | Path, proto_filter: Iterable[Protocol | str] = (Protocol.TCP,)) -> Trace:
    """Read a classic libpcap capture (microsecond or nanosecond variant).

    Only IPv4 packets whose transport protocol is in ``proto_filter`` are kept;
    the packet length is the IP total length. Counts of dropped packets are
    attached to the returned trace as ``trace.ingest_report``.
    """
    wanted = {int(Protocol.parse(p)) for p in proto_filter}
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ParseError("truncated pcap global header", offset=0)
    magic_le = struct.unpack_from("<I", raw, 0)[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
    elif struct.unpack_from(">I", raw, 0)[0] in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = ">"
    else:
        raise ParseError(f"bad pcap magic 0x{magic_le:08x}", offset=0)
    magic = struct.unpack_from(endian + "I", raw, 0)[0]
    nanos = magic == PCAP_MAGIC_NS
    linktype = struct.unpack_from(endian + "I", raw, 20)[0] & 0x0FFFFFFF

    report = IngestReport()
    rows: list[tuple[int, int, int, int, int, int, int]] = []
    hdr = struct.Struct(endian + "IIII")
    off = 24
    size = len(raw)
    while off < size:
        if off + 16 > size:
            raise ParseError("truncated record header", offset=off)
        ts_sec, ts_frac, incl_len, _orig_len = hdr.unpack_from(raw, off)
        if off + 16 + incl_len > size:
            raise ParseError(f"record claims {incl_len} bytes past end of file", offset=off)
        data = raw[off + 16: off + 16 + incl_len]
        rec_off = off
        off += 16 + incl_len
        report.records += 1
        l3, family = _l3_offset(linktype, data)
        if family == "ipv6":
            report.dropped_ipv6 += 1
            continue
        if l3 is None or family != "ipv4":
            report.dropped_non_ip += 1
            continue
        if len(data) < l3 + 20:
            raise ParseError("truncated IPv4 header", offset=rec_off + 16 + l3)
        vihl, _tos, total_len, _ident, frag, _ttl, proto_num = struct.unpack_from("!BBHHHBB", data, l3)
        if vihl >> 4 != 4:
            report.dropped_non_ip += 1
            continue
        ihl = (vihl & 0x0F) * 4
        src, dst = struct.unpack_from("!II", data, l3 + 12)
        proto = int(Protocol.parse(proto_num))
        if proto not in wanted:
            report.dropped_filter += 1
            continue
        sport = dport = 0
        l4 = l3 + ihl
        if proto != Protocol.OTHER and (frag & 0x1FFF) == 0 and len(data) >= l4 + 4:
            sport, dport = struct.unpack_from("!HH", data, l4)
        ts_us = ts_sec * US_PER_S + (ts_frac // 1000 if nanos else ts_frac)
        rows.append((ts_us, src, dst, sport, dport, proto, max(total_len, 1)))
    report.kept = len(rows)
    if not rows:
        raise EmptyTraceError(f"{path}: no packets match protocol filter")
    arr = np.array(rows, dtype=np.int64)
    trace = Trace({name: arr[:, i] for i, name in enumerate(_FIELDS)}, label=Path(path).stem)
    trace.ingest_report = report
    if report.dropped_ipv6:
        log.info("%s: dropped %d IPv6 packets", path, report.dropped_ipv6)
    return trace


def export_pcap(trace: Trace, path: str | Path, *, nanosecond: bool = False) -> None:
    """Write headers-only Ethernet/IPv4 frames; IP total length carries pkt_len."""
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    out = bytearray(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    proto_num = {Protocol.TCP: 6, Protocol.UDP: 17, Protocol.OTHER: 1}
    c = trace.columns
    for i in range(len(trace)):
        proto = Protocol(int(c["protocol"][i]))
        if proto == Protocol.TCP:
            l4 = struct.pack("!HHIIBBHHH", int(c["src_port"][i]), int(c["dst_port"][i]), 0, 0, 0x50, 0x10, 65535, 0, 0)
        elif proto == Protocol.UDP:
            l4 = struct.pack("!HHHH", int(c["src_port"][i]), int(c["dst_port"][i]), max(int(c["pkt_len"][i]) - 20, 8), 0)
        else:
            l4 = b""
        ip = struct.pack("!BBHHHBBHII", 0x45, 0, int(c["pkt_len"][i]), 0, 0, 64, proto_num[proto], 0,
                         int(c["src_ip"][i]), int(c["dst_ip"][i]))
        frame = b"\x00" * 12 + b"\x08\x00" + ip + l4
        ts = int(c["ts_us"][i])
        sec, frac = divmod(ts, US_PER_S)
        if nanosecond:
            frac *= 1000
        out += struct.pack("<IIII", sec, frac, len(frame), 14 + int(c["pkt_len"][i]))
        out += frame
    Path(path).write_bytes(bytes(out))


# -- CSV ------------------------------------------------------------------

def _format_ts(ts_us: int) -> str:
    sec, frac = divmod(int(ts_us), US_PER_S)
    return f"{sec}.{frac:06d}"


def _parse_ts(text: str) -> int:
    value = Decimal(text.strip()) * US_PER_S
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def export_csv(trace: Trace, path: str | Path) -> None:
    c = trace.columns
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i in range(len(trace)):
            writer.writerow((
                _format_ts(c["ts_us"][i]),
                int_to_ip(c["src_ip"][i]),
                int_to_ip(c["dst_ip"][i]),
                int(c["src_port"][i]),
                int(c["dst_port"][i]),
                Protocol(int(c["protocol"][i])).name,
                int(c["pkt_len"][i]),
            ))


def ingest_csv(path: str | Path, label: str | None = None) -> Trace:
    """Read the canonical CSV schema; errors cite the offending line number."""
    report = IngestReport()
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in CSV_COLUMNS]
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            report.records += 1
            try:
                ts_s, src_s, dst_s, sp_s, dp_s, proto_s, len_s = (row[i] for i in idx)
            except IndexError:
                raise ParseError("row has too few fields", line=line) from None
            try:
                ts = _parse_ts(ts_s)
            except InvalidOperation:
                raise ParseError(f"bad timestamp {ts_s!r}", line=line) from None
            try:
                src = ipaddress.ip_address(src_s.strip())
                dst = ipaddress.ip_address(dst_s.strip())
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from None
            if src.version == 6 or dst.version == 6:
                report.dropped_ipv6 += 1
                continue
            try:
                sport, dport, plen = int(sp_s), int(dp_s), int(len_s)
            except ValueError:
                raise ParseError("non-numeric port or pkt_len", line=line) from None
            if not (0 <= sport <= 65535 and 0 <= dport <= 65535):
                raise ParseError(f"port out of range ({sport}, {dport})", line=line)
            if plen < 1:
                raise ParseError(f"pkt_len must be >= 1, got {plen}", line=line)
            try:
                proto = int(Protocol.parse(proto_s))
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from None
            rows.append((ts, int(src), int(dst), sport, dport, proto, plen))
    report.kept = len(rows)
    name = Path(path).stem if label is None else label
    if not rows:
        trace = Trace.empty(name)
    else:
        arr = np.array(rows, dtype=np.int64)
        trace = Trace({f: arr[:, i] for i, f in enumerate(_FIELDS)}, label=name)
    trace.ingest_report = report
    return trace


# -- splitting ------------------------------------------------------------

def _cut(ts: np.ndarray, k: int) -> int:
    """Move a cut index forward so equal timestamps stay in the earlier part."""
    while 0 < k < len(ts) and ts[k] == ts[k - 1]:
        k += 1
    return k


def split_by_time(trace: Trace, r_RD: float = 9 / 10, r_TV: float = 8 / 9) -> DatasetSplit:
    """Split by packet count in time order into T | V | D.

    The first ``r_RD`` of packets form R = T ∪ V (the attacker's reference),
    the rest D; within R the first ``r_TV`` form T.
    """
    if not (0 < r_RD < 1 and 0 < r_TV < 1):
        raise SplitError("split fractions must lie in (0, 1)")
    n = len(trace)
    if n == 0:
        raise SplitError("cannot split an empty trace")
    ts = trace.ts_us
    n_r = _cut(ts, round(r_RD * n))
    n_t = _cut(ts, round(r_TV * n_r))
    if n_t >= n_r:
        n_t = n_r
    sizes = (n_t, n_r - n_t, n - n_r)
    if min(sizes) <= 0:
        raise SplitError(f"split produces an empty partition (T, V, D sizes {sizes})")
    return DatasetSplit(
        T=trace.take(slice(0, n_t), label="T"),
        V=trace.take(slice(n_t, n_r), label="V"),
        D=trace.take(slice(n_r, n), label="D"),
        ratios=(r_RD, r_TV),
    )
