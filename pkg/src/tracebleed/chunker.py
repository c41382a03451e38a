"""Sliding-window chunking of a trace into per-source sets of five-tuple flows."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ._npz import save_npz
from .errors import ConfigError
from .trace import US_PER_S, Protocol, SyntheticTrace, Trace, int_to_ip, ip_to_int


@dataclasses.dataclass(frozen=True)
class ChunkConfig:
    window: float
    stride: float
    min_active_flows: int = 3
    min_packets_per_flow: int = 5
    min_chunks_per_source: int = 10
    max_flows_per_chunk: int = 64
    max_packets_per_flow: int = 256

    def __post_init__(self):
        if not (self.window > 0 and 0 < self.stride <= self.window):
            raise ConfigError(f"need 0 < stride <= window, got stride={self.stride}, window={self.window}")
        for name in ("min_active_flows", "min_packets_per_flow", "min_chunks_per_source",
                     "max_flows_per_chunk", "max_packets_per_flow"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.window_us < 1 or self.stride_us < 1:
            raise ConfigError("window and stride must be at least one microsecond")

    @property
    def window_us(self) -> int:
        return round(self.window * US_PER_S)

    @property
    def stride_us(self) -> int:
        return round(self.stride * US_PER_S)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config(target: Trace, **overrides) -> ChunkConfig:
    """Window = 1/10 of the target's duration, stride = window/10."""
    duration = target.duration
    if duration <= 0:
        raise ConfigError("target trace must span a positive duration")
    window = duration / 10
    return ChunkConfig(window=window, stride=window / 10, **overrides)


class FiveTuple(NamedTuple):
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol


@dataclasses.dataclass(eq=False)
class Flow:
    """One five-tuple's packets inside a window: (iat seconds, pkt_len) per packet."""

    key: FiveTuple
    iat: np.ndarray
    pkt_len: np.ndarray
    packet_index: np.ndarray | None = None

    def __post_init__(self):
        self.iat = np.asarray(self.iat, dtype=np.float64)
        self.pkt_len = np.asarray(self.pkt_len, dtype=np.float64)
        if self.iat.shape != self.pkt_len.shape or self.iat.ndim != 1 or len(self.iat) == 0:
            raise ValueError("flow needs matching, non-empty iat and pkt_len sequences")

    def __len__(self) -> int:
        return len(self.iat)

    @property
    def features(self) -> np.ndarray:
        return np.stack([self.iat, self.pkt_len], axis=1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Flow):
            return NotImplemented
        return (self.key == other.key and np.array_equal(self.iat, other.iat)
                and np.array_equal(self.pkt_len, other.pkt_len))


@dataclasses.dataclass(eq=False)
class Chunk:
    source_id: str
    window_index: int
    window_start: float
    flows: tuple[Flow, ...]
    normalized: bool = False

    def __post_init__(self):
        self.flows = tuple(self.flows)

    @property
    def n_packets(self) -> int:
        return sum(len(f) for f in self.flows)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Chunk):
            return NotImplemented
        return (self.source_id == other.source_id and self.window_index == other.window_index
                and self.window_start == other.window_start and self.normalized == other.normalized
                and len(self.flows) == len(other.flows)
                and all(a == b for a, b in zip(self.flows, other.flows)))


@dataclasses.dataclass(eq=False)
class ChunkSet:
    chunks: list[Chunk]
    config: ChunkConfig
    anchor_us: int = 0
    drop_report: dict[str, str] = dataclasses.field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        self.source_index: dict[str, list[int]] = {}
        for i, ch in enumerate(self.chunks):
            self.source_index.setdefault(ch.source_id, []).append(i)

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self) -> Iterator[Chunk]:
        return iter(self.chunks)

    def __getitem__(self, i: int) -> Chunk:
        return self.chunks[i]

    @property
    def sources(self) -> list[str]:
        return sorted(self.source_index, key=ip_to_int)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.source_id for c in self.chunks], dtype=object)

    def subset(self, indices: Sequence[int]) -> "ChunkSet":
        return ChunkSet([self.chunks[i] for i in indices], self.config, self.anchor_us,
                        dict(self.drop_report), self.normalized)

    def for_sources(self, sources) -> "ChunkSet":
        keep = set(sources)
        return self.subset([i for i, c in enumerate(self.chunks) if c.source_id in keep])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChunkSet):
            return NotImplemented
        return (self.config == other.config and self.anchor_us == other.anchor_us
                and self.drop_report == other.drop_report and self.normalized == other.normalized
                and len(self) == len(other) and all(a == b for a, b in zip(self.chunks, other.chunks)))


class _FlowTable(NamedTuple):
    flow_id: np.ndarray      # per packet
    keys: list[FiveTuple]    # per flow id
    flow_src: np.ndarray     # per flow id: source ip (uint32)


def _flow_table(trace: Trace) -> _FlowTable:
    # Flow ids follow five-tuple order, so one source's flows are contiguous.
    key = np.stack([trace.src_ip.astype(np.int64), trace.dst_ip.astype(np.int64),
                    trace.src_port.astype(np.int64), trace.dst_port.astype(np.int64),
                    trace.protocol.astype(np.int64)], axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    keys = [FiveTuple(int_to_ip(r[0]), int_to_ip(r[1]), int(r[2]), int(r[3]), Protocol(int(r[4]))) for r in uniq]
    return _FlowTable(inverse.reshape(-1), keys, uniq[:, 0])


def window_starts(trace: Trace, config: ChunkConfig) -> np.ndarray:
    """Window origins k*S from the trace's first timestamp, through the last packet."""
    if len(trace) == 0:
        return np.zeros(0, dtype=np.int64)
    t0, t1 = int(trace.ts_us[0]), int(trace.ts_us[-1])
    n = (t1 - t0) // config.stride_us + 1
    return t0 + config.stride_us * np.arange(n, dtype=np.int64)


def chunk(trace: Trace, config: ChunkConfig) -> ChunkSet:
    """Cut ``trace`` into overlapping windows and build per-source chunks.

    A chunk is kept when at least ``min_active_flows`` of its flows carry at
    least ``min_packets_per_flow`` packets inside the window. Sources left with
    fewer than ``min_chunks_per_source`` chunks are dropped entirely; every
    dropped source is listed in ``drop_report`` with a reason.
    """
    if len(trace) == 0:
        return ChunkSet([], config)
    ts = trace.ts_us
    table = _flow_table(trace)
    starts = window_starts(trace, config)
    w_us = config.window_us
    lo_idx = np.searchsorted(ts, starts, side="left")
    hi_idx = np.searchsorted(ts, starts + w_us, side="left")
    pkt_len = trace.pkt_len.astype(np.float64)

    chunks: list[Chunk] = []
    for k, (start, lo, hi) in enumerate(zip(starts, lo_idx, hi_idx)):
        if hi - lo == 0:
            continue
        fids = table.flow_id[lo:hi]
        order = np.argsort(fids, kind="stable")
        sorted_fids = fids[order]
        uniq, first, counts = np.unique(sorted_fids, return_index=True, return_counts=True)
        srcs = table.flow_src[uniq]
        long_enough = counts >= config.min_packets_per_flow
        src_vals, src_first, src_counts = np.unique(srcs, return_index=True, return_counts=True)
        n_active = np.add.reduceat(long_enough.astype(np.int64), src_first)
        packets = lo + order
        for s_val, s_first, s_count, active in zip(src_vals, src_first, src_counts, n_active):
            if active < config.min_active_flows:
                continue
            sel = np.arange(s_first, s_first + s_count)
            if len(sel) > config.max_flows_per_chunk:
                # stable: ties keep canonical five-tuple order
                by_size = np.argsort(-counts[sel], kind="stable")[: config.max_flows_per_chunk]
                sel = np.sort(sel[by_size])
            flows = []
            for j in sel:
                idx = packets[first[j]: first[j] + counts[j]][: config.max_packets_per_flow]
                t = ts[idx]
                iat = np.empty(len(idx), dtype=np.float64)
                iat[0] = 0.0
                iat[1:] = np.diff(t) / US_PER_S
                flows.append(Flow(table.keys[uniq[j]], iat, pkt_len[idx], idx))
            chunks.append(Chunk(int_to_ip(s_val), k, float(start) / US_PER_S, tuple(flows)))

    per_source: dict[str, int] = {}
    for ch in chunks:
        per_source[ch.source_id] = per_source.get(ch.source_id, 0) + 1
    drop: dict[str, str] = {}
    for s in trace.sources():
        n = per_source.get(s, 0)
        if n == 0:
            drop[s] = "inactive"
        elif n < config.min_chunks_per_source:
            drop[s] = f"too_few_chunks:{n}"
    kept = [c for c in chunks if c.source_id not in drop]
    return ChunkSet(kept, config, anchor_us=int(ts[0]), drop_report=drop)


def chunk_synthetic(synth: SyntheticTrace | Trace, config: ChunkConfig) -> ChunkSet:
    """Chunk a synthetic trace with the attack's W and S, anchored at its own start."""
    return chunk(synth, config)


# -- serialization --------------------------------------------------------

def save_chunkset(chunkset: ChunkSet, directory: str | Path) -> None:
    """Write one ``.npz`` feature file per source plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for n, source in enumerate(chunkset.sources):
        chs = [chunkset.chunks[i] for i in chunkset.source_index[source]]
        flows = [f for c in chs for f in c.flows]
        keys = np.array([[ip_to_int(f.key.dst_ip), f.key.src_port, f.key.dst_port, int(f.key.protocol)]
                         for f in flows], dtype=np.int64).reshape(-1, 4)
        has_index = all(f.packet_index is not None for f in flows)
        name = f"source_{n:05d}.npz"
        save_npz(
            directory / name,
            window_index=np.array([c.window_index for c in chs], dtype=np.int64),
            window_start=np.array([c.window_start for c in chs], dtype=np.float64),
            flows_per_chunk=np.array([len(c.flows) for c in chs], dtype=np.int64),
            flow_keys=keys,
            flow_len=np.array([len(f) for f in flows], dtype=np.int64),
            iat=np.concatenate([f.iat for f in flows]) if flows else np.zeros(0),
            pkt_len=np.concatenate([f.pkt_len for f in flows]) if flows else np.zeros(0),
            packet_index=(np.concatenate([f.packet_index for f in flows]) if has_index and flows
                          else np.zeros(0, dtype=np.int64)),
            has_index=np.array(has_index),
        )
        files[source] = name
    manifest = {
        "config": chunkset.config.to_dict(),
        "anchor_us": chunkset.anchor_us,
        "normalized": chunkset.normalized,
        "drop_report": dict(sorted(chunkset.drop_report.items())),
        "order": [[c.window_index, c.source_id] for c in chunkset.chunks],
        "files": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_chunkset(directory: str | Path) -> ChunkSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ChunkConfig(**manifest["config"])
    normalized = manifest["normalized"]
    by_key: dict[tuple[int, str], Chunk] = {}
    for source, name in manifest["files"].items():
        with np.load(directory / name) as npz:
            data = {k: npz[k] for k in npz.files}
        flow_len = data["flow_len"]
        offsets = np.concatenate([[0], np.cumsum(flow_len)])
        has_index = bool(data["has_index"])
        flows = []
        for j, fk in enumerate(data["flow_keys"]):
            a, b = offsets[j], offsets[j + 1]
            key = FiveTuple(source, int_to_ip(fk[0]), int(fk[1]), int(fk[2]), Protocol(int(fk[3])))
            flows.append(Flow(key, data["iat"][a:b], data["pkt_len"][a:b],
                              data["packet_index"][a:b] if has_index else None))
        pos = 0
        for w, start, nf in zip(data["window_index"], data["window_start"], data["flows_per_chunk"]):
            ch = Chunk(source, int(w), float(start), tuple(flows[pos: pos + nf]), normalized)
            pos += nf
            by_key[(int(w), source)] = ch
    chunks = [by_key[(w, s)] for w, s in manifest["order"]]
    return ChunkSet(chunks, config, manifest["anchor_us"], manifest["drop_report"], normalized)
