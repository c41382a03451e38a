import numpy as np
import pytest

from tracebleed.chunker import Chunk, ChunkConfig, ChunkSet, Flow
from tracebleed.encoder import EncoderConfig
from tracebleed.trace import Protocol, Trace, ip_to_int


def make_trace(rows, label=""):
    """rows: (ts_seconds, src, dst, sport, dport, proto, len)."""
    rows = list(rows)
    return Trace({
        "ts_us": [round(r[0] * 1_000_000) for r in rows],
        "src_ip": [ip_to_int(r[1]) for r in rows],
        "dst_ip": [ip_to_int(r[2]) for r in rows],
        "src_port": [r[3] for r in rows],
        "dst_port": [r[4] for r in rows],
        "protocol": [int(Protocol.parse(r[5])) for r in rows],
        "pkt_len": [r[6] for r in rows],
    }, label)


def random_trace(rng, n=300, n_src=4, n_dst=3, duration=100.0, label=""):
    ts = np.sort(rng.integers(0, int(duration * 1e6), n))
    return Trace({
        "ts_us": ts,
        "src_ip": rng.integers(1, n_src + 1, n) + ip_to_int("10.0.0.0"),
        "dst_ip": rng.integers(1, n_dst + 1, n) + ip_to_int("192.168.0.0"),
        "src_port": rng.integers(1000, 1003, n),
        "dst_port": rng.choice([80, 443], n),
        "protocol": rng.integers(0, 2, n),
        "pkt_len": rng.integers(40, 1501, n),
    }, label, presorted=True)


SMALL = EncoderConfig(latent_dim=16, num_attention_layers=1, num_heads=2, flow_embed_dim=16,
                      traffic_embed_dim=16, max_positions=16)


def toy_chunkset(seed=0, n_sources=4, n_chunks=12, spread=3.0):
    """Sources whose iat scales differ by a factor ``spread``; lengths share one distribution."""
    rng = np.random.default_rng(seed)
    chunks = []
    for w in range(n_chunks):
        for s in range(n_sources):
            flows = []
            for _ in range(3):
                n = int(rng.integers(5, 9))
                iat = np.r_[0.0, rng.exponential(1e-3 * spread ** s, n - 1)]
                flows.append(Flow(None, iat, rng.normal(600, 300, n).clip(40, 1500)))
            chunks.append(Chunk(f"10.0.0.{s + 1}", w, float(w), tuple(flows)))
    return ChunkSet(chunks, ChunkConfig(1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
