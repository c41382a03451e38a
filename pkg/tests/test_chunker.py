import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracebleed.chunker import (ChunkConfig, chunk, chunk_synthetic, default_config, load_chunkset,
                                save_chunkset)
from tracebleed.errors import ConfigError
from tracebleed.trace import SyntheticTrace, Trace, US_PER_S, ip_to_int

from conftest import make_trace, random_trace


def _per_window_source(n_windows, flows_per_window, packets=5, src="10.0.0.1"):
    rows = []
    for w in range(n_windows):
        for f in range(flows_per_window):
            for p in range(packets):
                rows.append((w * 10 + 0.5 + f * 0.1 + p * 0.01, src, "10.0.0.9", 2000 + f, 80, "TCP", 100 + p))
    return make_trace(rows)


def test_default_config_scaling():
    tr = make_trace([(0, "10.0.0.1", "10.0.0.2", 1, 2, "TCP", 60), (100, "10.0.0.1", "10.0.0.2", 1, 2, "TCP", 60)])
    c = default_config(tr)
    assert (c.window, c.stride) == (10.0, 1.0)
    tr = make_trace([(0, "10.0.0.1", "10.0.0.2", 1, 2, "TCP", 60), (1, "10.0.0.1", "10.0.0.2", 1, 2, "TCP", 60)])
    c = default_config(tr)
    assert c.window == pytest.approx(0.1) and c.stride == pytest.approx(0.01)
    with pytest.raises(ConfigError):
        default_config(make_trace([(5, "10.0.0.1", "10.0.0.2", 1, 2, "TCP", 60)] * 2))


def test_config_validation():
    with pytest.raises(ConfigError):
        ChunkConfig(window=1, stride=2)
    with pytest.raises(ConfigError):
        ChunkConfig(window=1, stride=1, min_active_flows=0)


def test_three_flows_every_window_kept():
    tr = _per_window_source(10, 3)
    cs = chunk(tr, ChunkConfig(window=10, stride=10))
    assert len(cs) == 10 and cs.sources == ["10.0.0.1"]
    assert all(len(c.flows) == 3 for c in cs)


def test_two_flows_inactive():
    tr = _per_window_source(10, 2)
    cs = chunk(tr, ChunkConfig(window=10, stride=10))
    assert len(cs) == 0
    assert cs.drop_report == {"10.0.0.1": "inactive"}


def test_too_few_chunks_reported():
    tr = _per_window_source(4, 3)
    cs = chunk(tr, ChunkConfig(window=10, stride=10))
    assert len(cs) == 0 and cs.drop_report["10.0.0.1"] == "too_few_chunks:4"


def test_flow_cap_keeps_largest_flows():
    rows = [(0.1 + f * 0.01 + p * 0.001, "10.0.0.1", "10.0.0.9", 3000 + f, 80, "TCP", 60)
            for f in range(5) for p in range(5 + f)]
    cs = chunk(make_trace(rows), ChunkConfig(window=1, stride=1, max_flows_per_chunk=3, min_chunks_per_source=1))
    assert sorted(len(f) for f in cs[0].flows) == [7, 8, 9]
    cs = chunk(make_trace(rows), ChunkConfig(window=1, stride=1, max_packets_per_flow=6, min_chunks_per_source=1))
    assert max(len(f) for f in cs[0].flows) == 6


def _oracle(trace: Trace, cfg: ChunkConfig):
    """Brute-force window scan: {(window, source): {five-tuple: (iat list, len list)}}."""
    t0, t1 = int(trace.ts_us[0]), int(trace.ts_us[-1])
    recs = list(trace)
    out = {}
    k = 0
    while t0 + k * cfg.stride_us <= t1:
        lo = t0 + k * cfg.stride_us
        hi = lo + cfg.window_us
        groups = {}
        for r in recs:
            t = round(r.timestamp * US_PER_S)
            if lo <= t < hi:
                key = (r.src_ip, r.dst_ip, r.src_port, r.dst_port, int(r.protocol))
                groups.setdefault(r.src_ip, {}).setdefault(key, []).append((t, r.pkt_len))
        for src, flows in groups.items():
            if sum(len(v) >= cfg.min_packets_per_flow for v in flows.values()) >= cfg.min_active_flows:
                out[(k, src)] = {key: ([0.0] + [(b[0] - a[0]) / US_PER_S for a, b in zip(v, v[1:])],
                                       [float(p[1]) for p in v]) for key, v in flows.items()}
        k += 1
    counts = {}
    for (_, s) in out:
        counts[s] = counts.get(s, 0) + 1
    return {k: v for k, v in out.items() if counts[k[1]] >= cfg.min_chunks_per_source}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(10.0, 2.0), (7.0, 7.0), (5.0, 1.5)]))
def test_chunk_matches_brute_force(seed, ws):
    tr = random_trace(np.random.default_rng(seed), n=250, n_src=3, n_dst=2, duration=40)
    cfg = ChunkConfig(window=ws[0], stride=ws[1], min_active_flows=2, min_packets_per_flow=3,
                      min_chunks_per_source=2)
    cs = chunk(tr, cfg)
    oracle = _oracle(tr, cfg)
    got = {(c.window_index, c.source_id): {(f.key.src_ip, f.key.dst_ip, f.key.src_port, f.key.dst_port,
                                            int(f.key.protocol)): (list(f.iat), list(f.pkt_len))
                                           for f in c.flows} for c in cs}
    assert got.keys() == oracle.keys()
    for k in got:
        assert got[k].keys() == oracle[k].keys()
        for fk in got[k]:
            assert np.allclose(got[k][fk][0], oracle[k][fk][0], atol=1e-12)
            assert got[k][fk][1] == oracle[k][fk][1]
    order = [(c.window_index, ip_to_int(c.source_id)) for c in cs]
    assert order == sorted(order)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_chunk_invariants(seed):
    tr = random_trace(np.random.default_rng(seed), n=300, n_src=3, n_dst=2, duration=30)
    cfg = ChunkConfig(window=6, stride=2, min_active_flows=2, min_packets_per_flow=3, min_chunks_per_source=1)
    cs = chunk(tr, cfg)
    for c in cs:
        assert sum(len(f) >= 3 for f in c.flows) >= 2
        for f in c.flows:
            assert f.iat[0] == 0 and np.all(f.iat >= 0)
            t = tr.ts_us[f.packet_index]
            assert np.all((t >= cs.anchor_us + c.window_index * cfg.stride_us)
                          & (t < cs.anchor_us + c.window_index * cfg.stride_us + cfg.window_us))
            # iat sums rebuild the within-window timestamps
            assert np.allclose(np.cumsum(f.iat), (t - t[0]) / US_PER_S, atol=1e-9)
    kept = set(cs.sources)
    assert all(s in kept or s in cs.drop_report for s in tr.sources())


def test_synthetic_identical_to_d_and_10x(rng):
    tr = random_trace(rng, n=400, n_src=3, n_dst=2, duration=30)
    cfg = ChunkConfig(window=6, stride=2, min_active_flows=2, min_packets_per_flow=3, min_chunks_per_source=2)
    assert chunk_synthetic(SyntheticTrace.from_trace(tr), cfg) == chunk(tr, cfg)
    big = random_trace(rng, n=4000, n_src=3, n_dst=2, duration=300)
    synth = SyntheticTrace.from_trace(big, volume_multiplier=10)
    assert len(chunk_synthetic(synth, cfg)) == len(_oracle(big, cfg))


def test_synthetic_sparse_is_empty():
    synth = SyntheticTrace.from_trace(_per_window_source(10, 2))
    assert len(chunk_synthetic(synth, ChunkConfig(window=10, stride=10))) == 0


def test_determinism_and_round_trip(tmp_path, rng):
    tr = random_trace(rng, n=400, n_src=3, n_dst=2, duration=30)
    cfg = ChunkConfig(window=6, stride=2, min_active_flows=2, min_packets_per_flow=3, min_chunks_per_source=2)
    a, b = chunk(tr, cfg), chunk(tr, cfg)
    assert a == b
    save_chunkset(a, tmp_path / "a")
    save_chunkset(b, tmp_path / "b")
    back = load_chunkset(tmp_path / "a")
    assert back == a
    assert all(np.array_equal(x.packet_index, y.packet_index) for c, d in zip(a, back) for x, y in zip(c.flows, d.flows))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
