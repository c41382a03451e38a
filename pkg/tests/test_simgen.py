import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_trace
from tracebleed.errors import InputError
from tracebleed.simgen import (MAX_SITES_PER_USER, ScenarioConfig, UserProfile, build_scenario, emit_trace,
                               leaky_generator, make_site_library, make_users, membership, plan_sessions,
                               render_sessions, site_library_from_captures)
from tracebleed.trace import US_PER_S, ip_to_int, split_by_time

SMALL_SCENARIO = ScenarioConfig(n_users=12, n_sites=10, loads_per_site=5, n_in=5, target_packets=20000)


@pytest.fixture(scope="module")
def library():
    return make_site_library(30, 50, 0)


@pytest.fixture(scope="module")
def scenario():
    return build_scenario(SMALL_SCENARIO)


def _cols_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(a.columns[k], b.columns[k]) for k in a.columns)


# -- sites and users -------------------------------------------------------

def test_site_library_shape(library):
    assert len(library) == 30 and all(len(s.loads) == 50 for s in library)
    # medians are of integer lengths, so two of thirty sites can tie; the pacing tells them apart
    profiles = [(s.median_pkt_len, float(np.median(np.concatenate([f.iat[1:] for f in s.loads[0].flows]))))
                for s in library]
    assert len(set(profiles)) == len(profiles)
    assert len({p[0] for p in profiles}) >= 25
    with pytest.raises(ValueError):
        make_site_library(0, 5)


def test_loads_within_jitter(library):
    site = library[3]
    base = site.loads[0]
    for load in site.loads[1:]:
        for f0, f in zip(base.flows, load.flows):
            assert len(f) == len(f0) and f.dst_port == f0.dst_port
            # each load is the site template scaled by at most the jitter, so two loads differ by a bounded ratio
            lo, hi = (1 - site.iat_jitter) / (1 + site.iat_jitter), (1 + site.iat_jitter) / (1 - site.iat_jitter)
            ratio = f.iat[1:] / f0.iat[1:]
            assert np.all((ratio >= lo - 1e-12) & (ratio <= hi + 1e-12))
            assert np.all(np.abs(f.pkt_len.astype(int) - f0.pkt_len.astype(int)) <= 2 * site.len_jitter)


def test_users(library):
    users = make_users(50, library, 0)
    assert len(users) == 50
    assert len({(u.site_subset, u.preference) for u in users}) == 50
    assert len({u.src_ip for u in users}) == 50
    for u in users:
        assert 1 <= len(u.site_subset) <= MAX_SITES_PER_USER
        assert abs(sum(u.preference) - 1) <= 1e-9
    assert make_users(50, library, 0) == users
    with pytest.raises(InputError):
        make_users(3, library[:1], 0, max_tries=5)
    with pytest.raises(ValueError):
        UserProfile(0, (1, 2), (0.5, 0.6), 1)
    with pytest.raises(ValueError):
        UserProfile(0, tuple(range(7)), (1 / 7,) * 7, 1)


def test_degenerate_preference(library):
    u = UserProfile(0, (2, 5), (0.0, 1.0), 100)
    sessions = plan_sessions([u], library, 500.0, 0.1, seed=1)
    assert sessions and {s.site_id for s in sessions} == {5}


# -- emission --------------------------------------------------------------

def test_zero_rate_is_empty(library):
    users = make_users(3, library, 0)
    assert len(emit_trace(users, library, 100.0, 0.0)) == 0
    with pytest.raises(ValueError):
        emit_trace(users, library, 0.0, 1.0)


def test_single_session_replays_load(library):
    u = UserProfile(0, (4,), (1.0,), 100)
    sessions = plan_sessions([u], library, 100.0, 0.1, seed=3)
    assert len(sessions) >= 1
    one = sessions[:1]
    tr = render_sessions(one, [u], library)
    load = library[4].loads[one[0].load_index]
    want = sorted(round((one[0].start + f.offset + t) * US_PER_S) for f in load.flows for t in np.cumsum(f.iat))
    assert tr.columns["ts_us"].tolist() == want
    assert sorted(tr.columns["pkt_len"].tolist()) == sorted(int(x) for f in load.flows for x in f.pkt_len)
    assert set(tr.sources()) == {u.source_id}


def test_session_counts_follow_rate(library):
    users = make_users(10, library, 0)
    rate, duration = 0.05, 400.0
    counts = [len(plan_sessions(users, library, duration, rate, seed=s)) / len(users) for s in range(20)]
    lam = rate * duration
    sigma = np.sqrt(lam / (20 * len(users)))
    assert abs(np.mean(counts) - lam) <= 3 * sigma


def test_emit_deterministic(library):
    users = make_users(5, library, 0)
    a = emit_trace(users, library, 200.0, 0.05, seed=9)
    assert _cols_equal(a, emit_trace(users, library, 200.0, 0.05, seed=9))
    assert np.all(np.diff(a.columns["ts_us"]) >= 0)


def test_user_statistics_stable_across_halves(library):
    users = make_users(20, library, 0)
    tr = emit_trace(users, library, 2000.0, 0.05, 0)
    c = tr.columns
    mid = (int(c["ts_us"][0]) + int(c["ts_us"][-1])) // 2

    def quartiles(first):
        mask = (c["ts_us"] < mid) if first else (c["ts_us"] >= mid)
        return {u.user_id: np.percentile(c["pkt_len"][mask & (c["src_ip"] == u.src_ip)], [25, 50, 75])
                for u in users}

    a, b = quartiles(True), quartiles(False)
    matched = sum(min(b, key=lambda v: np.abs(a[u] - b[v]).sum()) == u for u in a)
    # chance level is one in twenty
    assert matched >= 15


def test_library_from_captures():
    load = make_trace([(0.0, "10.0.0.1", "9.9.9.9", 5000, 443, "TCP", 100),
                       (0.5, "10.0.0.1", "8.8.8.8", 5001, 80, "TCP", 60),
                       (1.0, "10.0.0.1", "9.9.9.9", 5000, 443, "TCP", 1400),
                       (1.5, "10.0.0.1", "8.8.8.8", 5001, 80, "TCP", 70)])
    sites = site_library_from_captures([[load, load]])
    assert len(sites) == 1 and len(sites[0].loads) == 2
    f0, f1 = sites[0].loads[0].flows
    assert (f0.offset, f0.iat.tolist(), f0.pkt_len.tolist(), f0.dst_port) == (0.0, [0.0, 1.0], [100, 1400], 443)
    assert (f1.offset, f1.iat.tolist(), f1.dst_port) == (0.5, [0.0, 1.0], 80)
    u = UserProfile(0, (0,), (1.0,), 77)
    assert len(emit_trace([u], sites, 100.0, 0.05, 0)) % 4 == 0


# -- scenario and ground truth ---------------------------------------------

def test_scenario_matches_design(scenario, tmp_path):
    sp = split_by_time(scenario.trace)
    truth = membership(sp.T, sp.D)
    assert set(truth) == {u.source_id for u in scenario.users}
    assert all((truth[s] == "IN") == d["in_D"] for s, d in scenario.designed.items())
    v_sources = set(sp.V.sources())
    assert all((s in v_sources) == d["in_V"] for s, d in scenario.designed.items())
    assert sum(v == "IN" for v in truth.values()) == SMALL_SCENARIO.n_in
    scenario.save_descriptor(tmp_path / "s.json")
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["config"]["seed"] == 0 and d["session_rate"] == scenario.session_rate


def test_scenario_deterministic(scenario):
    assert _cols_equal(scenario.trace, build_scenario(SMALL_SCENARIO).trace)
    with pytest.raises(ValueError):
        build_scenario(ScenarioConfig(n_users=5, n_in=5))


def test_membership_example():
    T = make_trace([(0, "10.0.0.1", "1.1.1.1", 1, 2, "TCP", 60), (1, "10.0.0.2", "1.1.1.1", 1, 2, "TCP", 60)])
    D = make_trace([(5, "10.0.0.2", "1.1.1.1", 1, 2, "TCP", 60), (6, "10.0.0.3", "1.1.1.1", 1, 2, "TCP", 60)])
    assert membership(T, D) == {"10.0.0.1": "OUT", "10.0.0.2": "IN"}


# -- leaky generator -------------------------------------------------------

def test_leaky_generator(scenario):
    D = split_by_time(scenario.trace).D
    out, smap = leaky_generator(D, 4, seed=2)
    assert out.volume_multiplier == 4 and out.label == "leaky_4x"
    assert set(out.sources()) == set(smap)
    assert set(smap.values()) <= set(D.sources())
    assert out.columns["pkt_len"].min() >= 40 and out.columns["pkt_len"].max() <= 1500
    again, smap2 = leaky_generator(D, 4, seed=2)
    assert smap2 == smap and _cols_equal(out, again)
    with pytest.raises(ValueError):
        leaky_generator(D, 0)
    with pytest.raises(ValueError):
        leaky_generator(D, 1, memorize_prob=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_leaky_replays_whole_sources(seed):
    D = make_trace([(t, "10.0.0.1", "1.1.1.1", 1000, 80, "TCP", 100 + t) for t in range(6)]
                   + [(t + 0.5, "10.0.0.2", "1.1.1.1", 1000, 80, "TCP", 500) for t in range(4)])
    out, smap = leaky_generator(D, 3, seed=seed, memorize_prob=1.0, iat_jitter=0.0, len_jitter=0, time_jitter=0.0)
    # with every source memorized in each of 3 epochs, each source is copied 3 times, packet for packet
    assert len(smap) == 6 and len(out) == 3 * len(D)
    for pseudo, real in smap.items():
        n_out = int(np.sum(out.columns["src_ip"] == ip_to_int(pseudo)))
        assert n_out == int(np.sum(D.columns["src_ip"] == ip_to_int(real)))

