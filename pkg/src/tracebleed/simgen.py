"""Emulated multi-user web traffic with known per-user behaviour.

Users are built from a library of site "loads" (the flows one page visit
produces). Each user visits a small, user-specific set of sites with a
user-specific preference, which is what makes sources tell-apart-able from
flow statistics alone.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .trace import US_PER_S, Protocol, SyntheticTrace, Trace, int_to_ip, ip_to_int, split_by_time

MAX_SITES_PER_USER = 6
USER_NET = ip_to_int("10.1.0.0")
SITE_NET = ip_to_int("172.16.0.0")
PSEUDO_NET = ip_to_int("10.200.0.0")
DST_PORTS = (443, 443, 443, 80, 8080, 8443)
EPHEMERAL = (49152, 65535)


@dataclasses.dataclass(frozen=True)
class FlowTemplate:
    offset: float            # start of the flow relative to the load start, seconds
    iat: np.ndarray          # seconds, first entry 0
    pkt_len: np.ndarray      # bytes
    dst_port: int
    dst_ip: int

    def __len__(self) -> int:
        return len(self.iat)


@dataclasses.dataclass(frozen=True)
class Load:
    flows: tuple[FlowTemplate, ...]

    @property
    def n_packets(self) -> int:
        return sum(len(f) for f in self.flows)


@dataclasses.dataclass(frozen=True)
class SiteProfile:
    site_id: int
    loads: tuple[Load, ...]
    iat_jitter: float
    len_jitter: int

    def __post_init__(self):
        if not self.loads:
            raise ValueError("a site needs at least one load")

    @property
    def median_pkt_len(self) -> float:
        return float(np.median(np.concatenate([f.pkt_len for l in self.loads for f in l.flows])))

    @property
    def mean_packets(self) -> float:
        return float(np.mean([l.n_packets for l in self.loads]))


@dataclasses.dataclass(frozen=True)
class UserProfile:
    user_id: int
    site_subset: tuple[int, ...]
    preference: tuple[float, ...]
    src_ip: int

    def __post_init__(self):
        if not 1 <= len(self.site_subset) <= MAX_SITES_PER_USER:
            raise ValueError("a user visits between 1 and 6 sites")
        if len(self.preference) != len(self.site_subset) or abs(sum(self.preference) - 1.0) > 1e-9:
            raise ValueError("preference must be a probability vector over site_subset")

    @property
    def source_id(self) -> str:
        return int_to_ip(self.src_ip)


# -- library ---------------------------------------------------------------

def make_site_library(n_sites: int = 30, loads_per_site: int = 50, seed: int = 0, *,
                      iat_jitter: float = 0.1, len_jitter: int = 16,
                      flows_range: tuple[int, int] = (2, 4),
                      packets_range: tuple[int, int] = (5, 9)) -> list[SiteProfile]:
    """Procedural sites: each has its own flow layout, packet-size mix and pacing.

    Every load of a site is the site's base template with iat scaled by a
    factor in [1 - iat_jitter, 1 + iat_jitter] and lengths shifted by at most
    ``len_jitter`` bytes.
    """
    if n_sites < 1 or loads_per_site < 1:
        raise ValueError("need n_sites >= 1 and loads_per_site >= 1")
    sites = []
    for s in range(n_sites):
        rng = np.random.default_rng([seed, s])
        n_flows = int(rng.integers(flows_range[0], flows_range[1] + 1))
        iat_median = float(np.exp(rng.uniform(np.log(0.003), np.log(0.3))))
        iat_sigma = float(rng.uniform(0.2, 0.9))
        big = float(rng.uniform(300, 1460))
        small = float(rng.uniform(40, 120))
        frac_big = float(rng.uniform(0.15, 0.9))
        dst_ips = SITE_NET + 256 * s + 1 + np.arange(int(rng.integers(1, 4)))
        base = []
        for _ in range(n_flows):
            n = int(rng.integers(packets_range[0], packets_range[1] + 1))
            iat = rng.lognormal(np.log(iat_median), iat_sigma, n)
            iat[0] = 0.0
            lens = np.where(rng.random(n) < frac_big, rng.normal(big, 40, n), rng.normal(small, 10, n))
            offset = float(rng.uniform(0, 3 * iat_median))
            base.append((offset, iat, np.clip(np.round(lens), 40, 1500),
                         int(rng.choice(DST_PORTS)), int(rng.choice(dst_ips))))
        loads = []
        for _ in range(loads_per_site):
            flows = []
            for offset, iat, lens, port, dip in base:
                scale = rng.uniform(1 - iat_jitter, 1 + iat_jitter, len(iat))
                shift = rng.integers(-len_jitter, len_jitter + 1, len(lens))
                flows.append(FlowTemplate(offset * float(rng.uniform(1 - iat_jitter, 1 + iat_jitter)),
                                          iat * scale, np.clip(lens + shift, 40, 1500).astype(np.int32),
                                          port, dip))
            loads.append(Load(tuple(flows)))
        sites.append(SiteProfile(s, tuple(loads), iat_jitter, len_jitter))
    return sites


def site_library_from_captures(captures: Sequence[Sequence[Trace]]) -> list[SiteProfile]:
    """Sites from recorded page loads: ``captures[s]`` holds one trace per load of site ``s``.

    Each five-tuple of a load becomes a flow template starting at its first
    packet's offset from the load's first packet. Source addresses and ports
    are dropped; users re-stamp them.
    """
    sites = []
    for s, loads in enumerate(captures):
        built = []
        for tr in loads:
            if len(tr) == 0:
                raise InputError(f"site {s} has an empty load capture")
            c = tr.columns
            t0 = int(c["ts_us"][0])
            keys = np.stack([c[k].astype(np.int64) for k in
                             ("src_ip", "dst_ip", "src_port", "dst_port", "protocol")], axis=1)
            _, fid = np.unique(keys, axis=0, return_inverse=True)
            fid = fid.ravel()
            flows = []
            for f in sorted(set(fid.tolist()), key=lambda f: int(np.flatnonzero(fid == f)[0])):
                idx = np.flatnonzero(fid == f)
                ts = c["ts_us"][idx]
                flows.append(FlowTemplate((int(ts[0]) - t0) / US_PER_S,
                                          np.r_[0.0, np.diff(ts) / US_PER_S],
                                          c["pkt_len"][idx].astype(np.int32),
                                          int(c["dst_port"][idx[0]]), int(c["dst_ip"][idx[0]])))
            built.append(Load(tuple(flows)))
        sites.append(SiteProfile(s, tuple(built), 0.0, 0))
    return sites


def make_users(n_users: int, sites: Sequence[SiteProfile], seed: int = 0, *,
               dirichlet_alpha: float = 0.3, max_tries: int = 100) -> list[UserProfile]:
    """Users with 1..6 sites each and a Dirichlet preference; profiles are unique."""
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    rng = np.random.default_rng(seed)
    seen = set()
    users = []
    max_k = min(MAX_SITES_PER_USER, len(sites))
    for u in range(n_users):
        for _ in range(max_tries):
            k = int(rng.integers(1, max_k + 1))
            subset = tuple(sorted(int(x) for x in rng.choice(len(sites), k, replace=False)))
            pref = rng.dirichlet(np.full(k, dirichlet_alpha)) if k > 1 else np.ones(1)
            pref = pref / pref.sum()
            key = (subset, tuple(np.round(pref, 6)))
            if key not in seen:
                break
        else:
            raise InputError(f"could not draw a unique profile for user {u} in {max_tries} tries")
        seen.add(key)
        users.append(UserProfile(u, subset, tuple(float(p) for p in pref), USER_NET + 1 + u))
    return users


# -- emission --------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Session:
    user_id: int
    start: float
    site_id: int
    load_index: int


def _site_lookup(sites: Sequence[SiteProfile]) -> dict[int, SiteProfile]:
    return {s.site_id: s for s in sites}


def plan_sessions(users: Sequence[UserProfile], sites: Sequence[SiteProfile], duration: float,
                  session_rate: float, seed: int = 0,
                  presence: Mapping[int, Sequence[tuple[float, float]]] | None = None) -> list[Session]:
    """Poisson session starts per user inside its presence intervals."""
    if duration <= 0 or session_rate < 0:
        raise ValueError("duration must be positive and session_rate nonnegative")
    lookup = _site_lookup(sites)
    out = []
    for user in users:
        rng = np.random.default_rng([seed, user.user_id])
        intervals = (presence or {}).get(user.user_id, [(0.0, duration)])
        for lo, hi in intervals:
            if hi <= lo:
                continue
            n = int(rng.poisson(session_rate * (hi - lo)))
            starts = np.sort(rng.uniform(lo, hi, n))
            picks = rng.choice(len(user.site_subset), n, p=np.asarray(user.preference))
            for t, p in zip(starts, picks):
                site = lookup[user.site_subset[p]]
                out.append(Session(user.user_id, float(t), site.site_id, int(rng.integers(len(site.loads)))))
    return out


def render_sessions(sessions: Sequence[Session], users: Sequence[UserProfile], sites: Sequence[SiteProfile],
                    seed: int = 0, label: str = "simgen") -> Trace:
    """Stamp each session's load with the user's address and the session start."""
    lookup = _site_lookup(sites)
    by_user = {u.user_id: u for u in users}
    rng = np.random.default_rng([seed, 1 << 20])
    parts = {k: [] for k in ("ts_us", "src_ip", "dst_ip", "src_port", "dst_port", "pkt_len")}
    for sess in sessions:
        load = lookup[sess.site_id].loads[sess.load_index]
        src = by_user[sess.user_id].src_ip
        ports = rng.integers(EPHEMERAL[0], EPHEMERAL[1] + 1, len(load.flows))
        for f, port in zip(load.flows, ports):
            t = sess.start + f.offset + np.cumsum(f.iat)
            parts["ts_us"].append(np.round(t * US_PER_S).astype(np.int64))
            n = len(f)
            parts["src_ip"].append(np.full(n, src, np.uint32))
            parts["dst_ip"].append(np.full(n, f.dst_ip, np.uint32))
            parts["src_port"].append(np.full(n, port, np.int32))
            parts["dst_port"].append(np.full(n, f.dst_port, np.int32))
            parts["pkt_len"].append(f.pkt_len.astype(np.int32))
    if not parts["ts_us"]:
        return Trace.empty(label)
    cols = {k: np.concatenate(v) for k, v in parts.items()}
    cols["protocol"] = np.full(len(cols["ts_us"]), int(Protocol.TCP), np.uint8)
    return Trace(cols, label)


def emit_trace(users: Sequence[UserProfile], sites: Sequence[SiteProfile], duration: float,
               session_rate: float, seed: int = 0,
               presence: Mapping[int, Sequence[tuple[float, float]]] | None = None) -> Trace:
    """Render Poisson sessions (``session_rate`` per user per second) into a trace."""
    sessions = plan_sessions(users, sites, duration, session_rate, seed, presence)
    return render_sessions(sessions, users, sites, seed)


# -- scenario --------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    n_users: int = 50
    n_sites: int = 30
    loads_per_site: int = 50
    n_in: int = 20
    v_fraction: float = 0.6
    target_packets: int = 100_000
    window: float = 30.0
    dirichlet_alpha: float = 0.3
    guard_windows: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class Scenario:
    config: ScenarioConfig
    sites: list[SiteProfile]
    users: list[UserProfile]
    trace: Trace
    session_rate: float
    periods: dict[str, tuple[float, float]]
    designed: dict[str, dict[str, bool]]

    def descriptor(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "session_rate": self.session_rate,
            "periods": {k: list(v) for k, v in self.periods.items()},
            "users": [{"source_id": u.source_id, "site_subset": list(u.site_subset),
                       "preference": list(u.preference), **self.designed[u.source_id]} for u in self.users],
            "n_packets": len(self.trace),
        }

    def save_descriptor(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.descriptor(), indent=2, sort_keys=True))


def build_scenario(config: ScenarioConfig = ScenarioConfig()) -> Scenario:
    """Lay out T, V and D periods so a 9:1 / 8:1 packet split lands on them.

    Every user is active through T. A random ``v_fraction`` of users is active
    in V and ``n_in`` users are active in D. Period lengths are set so each
    period holds its share of ``target_packets``; users that stop or start at
    a period boundary keep ``guard_windows`` of silence from it.
    """
    c = config
    if not 0 < c.n_in < c.n_users:
        raise ValueError("need 0 < n_in < n_users so both IN and OUT sources exist")
    sites = make_site_library(c.n_sites, c.loads_per_site, c.seed)
    users = make_users(c.n_users, sites, c.seed, dirichlet_alpha=c.dirichlet_alpha)
    rng = np.random.default_rng([c.seed, 7])
    n_v = max(1, min(c.n_users - 1, round(c.v_fraction * c.n_users)))
    in_v = set(rng.choice(c.n_users, n_v, replace=False).tolist())
    in_d = set(rng.choice(c.n_users, c.n_in, replace=False).tolist())

    lookup = _site_lookup(sites)
    # expected packets per session of each user
    weight = np.array([sum(p * lookup[s].mean_packets for s, p in zip(u.site_subset, u.preference))
                       for u in users])
    guard = c.guard_windows * c.window
    v_on = np.array([u in in_v for u in range(c.n_users)])
    d_on = np.array([u in in_d for u in range(c.n_users)])
    d_len = 10 * c.window
    # D: users entering after an absence start late; everyone in D stops a guard early
    d_mass = float(np.sum(weight[d_on] * (d_len - guard - np.where(v_on[d_on], 0.0, guard))))
    rate = 0.1 * c.target_packets / d_mass
    # V and T lengths solve  sum_u weight_u * (length - guard_u) * rate = share * target
    gv = np.where(d_on, 0.0, guard)[v_on]
    v_len = (0.1 * c.target_packets / rate + float(np.sum(weight[v_on] * gv))) / float(np.sum(weight[v_on]))
    gt = np.where(v_on, 0.0, guard)
    t_len = (0.8 * c.target_packets / rate + float(np.sum(weight * gt))) / float(np.sum(weight))
    t_end, v_end = t_len, t_len + v_len
    d_end = v_end + d_len

    presence: dict[int, list[tuple[float, float]]] = {}
    for u in range(c.n_users):
        iv = [(0.0, t_end - (0 if v_on[u] else guard))]
        if v_on[u]:
            iv.append((t_end, v_end - (0 if d_on[u] else guard)))
        if d_on[u]:
            iv.append((v_end + (0 if v_on[u] else guard), d_end - guard))
        presence[u] = _merge(iv)
    trace = emit_trace(users, sites, d_end, rate, c.seed, presence)
    designed = {u.source_id: {"in_V": bool(v_on[u.user_id]), "in_D": bool(d_on[u.user_id])} for u in users}
    periods = {"T": (0.0, t_end), "V": (t_end, v_end), "D": (v_end, d_end)}
    return Scenario(c, sites, users, trace, rate, periods, designed)


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for lo, hi in intervals:
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


def membership(T: Trace, D: Trace) -> dict[str, str]:
    """IN when a T source sends any packet in D, OUT otherwise."""
    in_d = set(D.sources())
    return {s: ("IN" if s in in_d else "OUT") for s in T.sources()}


# -- toy leaky generator -------------------------------------------------

def leaky_generator(D: Trace, multiplier: float, seed: int = 0, *, memorize_prob: float = 0.2,
                    iat_jitter: float = 0.05, len_jitter: int = 8,
                    time_jitter: float = 0.5) -> tuple[SyntheticTrace, dict[str, str]]:
    """A generator that memorizes whole sources and replays them with jitter.

    Output is ``ceil(multiplier)`` back-to-back epochs, each as long as D (the
    last one scaled down when ``multiplier`` is fractional). In every epoch
    each D source is replayed with probability ``memorize_prob`` (times the
    epoch fraction) under a fresh pseudonym address: all of its flows, shifted
    by one random offset of at most ``time_jitter`` seconds, with
    multiplicative log-normal iat noise and up to ``len_jitter`` bytes of
    length noise. More volume therefore means more sources leaked.

    Returns the trace and a pseudonym -> real source map.
    """
    if multiplier <= 0:
        raise ValueError("multiplier must be positive")
    if not 0 < memorize_prob <= 1:
        raise ValueError("memorize_prob must lie in (0, 1]")
    if len(D) == 0:
        raise InputError("empty reference trace")
    rng = np.random.default_rng(seed)
    cols = D.columns
    keys = np.stack([cols["src_ip"].astype(np.int64), cols["dst_ip"].astype(np.int64),
                     cols["src_port"].astype(np.int64), cols["dst_port"].astype(np.int64),
                     cols["protocol"].astype(np.int64)], axis=1)
    _, flow_id = np.unique(keys, axis=0, return_inverse=True)
    flow_id = flow_id.ravel()
    order = np.argsort(flow_id, kind="stable")
    flows = np.split(order, np.flatnonzero(np.diff(flow_id[order])) + 1)
    flow_src = np.array([cols["src_ip"][f[0]] for f in flows])
    sources = np.unique(flow_src)

    t0, t1 = int(cols["ts_us"][0]), int(cols["ts_us"][-1])
    span = t1 - t0 + 1
    jit = round(time_jitter * US_PER_S)
    n_epochs = int(np.ceil(multiplier))
    parts = {k: [] for k in ("ts_us", "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "pkt_len")}
    smap: dict[str, str] = {}
    next_pseudo = PSEUDO_NET + 1
    for epoch in range(n_epochs):
        frac = min(1.0, multiplier - epoch)
        chosen = sources[rng.random(len(sources)) < memorize_prob * frac]
        for src in chosen:
            pseudo = next_pseudo
            next_pseudo += 1
            smap[int_to_ip(pseudo)] = int_to_ip(int(src))
            shift = epoch * span + (int(rng.integers(-jit, jit + 1)) if jit else 0)
            for f in np.flatnonzero(flow_src == src):
                idx = flows[f]
                ts = cols["ts_us"][idx]
                iat = np.diff(ts).astype(np.float64) * np.exp(rng.normal(0.0, iat_jitter, len(ts) - 1))
                start = int(ts[0]) + shift
                n = len(idx)
                parts["ts_us"].append(start + np.concatenate([[0], np.round(np.cumsum(iat))]).astype(np.int64))
                parts["src_ip"].append(np.full(n, pseudo, np.uint32))
                parts["dst_ip"].append(cols["dst_ip"][idx])
                parts["src_port"].append(np.full(n, rng.integers(EPHEMERAL[0], EPHEMERAL[1] + 1), np.int32))
                parts["dst_port"].append(cols["dst_port"][idx])
                parts["protocol"].append(cols["protocol"][idx])
                lens = cols["pkt_len"][idx].astype(np.int64) + rng.integers(-len_jitter, len_jitter + 1, n)
                parts["pkt_len"].append(np.clip(lens, 40, 1500).astype(np.int32))
    if not parts["ts_us"]:
        empty = Trace.empty()
        return SyntheticTrace(empty.columns, f"leaky_{multiplier:g}x", volume_multiplier=float(multiplier)), smap
    out = {k: np.concatenate(v) for k, v in parts.items()}
    # shifted copies may start before D does; keep timestamps nonnegative
    out["ts_us"] = np.maximum(out["ts_us"], 0)
    return SyntheticTrace(out, label=f"leaky_{multiplier:g}x", volume_multiplier=float(multiplier)), smap
