"""Obfuscation of synthetic traces against the membership attack.

Each round re-chunks the synthetic trace, finds chunks the attack would call
CLOSE to the real reference data, pushes them away with projected gradient
ascent on the encoder distance and then repairs every touched flow so that
timing and size constraints hold against the unmodified input.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .attack import CalibrationResult, nearest
from .chunker import Chunk, ChunkSet, Flow, chunk
from .encoder import TrafficEncoder, encode_chunks, transform_features
from .errors import InputError
from .fidelity import fidelity_report
from .trace import SyntheticTrace, Trace, US_PER_S, int_to_ip

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DefenseConfig:
    rounds: int = 5
    step_size: float = 0.25
    steps_per_round: int = 20
    epsilon_iat: float = 0.3
    epsilon_len: float = 64.0
    duration_tolerance: float = 0.05
    len_bounds: tuple[int, int] = (40, 1500)
    direction_balance: bool = True
    batch_chunks: int = 64

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 <= self.duration_tolerance < 1:
            raise ValueError("duration_tolerance must lie in [0, 1)")
        if self.step_size <= 0 or self.steps_per_round < 0:
            raise ValueError("step_size must be positive and steps_per_round nonnegative")
        if not 0 <= self.epsilon_iat < 1 or self.epsilon_len < 0:
            raise ValueError("epsilon_iat must lie in [0, 1) and epsilon_len be nonnegative")
        if self.len_bounds[0] > self.len_bounds[1]:
            raise ValueError("len_bounds must be ordered")

    @classmethod
    def from_dict(cls, d: Mapping) -> "DefenseConfig":
        d = dict(d)
        if "len_bounds" in d:
            d["len_bounds"] = tuple(d["len_bounds"])
        return cls(**d)


@dataclasses.dataclass(frozen=True)
class VulnerableChunk:
    chunk_index: int
    chunk: Chunk
    min_distance: float
    matched_source: str
    matched_index: int


@dataclasses.dataclass
class Perturbation:
    """Suggested per-flow deltas for one chunk (absolute seconds and bytes)."""

    iat_delta: list[np.ndarray]
    len_delta: list[np.ndarray]
    objective_before: float
    objective_after: float
    ok: bool = True


@dataclasses.dataclass
class RepairOutcome:
    iat: np.ndarray
    pkt_len: np.ndarray
    objective_gap: float
    feasible: bool = True


# -- detection -------------------------------------------------------------

def find_vulnerable(model: TrafficEncoder, calib: CalibrationResult, synth_chunks: ChunkSet,
                    reference_chunks: ChunkSet, synth_emb: np.ndarray | None = None,
                    ref_emb: np.ndarray | None = None) -> list[VulnerableChunk]:
    """Synthetic chunks closer than the threshold to some reference chunk."""
    if len(synth_chunks) == 0 or len(reference_chunks) == 0:
        return []
    if synth_emb is None:
        synth_emb = encode_chunks(model, synth_chunks.chunks)
    if ref_emb is None:
        ref_emb = encode_chunks(model, reference_chunks.chunks)
    dmin, arg = nearest(synth_emb, ref_emb)
    return [VulnerableChunk(i, synth_chunks.chunks[i], float(dmin[i]),
                            reference_chunks.chunks[arg[i]].source_id, int(arg[i]))
            for i in np.flatnonzero(dmin < calib.threshold)]


# -- adversarial search ----------------------------------------------------

def _raw_batch(chunks: Sequence[Chunk], dtype):
    flows = [f for c in chunks for f in c.flows]
    owner = torch.as_tensor([i for i, c in enumerate(chunks) for _ in c.flows], dtype=torch.long)
    length = max(len(f) for f in flows)
    iat = np.zeros((len(flows), length))
    lens = np.zeros((len(flows), length))
    mask = np.zeros((len(flows), length), dtype=bool)
    for i, f in enumerate(flows):
        iat[i, :len(f)] = f.iat
        lens[i, :len(f)] = f.pkt_len
        mask[i, :len(f)] = True
    return (torch.as_tensor(iat, dtype=dtype), torch.as_tensor(lens, dtype=dtype),
            torch.as_tensor(mask), owner, flows)


def _objective(model, iat, lens, r, d, mask, owner, n_chunks, targets):
    feats = transform_features(iat * (1 + r), lens + d, model.stats)
    emb = model(feats, mask, owner, n_chunks)
    return 1.0 - (emb * targets).sum(dim=1)


def perturb_batch(model: TrafficEncoder, chunks: Sequence[Chunk], matched: np.ndarray,
                  config: DefenseConfig) -> list[Perturbation]:
    """Projected sign-gradient ascent on distance(chunk, matched) for many chunks at once.

    iat moves by a relative factor in [-epsilon_iat, epsilon_iat] per packet,
    pkt_len by at most epsilon_len bytes.
    """
    if any(c.normalized for c in chunks):
        raise InputError("perturbation works on raw (unnormalized) chunks")
    if model.stats is None:
        raise InputError("model has no normalization stats")
    was_training = model.training
    model.eval()
    dtype = model.dtype
    iat, lens, mask, owner, flows = _raw_batch(chunks, dtype)
    targets = torch.as_tensor(np.asarray(matched), dtype=dtype)
    n = len(chunks)
    r = torch.zeros_like(iat, requires_grad=True)
    d = torch.zeros_like(lens, requires_grad=True)
    fmask = mask.to(dtype)
    ok = torch.ones(n, dtype=torch.bool)
    params = list(model.parameters())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            before = _objective(model, iat, lens, r, d, mask, owner, n, targets)
        for _ in range(config.steps_per_round):
            obj = _objective(model, iat, lens, r, d, mask, owner, n, targets)
            gr, gd = torch.autograd.grad(obj.sum(), [r, d])
            finite = torch.isfinite(gr).all(dim=1) & torch.isfinite(gd).all(dim=1)
            bad_chunks = torch.zeros(n, dtype=torch.bool).index_put((owner,), ~finite, accumulate=True)
            ok &= ~bad_chunks
            with torch.no_grad():
                keep = ok[owner].to(dtype).unsqueeze(1) * fmask
                r += config.step_size * config.epsilon_iat * torch.nan_to_num(gr).sign() * keep
                d += config.step_size * config.epsilon_len * torch.nan_to_num(gd).sign() * keep
                r.clamp_(-config.epsilon_iat, config.epsilon_iat)
                d.clamp_(-config.epsilon_len, config.epsilon_len)
        with torch.no_grad():
            zero = (~ok[owner]).unsqueeze(1)
            r.masked_fill_(zero, 0.0)
            d.masked_fill_(zero, 0.0)
            after = _objective(model, iat, lens, r, d, mask, owner, n, targets)
    finally:
        for p, s in zip(params, saved):
            p.requires_grad_(s)
        model.train(was_training)

    r_np = r.detach().double().numpy()
    d_np = d.detach().double().numpy()
    out = [Perturbation([], [], float(before[i]), float(after[i]), bool(ok[i])) for i in range(n)]
    for j, f in enumerate(flows):
        p = out[int(owner[j])]
        p.iat_delta.append(f.iat * r_np[j, :len(f)])
        p.len_delta.append(d_np[j, :len(f)])
    for i, p in enumerate(out):
        if not p.ok:
            log.warning("non-finite gradient for chunk %d; left unperturbed", i)
    return out


def adversarial_perturb(model: TrafficEncoder, chunk: Chunk, matched_embedding: np.ndarray,
                        config: DefenseConfig) -> Perturbation:
    return perturb_batch(model, [chunk], np.asarray(matched_embedding)[None, :], config)[0]


# -- repair ----------------------------------------------------------------

def _shrink_to(s: np.ndarray, target: float) -> np.ndarray:
    """argmin ||r - s||_1 s.t. r >= 0, sum r = target < sum s: subtract a common level."""
    srt = np.sort(s)[::-1]
    csum = np.cumsum(srt)
    k = np.arange(1, len(s) + 1)
    lam = (csum - target) / k
    # the active set is the largest k entries with srt[k-1] > lam_k
    valid = srt > lam
    kk = int(np.flatnonzero(valid)[-1]) if valid.any() else 0
    return np.maximum(s - lam[kk], 0.0)


def _round_to_sum(x: np.ndarray, total: int) -> np.ndarray:
    """Integer vector close to x (floor then largest remainders) summing to total."""
    base = np.floor(x).astype(np.int64)
    rem = int(total - base.sum())
    if rem > 0:
        order = np.argsort(-(x - base), kind="stable")
        base[order[:rem]] += 1
    elif rem < 0:
        order = np.argsort(x - base, kind="stable")
        pos = [i for i in order if base[i] > 0][: -rem]
        base[pos] -= 1
    return base


def constraint_repair(original: Flow, suggested_iat: np.ndarray, suggested_len: np.ndarray,
                      config: DefenseConfig, *, direction: int = 0, integer_iat: bool = False,
                      fixed_first: bool = False) -> RepairOutcome:
    """Closest feasible flow to the suggestion in L1.

    Constraints: iat >= 0; sum of iat within (1 +- duration_tolerance) of the
    original sum (restricted to [original, upper] for direction=+1 and
    [lower, original] for direction=-1); integer lengths within len_bounds,
    widened to include the original lengths. With ``integer_iat`` the iats
    are integers (e.g. microseconds) and the sum bounds are rounded inward.
    ``fixed_first`` pins the first iat to its suggested value.
    """
    s = np.asarray(suggested_iat, dtype=np.float64)
    sl = np.asarray(suggested_len, dtype=np.float64)
    if s.shape != original.iat.shape or sl.shape != original.pkt_len.shape:
        raise InputError("suggestion must have the same packet count as the original flow")
    total0 = float(original.iat.sum())
    tol = config.duration_tolerance
    lo, hi = (1 - tol) * total0, (1 + tol) * total0
    if integer_iat:
        lo, hi = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
    if direction > 0:
        lo = total0
    elif direction < 0:
        hi = total0

    r = np.maximum(s, 0.0)
    head = 1 if fixed_first and len(r) else 0
    pinned = float(r[:head].sum())
    free = r[head:]
    total = pinned + free.sum()
    if total > hi and len(free):
        free = _shrink_to(free, max(hi - pinned, 0.0))
        goal = hi
    elif total < lo and len(free):
        free = free + (lo - total) / len(free)
        goal = lo
    else:
        goal = None
    if integer_iat and len(free):
        if goal is None:
            goal = min(max(round(total), lo), hi)
        free = _round_to_sum(free, int(round(goal - pinned))).astype(np.float64)
    r = np.concatenate([r[:head], free])

    b_lo = min(config.len_bounds[0], float(original.pkt_len.min()))
    b_hi = max(config.len_bounds[1], float(original.pkt_len.max()))
    lens = np.clip(np.round(sl), math.ceil(b_lo), math.floor(b_hi))
    gap = float(np.abs(r - s).sum() + np.abs(lens - sl).sum())
    return RepairOutcome(r, lens, gap, True)


def repair_lp(original: Flow, suggested_iat: np.ndarray, config: DefenseConfig) -> np.ndarray:
    """Reference solution of the iat part by linear programming (slower, for cross-checks)."""
    from scipy.optimize import linprog

    s = np.asarray(suggested_iat, dtype=np.float64)
    n = len(s)
    total0 = float(original.iat.sum())
    tol = config.duration_tolerance
    # variables [r, t] with t >= |r - s|; minimize sum t
    c = np.r_[np.zeros(n), np.ones(n)]
    eye = np.eye(n)
    a_ub = np.block([[eye, -eye], [-eye, -eye], [np.ones((1, n)), np.zeros((1, n))],
                     [-np.ones((1, n)), np.zeros((1, n))]])
    b_ub = np.r_[s, -s, (1 + tol) * total0, -(1 - tol) * total0]
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=[(0, None)] * (2 * n), method="highs")
    return res.x[:n]


# -- direction balancing ---------------------------------------------------

@dataclasses.dataclass
class BalanceReport:
    directions: dict[str, int]
    signed_sum: float = 0.0
    bound: float = 0.0
    violated: bool = False


def balance_directions(sources: Sequence[str], config: DefenseConfig) -> BalanceReport:
    """Alternate net slow-down (+1) and speed-up (-1) targets over the sources."""
    ordered = sorted(sources)
    if len(ordered) < 2:
        if ordered:
            log.warning("only one source to repair; direction balancing skipped")
        return BalanceReport({s: 0 for s in ordered})
    if not config.direction_balance:
        return BalanceReport({s: 0 for s in ordered})
    return BalanceReport({s: (1 if i % 2 == 0 else -1) for i, s in enumerate(ordered)})


def aggregate_duration_check(deltas: Mapping[str, float], total_original: float, config: DefenseConfig,
                             report: BalanceReport | None = None) -> BalanceReport:
    """Signed sum of per-source duration changes against tolerance x total duration."""
    report = report or BalanceReport({s: 0 for s in deltas})
    report.signed_sum = float(sum(deltas.values()))
    report.bound = config.duration_tolerance * total_original
    report.violated = abs(report.signed_sum) > report.bound
    if report.violated:
        log.warning("aggregate duration change %.3g exceeds bound %.3g", report.signed_sum, report.bound)
    return report


# -- full defense ----------------------------------------------------------

@dataclasses.dataclass
class RoundReport:
    round: int
    vulnerable_count: int
    perturbed_chunks: int
    repaired_flows: int
    f1: float | None
    mean_fidelity: float | None
    mean_fidelity_delta: float | None
    aggregate_duration_delta: float
    aggregate_bound_violated: bool
    wall_time: float


@dataclasses.dataclass
class DefenseReport:
    rounds: list[RoundReport]
    initial_f1: float | None = None
    initial_fidelity: float | None = None
    final_vulnerable: int | None = None
    flags: list[str] = dataclasses.field(default_factory=list)
    policy: str = ("per round, at most one vulnerable chunk per source in every run of "
                   "overlapping windows is perturbed; later rounds re-chunk the updated trace")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


class _Working:
    """Packet columns in the input's order, plus per-flow views."""

    def __init__(self, trace: Trace):
        self.cols = {k: np.array(v, copy=True) for k, v in trace.columns.items()}
        self.orig_ts = self.cols["ts_us"].copy()
        self.orig_len = self.cols["pkt_len"].copy()
        keys = np.stack([self.cols[k].astype(np.int64) for k in
                         ("src_ip", "dst_ip", "src_port", "dst_port", "protocol")], axis=1)
        _, fid = np.unique(keys, axis=0, return_inverse=True)
        self.flow_id = fid.ravel()
        order = np.argsort(self.flow_id, kind="stable")
        self.flow_packets = np.split(order, np.flatnonzero(np.diff(self.flow_id[order])) + 1)
        self.perm = np.arange(len(self.orig_ts))

    def trace(self, like: Trace) -> SyntheticTrace:
        self.perm = np.argsort(self.cols["ts_us"], kind="stable")
        cols = {k: v[self.perm] for k, v in self.cols.items()}
        vm = getattr(like, "volume_multiplier", 1.0)
        return SyntheticTrace(cols, label=like.label, volume_multiplier=vm, presorted=True)


def _tile(vulnerable: Sequence[VulnerableChunk], gap: int) -> list[VulnerableChunk]:
    """Per source, greedily keep chunks whose windows do not overlap."""
    by_src: dict[str, list[VulnerableChunk]] = {}
    for v in vulnerable:
        by_src.setdefault(v.chunk.source_id, []).append(v)
    out = []
    for src in sorted(by_src):
        last = None
        for v in sorted(by_src[src], key=lambda v: v.chunk.window_index):
            if last is None or v.chunk.window_index - last >= gap:
                out.append(v)
                last = v.chunk.window_index
    return out


def tracepatch(model: TrafficEncoder, calib: CalibrationResult, synth: Trace, reference_chunks: ChunkSet,
               config: DefenseConfig = DefenseConfig(), *,
               evaluate_f1: Callable[[Trace], float] | None = None,
               fidelity_real: Trace | None = None,
               fidelity_refs: Mapping[str, Trace] | None = None) -> tuple[SyntheticTrace, DefenseReport]:
    """Obfuscate ``synth`` over up to ``config.rounds`` rounds.

    ``evaluate_f1`` (attack F1 of a trace) and ``fidelity_real`` (with extra
    generators ``fidelity_refs`` for EMD normalization) are optional and only
    feed the per-round report.
    """
    cfg = reference_chunks.config
    gap = math.ceil(cfg.window_us / cfg.stride_us)
    work = _Working(synth)
    current = work.trace(synth)
    ref_emb = encode_chunks(model, reference_chunks.chunks)
    total_orig = float(sum(work.orig_ts[p[-1]] - work.orig_ts[p[0]] for p in work.flow_packets)) / US_PER_S

    def fidelity_of(tr: Trace) -> float | None:
        if fidelity_real is None:
            return None
        rep = fidelity_report(fidelity_real, {"synth": tr, **(fidelity_refs or {})})
        return rep["synth"].mean_fidelity

    report = DefenseReport([], evaluate_f1(current) if evaluate_f1 else None, fidelity_of(current))
    prev_f1 = report.initial_f1
    for rnd in range(1, config.rounds + 1):
        start = time.perf_counter()
        chunks = chunk(current, cfg)
        vulnerable = find_vulnerable(model, calib, chunks, reference_chunks, ref_emb=ref_emb)
        if not vulnerable:
            report.final_vulnerable = 0
            break
        selected = _tile(vulnerable, gap)
        sugg_gap: dict[int, np.ndarray] = {}
        sugg_len: dict[int, np.ndarray] = {}
        for a in range(0, len(selected), config.batch_chunks):
            batch = selected[a:a + config.batch_chunks]
            perts = perturb_batch(model, [v.chunk for v in batch], ref_emb[[v.matched_index for v in batch]], config)
            for v, p in zip(batch, perts):
                if not p.ok:
                    continue
                for f, di, dl in zip(v.chunk.flows, p.iat_delta, p.len_delta):
                    pk = work.perm[f.packet_index]            # working packet ids, flow order
                    fid = int(work.flow_id[pk[0]])
                    members = work.flow_packets[fid]
                    if fid not in sugg_gap:
                        ts = work.cols["ts_us"][members].astype(np.float64)
                        sugg_gap[fid] = np.diff(ts)
                        sugg_len[fid] = work.cols["pkt_len"][members].astype(np.float64)
                    pos = np.searchsorted(members, pk)
                    # gap j sits between member j and j+1; chunk iat[k] is the gap before pk[k]
                    inner = pos[1:] - 1
                    sugg_gap[fid][inner] = (f.iat[1:] + di[1:]) * US_PER_S
                    sugg_len[fid][pos] = f.pkt_len + dl
        src_of = {fid: int(work.cols["src_ip"][work.flow_packets[fid][0]]) for fid in sugg_gap}
        balance = balance_directions(sorted({int_to_ip(s) for s in src_of.values()}), config)
        for fid in sugg_gap:
            members = work.flow_packets[fid]
            orig = Flow(None, np.r_[0.0, np.diff(work.orig_ts[members]).astype(np.float64)],
                        work.orig_len[members].astype(np.float64))
            out = constraint_repair(orig, np.r_[0.0, sugg_gap[fid]], sugg_len[fid], config,
                                    direction=balance.directions.get(int_to_ip(src_of[fid]), 0),
                                    integer_iat=True, fixed_first=True)
            work.cols["ts_us"][members] = work.cols["ts_us"][members[0]] + np.cumsum(out.iat).astype(np.int64)
            work.cols["pkt_len"][members] = out.pkt_len.astype(np.int32)
        deltas: dict[str, float] = {}
        for p in work.flow_packets:
            s = int_to_ip(int(work.cols["src_ip"][p[0]]))
            d = (int(work.cols["ts_us"][p[-1]] - work.cols["ts_us"][p[0]]) - int(work.orig_ts[p[-1]] - work.orig_ts[p[0]]))
            deltas[s] = deltas.get(s, 0.0) + d / US_PER_S
        balance = aggregate_duration_check(deltas, total_orig, config, balance)
        current = work.trace(synth)
        f1 = evaluate_f1(current) if evaluate_f1 else None
        fid_now = fidelity_of(current)
        delta = None
        if fid_now is not None and report.initial_fidelity:
            delta = (fid_now - report.initial_fidelity) / report.initial_fidelity
        report.rounds.append(RoundReport(rnd, len(vulnerable), len(selected), len(sugg_gap), f1, fid_now, delta,
                                         balance.signed_sum, balance.violated, time.perf_counter() - start))
        if balance.violated and "aggregate_duration_bound" not in report.flags:
            report.flags.append("aggregate_duration_bound")
        if f1 is not None and prev_f1 is not None and f1 > prev_f1 + 1e-12 and "f1_not_monotone" not in report.flags:
            report.flags.append("f1_not_monotone")
        prev_f1 = f1 if f1 is not None else prev_f1
        log.info("round %d: %d vulnerable, %d perturbed, f1=%s", rnd, len(vulnerable), len(selected), f1)
    else:
        chunks = chunk(current, cfg)
        report.final_vulnerable = len(find_vulnerable(model, calib, chunks, reference_chunks, ref_emb=ref_emb))
    if current.label == synth.label:
        current = SyntheticTrace(current.columns, label=f"{synth.label}_tracepatch" if synth.label else "tracepatch",
                                 volume_multiplier=getattr(synth, "volume_multiplier", 1.0), presorted=True)
    return current, report


def check_constraints(original: Trace, defended: Trace, config: DefenseConfig) -> dict[str, int]:
    """Count constraint violations of ``defended`` relative to ``original`` (all zero when valid)."""

    def flows(tr: Trace):
        c = tr.columns
        keys = np.stack([c[k].astype(np.int64) for k in ("src_ip", "dst_ip", "src_port", "dst_port", "protocol")], 1)
        uniq, fid = np.unique(keys, axis=0, return_inverse=True)
        fid = fid.ravel()
        order = np.argsort(fid, kind="stable")
        groups = np.split(order, np.flatnonzero(np.diff(fid[order])) + 1)
        return {tuple(uniq[i]): g for i, g in enumerate(groups)}, c

    fo, co = flows(original)
    fd, cd = flows(defended)
    out = {"flows_missing": 0, "packet_count": 0, "negative_iat": 0, "duration": 0, "length_bounds": 0,
           "flows_per_source": 0}
    tol = config.duration_tolerance
    for key, go in fo.items():
        gd = fd.get(key)
        if gd is None:
            out["flows_missing"] += 1
            continue
        if len(gd) != len(go):
            out["packet_count"] += 1
            continue
        ts = cd["ts_us"][gd]
        if np.any(np.diff(ts) < 0):
            out["negative_iat"] += 1
        d0 = int(co["ts_us"][go][-1] - co["ts_us"][go][0])
        d1 = int(ts[-1] - ts[0])
        if d1 < (1 - tol) * d0 - 1e-9 or d1 > (1 + tol) * d0 + 1e-9:
            out["duration"] += 1
        lo = min(config.len_bounds[0], int(co["pkt_len"][go].min()))
        hi = max(config.len_bounds[1], int(co["pkt_len"][go].max()))
        ln = cd["pkt_len"][gd]
        if np.any(ln < lo) or np.any(ln > hi):
            out["length_bounds"] += 1
    src_o = np.unique([k[0] for k in fo], return_counts=True)
    src_d = np.unique([k[0] for k in fd], return_counts=True)
    if not (np.array_equal(src_o[0], src_d[0]) and np.array_equal(src_o[1], src_d[1])):
        out["flows_per_source"] += 1
    return out
