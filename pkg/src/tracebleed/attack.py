"""Membership inference: threshold calibration, binomial aggregation and scoring."""
from __future__ import annotations

import csv
import dataclasses
import enum
import json
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .chunker import ChunkSet
from .encoder import TrafficEncoder, encode_chunks
from .errors import CalibrationError, InputError

log = logging.getLogger(__name__)

DEFAULT_SIGNIFICANCE = 0.05
FAR_PRIOR_NOTE = "FAR test uses prior 1 - prior_close"


class Verdict(str, enum.Enum):
    IN = "IN"
    OUT = "OUT"
    UNSURE = "UNSURE"


@dataclasses.dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    prior_close: float
    significance: float = DEFAULT_SIGNIFICANCE
    validation_accuracy: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 2.0:
            raise ValueError("threshold must lie in [0, 2]")
        if not 0.0 < self.prior_close < 1.0:
            raise ValueError("prior_close must lie in (0, 1)")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationResult":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


@dataclasses.dataclass(frozen=True)
class DistanceRecord:
    source_id: str
    chunk_index: int
    min_distance: float
    nearest_source: str


@dataclasses.dataclass(frozen=True)
class MembershipVerdict:
    source_id: str
    verdict: Verdict
    n_chunks: int
    n_close: int
    p_value_close: float
    p_value_far: float
    conflict: bool = False
    resolved: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["verdict"] = self.verdict.value
        return d


@dataclasses.dataclass
class AttackReport:
    verdicts: list[MembershipVerdict]
    precision: float
    recall: float
    f1: float
    confident_ratio: float
    topk: dict[int, float] = dataclasses.field(default_factory=dict)
    inter_intra_ratio: float | None = None
    flags: list[str] = dataclasses.field(default_factory=list)
    metadata: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confident_ratio": self.confident_ratio,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "inter_intra_ratio": self.inter_intra_ratio,
            "per_source": [v.to_dict() for v in self.verdicts],
            "flags": list(self.flags),
            "metadata": dict(self.metadata),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttackReport":
        verdicts = [MembershipVerdict(**{**v, "verdict": Verdict(v["verdict"])}) for v in d["per_source"]]
        return cls(verdicts, d["precision"], d["recall"], d["f1"], d["confident_ratio"],
                   {int(k): v for k, v in d.get("topk", {}).items()}, d.get("inter_intra_ratio"),
                   list(d.get("flags", [])), dict(d.get("metadata", {})))


# -- nearest neighbours ----------------------------------------------------

def _source_codes(probe_src: Sequence[str], cand_src: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    codes: dict[str, int] = {}
    c = np.array([codes.setdefault(s, len(codes)) for s in cand_src], dtype=np.int64)
    p = np.array([codes.get(s, -1) for s in probe_src], dtype=np.int64)
    return p, c


def nearest(probe_emb: np.ndarray, cand_emb: np.ndarray, block: int = 2048,
            probe_src: Sequence[str] | None = None,
            cand_src: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimum distance (1 - cos) and arg-min candidate for every probe row.

    Exact ties go to the lowest candidate index, or to the lowest index of the
    probe's own source when source ids are given.
    """
    if len(cand_emb) == 0:
        raise InputError("no candidate chunks to compare against")
    n = len(probe_emb)
    dmin = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    own = probe_src is not None and cand_src is not None
    if own:
        p_code, c_code = _source_codes(probe_src, cand_src)
    for a in range(0, n, block):
        d = 1.0 - probe_emb[a:a + block] @ cand_emb.T
        rows = np.arange(len(d))
        best = d.argmin(axis=1)
        m = d[rows, best]
        if own:
            mine = (d == m[:, None]) & (c_code[None, :] == p_code[a:a + block, None])
            hit = mine.any(axis=1)
            best = np.where(hit, mine.argmax(axis=1), best)
        arg[a:a + block] = best
        dmin[a:a + block] = m
    return np.clip(dmin, 0.0, 2.0), arg


def min_distances(model: TrafficEncoder, probe: ChunkSet, candidates: ChunkSet,
                  probe_emb: np.ndarray | None = None, cand_emb: np.ndarray | None = None) -> list[DistanceRecord]:
    """Distance from each probe chunk to its closest candidate chunk, any source."""
    if len(candidates) == 0:
        raise InputError("no candidate chunks to compare against")
    if probe_emb is None:
        probe_emb = encode_chunks(model, probe.chunks)
    if cand_emb is None:
        cand_emb = encode_chunks(model, candidates.chunks)
    dmin, arg = nearest(probe_emb, cand_emb, probe_src=[c.source_id for c in probe.chunks],
                        cand_src=[c.source_id for c in candidates.chunks])
    return [DistanceRecord(c.source_id, i, float(dmin[i]), candidates.chunks[arg[i]].source_id)
            for i, c in enumerate(probe.chunks)]


def export_distances_csv(records: Iterable[DistanceRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "chunk_index", "min_distance", "nearest_source"])
        for r in records:
            w.writerow([r.source_id, r.chunk_index, repr(r.min_distance), r.nearest_source])


# -- calibration -----------------------------------------------------------

def candidate_thresholds(distances: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct distances plus both extremes."""
    u = np.unique(np.asarray(distances, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    top = min(np.nextafter(u[-1], np.inf), 2.0) if len(u) else 2.0
    return np.unique(np.concatenate([[0.0], mids, [top]]))


def best_threshold(distances: Sequence[float], close: Sequence[bool]) -> tuple[float, float]:
    """Candidate threshold with the best CLOSE/FAR accuracy (smallest on ties)."""
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(close, dtype=bool)
    if len(d) == 0:
        raise CalibrationError("no calibration chunks")
    cands = candidate_thresholds(d)
    # accuracy at t: (#close with d < t) + (#far with d >= t), via sorted counts
    close_sorted = np.sort(d[y])
    far_sorted = np.sort(d[~y])
    tp = np.searchsorted(close_sorted, cands, side="left")
    tn = len(far_sorted) - np.searchsorted(far_sorted, cands, side="left")
    acc = (tp + tn) / len(d)
    best = int(np.argmax(acc))  # first maximum is the smallest threshold
    return float(cands[best]), float(acc[best])


def calibrate(model: TrafficEncoder, T: ChunkSet, V: ChunkSet, significance: float = DEFAULT_SIGNIFICANCE,
              t_emb: np.ndarray | None = None, v_emb: np.ndarray | None = None) -> CalibrationResult:
    """Pick the CLOSE/FAR threshold on T-vs-V and the prior of a chunk being CLOSE."""
    v_sources = set(V.sources)
    t_sources = T.sources
    shared = [s for s in t_sources if s in v_sources]
    if not shared or len(shared) == len(t_sources):
        raise CalibrationError(
            f"calibration needs both CLOSE and FAR sources; {len(shared)} of {len(t_sources)} T sources appear in V")
    records = min_distances(model, T, V, t_emb, v_emb)
    dist = np.array([r.min_distance for r in records])
    close = np.array([r.source_id in v_sources for r in records])
    threshold, acc = best_threshold(dist, close)
    return CalibrationResult(threshold, len(shared) / len(t_sources), significance, acc)


# -- inference -------------------------------------------------------------

def binomial_tail(k: int, n: int, p: float) -> float:
    """P[X >= k] for X ~ Binomial(n, p)."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    return float(stats.binom.sf(k - 1, n, p))


def decide(source_id: str, n: int, n_close: int, prior_close: float,
           significance: float = DEFAULT_SIGNIFICANCE) -> MembershipVerdict:
    p_close = binomial_tail(n_close, n, prior_close)
    p_far = binomial_tail(n - n_close, n, 1.0 - prior_close)
    in_sig, out_sig = p_close < significance, p_far < significance
    if in_sig:
        verdict = Verdict.IN
    elif out_sig:
        verdict = Verdict.OUT
    else:
        verdict = Verdict.UNSURE
    return MembershipVerdict(source_id, verdict, n, n_close, p_close, p_far, conflict=in_sig and out_sig)


def verdicts_from_distances(records: Sequence[DistanceRecord], calib: CalibrationResult,
                            sources: Sequence[str] | None = None) -> list[MembershipVerdict]:
    counts: dict[str, list[int]] = {}
    for r in records:
        c = counts.setdefault(r.source_id, [0, 0])
        c[0] += 1
        c[1] += r.min_distance < calib.threshold
    order = sources if sources is not None else sorted(counts, key=_ip_key)
    out = []
    for s in order:
        if s not in counts:
            log.warning("source %s has no chunks in T; skipped", s)
            continue
        n, k = counts[s]
        out.append(decide(s, n, k, calib.prior_close, calib.significance))
    return out


def infer_membership(model: TrafficEncoder, calib: CalibrationResult, T: ChunkSet, target: ChunkSet,
                     t_emb: np.ndarray | None = None, target_emb: np.ndarray | None = None) -> list[MembershipVerdict]:
    """Per T source: count CLOSE chunks against ``target`` and test both tails."""
    records = min_distances(model, T, target, t_emb, target_emb)
    return verdicts_from_distances(records, calib, T.sources)


def resolve_unsure(verdicts: Sequence[MembershipVerdict], mode: str = "keep") -> list[MembershipVerdict]:
    if mode == "keep":
        return list(verdicts)
    if mode != "majority_vote":
        raise ValueError(f"unknown resolution mode {mode!r}")
    out = []
    for v in verdicts:
        if v.verdict is Verdict.UNSURE:
            new = Verdict.IN if v.n_close > v.n_chunks / 2 else Verdict.OUT
            v = dataclasses.replace(v, verdict=new, resolved=True)
        out.append(v)
    return out


# -- metrics ---------------------------------------------------------------

def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def score(verdicts: Sequence[MembershipVerdict], ground_truth: Mapping[str, str | Verdict]) -> AttackReport:
    """Precision/recall/F1 over confident verdicts against IN/OUT ground truth.

    UNSURE sources count towards neither predicted-IN nor true-IN; they only
    lower the confident ratio.
    """
    truth = {s: Verdict(v) for s, v in ground_truth.items()}
    missing = [v.source_id for v in verdicts if v.source_id not in truth]
    if missing:
        raise InputError(f"ground truth missing for sources {missing[:5]}")
    confident = [v for v in verdicts if v.verdict is not Verdict.UNSURE]
    pred_in = [v for v in confident if v.verdict is Verdict.IN]
    true_in = [v for v in confident if truth[v.source_id] is Verdict.IN]
    correct = sum(truth[v.source_id] is Verdict.IN for v in pred_in)
    flags = []
    if pred_in:
        precision = correct / len(pred_in)
    else:
        precision = 0.0
        flags.append("no_predicted_in")
    recall = correct / len(true_in) if true_in else 0.0
    if not true_in:
        flags.append("no_true_in")
    confident_ratio = len(confident) / len(verdicts) if verdicts else 0.0
    if any(v.conflict for v in verdicts):
        flags.append("close_far_conflict")
    ordered = sorted(verdicts, key=lambda v: _ip_key(v.source_id))
    return AttackReport(ordered, precision, recall, f1_score(precision, recall), confident_ratio,
                        flags=flags, metadata={"far_prior": FAR_PRIOR_NOTE})


def topk_hit(model: TrafficEncoder, T: ChunkSet, target: ChunkSet, ks: Sequence[int],
             in_sources: Iterable[str] | None = None, source_map: Mapping[str, str] | None = None,
             t_emb: np.ndarray | None = None, target_emb: np.ndarray | None = None) -> dict[int, float]:
    """Fraction of probe chunks whose k nearest target chunks include their own source.

    Candidates tied with the k-th nearest distance are all counted as among the k nearest.

    Probes are the T chunks of ``in_sources`` (all T chunks when omitted).
    ``source_map`` translates target source ids (e.g. pseudonyms) to T ids.
    """
    if len(target) == 0:
        raise InputError("empty target")
    keep = set(in_sources) if in_sources is not None else None
    probe_idx = [i for i, c in enumerate(T.chunks) if keep is None or c.source_id in keep]
    if not probe_idx:
        return {int(k): 0.0 for k in ks}
    if t_emb is None:
        t_emb = encode_chunks(model, [T.chunks[i] for i in probe_idx])
    else:
        t_emb = t_emb[probe_idx]
    if target_emb is None:
        target_emb = encode_chunks(model, target.chunks)
    smap = source_map or {}
    probe_code, tgt_code = _source_codes([T.chunks[i].source_id for i in probe_idx],
                                         [smap.get(c.source_id, c.source_id) for c in target.chunks])
    ks_eff = {}
    for k in ks:
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > len(target):
            log.warning("k=%d exceeds %d candidates; clamped", k, len(target))
        ks_eff[int(k)] = min(int(k), len(target))
    hits = {k: 0 for k in ks_eff}
    for a in range(0, len(t_emb), 1024):
        d = 1.0 - t_emb[a:a + 1024] @ target_emb.T
        own = tgt_code[None, :] == probe_code[a:a + 1024, None]
        # a candidate tied with the k-th distance is as near as the k-th, so it counts
        own_best = np.where(own, d, np.inf).min(axis=1)
        for k, ke in ks_eff.items():
            kth = np.partition(d, ke - 1, axis=1)[:, ke - 1]
            hits[k] += int((own_best <= kth).sum())
    return {k: hits[k] / len(probe_idx) for k in ks_eff}


def random_guess_baseline(ground_truth: Mapping[str, str | Verdict], seed: int = 0) -> AttackReport:
    """Expected metrics of guessing IN/OUT by a fair coin per source.

    The seed is kept for interface symmetry; the report holds expectations,
    so it does not depend on it.
    """
    truth = [Verdict(v) for v in ground_truth.values()]
    if not truth:
        raise InputError("empty ground truth")
    precision = sum(v is Verdict.IN for v in truth) / len(truth)
    recall = 0.5
    return AttackReport([], precision, recall, f1_score(precision, recall), 1.0,
                        metadata={"kind": "random_guess_expectation", "seed": seed})


def _ip_key(source_id: str):
    try:
        return (0, tuple(int(p) for p in source_id.split(".")))
    except ValueError:
        return (1, source_id)
