"""Distributional fidelity of a synthetic trace against the real one."""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InputError
from .trace import Trace, US_PER_S

CATEGORICAL_FIELDS = ("SA", "DA", "SP", "DP")
CONTINUOUS_FIELDS = ("SFN", "SPN", "PL", "IAT", "FL")
FL_NOTE = "FL is packets per flow"

_COLUMN = {"SA": "src_ip", "DA": "dst_ip", "SP": "src_port", "DP": "dst_port", "PR": "protocol"}


@dataclasses.dataclass
class FieldHistograms:
    """Categorical value -> probability maps and raw samples for continuous fields."""

    categorical: dict[str, dict[int, float]]
    samples: dict[str, np.ndarray]

    def distribution(self, name: str) -> dict:
        if name in self.categorical:
            return self.categorical[name]
        vals, counts = np.unique(self.samples[name], return_counts=True)
        return dict(zip(vals.tolist(), (counts / counts.sum()).tolist()))


def _categorical(values: np.ndarray) -> dict[int, float]:
    vals, counts = np.unique(values, return_counts=True)
    return dict(zip(vals.tolist(), (counts / counts.sum()).tolist()))


def field_histograms(trace: Trace, include_protocol: bool = False) -> FieldHistograms:
    if len(trace) == 0:
        raise InputError("cannot build histograms of an empty trace")
    cols = trace.columns
    fields = CATEGORICAL_FIELDS + (("PR",) if include_protocol else ())
    categorical = {f: _categorical(cols[_COLUMN[f]]) for f in fields}

    keys = np.stack([cols["src_ip"].astype(np.int64), cols["dst_ip"].astype(np.int64),
                     cols["src_port"].astype(np.int64), cols["dst_port"].astype(np.int64),
                     cols["protocol"].astype(np.int64)], axis=1)
    flow_keys, flow_id = np.unique(keys, axis=0, return_inverse=True)
    flow_id = flow_id.ravel()
    fl = np.bincount(flow_id)
    _, flow_src = np.unique(flow_keys[:, 0], return_inverse=True)
    sfn = np.bincount(flow_src.ravel())
    _, spn = np.unique(cols["src_ip"], return_counts=True)

    # per-flow iat: packets are time sorted, so a stable sort by flow keeps order
    order = np.argsort(flow_id, kind="stable")
    ts = cols["ts_us"][order]
    fid = flow_id[order]
    same = fid[1:] == fid[:-1]
    iat = (np.diff(ts)[same]).astype(np.float64) / US_PER_S

    samples = {
        "SFN": sfn.astype(np.float64),
        "SPN": spn.astype(np.float64),
        "PL": cols["pkt_len"].astype(np.float64),
        "IAT": iat,
        "FL": fl.astype(np.float64),
    }
    return FieldHistograms(categorical, samples)


def jsd(p: Mapping, q: Mapping) -> float:
    """Jensen-Shannon divergence with base-2 logarithms, in [0, 1]."""
    if not p or not q:
        raise InputError("empty distribution")
    support = sorted(set(p) | set(q), key=repr)
    pv = np.array([p.get(k, 0.0) for k in support], dtype=np.float64)
    qv = np.array([q.get(k, 0.0) for k in support], dtype=np.float64)
    if pv.sum() <= 0 or qv.sum() <= 0:
        raise InputError("distribution has no mass")
    pv /= pv.sum()
    qv /= qv.sum()
    m = (pv + qv) / 2

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return float(np.clip((kl(pv) + kl(qv)) / 2, 0.0, 1.0))


def _as_weighted(d) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(d, Mapping):
        x = np.array(list(d.keys()), dtype=np.float64)
        w = np.array(list(d.values()), dtype=np.float64)
    else:
        x = np.asarray(d, dtype=np.float64).ravel()
        w = np.ones(len(x))
    if len(x) == 0 or w.sum() <= 0:
        raise InputError("empty distribution")
    if not np.all(np.isfinite(x)):
        raise InputError("distribution support must be finite")
    return x, w / w.sum()


def emd_1d(p, q) -> float:
    """1-Wasserstein distance between two 1-D distributions.

    Each argument is either a value -> weight mapping or an array of samples.
    Computed as the integral of |F_p - F_q| over the merged support.
    """
    xp, wp = _as_weighted(p)
    xq, wq = _as_weighted(q)
    grid = np.union1d(xp, xq)
    op, oq = np.argsort(xp), np.argsort(xq)
    cdf_p = np.cumsum(wp[op])[np.searchsorted(xp[op], grid, side="right") - 1]
    cdf_q = np.cumsum(wq[oq])[np.searchsorted(xq[oq], grid, side="right") - 1]
    # points left of a distribution's first atom have CDF 0
    cdf_p = np.where(grid < xp.min(), 0.0, cdf_p)
    cdf_q = np.where(grid < xq.min(), 0.0, cdf_q)
    return float(np.sum(np.abs(cdf_p - cdf_q)[:-1] * np.diff(grid)))


@dataclasses.dataclass
class FidelityReport:
    jsd: dict[str, float | None]
    emd_raw: dict[str, float | None]
    emd_norm: dict[str, float | None]
    mean_fidelity: float | None
    flags: list[str] = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"metadata": {"FL": FL_NOTE}}


def _raw_metrics(real: FieldHistograms, synth: FieldHistograms, flags: list[str]):
    js = {f: jsd(real.categorical[f], synth.categorical[f]) for f in real.categorical}
    emd = {}
    for f in CONTINUOUS_FIELDS:
        a, b = real.samples[f], synth.samples[f]
        if len(a) == 0 or len(b) == 0:
            emd[f] = None
            flags.append(f"{f}_empty")
        else:
            emd[f] = emd_1d(a, b)
    return js, emd


def fidelity_report(real: Trace, synth_set: Mapping[str, Trace],
                    include_protocol: bool = False) -> dict[str, FidelityReport]:
    """Per generator: JSD of categorical fields, raw and max-normalized EMD of the rest.

    The EMD of each field is divided by the largest raw EMD any generator in
    ``synth_set`` reaches on that field; a field where every generator scores
    0 normalizes to 0. ``mean_fidelity`` averages the JSDs and normalized EMDs
    (lower is better).
    """
    if not synth_set:
        raise InputError("need at least one synthetic trace")
    ref = field_histograms(real, include_protocol)
    raw: dict[str, tuple] = {}
    for name, synth in synth_set.items():
        flags: list[str] = []
        if len(synth) == 0:
            raw[name] = (None, None, ["empty_trace"])
            continue
        js, emd = _raw_metrics(ref, field_histograms(synth, include_protocol), flags)
        raw[name] = (js, emd, flags)

    field_max = {}
    for f in CONTINUOUS_FIELDS:
        vals = [r[1][f] for r in raw.values() if r[1] is not None and r[1][f] is not None]
        field_max[f] = max(vals) if vals else 0.0

    out = {}
    fields = CATEGORICAL_FIELDS + (("PR",) if include_protocol else ())
    for name, (js, emd, flags) in raw.items():
        if js is None:
            out[name] = FidelityReport({f: None for f in fields}, {f: None for f in CONTINUOUS_FIELDS},
                                       {f: None for f in CONTINUOUS_FIELDS}, None, flags)
            continue
        norm = {f: (None if emd[f] is None else (emd[f] / field_max[f] if field_max[f] > 0 else 0.0))
                for f in CONTINUOUS_FIELDS}
        metrics = list(js.values()) + [v for v in norm.values() if v is not None]
        out[name] = FidelityReport(js, emd, norm, float(np.mean(metrics)), flags)
    return out


def export_reports(reports: Mapping[str, FidelityReport], json_path: str | Path | None = None,
                   csv_path: str | Path | None = None) -> None:
    if json_path:
        Path(json_path).write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True))
    if csv_path:
        first = next(iter(reports.values()))
        cols = ([f"jsd_{f}" for f in first.jsd] + [f"emd_{f}" for f in CONTINUOUS_FIELDS]
                + [f"emd_norm_{f}" for f in CONTINUOUS_FIELDS] + ["mean_fidelity"])
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generator"] + cols)
            for name, r in reports.items():
                row = ([r.jsd[f] for f in first.jsd] + [r.emd_raw[f] for f in CONTINUOUS_FIELDS]
                       + [r.emd_norm[f] for f in CONTINUOUS_FIELDS] + [r.mean_fidelity])
                w.writerow([name] + ["" if v is None else repr(v) for v in row])
