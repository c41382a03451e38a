"""Command-line pipeline: one subcommand per stage, artifacts under a run directory.

Usage:
  tracebleed simgen --config run.yaml
  tracebleed train --config run.yaml --set train.epochs=3
  tracebleed run-all --config run.yaml --run-root runs

The run directory is ``<run root>/<config hash>``; the run root defaults to
``$TRACEBLEED_CACHE_DIR`` or ``./runs``. Every stage records its input and
output digests in ``manifest.json`` and is skipped when they are unchanged.
Exit codes: 0 success, 2 invalid config, 3 missing upstream stage, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import yaml

from . import attack as atk
from .baselines import DFConfig, df_infer, df_train, df_verdicts
from .chunker import ChunkConfig, chunk, default_config, load_chunkset, save_chunkset
from .defense import DefenseConfig, check_constraints, tracepatch
from .encoder import EncoderConfig, encode_chunks, load_model, save_model
from .errors import ConfigError, TraceBleedError
from .fidelity import export_reports, fidelity_report
from .simgen import ScenarioConfig, build_scenario, leaky_generator, membership
from .trace import Trace, export_csv, ingest_csv, ingest_pcap, split_by_time
from .trainer import TrainConfig, separation_ratio, train

log = logging.getLogger(__name__)

CACHE_ENV = "TRACEBLEED_CACHE_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "input": {"path": None, "format": "auto"},
    "simgen": dataclasses.asdict(ScenarioConfig()),
    "leaky": {"memorize_prob": 0.2, "iat_jitter": 0.05, "len_jitter": 8, "time_jitter": 0.5},
    "split": {"r_RD": 0.9, "r_TV": 8 / 9},
    "chunk": {"window": None, "stride": None, "min_active_flows": 3, "min_packets_per_flow": 5,
              "min_chunks_per_source": 10, "max_flows_per_chunk": 64, "max_packets_per_flow": 256},
    "train": {**{k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "encoder"},
              "epochs": 5, "optimizer": "adam", "steps_per_epoch": 100,
              "encoder": dataclasses.asdict(EncoderConfig())},
    "calibrate": {"significance": atk.DEFAULT_SIGNIFICANCE},
    "attack": {"targets": ["D"], "topk": [1, 5], "unsure": "keep", "baseline": True},
    "baseline": dataclasses.asdict(DFConfig()),
    "defend": {**dataclasses.asdict(DefenseConfig()), "target": "leaky:4", "reference": "D"},
    "sweep": {"multipliers": [1, 4, 10], "defend": True, "traces": {}},
    "fidelity": {"include_protocol": False},
}

# every key whose default is None accepts these types
_NULLABLE = {("input", "path"): (str,), ("chunk", "window"): (int, float), ("chunk", "stride"): (int, float),
             ("train", "steps_per_epoch"): (int,)}


class ValidationError(TraceBleedError):
    """Config schema violation; carries the dotted key path."""


class DependencyError(TraceBleedError):
    """A stage ran before the stage producing its inputs."""


# -- configuration ---------------------------------------------------------

def _check(value, default, path: tuple[str, ...]):
    where = ".".join(path)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected a mapping")
        if path in (("sweep", "traces"),):
            return {str(k): str(v) for k, v in value.items()}
        unknown = sorted(set(value) - set(default))
        if unknown:
            raise ValidationError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
        return {k: _check(value.get(k, default[k]), default[k], path + (k,)) for k in default}
    if default is None:
        if value is None:
            return None
        types = _NULLABLE.get(path, (str, int, float))
        if isinstance(value, bool) or not isinstance(value, types):
            raise ValidationError(f"{where}: expected {' or '.join(t.__name__ for t in types)} or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{where}: expected a list")
        return list(value)
    return value


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValidationError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults, then the YAML file, then ``key.path=value`` overrides; validated."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ValidationError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a mapping")
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like key.path=value")
        key, text = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(text))
    cfg = _check(raw, DEFAULT_CONFIG, ())
    _validate_semantics(cfg)
    return cfg


def _validate_semantics(cfg: dict) -> None:
    try:
        ScenarioConfig(**cfg["simgen"])
        TrainConfig.from_dict(cfg["train"])
        DefenseConfig.from_dict({k: v for k, v in cfg["defend"].items() if k not in ("target", "reference")})
        DFConfig.from_dict(cfg["baseline"])
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e
    if not cfg["sweep"]["multipliers"]:
        raise ValidationError("sweep.multipliers: must not be empty")
    if any(not isinstance(m, (int, float)) or m <= 0 for m in cfg["sweep"]["multipliers"]):
        raise ValidationError("sweep.multipliers: every multiplier must be a positive number")
    if cfg["defend"]["reference"] not in ("D", "T"):
        raise ValidationError("defend.reference: expected D or T")
    if cfg["attack"]["unsure"] not in ("keep", "majority_vote"):
        raise ValidationError("attack.unsure: expected keep or majority_vote")
    if cfg["input"]["format"] not in ("auto", "csv", "pcap"):
        raise ValidationError("input.format: expected auto, csv or pcap")
    for t in cfg["attack"]["targets"] + [cfg["defend"]["target"]]:
        _parse_target(t)


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _parse_target(spec: str) -> tuple[str, object]:
    """``D``, ``leaky:<multiplier>`` or a path to a CSV trace."""
    if spec == "D":
        return "D", None
    if isinstance(spec, str) and spec.startswith("leaky:"):
        try:
            m = float(spec.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"target {spec!r}: bad multiplier") from None
        if m <= 0:
            raise ValidationError(f"target {spec!r}: multiplier must be positive")
        return "leaky", m
    if isinstance(spec, str) and spec.endswith(".csv"):
        return "file", spec
    raise ValidationError(f"target {spec!r}: expected D, leaky:<multiplier> or a .csv path")


def _target_name(spec: str) -> str:
    kind, arg = _parse_target(spec)
    if kind == "D":
        return "D"
    if kind == "leaky":
        return f"leaky_{arg:g}x"
    return Path(arg).stem


# -- run context -----------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    return [path] if path.exists() else []


class Run:
    """Run directory, manifest bookkeeping and cached artifact loading."""

    def __init__(self, cfg: dict, root: str | Path | None = None):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        root = Path(root or os.environ.get(CACHE_ENV) or "runs")
        self.dir = root / self.hash[:16]
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"config_hash": self.hash, "config": cfg, "tool_version": _version(),
                             "seeds": {"global": cfg["seed"], "simgen": cfg["simgen"]["seed"],
                                       "train": cfg["train"]["seed"], "baseline": cfg["baseline"]["seed"]},
                             "stages": {}}
        self._cache: dict = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def digests(self, paths) -> dict[str, str]:
        out = {}
        for p in paths:
            for f in _files(self.path(p)):
                out[str(f.relative_to(self.dir) if f.is_relative_to(self.dir) else f)] = sha256_file(f)
        return out

    def require(self, stage: str, artifacts, producer: str) -> None:
        missing = [a for a in artifacts if not self.path(a).exists()]
        if missing:
            raise DependencyError(f"{stage}: missing {missing[0]}; run `{producer}` first")

    def up_to_date(self, stage: str, inputs) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry["inputs"] != self.digests(inputs):
            return False
        return all(self.path(p).exists() and sha256_file(self.path(p)) == d for p, d in entry["outputs"].items())

    def record(self, stage: str, inputs, outputs, seconds: float, timings: dict | None = None) -> None:
        self.manifest["stages"][stage] = {"inputs": self.digests(inputs), "outputs": self.digests(outputs),
                                          "wall_time": seconds, "timings": timings or {}}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    # cached loaders
    def trace(self, name: str) -> Trace:
        key = ("trace", name)
        if key not in self._cache:
            self._cache[key] = ingest_csv(self.path(f"{name}.csv"), label=name)
        return self._cache[key]

    def chunks(self, name: str):
        key = ("chunks", name)
        if key not in self._cache:
            self._cache[key] = load_chunkset(self.path(f"chunks/{name}"))
        return self._cache[key]

    def model(self):
        if "model" not in self._cache:
            self._cache["model"] = load_model(self.path("model"))
        return self._cache["model"]

    def calibration(self) -> atk.CalibrationResult:
        return atk.CalibrationResult.from_dict(json.loads(self.path("calibration.json").read_text()))

    def ground_truth(self) -> dict[str, str]:
        return json.loads(self.path("ground_truth.json").read_text())

    def chunk_config(self) -> ChunkConfig:
        return ChunkConfig(**json.loads(self.path("chunk_config.json").read_text()))


def _version() -> str:
    for dist in metadata.packages_distributions().get("tracebleed", []):
        return metadata.version(dist)
    return "unknown"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, set):
        return sorted(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# -- shared helpers --------------------------------------------------------

def _synthetic(run: Run, spec: str) -> Trace:
    kind, arg = _parse_target(spec)
    D = run.trace("D")
    if kind == "D":
        return D
    if kind == "leaky":
        synth, _ = leaky_generator(D, arg, seed=run.cfg["seed"], **run.cfg["leaky"])
        return synth
    if not Path(arg).exists():
        raise DependencyError(f"synthetic trace {arg} not found")
    return ingest_csv(arg, label=Path(arg).stem)


def _reference_generator(run: Run) -> Trace:
    """A second leaky run with another seed, used only to normalize EMDs."""
    synth, _ = leaky_generator(run.trace("D"), 1, seed=run.cfg["seed"] + 1, **run.cfg["leaky"])
    return synth


def _attack(run: Run, target: Trace, t_emb=None) -> atk.AttackReport:
    model, calib, T = run.model(), run.calibration(), run.chunks("T")
    chunks = chunk(target, run.chunk_config())
    verdicts = atk.infer_membership(model, calib, T, chunks, t_emb, None)
    verdicts = atk.resolve_unsure(verdicts, run.cfg["attack"]["unsure"])
    return atk.score(verdicts, run.ground_truth())


def _f1_fn(run: Run) -> Callable[[Trace], float]:
    t_emb = encode_chunks(run.model(), run.chunks("T").chunks)
    return lambda tr: _attack(run, tr, t_emb).f1


def _without_wall_time(report: dict) -> tuple[dict, list]:
    times = [r.pop("wall_time") for r in report["rounds"]]
    return report, times


# -- stages ----------------------------------------------------------------

def stage_ingest(run: Run) -> dict:
    path, fmt = run.cfg["input"]["path"], run.cfg["input"]["format"]
    if not path:
        raise ValidationError("input.path: required for ingest (or run `simgen` instead)")
    if fmt == "auto":
        fmt = "csv" if str(path).endswith(".csv") else "pcap"
    trace = ingest_csv(path) if fmt == "csv" else ingest_pcap(path)
    export_csv(trace, run.path("trace.csv"))
    _dump(run.path("ingest.json"), {"source": str(path), "format": fmt, "packets": len(trace),
                                    "report": dataclasses.asdict(trace.ingest_report)
                                    if getattr(trace, "ingest_report", None) else None})
    return {"inputs": [str(Path(path).resolve())], "outputs": ["trace.csv", "ingest.json"]}


def stage_simgen(run: Run) -> dict:
    sc = build_scenario(ScenarioConfig(**run.cfg["simgen"]))
    export_csv(sc.trace, run.path("trace.csv"))
    sc.save_descriptor(run.path("scenario.json"))
    return {"inputs": [], "outputs": ["trace.csv", "scenario.json"]}


def stage_split(run: Run) -> dict:
    run.require("split", ["trace.csv"], "simgen` or `ingest")
    trace = ingest_csv(run.path("trace.csv"))
    sp = split_by_time(trace, run.cfg["split"]["r_RD"], run.cfg["split"]["r_TV"])
    for name in "TVD":
        export_csv(getattr(sp, name), run.path(f"{name}.csv"))
    gt = membership(sp.T, sp.D)
    _dump(run.path("ground_truth.json"), gt)
    _dump(run.path("split.json"), {name: len(getattr(sp, name)) for name in "TVD"})
    return {"inputs": ["trace.csv"], "outputs": ["T.csv", "V.csv", "D.csv", "ground_truth.json", "split.json"]}


def stage_chunk(run: Run) -> dict:
    run.require("chunk", ["T.csv", "V.csv", "D.csv"], "split")
    c = dict(run.cfg["chunk"])
    window, stride = c.pop("window"), c.pop("stride")
    D = run.trace("D")
    if window is None:
        cfg = default_config(D, **c)
        if stride is not None:
            cfg = dataclasses.replace(cfg, stride=stride)
    else:
        cfg = ChunkConfig(window=window, stride=stride if stride is not None else window / 10, **c)
    _dump(run.path("chunk_config.json"), cfg.to_dict())
    counts = {}
    for name in "TVD":
        cs = chunk(run.trace(name), cfg)
        save_chunkset(cs, run.path(f"chunks/{name}"))
        counts[name] = {"chunks": len(cs), "sources": len(cs.sources), "dropped": cs.drop_report}
    _dump(run.path("chunk_summary.json"), counts)
    return {"inputs": ["T.csv", "V.csv", "D.csv"], "outputs": ["chunk_config.json", "chunks", "chunk_summary.json"]}


def stage_train(run: Run) -> dict:
    run.require("train", ["chunks/T", "chunks/V"], "chunk")
    model = train(run.chunks("T"), TrainConfig.from_dict(run.cfg["train"]), validation=run.chunks("V"),
                  log_path=run.path("train_log.jsonl"))
    save_model(model, run.path("model"))
    _dump(run.path("train_summary.json"), {"best_epoch": model.best_epoch, "version": model.version,
                                           "epochs": [{k: v for k, v in e.items() if k != "wall_time"}
                                                      for e in model.train_log]})
    return {"inputs": ["chunks/T", "chunks/V"], "outputs": ["model", "train_summary.json"]}


def stage_calibrate(run: Run) -> dict:
    run.require("calibrate", ["model"], "train")
    calib = atk.calibrate(run.model(), run.chunks("T"), run.chunks("V"), run.cfg["calibrate"]["significance"])
    _dump(run.path("calibration.json"), calib.to_dict())
    return {"inputs": ["model", "chunks/T", "chunks/V"], "outputs": ["calibration.json"]}


def stage_attack(run: Run) -> dict:
    run.require("attack", ["calibration.json"], "calibrate")
    model, T = run.model(), run.chunks("T")
    t_emb = encode_chunks(model, T.chunks)
    gt = run.ground_truth()
    run.path("attack").mkdir(exist_ok=True)
    outputs = []
    summary = {}
    for spec in run.cfg["attack"]["targets"]:
        name = _target_name(spec)
        target = _synthetic(run, spec)
        target_chunks = chunk(target, run.chunk_config())
        rep = _attack(run, target, t_emb)
        in_sources = [s for s, v in gt.items() if v == "IN"]
        if spec == "D" and len(target_chunks):
            rep.topk = atk.topk_hit(model, T, target_chunks, run.cfg["attack"]["topk"], in_sources=in_sources,
                                    t_emb=t_emb)
        labels = [c.source_id for c in T.chunks]
        rep.inter_intra_ratio = separation_ratio(t_emb, labels)
        rep.metadata.update({"target": spec, "random_guess_f1": atk.random_guess_baseline(gt).f1})
        rep.to_json(run.path(f"attack/{name}.json"))
        outputs.append(f"attack/{name}.json")
        summary[name] = rep.f1
    if run.cfg["attack"]["baseline"]:
        df = df_train(run.trace("T"), DFConfig.from_dict(run.cfg["baseline"]))
        res = df_infer(df, run.trace("D"))
        rep = atk.score(df_verdicts(df, res), gt)
        rep.flags += res.flags
        rep.metadata.update({"attacker": "df", "train_accuracy": df.train_accuracy})
        rep.to_json(run.path("attack/df_baseline.json"))
        outputs.append("attack/df_baseline.json")
        summary["df_baseline"] = rep.f1
    _dump(run.path("attack/summary.json"), summary)
    outputs.append("attack/summary.json")
    return {"inputs": ["model", "calibration.json", "chunks/T", "D.csv", "T.csv", "ground_truth.json"],
            "outputs": outputs}


def stage_defend(run: Run) -> dict:
    run.require("defend", ["calibration.json"], "calibrate")
    c = run.cfg["defend"]
    config = DefenseConfig.from_dict({k: v for k, v in c.items() if k not in ("target", "reference")})
    synth = _synthetic(run, c["target"])
    out, rep, extra = _defend(run, synth, config)
    export_csv(out, run.path("defended.csv"))
    body, times = _without_wall_time(rep.to_dict())
    body.update(extra)
    _dump(run.path("defense_report.json"), body)
    return {"inputs": ["model", "calibration.json", "chunks/T", "chunks/D", "D.csv", "ground_truth.json"],
            "outputs": ["defended.csv", "defense_report.json"], "timings": {"rounds": times}}


def _defend(run: Run, synth: Trace, config: DefenseConfig):
    ref = run.chunks(run.cfg["defend"]["reference"])
    out, rep = tracepatch(run.model(), run.calibration(), synth, ref, config, evaluate_f1=_f1_fn(run),
                          fidelity_real=run.trace("D"), fidelity_refs={"reference": _reference_generator(run)})
    extra = {"constraint_violations": check_constraints(synth, out, config),
             "random_guess_f1": atk.random_guess_baseline(run.ground_truth()).f1,
             "target": run.cfg["defend"]["target"]}
    return out, rep, extra


def stage_sweep(run: Run) -> dict:
    run.require("sweep-volume", ["calibration.json"], "calibrate")
    s = run.cfg["sweep"]
    if not s["multipliers"]:
        raise ValidationError("sweep.multipliers: must not be empty")
    f1 = _f1_fn(run)
    config = DefenseConfig.from_dict({k: v for k, v in run.cfg["defend"].items() if k not in ("target", "reference")})
    rows, flags, timings = [], [], {}
    for m in s["multipliers"]:
        key = f"{m:g}"
        if key in s["traces"]:
            p = Path(s["traces"][key])
            if not p.exists():
                flags.append(f"missing_{key}x")
                continue
            synth = ingest_csv(p, label=p.stem)
        else:
            synth = _synthetic(run, f"leaky:{m}")
        row = {"multiplier": m, "packets": len(synth), "f1": f1(synth)}
        if s["defend"]:
            _, rep, extra = _defend(run, synth, config)
            row["f1_defended"] = rep.rounds[-1].f1 if rep.rounds else row["f1"]
            row["gap"] = row["f1"] - row["f1_defended"]
            row["fidelity_delta"] = rep.rounds[-1].mean_fidelity_delta if rep.rounds else 0.0
            row["constraint_violations"] = sum(extra["constraint_violations"].values())
            timings[key] = [r.wall_time for r in rep.rounds]
        rows.append(row)
    f1s = [r["f1"] for r in rows]
    trend = {"f1_non_decreasing": all(b >= a for a, b in zip(f1s, f1s[1:]))}
    if s["defend"]:
        gaps = [r["gap"] for r in rows]
        trend["gap_shrinking"] = all(b <= a for a, b in zip(gaps, gaps[1:]))
    _dump(run.path("sweep_volume.json"), {"rows": rows, "flags": flags, "trend": trend,
                                          "random_guess_f1": atk.random_guess_baseline(run.ground_truth()).f1})
    with open(run.path("sweep_volume.csv"), "w", newline="") as fh:
        cols = ["multiplier", "packets", "f1"] + (["f1_defended", "gap", "fidelity_delta"] if s["defend"] else [])
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) for c in cols])
    return {"inputs": ["model", "calibration.json", "chunks/T", "D.csv", "ground_truth.json"],
            "outputs": ["sweep_volume.json", "sweep_volume.csv"], "timings": timings}


def stage_fidelity(run: Run) -> dict:
    run.require("fidelity", ["D.csv"], "split")
    synth = {f"leaky_{m:g}x": _synthetic(run, f"leaky:{m}") for m in run.cfg["sweep"]["multipliers"]}
    inputs = ["D.csv"]
    if run.path("defended.csv").exists():
        synth["defended"] = ingest_csv(run.path("defended.csv"), label="defended")
        inputs.append("defended.csv")
    synth["reference"] = _reference_generator(run)
    reports = fidelity_report(run.trace("D"), synth, run.cfg["fidelity"]["include_protocol"])
    export_reports(reports, run.path("fidelity.json"), run.path("fidelity.csv"))
    return {"inputs": inputs, "outputs": ["fidelity.json", "fidelity.csv"]}


def stage_report(run: Run) -> dict:
    run.require("report", ["attack/summary.json"], "attack")
    inputs = ["attack"]
    report: dict = {"attack": {}, "volume": None, "defense": None, "fidelity": None}
    for p in sorted(run.path("attack").glob("*.json")):
        if p.name != "summary.json":
            d = json.loads(p.read_text())
            report["attack"][p.stem] = {k: d[k] for k in ("precision", "recall", "f1", "confident_ratio")}
    for name, key in (("sweep_volume.json", "volume"), ("defense_report.json", "defense"), ("fidelity.json", "fidelity")):
        if run.path(name).exists():
            report[key] = json.loads(run.path(name).read_text())
            inputs.append(name)
    _dump(run.path("report/report.json"), report)

    # F1 vs volume curve
    if report["volume"]:
        with open(run.path("report/f1_vs_volume.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["multiplier", "f1", "f1_defended"])
            for r in report["volume"]["rows"]:
                w.writerow([repr(r["multiplier"]), repr(r["f1"]), repr(r.get("f1_defended", ""))])
    # F1 vs fidelity scatter, one point per generator with both numbers
    points = []
    if report["fidelity"]:
        f1_by_name = {}
        if report["volume"]:
            f1_by_name.update({f"leaky_{r['multiplier']:g}x": r["f1"] for r in report["volume"]["rows"]})
        if report["defense"] and report["defense"]["rounds"]:
            f1_by_name["defended"] = report["defense"]["rounds"][-1]["f1"]
        for name, fid in sorted(report["fidelity"].items()):
            if name in f1_by_name:
                points.append((name, f1_by_name[name], fid["mean_fidelity"]))
    with open(run.path("report/f1_vs_fidelity.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generator", "f1", "mean_fidelity"])
        for p in points:
            w.writerow([p[0], repr(p[1]), repr(p[2])])
    run.path("report/report.md").write_text(_markdown(report))
    return {"inputs": inputs, "outputs": ["report"]}


def _markdown(report: dict) -> str:
    lines = ["# Attack", "", "| target | precision | recall | F1 | confident |", "|---|---|---|---|---|"]
    for name, r in sorted(report["attack"].items()):
        lines.append(f"| {name} | {r['precision']:.3f} | {r['recall']:.3f} | {r['f1']:.3f} | {r['confident_ratio']:.3f} |")
    if report["volume"]:
        lines += ["", "# Volume", "", "| multiplier | F1 | F1 defended |", "|---|---|---|"]
        for r in report["volume"]["rows"]:
            d = r.get("f1_defended")
            lines.append(f"| {r['multiplier']:g}X | {r['f1']:.3f} | {'' if d is None else f'{d:.3f}'} |")
    if report["defense"]:
        lines += ["", "# Defense", "", "| round | vulnerable | F1 | fidelity delta |", "|---|---|---|---|"]
        for r in report["defense"]["rounds"]:
            f1 = "" if r["f1"] is None else f"{r['f1']:.3f}"
            fd = "" if r["mean_fidelity_delta"] is None else f"{r['mean_fidelity_delta']:+.4f}"
            lines.append(f"| {r['round']} | {r['vulnerable_count']} | {f1} | {fd} |")
    return "\n".join(lines) + "\n"


STAGES: dict[str, Callable[[Run], dict]] = {
    "ingest": stage_ingest,
    "simgen": stage_simgen,
    "split": stage_split,
    "chunk": stage_chunk,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "attack": stage_attack,
    "defend": stage_defend,
    "sweep-volume": stage_sweep,
    "fidelity": stage_fidelity,
    "report": stage_report,
}
PIPELINE = ("split", "chunk", "train", "calibrate", "attack", "sweep-volume", "defend", "fidelity", "report")

# declared inputs, used to decide whether a stage is up to date before running it
_INPUTS = {
    "ingest": [], "simgen": [], "split": ["trace.csv"], "chunk": ["T.csv", "V.csv", "D.csv"],
    "train": ["chunks/T", "chunks/V"], "calibrate": ["model", "chunks/T", "chunks/V"],
    "attack": ["model", "calibration.json", "chunks/T", "D.csv", "T.csv", "ground_truth.json"],
    "defend": ["model", "calibration.json", "chunks/T", "chunks/D", "D.csv", "ground_truth.json"],
    "sweep-volume": ["model", "calibration.json", "chunks/T", "D.csv", "ground_truth.json"],
    "fidelity": ["D.csv", "defended.csv"],
    "report": ["attack", "sweep_volume.json", "defense_report.json", "fidelity.json"],
}


def run_stage(stage: str, run: Run, force: bool = False) -> bool:
    """Run one stage unless its recorded inputs and outputs are unchanged. Returns True if it ran."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}")
    inputs = list(_INPUTS[stage])
    if stage == "ingest" and run.cfg["input"]["path"]:
        inputs.append(str(Path(run.cfg["input"]["path"]).resolve()))
    if not force and run.up_to_date(stage, inputs):
        log.info("%s: up to date", stage)
        return False
    seed = run.cfg["seed"]
    np.random.seed(seed)
    torch.manual_seed(seed)
    start = time.perf_counter()
    result = STAGES[stage](run)
    run.record(stage, result["inputs"], result["outputs"], time.perf_counter() - start, result.get("timings"))
    log.info("%s: done in %.1fs", stage, time.perf_counter() - start)
    return True


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracebleed", description="Source-level membership inference "
                                     "and defense for synthetic packet traces")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config (defaults apply to missing keys)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=3 (repeatable)")
    common.add_argument("--run-root", type=Path, default=None, help=f"run root (default ${CACHE_ENV} or ./runs)")
    common.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run-all", parents=[common], help="simgen (or ingest) through report")
    sub.add_parser("show-config", parents=[common], help="print the effective config and run directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        torch.set_num_threads(max(1, cfg["workers"]))
        run = Run(cfg, args.run_root)
        if args.command == "show-config":
            print(yaml.safe_dump({"run_dir": str(run.dir), "config": cfg}, sort_keys=True), end="")
            return EXIT_OK
        if args.command == "run-all":
            first = "ingest" if cfg["input"]["path"] else "simgen"
            for stage in (first,) + PIPELINE:
                run_stage(stage, run, args.force)
        else:
            run_stage(args.command, run, args.force)
        print(run.dir)
        return EXIT_OK
    except (ValidationError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TraceBleedError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
