"""Prototype-based contrastive training of the traffic encoder with focal weighting."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .chunker import ChunkSet
from .encoder import EncoderConfig, TrafficEncoder, batch_chunks, encode_chunks, fit_normalization
from .errors import InputError, TrainingError

log = logging.getLogger(__name__)

MAX_RATIO = 1e6


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_sources: int = 16
    chunks_per_source: int = 4
    temperature: float = 0.1
    focal_gamma: float = 2.0
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "sgd"
    steps_per_epoch: int | None = None
    separation_max_chunks: int = 4000
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.batch_sources < 2:
            raise ValueError("batch_sources must be >= 2")
        if self.chunks_per_source < 1 or self.epochs < 0:
            raise ValueError("chunks_per_source must be >= 1 and epochs >= 0")
        if self.temperature <= 0 or self.focal_gamma < 0 or self.learning_rate <= 0:
            raise ValueError("temperature and learning_rate must be positive, focal_gamma >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        enc = d.pop("encoder", None)
        return cls(**d, encoder=EncoderConfig(**enc) if enc else EncoderConfig())


PrototypeSet = dict  # source_id -> unit-norm numpy vector


def compute_prototypes(model: TrafficEncoder, chunkset: ChunkSet, sources: Sequence[str] | None = None,
                       embeddings: np.ndarray | None = None) -> PrototypeSet:
    """Normalized mean embedding of each source's chunks."""
    sources = chunkset.sources if sources is None else list(sources)
    for s in sources:
        if not chunkset.source_index.get(s):
            raise InputError(f"source {s} has no chunks")
    if embeddings is None:
        embeddings = encode_chunks(model, chunkset.chunks)
    protos = {}
    for s in sources:
        mean = embeddings[chunkset.source_index[s]].mean(axis=0)
        protos[s] = mean / np.linalg.norm(mean)
    return protos


def prototype_focal_loss(embeddings, labels, prototypes, temperature: float = 0.1,
                         focal_gamma: float = 2.0):
    """Mean over chunks of -(1 - p_true)^gamma * log p_true.

    ``p`` is the softmax over prototypes of cosine similarity / temperature.
    ``prototypes`` is a (K, E) tensor/array or a PrototypeSet mapping; with a
    mapping, ``labels`` are source ids.
    """
    if isinstance(prototypes, Mapping):
        keys = list(prototypes)
        index = {k: i for i, k in enumerate(keys)}
        labels = [index[l] for l in labels]
        prototypes = np.stack([prototypes[k] for k in keys])
    as_numpy = not isinstance(embeddings, torch.Tensor)
    emb = torch.as_tensor(np.asarray(embeddings, dtype=np.float64)) if as_numpy else embeddings
    protos = torch.as_tensor(prototypes, dtype=emb.dtype) if not isinstance(prototypes, torch.Tensor) else prototypes
    if protos.shape[0] < 2:
        raise InputError("need at least two sources (no negatives otherwise)")
    labels = torch.as_tensor(labels, dtype=torch.long)
    logits = emb @ protos.T / temperature
    logp = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    p = logp.exp()
    loss = -((1 - p).clamp_min(0) ** focal_gamma * logp).mean()
    return float(loss) if as_numpy else loss


def separation_ratio(embeddings: np.ndarray, labels: Sequence, max_ratio: float = MAX_RATIO) -> float:
    """Mean over chunks of (mean distance to other sources) / (mean distance to own source).

    Sources with a single chunk are excluded; 0/0 counts as 1 and x/0 is capped.
    """
    labels = np.asarray(labels, dtype=object)
    uniq, inv, counts = np.unique(labels.astype(str), return_inverse=True, return_counts=True)
    keep = counts[inv] >= 2
    if keep.sum() == 0 or len(np.unique(inv[keep])) < 2:
        raise InputError("separation needs >= 2 sources with >= 2 chunks each")
    emb = np.asarray(embeddings, dtype=np.float64)[keep]
    inv = inv[keep]
    n = len(emb)
    ratios = np.empty(n)
    block = 1024
    for a in range(0, n, block):
        d = np.clip(1.0 - emb[a:a + block] @ emb.T, 0.0, 2.0)
        same = inv[a:a + block, None] == inv[None, :]
        rows = np.arange(a, min(a + block, n))
        d_same = np.where(same, d, 0.0)
        d_same[np.arange(len(rows)), rows] = 0.0
        n_same = same.sum(1) - 1
        intra = d_same.sum(1) / n_same
        inter = np.where(same, 0.0, d).sum(1) / (n - same.sum(1))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = inter / intra
        r = np.where((intra == 0) & (inter == 0), 1.0, r)
        r = np.where((intra == 0) & (inter > 0), max_ratio, r)
        ratios[a:a + block] = np.minimum(r, max_ratio)
    return float(ratios.mean())


def evaluate_separation(model: TrafficEncoder, chunkset: ChunkSet, max_ratio: float = MAX_RATIO,
                        max_chunks: int | None = None, seed: int = 0) -> float:
    """Inter/intra-source distance ratio of the model's embeddings on ``chunkset``."""
    chunks = chunkset.chunks
    if max_chunks is not None and len(chunks) > max_chunks:
        idx = np.sort(np.random.default_rng(seed).choice(len(chunks), max_chunks, replace=False))
        chunks = [chunks[i] for i in idx]
    emb = encode_chunks(model, chunks)
    return separation_ratio(emb, [c.source_id for c in chunks], max_ratio)


class EpisodeSampler:
    """Draws batch_sources sources uniformly, then chunks_per_source chunks each.

    Uniform source draws make the expected number of draws equal for every
    source regardless of how many chunks it owns.
    """

    def __init__(self, chunkset: ChunkSet, batch_sources: int, chunks_per_source: int, rng: np.random.Generator):
        self.sources = chunkset.sources
        self.index = {s: np.asarray(chunkset.source_index[s]) for s in self.sources}
        self.batch_sources = min(batch_sources, len(self.sources))
        self.chunks_per_source = chunks_per_source
        self.rng = rng

    def source_weights(self) -> dict[str, float]:
        return {s: 1.0 / len(self.sources) for s in self.sources}

    def expected_draws(self, n_batches: int) -> dict[str, float]:
        per = n_batches * self.batch_sources * self.chunks_per_source
        return {s: w * per for s, w in self.source_weights().items()}

    def sample(self) -> tuple[list[int], list[int]]:
        picked = self.rng.choice(len(self.sources), self.batch_sources, replace=False)
        chunk_ids, labels = [], []
        for j, si in enumerate(sorted(picked)):
            pool = self.index[self.sources[si]]
            take = self.rng.choice(pool, self.chunks_per_source, replace=len(pool) < self.chunks_per_source)
            chunk_ids.extend(int(t) for t in take)
            labels.extend([j] * self.chunks_per_source)
        return chunk_ids, labels


def _batch_loss(model: TrafficEncoder, chunkset: ChunkSet, chunk_ids, labels, config: TrainConfig):
    chunks = [chunkset.chunks[i] for i in chunk_ids]
    feats, mask, owner = batch_chunks(model, chunks)
    emb = model(feats, mask, owner, len(chunks))
    lab = torch.as_tensor(labels)
    k = int(lab.max()) + 1
    protos = torch.zeros(k, emb.shape[1], dtype=emb.dtype).index_add(0, lab, emb)
    protos = F.normalize(protos, dim=1)
    return prototype_focal_loss(emb, lab, protos, config.temperature, config.focal_gamma)


def train(chunkset_T: ChunkSet, config: TrainConfig, validation: ChunkSet | None = None,
          log_path: str | Path | None = None) -> TrafficEncoder:
    """Train a fresh encoder on T and return the best checkpoint.

    The checkpoint with the highest inter/intra ratio on ``validation`` (T when
    not given) is returned. Runs are bit-identical for a fixed seed.
    """
    if len(chunkset_T.sources) < 2:
        raise TrainingError("training needs at least two sources")
    if chunkset_T.normalized:
        raise InputError("pass raw chunks; the encoder normalizes with stats fit on T")
    stats = fit_normalization(chunkset_T)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = TrafficEncoder(config.encoder, stats)
    model.train_log = []
    if config.epochs == 0:
        model.eval()
        return model

    rng = np.random.default_rng(config.seed)
    sampler = EpisodeSampler(chunkset_T, config.batch_sources, config.chunks_per_source, rng)
    per_batch = sampler.batch_sources * config.chunks_per_source
    steps = config.steps_per_epoch or max(1, len(chunkset_T) // per_batch)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate)

    val = validation if validation is not None and len(validation.sources) >= 2 else chunkset_T
    model.eval()
    best_ratio = _safe_separation(model, val, config)
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            model.train()
            total = 0.0
            for _ in range(steps):
                ids, labels = sampler.sample()
                loss = _batch_loss(model, chunkset_T, ids, labels, config)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"loss became {loss.item()} at epoch {epoch}; "
                        f"lr={config.learning_rate}, temperature={config.temperature}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
            model.eval()
            ratio = _safe_separation(model, val, config)
            entry = {"epoch": epoch, "loss": total / steps, "inter_intra_ratio": ratio,
                     "wall_time": time.perf_counter() - start}
            model.train_log.append(entry)
            log.info("epoch %d loss %.4f ratio %.3f", epoch, entry["loss"], ratio)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if ratio > best_ratio:
                best_ratio, best_epoch = ratio, epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.best_epoch = best_epoch
    model.version = best_epoch + 1
    model.eval()
    return model


def _safe_separation(model: TrafficEncoder, chunkset: ChunkSet, config: TrainConfig) -> float:
    try:
        return evaluate_separation(model, chunkset, max_chunks=config.separation_max_chunks, seed=config.seed)
    except InputError:
        return float("nan")
