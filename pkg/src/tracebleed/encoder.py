"""Traffic encoder: flows -> flow embeddings -> unit-norm chunk embedding."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .chunker import Chunk, ChunkSet, Flow
from ._npz import save_npz
from .errors import InputError

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
UNIT_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 2
    latent_dim: int = 64
    num_attention_layers: int = 2
    num_heads: int = 4
    flow_embed_dim: int = 64
    traffic_embed_dim: int = 64
    max_positions: int = 256
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.feature_dim != 2:
            raise ValueError("feature_dim is fixed at 2 (iat, pkt_len)")
        for name in ("latent_dim", "num_attention_layers", "num_heads", "flow_embed_dim",
                     "traffic_embed_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim % self.num_heads:
            raise ValueError("latent_dim must be divisible by num_heads")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 2 * self.latent_dim


# -- feature normalization -------------------------------------------------

@dataclasses.dataclass(frozen=True)
class NormalizationStats:
    """z-score parameters for (log1p(iat / 1us), pkt_len)."""

    mean: tuple[float, float]
    std: tuple[float, float]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def _iat_transform(iat):
    if isinstance(iat, torch.Tensor):
        return torch.log1p(iat * 1e6)
    return np.log1p(np.asarray(iat, dtype=np.float64) * 1e6)


def transform_features(iat, pkt_len, stats: NormalizationStats):
    """Normalize raw features; works on numpy arrays and (differentiably) on tensors."""
    a = (_iat_transform(iat) - stats.mean[0]) / stats.std[0]
    b = (pkt_len - stats.mean[1]) / stats.std[1]
    if isinstance(a, torch.Tensor):
        return torch.stack([a, b], dim=-1)
    return np.stack([a, np.asarray(b, dtype=np.float64)], axis=-1)


def fit_normalization(chunkset: ChunkSet | Sequence[Chunk]) -> NormalizationStats:
    chunks = list(chunkset)
    if not chunks:
        raise InputError("cannot fit normalization on an empty chunk set")
    iat = np.concatenate([f.iat for c in chunks for f in c.flows])
    length = np.concatenate([f.pkt_len for c in chunks for f in c.flows])
    cols = [_iat_transform(iat), length]
    mean, std = [], []
    for name, col in zip(("iat", "pkt_len"), cols):
        var = float(np.var(col))
        if var < VAR_FLOOR:
            log.warning("feature %s has zero variance; flooring at %g", name, VAR_FLOOR)
            var = VAR_FLOOR
        mean.append(float(np.mean(col)))
        std.append(math.sqrt(var))
    return NormalizationStats(tuple(mean), tuple(std))


def normalize_features(chunkset: ChunkSet, stats: NormalizationStats | None = None
                       ) -> tuple[ChunkSet, NormalizationStats]:
    """Return a normalized copy of ``chunkset`` and the stats used.

    Stats are fit on this set when not supplied (use T), then reused for every
    other split. Normalizing twice is refused.
    """
    if chunkset.normalized or any(c.normalized for c in chunkset.chunks):
        raise InputError("chunk set is already normalized")
    if len(chunkset) == 0:
        raise InputError("cannot normalize an empty chunk set")
    stats = stats or fit_normalization(chunkset)
    out = []
    for c in chunkset.chunks:
        flows = []
        for f in c.flows:
            z = transform_features(f.iat, f.pkt_len, stats)
            flows.append(Flow(f.key, z[:, 0], z[:, 1], f.packet_index))
        out.append(Chunk(c.source_id, c.window_index, c.window_start, tuple(flows), normalized=True))
    result = ChunkSet(out, chunkset.config, chunkset.anchor_us, dict(chunkset.drop_report), normalized=True)
    return result, stats


# -- model -----------------------------------------------------------------

class SelfAttentionLayer(nn.Module):
    """Post-norm transformer encoder layer with key padding mask."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, hidden)
        self.ff2 = nn.Linear(hidden, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n, length, dim = x.shape
        hd = dim // self.heads
        q, k, v = self.qkv(x).view(n, length, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(n, length, dim)
        x = self.norm1(x + self.out(y))
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class TrafficEncoder(nn.Module):
    """Flow encoder (shared across flows) followed by a mean+linear aggregator."""

    def __init__(self, config: EncoderConfig | None = None, stats: NormalizationStats | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        c = self.config
        self.stats = stats
        self.version = 1
        self.input_proj = nn.Linear(c.feature_dim, c.latent_dim)
        # small random init: an all-zero table leaves a fresh encoder order-invariant
        self.positional = nn.Parameter(0.02 * torch.randn(c.max_positions, c.latent_dim))
        self.layers = nn.ModuleList(
            SelfAttentionLayer(c.latent_dim, c.num_heads, c.hidden_dim) for _ in range(c.num_attention_layers)
        )
        self.flow_proj = nn.Linear(c.latent_dim, c.flow_embed_dim)
        self.aggregator = nn.Linear(c.flow_embed_dim, c.traffic_embed_dim)

    def encode_flows(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """feats (F, L, 2) normalized, mask (F, L) -> (F, flow_embed_dim)."""
        length = feats.shape[1]
        if length > self.config.max_positions:
            raise InputError(f"flow length {length} exceeds max_positions {self.config.max_positions}")
        x = self.input_proj(feats) + self.positional[:length]
        for layer in self.layers:
            x = layer(x, mask)
        m = mask.unsqueeze(-1).to(x.dtype)
        pooled = (x * m).sum(1) / m.sum(1)
        return self.flow_proj(pooled)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor, chunk_of_flow: torch.Tensor,
                n_chunks: int) -> torch.Tensor:
        """Encode a batch of chunks whose flows are stacked along dim 0."""
        flow_emb = self.encode_flows(feats, mask)
        summed = torch.zeros(n_chunks, flow_emb.shape[1], dtype=flow_emb.dtype).index_add(0, chunk_of_flow, flow_emb)
        counts = torch.zeros(n_chunks, dtype=flow_emb.dtype).index_add(
            0, chunk_of_flow, torch.ones_like(chunk_of_flow, dtype=flow_emb.dtype))
        mean = summed / counts.unsqueeze(1)
        return F.normalize(self.aggregator(mean), dim=1, eps=1e-12)

    @property
    def dtype(self) -> torch.dtype:
        return self.input_proj.weight.dtype


# -- batching --------------------------------------------------------------

def _flow_matrix(flow: Flow, stats: NormalizationStats | None, normalized: bool) -> np.ndarray:
    if normalized:
        return np.stack([flow.iat, flow.pkt_len], axis=1)
    if stats is None:
        raise InputError("model has no normalization stats; train it or pass normalized chunks")
    return transform_features(flow.iat, flow.pkt_len, stats)


def pad_flows(mats: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(len(m) for m in mats)
    feats = np.zeros((len(mats), length, 2), dtype=np.float64)
    mask = np.zeros((len(mats), length), dtype=bool)
    for i, m in enumerate(mats):
        feats[i, : len(m)] = m
        mask[i, : len(m)] = True
    return torch.as_tensor(feats, dtype=dtype), torch.as_tensor(mask)


def batch_chunks(model: TrafficEncoder, chunks: Sequence[Chunk]):
    """Stack all flows of ``chunks`` into padded tensors for ``model.forward``."""
    mats, owner = [], []
    for i, c in enumerate(chunks):
        if not c.flows:
            raise InputError(f"chunk {c.source_id}@{c.window_index} has no flows")
        for f in c.flows:
            if len(f) > model.config.max_positions:
                raise InputError(f"flow of {len(f)} packets exceeds max_positions; truncate first")
            mats.append(_flow_matrix(f, model.stats, c.normalized))
            owner.append(i)
    feats, mask = pad_flows(mats, model.dtype)
    return feats, mask, torch.as_tensor(owner, dtype=torch.long)


def encode_flow(model: TrafficEncoder, flow: Flow, normalized: bool = False) -> np.ndarray:
    if len(flow) > model.config.max_positions:
        raise InputError(f"flow of {len(flow)} packets exceeds max_positions {model.config.max_positions}")
    feats, mask = pad_flows([_flow_matrix(flow, model.stats, normalized)], model.dtype)
    with torch.no_grad():
        return model.encode_flows(feats, mask)[0].double().numpy()


def encode_chunk(model: TrafficEncoder, chunk: Chunk) -> np.ndarray:
    return encode_chunks(model, [chunk])[0]


def encode_chunks(model: TrafficEncoder, chunks: Sequence[Chunk] | ChunkSet,
                  max_positions_per_batch: int = 65536) -> np.ndarray:
    """Embed many chunks; flows are bucketed by length to limit padding.

    Returns a float64 array (n_chunks, traffic_embed_dim) of unit rows.
    """
    chunks = list(chunks)
    if not chunks:
        return np.zeros((0, model.config.traffic_embed_dim))
    mats, owner = [], []
    for i, c in enumerate(chunks):
        if not c.flows:
            raise InputError(f"chunk {c.source_id}@{c.window_index} has no flows")
        for f in c.flows:
            mats.append(_flow_matrix(f, model.stats, c.normalized))
            owner.append(i)
    owner = np.asarray(owner)
    lengths = np.array([len(m) for m in mats])
    if lengths.max() > model.config.max_positions:
        raise InputError("a flow exceeds max_positions; truncate first")
    order = np.argsort(lengths, kind="stable")
    flow_emb = np.zeros((len(mats), model.config.flow_embed_dim))
    with torch.no_grad():
        pos = 0
        while pos < len(order):
            length = lengths[order[pos]]
            end = pos + 1
            # grow the batch while the padded size stays under budget
            while end < len(order) and (end - pos + 1) * lengths[order[end]] <= max_positions_per_batch:
                end += 1
            idx = order[pos:end]
            feats, mask = pad_flows([mats[j] for j in idx], model.dtype)
            flow_emb[idx] = model.encode_flows(feats, mask).double().numpy()
            pos = end
        summed = np.zeros((len(chunks), flow_emb.shape[1]))
        np.add.at(summed, owner, flow_emb)
        mean = summed / np.bincount(owner, minlength=len(chunks))[:, None]
        w = model.aggregator.weight.detach().double().numpy()
        b = model.aggregator.bias.detach().double().numpy()
        out = mean @ w.T + b
    return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity of two unit vectors, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise InputError("distance expects unit-norm embeddings")
    return float(np.clip(1.0 - a @ b, 0.0, 2.0))


# -- checkpoints -----------------------------------------------------------

def save_model(model: TrafficEncoder, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": dataclasses.asdict(model.config),
        "version": model.version,
        "stats": model.stats.to_dict() if model.stats else None,
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_npz(directory / "params.npz", **arrays)


def load_model(directory: str | Path) -> TrafficEncoder:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    stats = NormalizationStats.from_dict(meta["stats"]) if meta["stats"] else None
    model = TrafficEncoder(EncoderConfig(**meta["config"]), stats)
    if meta.get("dtype") == "float64":
        model.double()
    data = np.load(directory / "params.npz")
    model.load_state_dict({k: torch.as_tensor(data[k]) for k in data.files})
    model.version = meta["version"]
    model.eval()
    return model
