"""Closed-set flow classifier baseline (deep fingerprinting style) and its vote-based attack."""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attack import MembershipVerdict, Verdict
from .errors import InputError, TrainingError
from .trace import Trace, int_to_ip, ip_to_int

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DFConfig:
    n_packets: int = 100
    channels: tuple[int, ...] = (32, 64)
    kernel_size: int = 7
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "DFConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def flow_features(trace: Trace, n_packets: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Five-tuple flows as (n_flows, 2, n_packets) arrays plus each flow's source ip.

    Channel 0 is log1p(iat in microseconds) / 10, channel 1 is pkt_len / 1500;
    flows shorter than ``n_packets`` are zero-padded, longer ones truncated.
    """
    if len(trace) == 0:
        return np.zeros((0, 2, n_packets), np.float32), np.zeros(0, np.uint32)
    cols = trace.columns
    keys = np.stack([cols["src_ip"].astype(np.int64), cols["dst_ip"].astype(np.int64),
                     cols["src_port"].astype(np.int64), cols["dst_port"].astype(np.int64),
                     cols["protocol"].astype(np.int64)], axis=1)
    uniq, flow_id = np.unique(keys, axis=0, return_inverse=True)
    flow_id = flow_id.ravel()
    order = np.argsort(flow_id, kind="stable")
    fid = flow_id[order]
    first = np.searchsorted(fid, np.arange(len(uniq)))
    pos = np.arange(len(order)) - first[fid]
    keep = pos < n_packets
    ts = cols["ts_us"][order]
    iat = np.zeros(len(order))
    same = np.r_[False, fid[1:] == fid[:-1]]
    iat[1:] = np.diff(ts)
    iat[~same] = 0.0
    out = np.zeros((len(uniq), 2, n_packets), np.float32)
    out[fid[keep], 0, pos[keep]] = np.log1p(iat[keep]) / 10.0
    out[fid[keep], 1, pos[keep]] = cols["pkt_len"][order][keep] / 1500.0
    return out, uniq[:, 0].astype(np.uint32)


class DFNet(nn.Module):
    def __init__(self, n_classes: int, config: DFConfig):
        super().__init__()
        layers = []
        c_in = 2
        for c in config.channels:
            layers += [nn.Conv1d(c_in, c, config.kernel_size, padding="same"), nn.BatchNorm1d(c), nn.ReLU(),
                       nn.Conv1d(c, c, config.kernel_size, padding="same"), nn.ReLU(), nn.MaxPool1d(2)]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).amax(dim=2))


@dataclasses.dataclass
class DFModel:
    net: DFNet
    label_map: list[str]          # class index -> source id
    config: DFConfig
    train_accuracy: float = float("nan")

    def predict(self, feats: np.ndarray, batch: int = 1024) -> np.ndarray:
        self.net.eval()
        out = []
        with torch.no_grad():
            for a in range(0, len(feats), batch):
                out.append(self.net(torch.from_numpy(feats[a:a + batch])).argmax(dim=1).numpy())
        return np.concatenate(out) if out else np.zeros(0, np.int64)


def df_train(T: Trace, config: DFConfig = DFConfig(), sources: Sequence[str] | None = None) -> DFModel:
    """Train the flow classifier with each flow labelled by its source address.

    ``sources`` restricts training to those sources (default: all of T).
    """
    feats, src = flow_features(T, config.n_packets)
    labels_ip = np.unique(src)
    if sources is not None:
        wanted = {ip_to_int(s) for s in sources}
        mask = np.isin(src, list(wanted))
        feats, src = feats[mask], src[mask]
        labels_ip = np.unique(src)
    if len(labels_ip) < 2:
        raise TrainingError("the flow classifier needs at least two sources")
    y = np.searchsorted(labels_ip, src)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = DFNet(len(labels_ip), config)
    model = DFModel(net, [int_to_ip(int(i)) for i in labels_ip], config)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    x_all = torch.from_numpy(feats)
    y_all = torch.from_numpy(y.astype(np.int64))
    for epoch in range(config.epochs):
        net.train()
        perm = rng.permutation(len(y))
        total = 0.0
        for a in range(0, len(perm), config.batch_size):
            idx = torch.from_numpy(perm[a:a + config.batch_size])
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"flow classifier loss became {loss.item()} at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("df epoch %d loss %.4f", epoch + 1, total / len(y))
    model.train_accuracy = float(np.mean(model.predict(feats) == y))
    return model


@dataclasses.dataclass
class DFResult:
    predicted_in: set[str]
    votes: dict[str, str]                 # D source -> voted training source
    flags: list[str] = dataclasses.field(default_factory=list)


def df_infer(model: DFModel, D: Trace) -> DFResult:
    """Majority-vote a training label for each D source; voted labels are predicted IN.

    Vote ties go to the lowest class index. Every D source is forced onto some
    training label, even when it never appeared in training.
    """
    if len(D) == 0:
        raise InputError("empty target trace")
    feats, src = flow_features(D, model.config.n_packets)
    pred = model.predict(feats)
    votes = {}
    n_classes = len(model.label_map)
    for s in np.unique(src):
        counts = np.bincount(pred[src == s], minlength=n_classes)
        votes[int_to_ip(int(s))] = model.label_map[int(np.argmax(counts))]
    flags = []
    if set(votes) - set(model.label_map):
        flags.append("forced_label")
    return DFResult(set(votes.values()), votes, flags)


def df_verdicts(model: DFModel, result: DFResult, sources: Sequence[str] | None = None) -> list[MembershipVerdict]:
    """IN for voted labels, OUT for every other training source."""
    sources = model.label_map if sources is None else sources
    return [MembershipVerdict(s, Verdict.IN if s in result.predicted_in else Verdict.OUT, 0, 0,
                              float("nan"), float("nan")) for s in sources]


def save_df_model(model: DFModel, path: str | Path) -> None:
    torch.save({"state": model.net.state_dict(), "labels": model.label_map,
                "config": dataclasses.asdict(model.config)}, path)


def load_df_model(path: str | Path) -> DFModel:
    blob = torch.load(path, weights_only=True)
    config = DFConfig.from_dict(blob["config"])
    net = DFNet(len(blob["labels"]), config)
    net.load_state_dict(blob["state"])
    net.eval()
    return DFModel(net, list(blob["labels"]), config)
