"""Independent reference computations used by unit and acceptance tests."""
from fractions import Fraction
from math import comb, erf, sqrt

import numpy as np
import torch
from scipy.optimize import linprog


# -- encoder forward pass in plain numpy -----------------------------------

def _layernorm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(erf)(x / sqrt(2)))


def numpy_encode(model, flows_per_chunk):
    """flows_per_chunk: list (chunks) of lists of (L, 2) normalized feature arrays."""
    p = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    heads = model.config.num_heads
    out = []
    for flows in flows_per_chunk:
        embs = []
        for f in flows:
            x = f @ p["input_proj.weight"].T + p["input_proj.bias"] + p["positional"][: len(f)]
            for i in range(model.config.num_attention_layers):
                q = f"layers.{i}."
                qkv = x @ p[q + "qkv.weight"].T + p[q + "qkv.bias"]
                d = x.shape[1]
                hd = d // heads
                ys = []
                for h in range(heads):
                    qh = qkv[:, h * hd:(h + 1) * hd]
                    kh = qkv[:, d + h * hd: d + (h + 1) * hd]
                    vh = qkv[:, 2 * d + h * hd: 2 * d + (h + 1) * hd]
                    s = qh @ kh.T / sqrt(hd)
                    s = np.exp(s - s.max(1, keepdims=True))
                    ys.append((s / s.sum(1, keepdims=True)) @ vh)
                y = np.concatenate(ys, 1) @ p[q + "out.weight"].T + p[q + "out.bias"]
                x = _layernorm(x + y, p[q + "norm1.weight"], p[q + "norm1.bias"])
                ff = _gelu(x @ p[q + "ff1.weight"].T + p[q + "ff1.bias"]) @ p[q + "ff2.weight"].T + p[q + "ff2.bias"]
                x = _layernorm(x + ff, p[q + "norm2.weight"], p[q + "norm2.bias"])
            embs.append(x.mean(0) @ p["flow_proj.weight"].T + p["flow_proj.bias"])
        z = np.mean(embs, 0) @ p["aggregator.weight"].T + p["aggregator.bias"]
        out.append(z / np.linalg.norm(z))
    return np.array(out)


# -- gradients by central differences --------------------------------------

def finite_difference_check(model, loss_fn, h=1e-6):
    """Max over parameter tensors of ||g_autograd - g_fd|| / max(||g_autograd||, ||g_fd||, 1e-12)."""
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            fd = torch.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd[i] = (up - down) / (2 * h)
            denom = max(analytic.norm().item(), fd.norm().item(), 1e-12)
            worst = max(worst, (analytic - fd).norm().item() / denom)
    return worst


# -- binomial tail by exact enumeration ------------------------------------

def binomial_tail_exact(k, n, p):
    """P[X >= k] for X ~ Bin(n, p), summed term by term in rationals."""
    q = Fraction(p).limit_denominator(10**9)
    return float(sum(comb(n, i) * q**i * (1 - q) ** (n - i) for i in range(max(k, 0), n + 1)))


# -- distribution distances ------------------------------------------------

def jsd_brute(p, q):
    keys = sorted(set(p) | set(q), key=repr)
    a = np.array([p.get(k, 0.0) for k in keys], float)
    b = np.array([q.get(k, 0.0) for k in keys], float)
    a, b = a / a.sum(), b / b.sum()
    total = 0.0
    for i in range(len(keys)):
        m = (a[i] + b[i]) / 2
        if a[i] > 0:
            total += 0.5 * a[i] * np.log2(a[i] / m)
        if b[i] > 0:
            total += 0.5 * b[i] * np.log2(b[i] / m)
    return total


def emd_lp(xp, wp, xq, wq):
    """1-D earth mover's distance as a transport linear program."""
    wp, wq = np.asarray(wp, float) / np.sum(wp), np.asarray(wq, float) / np.sum(wq)
    n, m = len(xp), len(xq)
    cost = np.abs(np.subtract.outer(np.asarray(xp, float), np.asarray(xq, float))).ravel()
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        a_eq[n + j, j::m] = 1
    res = linprog(cost, A_eq=a_eq, b_eq=np.r_[wp, wq], bounds=(0, None), method="highs")
    return res.fun


# -- threshold calibration by exhaustive scan ------------------------------

def threshold_scan(distances, close):
    """Best accuracy over every threshold that changes the CLOSE set, plus its smallest threshold."""
    d = np.asarray(distances, float)
    y = np.asarray(close, bool)
    cands = sorted(set([0.0] + [x for x in d] + [np.nextafter(x, np.inf) for x in d]))
    best_acc, best_t = -1.0, None
    for t in cands:
        acc = float(np.mean((d < t) == y))
        if acc > best_acc + 1e-15:
            best_acc, best_t = acc, t
    return best_acc, best_t
