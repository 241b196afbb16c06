"""Convergence diagnostics and evaluation metrics."""

import csv
import math

import numpy as np

from .errors import DegenerateChains, EmptySelection, ZeroTruthVariance


def rhat(samples):
    """Classic potential scale reduction per dimension.

    ``samples`` has shape (chains, draws) or (chains, draws, dims).
    """
    s = np.asarray(samples, dtype=np.float64)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[:, :, None]
    m, n = s.shape[:2]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 chains and 2 draws")
    chain_means = s.mean(axis=1)
    B = n * chain_means.var(axis=0, ddof=1)
    W = s.var(axis=1, ddof=1).mean(axis=0)
    if np.any(W == 0):
        raise DegenerateChains("within-chain variance is zero in some dimension")
    r = np.sqrt(((n - 1) / n * W + B / n) / W)
    return r[0] if squeeze else r


def metrics(mean, var, truth, mask=None):
    """rmse, mse, smse, mae and per-entry nll over the selected entries."""
    mean, var, truth = (np.asarray(a, dtype=np.float64) for a in (mean, var, truth))
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySelection("no entries selected")
    m, v, t = mean[mask], np.broadcast_to(var, truth.shape)[mask], truth[mask]
    err = m - t
    mse = float(np.mean(err**2))
    tvar = float(np.var(t))
    if tvar == 0:
        raise ZeroTruthVariance("truth is constant over the selected entries")
    nll = float(np.mean(0.5 * np.log(2 * math.pi * v) + 0.5 * err**2 / v))
    return {"rmse": math.sqrt(mse), "mse": mse, "smse": mse / tvar,
            "mae": float(np.mean(np.abs(err))), "nll": nll}


def mean_imputer(Y, mask):
    """Per-column mean and variance of the observed entries, broadcast to Y's shape."""
    Y = np.asarray(Y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    mu = np.array([Y[mask[:, j], j].mean() for j in range(Y.shape[1])])
    var = np.array([Y[mask[:, j], j].var() for j in range(Y.shape[1])])
    return np.broadcast_to(mu, Y.shape).copy(), np.broadcast_to(var, Y.shape).copy()


def export_traces(samples, path):
    """CSV with header ``chain,draw,dim,value``; floats written round-trip exact."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, :, None]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "draw", "dim", "value"])
        for c in range(s.shape[0]):
            for d in range(s.shape[1]):
                for k in range(s.shape[2]):
                    w.writerow([c, d, k, repr(float(s[c, d, k]))])


def load_traces(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    idx = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=int)
    shape = tuple(idx.max(axis=0) + 1) if len(idx) else (0, 0, 0)
    out = np.empty(shape)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = [float(r[3]) for r in rows]
    return out


def format_report(values):
    """Flat ``key=value`` lines; floats use their shortest round-trip repr."""
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
