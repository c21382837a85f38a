"""Modality-gap measurements: centroid distance, linear separability, PCA."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from slap.errors import DataError

log = logging.getLogger(__name__)

LR_STEP = 0.1
LR_EPOCHS = 5000
LR_TOL = 1e-8


@dataclass
class GapReport:
    centroid_distance: float
    linear_separability: float
    n_a: int
    n_t: int
    anchor_kind: str

    def to_dict(self):
        return {
            "anchor_kind": self.anchor_kind,
            "n_a": self.n_a,
            "n_t": self.n_t,
            "centroid_distance": float(self.centroid_distance),
            "linear_separability": float(self.linear_separability),
        }


def _split(embeds, min_rows=1):
    mods = np.asarray(embeds.modality)
    a, t = embeds.vectors[mods == "A"], embeds.vectors[mods == "T"]
    if len(a) < min_rows or len(t) < min_rows:
        raise DataError(f"need at least {min_rows} row(s) per modality, got A={len(a)} T={len(t)}")
    return a, t


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DataError("cannot L2-normalize a zero embedding")
    return x / n


def centroid_distance(embeds, normalize=True):
    """Euclidean distance between the per-modality means of unit embeddings."""
    a, t = _split(embeds)
    if normalize:
        a, t = _unit(a), _unit(t)
    return float(np.linalg.norm(a.mean(axis=0) - t.mean(axis=0)))


def fit_logistic(x, y, lr=LR_STEP, epochs=LR_EPOCHS, tol=LR_TOL):
    """Full-batch gradient descent on mean logistic loss; returns ``(w, b)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    w, b = np.zeros(d), 0.0
    prev = np.inf
    for _ in range(epochs):
        logits = x @ w + b
        # log(1 + e^{-s}) with s = +-logits, computed stably
        loss = np.mean(np.logaddexp(0.0, logits) - y * logits)
        if abs(prev - loss) < tol:
            break
        prev = loss
        p = 0.5 * (1.0 + np.tanh(0.5 * logits))
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * err.mean()
    return w, b


def linear_separability(embeds, epochs=LR_EPOCHS, lr=LR_STEP, normalize=True):
    """Training accuracy (%) of a logistic regression telling A rows from T rows."""
    a, t = _split(embeds, min_rows=2)
    if normalize:
        a, t = _unit(a), _unit(t)
    x = np.vstack([a, t])
    y = np.r_[np.ones(len(a)), np.zeros(len(t))]
    w, b = fit_logistic(x, y, lr=lr, epochs=epochs)
    pred = (x @ w + b) > 0
    return 100.0 * float(np.mean(pred == (y == 1)))


def gap_report(embeds, epochs=LR_EPOCHS, lr=LR_STEP):
    a, t = _split(embeds, min_rows=2)
    return GapReport(
        centroid_distance=centroid_distance(embeds),
        linear_separability=linear_separability(embeds, epochs=epochs, lr=lr),
        n_a=len(a),
        n_t=len(t),
        anchor_kind=embeds.anchor_kind,
    )


@dataclass
class PcaResult:
    coords: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray


def pca_project(x, dims=2, tol=1e-12):
    """Project centered rows onto the top principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    Returns fewer than ``dims`` components (with a warning) when the data
    has lower rank.
    """
    x = np.asarray(getattr(x, "vectors", x), dtype=float)
    n = x.shape[0]
    if n < dims:
        raise DataError(f"need at least {dims} rows for a {dims}-D projection, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()
    rank = int(np.sum(evals > tol * max(total, 1.0)))
    k = min(dims, rank)
    if k < dims:
        warnings.warn(f"input rank {rank} < {dims}; returning {k} component(s)", stacklevel=2)
    comps = evecs[:, :k]
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(centered @ comps, evals[:k], ratio, comps)


def write_projection_csv(embeds, result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "modality", "pair_id"])
        for row, mod, pid in zip(result.coords, embeds.modality, embeds.pair_id):
            xy = list(row[:2]) + [0.0] * (2 - len(row[:2]))
            w.writerow([repr(float(xy[0])), repr(float(xy[1])), mod, pid])
