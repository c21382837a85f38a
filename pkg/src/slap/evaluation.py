"""Retrieval, zero-shot and tagging metrics.

All scores are percentages.  Rankings sort by descending cosine similarity
and break ties by ascending candidate index, so every metric is
deterministic even on degenerate inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from slap import diffcore as dc
from slap.errors import DataError, DegenerateNormError, SchemaError, UnsupportedError
from slap.nn import forward_tower

log = logging.getLogger(__name__)

ANCHORS = ("projection_z", "query_q")
DEFAULT_K = (1, 5, 10)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    modality: list
    pair_id: list
    anchor_kind: str = "projection_z"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        if len(self.modality) != n or len(self.pair_id) != n:
            raise DataError("modality/pair_id lengths must match the number of rows")
        if self.anchor_kind not in ANCHORS:
            raise DataError(f"anchor_kind must be one of {ANCHORS}")

    def __len__(self):
        return self.vectors.shape[0]

    def select(self, modality):
        mask = np.asarray(self.modality) == modality
        return EmbeddingSet(
            self.vectors[mask],
            [modality] * int(mask.sum()),
            [p for p, m in zip(self.pair_id, mask) if m],
            self.anchor_kind,
        )

    @classmethod
    def from_pairs(cls, a, t, pair_id, anchor_kind="projection_z"):
        return cls(np.vstack([a, t]), ["A"] * len(a) + ["T"] * len(t), list(pair_id) * 2, anchor_kind)


def embed_inputs(model, x, modality, anchor="projection_z"):
    """Eval-mode embedding of raw inputs through one modality's context tower."""
    tower = model.tower_a if modality == "A" else model.tower_t
    if anchor == "query_q" and tower.predictor is None:
        raise UnsupportedError("query anchors need a predictor; this model has none (CLAP mode)")
    if anchor not in ANCHORS:
        raise UnsupportedError(f"unknown anchor {anchor!r}")
    with dc.no_grad():
        z, q = forward_tower(tower, np.asarray(x, dtype=dc.get_default_dtype()), train_mode=False)
    return (q if anchor == "query_q" else z).data.copy()


def embed(model, dataset, anchor="projection_z"):
    a = embed_inputs(model, dataset.x_a, "A", anchor)
    t = embed_inputs(model, dataset.x_t, "T", anchor)
    return EmbeddingSet.from_pairs(a, t, dataset.pair_id, anchor)


def _unit_rows(x):
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= dc.NORM_EPS):
        raise DegenerateNormError(f"embedding with norm <= {dc.NORM_EPS:g}")
    return x / norms


def cosine_matrix(q, k):
    return _unit_rows(q) @ _unit_rows(k).T


# -- retrieval -----------------------------------------------------------------

@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict
    median_norm_rank: float
    mean_norm_rank: float
    num_queries: int
    num_keys: int
    anchor_kind: str = "projection_z"

    def to_dict(self):
        return {
            "direction": self.direction,
            "anchor_kind": self.anchor_kind,
            "num_queries": self.num_queries,
            "num_keys": self.num_keys,
            "recall_at": {str(k): float(v) for k, v in sorted(self.recall_at.items())},
            "median_norm_rank": float(self.median_norm_rank),
            "mean_norm_rank": float(self.mean_norm_rank),
        }


def match_ranks(sim, match):
    """1-indexed rank of ``sim[i, match[i]]`` within row ``i``; ties go to the lower index."""
    sim = np.asarray(sim, dtype=float)
    match = np.asarray(match, dtype=int)
    rows = np.arange(sim.shape[0])
    target = sim[rows, match][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    better = (sim > target) | ((sim == target) & (cols < match[:, None]))
    return 1 + better.sum(axis=1)


def retrieval_from_similarity(sim, match, k_values=DEFAULT_K, direction="A->T", anchor_kind="projection_z"):
    ranks = match_ranks(sim, match)
    num_keys = np.asarray(sim).shape[1]
    norm = 100.0 * ranks / num_keys
    return RetrievalReport(
        direction=direction,
        recall_at={int(k): 100.0 * float(np.mean(ranks <= k)) for k in k_values},
        median_norm_rank=float(np.median(norm)),
        mean_norm_rank=float(np.mean(norm)),
        num_queries=len(ranks),
        num_keys=num_keys,
        anchor_kind=anchor_kind,
    )


def retrieval_metrics(queries, keys, k_values=DEFAULT_K):
    """Recall@k and normalized ranks of each query's paired key."""
    key_index = {}
    for j, pid in enumerate(keys.pair_id):
        if pid in key_index:
            raise DataError(f"pair_id {pid!r} appears more than once among keys")
        key_index[pid] = j
    try:
        match = [key_index[pid] for pid in queries.pair_id]
    except KeyError as exc:
        raise DataError(f"no key matches query pair_id {exc.args[0]!r}") from None
    mq, mk = set(queries.modality), set(keys.modality)
    direction = f"{'/'.join(sorted(mq))}->{'/'.join(sorted(mk))}"
    sim = cosine_matrix(queries.vectors, keys.vectors)
    return retrieval_from_similarity(sim, match, k_values, direction, queries.anchor_kind)


def bidirectional(embeds, k_values=DEFAULT_K):
    a, t = embeds.select("A"), embeds.select("T")
    if not len(a) or not len(t):
        raise DataError("retrieval needs rows from both modalities")
    return {"A->T": retrieval_metrics(a, t, k_values), "T->A": retrieval_metrics(t, a, k_values)}


def compare_anchors(model, dataset, k_values=DEFAULT_K):
    """Retrieval with z anchors and with q anchors, both directions each."""
    if model.tower_a.predictor is None or model.tower_t.predictor is None:
        raise UnsupportedError("q anchoring is unavailable: model has no predictor (CLAP mode)")
    return {anchor: bidirectional(embed(model, dataset, anchor), k_values) for anchor in ANCHORS}


# -- zero-shot -----------------------------------------------------------------

@dataclass
class ZeroShotReport:
    accuracy: float | None = None
    auroc: float | None = None
    map: float | None = None
    mar: float | None = None
    best_prompt_index: int = 0
    per_variant: list = field(default_factory=list)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "map": self.map,
            "mar": self.mar,
            "best_prompt_index": self.best_prompt_index,
            "per_variant": self.per_variant,
        }


def _check_variants(prompt_variants):
    if not prompt_variants:
        raise SchemaError("at least one prompt variant is required")
    counts = {np.asarray(v).shape[0] for v in prompt_variants}
    if len(counts) != 1:
        raise SchemaError(f"prompt variants disagree on class count: {sorted(counts)}")


def zero_shot_classify(items, labels, prompt_variants):
    """Nearest-prototype classification; reports the best prompt variant."""
    _check_variants(prompt_variants)
    vectors = items.vectors if isinstance(items, EmbeddingSet) else items
    labels = np.asarray(labels)
    accs = []
    for protos in prompt_variants:
        pred = np.argmax(cosine_matrix(vectors, protos), axis=1)
        accs.append(100.0 * float(np.mean(pred == labels)))
    best = int(np.argmax(accs))
    return ZeroShotReport(accuracy=accs[best], best_prompt_index=best,
                          per_variant=[{"accuracy": a} for a in accs])


def zero_shot_tagging(items, tag_matrix, prompt_variants):
    """Multi-label zero-shot: each metric takes its best variant; the reported
    index is the variant with the best mAR."""
    _check_variants(prompt_variants)
    vectors = items.vectors if isinstance(items, EmbeddingSet) else items
    rows = []
    for protos in prompt_variants:
        sim = cosine_matrix(vectors, protos)
        scores = auroc_map(sim, tag_matrix)
        keep = np.asarray(tag_matrix).sum(axis=1) > 0
        rows.append({"auroc": scores.auroc, "map": scores.map, "mar": mar(sim[keep], np.asarray(tag_matrix)[keep])})
    best = int(np.argmax([r["mar"] for r in rows]))
    return ZeroShotReport(
        auroc=max(r["auroc"] for r in rows),
        map=max(r["map"] for r in rows),
        mar=rows[best]["mar"],
        best_prompt_index=best,
        per_variant=rows,
    )


def mar(similarities, ground_truth):
    """Mean average recall over tag-ranking cutoffs.

    For each sample the tags are ranked by similarity; recall at cutoff
    ``c`` is the fraction of that sample's true tags inside the top ``c``.
    The score averages recall over all cutoffs ``1..N`` and all samples.
    """
    sim = np.asarray(similarities, dtype=float)
    gt = np.asarray(ground_truth)
    if sim.shape != gt.shape or sim.ndim != 2 or sim.size == 0:
        raise DataError(f"similarities {sim.shape} and ground truth {gt.shape} must be equal non-empty matrices")
    npos = gt.sum(axis=1)
    if np.any(npos == 0):
        raise DataError(f"{int(np.sum(npos == 0))} sample(s) have no positive tag")
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = np.take_along_axis(gt, order, axis=1)
    recall = np.cumsum(hits, axis=1) / npos[:, None]
    return 100.0 * float(recall.mean())


# -- tagging -------------------------------------------------------------------

class TagScores(NamedTuple):
    auroc: float
    map: float
    excluded: int


def _column_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    # rank statistic with midranks for ties
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    _, start, counts = np.unique(sorted_v, return_index=True, return_counts=True)
    mid = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    p, n = len(pos), len(neg)
    return (ranks[:p].sum() - p * (p + 1) / 2.0) / (p * n)


def _column_ap(s, y):
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # evaluate precision/recall at the end of each tie group
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    seen = ends + 1
    precision = tp / seen
    recall_steps = np.diff(np.r_[0, tp]) / y.sum()
    return float((recall_steps * precision).sum())


def auroc_map(scores, labels):
    """Macro-averaged per-tag ROC-AUC and average precision (percentages).

    Columns without both a positive and a negative are skipped for AUROC and
    columns without a positive for AP; the number skipped is logged and
    returned as ``excluded``.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 2:
        raise DataError(f"scores {s.shape} and labels {y.shape} must be equal 2-D matrices")
    aucs, aps, excluded = [], [], 0
    for j in range(s.shape[1]):
        npos = int(y[:, j].sum())
        if npos == 0 or npos == y.shape[0]:
            excluded += 1
            if npos:
                aps.append(_column_ap(s[:, j], y[:, j]))
            continue
        aucs.append(_column_auroc(s[:, j], y[:, j]))
        aps.append(_column_ap(s[:, j], y[:, j]))
    if excluded:
        log.warning("auroc_map: %d degenerate tag column(s) excluded", excluded)
    auroc = 100.0 * float(np.mean(aucs)) if aucs else float("nan")
    ap = 100.0 * float(np.mean(aps)) if aps else float("nan")
    return TagScores(auroc, ap, excluded)


def zero_shot_report(model, dataset, anchor="projection_z"):
    """Zero-shot evaluation against the dataset's prompt prototypes."""
    if not dataset.prototypes:
        raise DataError("dataset carries no prompt prototypes")
    items = embed_inputs(model, dataset.x_a, "A", anchor)
    variants = [embed_inputs(model, p, "T", anchor) for p in dataset.prototypes]
    if dataset.class_label is not None:
        return zero_shot_classify(items, dataset.class_label, variants)
    if dataset.tag_matrix is not None:
        return zero_shot_tagging(items, dataset.tag_matrix, variants)
    raise DataError("dataset has neither class labels nor tags")
