"""Synthetic paired-modality data and pair-file ingestion.

Both modalities are noisy nonlinear views of one shared latent vector per
pair, so a true cross-modal correspondence always exists.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from slap.diffcore import make_rng
from slap.errors import ParseError, SchemaError, SpecError

SPLITS = {"train": 0, "eval": 1}


@dataclass
class PairedDataset:
    x_a: np.ndarray
    x_t: np.ndarray
    pair_id: list
    class_label: list | None = None
    tag_matrix: np.ndarray | None = None
    tag_names: list | None = None
    # optional zero-shot prompts: list of [n_classes|n_tags x dim_t] arrays
    prototypes: list | None = None

    def __post_init__(self):
        n = len(self.pair_id)
        if self.x_a.shape[0] != n or self.x_t.shape[0] != n:
            raise SchemaError(f"row counts differ: x_a={self.x_a.shape[0]} x_t={self.x_t.shape[0]} ids={n}")
        if len(set(self.pair_id)) != n:
            raise SchemaError("pair_id values must be unique")
        if self.class_label is not None and len(self.class_label) != n:
            raise SchemaError("class_label length differs from pair count")
        if self.tag_matrix is not None:
            if self.tag_matrix.shape[0] != n:
                raise SchemaError("tag_matrix row count differs from pair count")
            if not np.isin(self.tag_matrix, (0, 1)).all():
                raise SchemaError("tag_matrix entries must be 0 or 1")

    def __len__(self):
        return len(self.pair_id)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return PairedDataset(
            self.x_a[idx],
            self.x_t[idx],
            [self.pair_id[i] for i in idx],
            None if self.class_label is None else [self.class_label[i] for i in idx],
            None if self.tag_matrix is None else self.tag_matrix[idx],
            self.tag_names,
            self.prototypes,
        )


@dataclass(frozen=True)
class SynthSpec:
    n_pairs: int = 512
    latent_dim: int = 8
    input_dim_a: int = 64
    input_dim_t: int = 48
    noise_std_a: float = 0.5
    noise_std_t: float = 0.5
    n_classes: int = 0
    n_tags: int = 0
    tag_density: float = 0.25
    class_sep: float = 4.0
    n_prompts: int = 4
    prompt_noise: float = 0.5
    tie_maps: bool = False
    seed: int = 0

    def validate(self):
        if self.n_pairs < 0 or self.latent_dim < 1:
            raise SpecError("n_pairs must be >= 0 and latent_dim >= 1")
        if self.latent_dim > min(self.input_dim_a, self.input_dim_t):
            raise SpecError(
                f"latent_dim={self.latent_dim} exceeds min input dim "
                f"{min(self.input_dim_a, self.input_dim_t)}"
            )
        if self.noise_std_a < 0 or self.noise_std_t < 0:
            raise SpecError("noise std must be non-negative")
        if self.n_classes < 0 or self.n_tags < 0:
            raise SpecError("n_classes and n_tags must be non-negative")
        if self.n_classes and self.n_tags:
            raise SpecError("choose either class labels or tags, not both")
        if not 0.0 < self.tag_density < 1.0:
            raise SpecError(f"tag_density must lie in (0, 1), got {self.tag_density}")
        if self.tie_maps and self.input_dim_a != self.input_dim_t:
            raise SpecError("tie_maps requires equal input dims")
        if self.n_prompts < 1:
            raise SpecError("n_prompts must be >= 1")


class _RandomMap:
    """Fixed two-layer map ``latent -> tanh -> output``."""

    def __init__(self, latent_dim, out_dim, rng):
        hidden = out_dim
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, hidden))
        self.b1 = rng.normal(0.0, 0.1, size=hidden)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out_dim))

    def __call__(self, c):
        return np.tanh(c @ self.w1 + self.b1) @ self.w2


def _maps(spec):
    rng = make_rng(spec.seed, 100)
    f_a = _RandomMap(spec.latent_dim, spec.input_dim_a, rng)
    f_t = f_a if spec.tie_maps else _RandomMap(spec.latent_dim, spec.input_dim_t, rng)
    return f_a, f_t


def _label_geometry(spec):
    """Class means or tag directions, fixed by the spec seed."""
    rng = make_rng(spec.seed, 200)
    k = spec.n_classes or spec.n_tags
    if k == 0:
        return None
    if k <= spec.latent_dim:
        basis = np.linalg.qr(rng.normal(size=(spec.latent_dim, spec.latent_dim)))[0][:, :k].T
    else:
        basis = rng.normal(size=(k, spec.latent_dim))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    # orthonormal rows scaled by sep/sqrt(2) sit exactly sep apart
    return basis * spec.class_sep / np.sqrt(2.0)


def generate(spec, split="train"):
    """Draw a :class:`PairedDataset`; maps and label geometry depend only on
    ``spec.seed``, samples additionally on ``split``."""
    spec.validate()
    f_a, f_t = _maps(spec)
    centers = _label_geometry(spec)
    rng = make_rng(spec.seed, 300, SPLITS[split])
    n = spec.n_pairs
    c = rng.normal(size=(n, spec.latent_dim))
    labels = tags = None
    if spec.n_classes:
        labels = rng.integers(spec.n_classes, size=n)
        c = c + centers[labels]
    elif spec.n_tags:
        tags = (rng.random((n, spec.n_tags)) < spec.tag_density).astype(np.int8)
        empty = tags.sum(axis=1) == 0
        tags[empty, rng.integers(spec.n_tags, size=int(empty.sum()))] = 1
        c = c + tags @ centers
    x_a = f_a(c) + spec.noise_std_a * rng.normal(size=(n, spec.input_dim_a))
    x_t = f_t(c) + spec.noise_std_t * rng.normal(size=(n, spec.input_dim_t))
    prototypes = None
    if centers is not None:
        # one noiseless f_T(center) set per prompt variant; variant 0 is exact
        prng = make_rng(spec.seed, 400)
        prototypes = []
        for v in range(spec.n_prompts):
            jitter = 0.0 if v == 0 else spec.prompt_noise * v * prng.normal(size=centers.shape)
            prototypes.append(f_t(centers + jitter))
    prefix = "p" if split == "train" else f"{split}-"
    return PairedDataset(
        x_a,
        x_t,
        [f"{prefix}{i:06d}" for i in range(n)],
        None if labels is None else [int(v) for v in labels],
        tags,
        None if tags is None else [f"tag{j}" for j in range(spec.n_tags)],
        prototypes,
    )


def latent_of(spec, split="train"):
    """The shared latents behind :func:`generate` (for probing oracles)."""
    centers = _label_geometry(spec)
    rng = make_rng(spec.seed, 300, SPLITS[split])
    c = rng.normal(size=(spec.n_pairs, spec.latent_dim))
    if spec.n_classes:
        c = c + centers[rng.integers(spec.n_classes, size=spec.n_pairs)]
    elif spec.n_tags:
        raise SpecError("latent_of does not support tag-conditioned specs")
    return c


@dataclass
class PairedBatch:
    x_a: np.ndarray
    x_t: np.ndarray
    pair_id: list
    index: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.pair_id)

    def split(self, parts):
        """Consecutive, equally sized micro-batches."""
        n = len(self)
        if n % parts:
            raise SpecError(f"batch of {n} does not split into {parts} equal parts")
        step = n // parts
        return [
            PairedBatch(self.x_a[i:i + step], self.x_t[i:i + step], self.pair_id[i:i + step],
                        None if self.index is None else self.index[i:i + step])
            for i in range(0, n, step)
        ]


def batches(dataset, batch_size, seed, drop_last=True, epoch=0):
    """Yield aligned, shuffled batches; the permutation depends on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    perm = make_rng(seed, 500, epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield PairedBatch(dataset.x_a[idx], dataset.x_t[idx], [dataset.pair_id[i] for i in idx], idx)


# -- files ---------------------------------------------------------------------

def save_pairs(dataset, path, fmt=None):
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "jsonl":
        with path.open("w") as fh:
            for i, pid in enumerate(dataset.pair_id):
                row = {"pair_id": pid, "a": dataset.x_a[i].tolist(), "t": dataset.x_t[i].tolist()}
                if dataset.class_label is not None:
                    row["label"] = str(dataset.class_label[i])
                if dataset.tag_matrix is not None:
                    names = dataset.tag_names or [f"tag{j}" for j in range(dataset.tag_matrix.shape[1])]
                    row["tags"] = [names[j] for j in np.flatnonzero(dataset.tag_matrix[i])]
                fh.write(json.dumps(row) + "\n")
    elif fmt == "csv":
        da, dt = dataset.x_a.shape[1], dataset.x_t.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "label", *(f"a{j}" for j in range(da)), *(f"t{j}" for j in range(dt))])
            for i, pid in enumerate(dataset.pair_id):
                label = "" if dataset.class_label is None else dataset.class_label[i]
                w.writerow([pid, label, *map(repr, dataset.x_a[i].tolist()), *map(repr, dataset.x_t[i].tolist())])
    else:
        raise ValueError(f"unknown pair format {fmt!r}")


def _infer_format(path):
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("jsonl", "csv"):
        return suffix
    raise ValueError(f"cannot infer pair format from {path}; use .jsonl or .csv")


def _label_values(labels):
    if all(l is None for l in labels):
        return None
    if any(l is None for l in labels):
        raise SchemaError("label present on some rows but not others")
    try:
        return [int(l) for l in labels]
    except ValueError:
        vocab = {name: i for i, name in enumerate(sorted(set(labels)))}
        return [vocab[l] for l in labels]


def load_pairs(path, fmt=None):
    """Parse a JSONL or CSV pair file into a :class:`PairedDataset`."""
    path = Path(path)
    fmt = fmt or _infer_format(path)
    rows_a, rows_t, ids, labels, tags = [], [], [], [], []
    if fmt == "jsonl":
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    pid, a, t = str(row["pair_id"]), row["a"], row["t"]
                    a = [float(v) for v in a]
                    t = [float(v) for v in t]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"malformed row ({exc})", lineno) from None
                _check_dims(rows_a, rows_t, a, t, lineno)
                rows_a.append(a)
                rows_t.append(t)
                ids.append(pid)
                labels.append(row.get("label"))
                tags.append(row.get("tags"))
    elif fmt == "csv":
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None:
                a_cols = [i for i, h in enumerate(header) if h.startswith("a") and h[1:].isdigit()]
                t_cols = [i for i, h in enumerate(header) if h.startswith("t") and h[1:].isdigit()]
                if "pair_id" not in header or not a_cols or not t_cols:
                    raise SchemaError("CSV header needs pair_id, a0.., t0.. columns", 1)
                id_col = header.index("pair_id")
                label_col = header.index("label") if "label" in header else None
                for lineno, rec in enumerate(reader, start=2):
                    if not rec:
                        continue
                    if len(rec) != len(header):
                        raise SchemaError(f"expected {len(header)} fields, got {len(rec)}", lineno)
                    try:
                        a = [float(rec[i]) for i in a_cols]
                        t = [float(rec[i]) for i in t_cols]
                    except ValueError as exc:
                        raise ParseError(f"malformed number ({exc})", lineno) from None
                    rows_a.append(a)
                    rows_t.append(t)
                    ids.append(rec[id_col])
                    label = rec[label_col] if label_col is not None else ""
                    labels.append(label if label != "" else None)
                    tags.append(None)
    else:
        raise ValueError(f"unknown pair format {fmt!r}")

    if not ids:
        return PairedDataset(np.zeros((0, 0)), np.zeros((0, 0)), [])
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate pair_id values")
    tag_matrix = tag_names = None
    if any(t is not None for t in tags):
        tag_names = sorted({name for t in tags for name in (t or [])})
        col = {name: j for j, name in enumerate(tag_names)}
        tag_matrix = np.zeros((len(ids), len(tag_names)), dtype=np.int8)
        for i, t in enumerate(tags):
            for name in t or []:
                tag_matrix[i, col[name]] = 1
    return PairedDataset(
        np.array(rows_a), np.array(rows_t), ids, _label_values(labels), tag_matrix, tag_names
    )


def _check_dims(rows_a, rows_t, a, t, lineno):
    if not rows_a:
        return
    if len(a) != len(rows_a[0]):
        raise SchemaError(f"'a' has length {len(a)} but row 1 has {len(rows_a[0])}", lineno)
    if len(t) != len(rows_t[0]):
        raise SchemaError(f"'t' has length {len(t)} but row 1 has {len(rows_t[0])}", lineno)


def with_overrides(spec, **kwargs):
    return replace(spec, **kwargs)
