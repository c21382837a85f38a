"""Training loop for SLAP and CLAP models."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from slap import diffcore as dc
from slap.data import batches
from slap.ema import EmaState, update_towers
from slap.errors import BatchSizeError, ConfigError
from slap.nn import TowerSpec, build_model
from slap.objectives import clap_forward_step, slap_forward_step

log = logging.getLogger(__name__)

COLLAPSE_THRESHOLD = 0.9


@dataclass
class TrainConfig:
    mode: str = "slap"
    epochs: int = 19
    max_steps: int = 300
    base_batch: int = 32
    accumulation_factor: int = 1
    peak_lr: float = 0.05
    warmup_fraction: float = 0.1
    tau: float = 0.95
    lam: float = 0.5
    temperature: float = 0.07
    seed: int = 0
    norm_kind: str = "batchnorm"
    augment_noise_std: float = 0.05
    weight_decay: float = 0.0
    encoder_hidden: tuple = (128,)
    embed_dim: int = 64
    proj_dim: int = 32
    predictor_hidden: int = 128
    collapse_threshold: float = COLLAPSE_THRESHOLD
    dtype: str = "float64"

    @property
    def effective_batch(self):
        return self.base_batch * self.accumulation_factor

    def validate(self):
        if self.mode not in ("slap", "clap"):
            raise ConfigError(f"mode: expected 'slap' or 'clap', got {self.mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.max_steps < 0:
            raise ConfigError("max_steps: must be >= 0 (0 means no cap)")
        if self.base_batch < 1:
            raise ConfigError("base_batch: must be >= 1")
        if self.accumulation_factor < 1:
            raise ConfigError("accumulation_factor: must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction: must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau: must lie in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam: must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature: must be > 0")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr: must be >= 0")
        if self.mode == "clap" and self.effective_batch < 2:
            raise ConfigError("base_batch: clap mode needs an effective batch of at least 2")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype: expected float64 or float32, got {self.dtype!r}")
        if self.norm_kind not in ("batchnorm", "layernorm", "none"):
            raise ConfigError(f"norm_kind: unknown value {self.norm_kind!r}")
        defaults = TrainConfig()
        if self.mode == "clap" and (self.tau != defaults.tau or self.lam != defaults.lam):
            warnings.warn("clap mode ignores tau and lam", stacklevel=2)
        if self.mode == "slap" and self.temperature != defaults.temperature:
            warnings.warn("slap mode ignores temperature", stacklevel=2)

    def tower_specs(self, input_dim_a, input_dim_t):
        common = dict(
            encoder_hidden=tuple(self.encoder_hidden),
            embed_dim=self.embed_dim,
            proj_dim=self.proj_dim,
            predictor_hidden=self.predictor_hidden if self.mode == "slap" else 0,
            norm_kind=self.norm_kind,
        )
        return TowerSpec(input_dim=input_dim_a, **common), TowerSpec(input_dim=input_dim_t, **common)

    def to_dict(self):
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    l_at: float = math.nan
    l_ta: float = math.nan
    l_a: float = math.nan
    l_t: float = math.nan
    collapse_stat: float = math.nan
    ema_steps: int = 0


TRACE_COLUMNS = ("step", "lr", "loss", "l_at", "l_ta", "l_a", "l_t", "collapse_stat")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    ema_steps: int = 0
    final_collapse_stat: float = math.nan
    collapsed: bool = False

    def losses(self):
        return np.array([r.loss for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.step, *(repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:])])


class Adam:
    """Adam with bias correction; moment buffers exist only for the given params."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * update


def lr_at(step, total_steps, config):
    """Linear warmup from 0 to ``peak_lr`` then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warm = config.warmup_fraction * total_steps
    if step < warm:
        return config.peak_lr * step / warm
    progress = (step - warm) / (total_steps - warm)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def collapse_statistic(vectors):
    """Mean cosine similarity over distinct row pairs of one modality.

    Given an :class:`~slap.evaluation.EmbeddingSet` with both modalities the
    larger of the two per-modality values is returned.
    """
    groups = _modality_groups(vectors)
    return max(_mean_pairwise_cos(g) for g in groups)


def _modality_groups(vectors):
    if hasattr(vectors, "modality"):
        mods = np.asarray(vectors.modality)
        return [vectors.vectors[mods == m] for m in sorted(set(mods.tolist()))]
    return [np.asarray(vectors.data if isinstance(vectors, dc.Tensor) else vectors)]


def _mean_pairwise_cos(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise BatchSizeError("collapse statistic needs at least 2 rows")
    u = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), dc.NORM_EPS)
    s = u.sum(axis=0)
    diag = (u * u).sum()
    return float((s @ s - diag) / (n * (n - 1)))


def _step_loss(model, config, x_a, x_t, x_a_target):
    if config.mode == "slap":
        return slap_forward_step(model, x_a, x_t, config.lam, x_a_target=x_a_target)
    return clap_forward_step(model, x_a, x_t), None


def _batch_collapse(model, x_a, x_t):
    from slap.nn import forward_tower

    with dc.no_grad():
        z_a, _ = forward_tower(model.tower_a, x_a, train_mode=False)
        z_t, _ = forward_tower(model.tower_t, x_t, train_mode=False)
    return max(_mean_pairwise_cos(z_a.data), _mean_pairwise_cos(z_t.data))


def total_steps(config, n_pairs):
    steps = config.epochs * (n_pairs // config.effective_batch)
    return min(steps, config.max_steps) if config.max_steps else steps


def init_model(config, dataset):
    spec_a, spec_t = config.tower_specs(dataset.x_a.shape[1], dataset.x_t.shape[1])
    with dc.default_dtype(config.dtype):
        return build_model(config.mode, spec_a, spec_t, config.seed)


def train(config, dataset, model=None, collapse_data=None):
    """Train a model and return ``(model, trace)``.

    Each optimizer step averages ``accumulation_factor`` micro-batch
    gradients (each loss scaled by ``1/factor``), takes one Adam step, then
    one EMA step in SLAP mode.  The final collapse flag is computed on
    ``collapse_data`` (default: the training set) in eval mode.
    """
    config.validate()
    eff = config.effective_batch
    if len(dataset) < eff:
        raise BatchSizeError(f"dataset has {len(dataset)} pairs, fewer than effective batch {eff}")
    with dc.default_dtype(config.dtype):
        if model is None:
            model = init_model(config, dataset)
        return _train(config, dataset, model, collapse_data)


def _train(config, dataset, model, collapse_data):
    eff = config.effective_batch
    factor = config.accumulation_factor
    total = total_steps(config, len(dataset))
    params = model.trainable()
    opt = Adam(params, weight_decay=config.weight_decay)
    ema = EmaState(config.tau)
    noise_rng = dc.make_rng(config.seed, 600)
    trace = TrainTrace()
    tape = dc.Tape()
    step = 0
    dtype = dc.get_default_dtype()
    for epoch in range(config.epochs):
        for batch in batches(dataset, eff, config.seed, drop_last=True, epoch=epoch):
            if step >= total:
                break
            lr = lr_at(step, total, config)
            dc.zero_grad(params.values())
            # noise is drawn for the whole effective batch, then split, so
            # accumulation sees exactly the full-batch inputs
            std = config.augment_noise_std
            x_a = (batch.x_a + std * noise_rng.normal(size=batch.x_a.shape)).astype(dtype)
            x_a_tgt = (batch.x_a + std * noise_rng.normal(size=batch.x_a.shape)).astype(dtype)
            x_t = batch.x_t.astype(dtype, copy=False)
            loss_sum, part_sums = 0.0, np.zeros(4)
            for i in range(0, eff, config.base_batch):
                sl = slice(i, i + config.base_batch)
                tape.reset()
                with dc.use_tape(tape):
                    loss, parts = _step_loss(model, config, x_a[sl], x_t[sl], x_a_tgt[sl])
                    dc.backward(dc.scale(loss, 1.0 / factor))
                loss_sum += loss.item() / factor
                if parts is not None:
                    part_sums += np.array([parts.l_at, parts.l_ta, parts.l_a, parts.l_t]) / factor
            tape.reset()
            opt.step(lr)
            if config.mode == "slap":
                update_towers(model, ema)
            rec = StepRecord(step, lr, loss_sum, collapse_stat=_batch_collapse(model, x_a, x_t),
                             ema_steps=ema.step_count)
            if config.mode == "slap":
                rec.l_at, rec.l_ta, rec.l_a, rec.l_t = (float(v) for v in part_sums)
            trace.records.append(rec)
            step += 1
    trace.ema_steps = ema.step_count
    data = collapse_data if collapse_data is not None else dataset
    if len(data) >= 2:
        from slap.evaluation import embed

        anchors = ("projection_z", "query_q") if config.mode == "slap" else ("projection_z",)
        trace.final_collapse_stat = max(collapse_statistic(embed(model, data, a)) for a in anchors)
        trace.collapsed = trace.final_collapse_stat > config.collapse_threshold
    log.info("trained %s for %d steps, final loss %.4f", config.mode, step,
             trace.records[-1].loss if trace.records else float("nan"))
    return model, trace


def gradient_snapshot(params):
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}


def accumulate_equivalence_check(config, dataset, factor, batch_size=32, model=None):
    """Max relative deviation between full-batch and accumulated gradients.

    Both gradients use the same parameters and the same ``batch_size`` rows;
    the accumulated one sums ``factor`` micro-batch gradients, each scaled by
    ``1/factor``.  Per parameter the deviation is
    ``||g_full - g_acc|| / max(||g_full||, tiny)``.
    """
    if config.mode != "slap":
        raise ConfigError("accumulation equivalence is defined for slap mode")
    if batch_size % factor:
        raise ConfigError(f"batch {batch_size} not divisible by factor {factor}")
    with dc.default_dtype(config.dtype):
        model = model or init_model(config, dataset)
        params = model.trainable()
        x_a = dataset.x_a[:batch_size].astype(dc.get_default_dtype())
        x_t = dataset.x_t[:batch_size].astype(dc.get_default_dtype())

        def grads(parts):
            dc.zero_grad(params.values())
            step = batch_size // parts
            for i in range(0, batch_size, step):
                with dc.use_tape():
                    loss, _ = slap_forward_step(model, x_a[i:i + step], x_t[i:i + step], config.lam)
                    dc.backward(dc.scale(loss, 1.0 / parts))
            return gradient_snapshot(params)

        full = grads(1)
        acc = grads(factor)
    dc.zero_grad(params.values())
    worst = 0.0
    for k, g in full.items():
        denom = max(np.linalg.norm(g), 1e-300)
        worst = max(worst, float(np.linalg.norm(g - acc[k]) / denom))
    return worst
