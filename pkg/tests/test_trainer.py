"""Tests for the training loop, schedule, optimizer and collapse detector."""

import csv
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from slap import diffcore as dc
from slap.data import SynthSpec, generate
from slap.errors import BatchSizeError, ConfigError
from slap.evaluation import EmbeddingSet
from slap.trainer import (
    TRACE_COLUMNS,
    Adam,
    TrainConfig,
    accumulate_equivalence_check,
    collapse_statistic,
    init_model,
    lr_at,
    total_steps,
    train,
)

SMALL_MODEL = dict(encoder_hidden=(16,), embed_dim=12, proj_dim=8, predictor_hidden=32)


@pytest.fixture(scope="module")
def data():
    return generate(SynthSpec(n_pairs=64, latent_dim=4, input_dim_a=12, input_dim_t=10, seed=2))


def _config(**kw):
    base = dict(epochs=2, max_steps=0, base_batch=16, peak_lr=0.01, **SMALL_MODEL)
    base.update(kw)
    return TrainConfig(**base)


def _params(model):
    return {k: v.data.copy() for k, v in model.state().items()}


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(peak_lr=0.3, warmup_fraction=0.1)
        assert lr_at(0, 100, cfg) == 0.0
        assert lr_at(10, 100, cfg) == 0.3
        assert abs(lr_at(100, 100, cfg)) < 1e-12

    def test_warmup_linear_and_decay_monotone(self):
        cfg = TrainConfig(peak_lr=1.0, warmup_fraction=0.2)
        ramp = [lr_at(s, 50, cfg) for s in range(11)]
        assert np.allclose(np.diff(ramp), 0.1)
        decay = [lr_at(s, 50, cfg) for s in range(10, 51)]
        assert all(a >= b for a, b in zip(decay, decay[1:]))
        assert lr_at(30, 50, cfg) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.5)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, TrainConfig())

    def test_total_steps_cap(self):
        assert total_steps(TrainConfig(epochs=19, max_steps=300, base_batch=32), 512) == 300
        assert total_steps(TrainConfig(epochs=2, max_steps=0, base_batch=32), 512) == 32


class TestAdam:
    def test_zero_gradient_is_noop(self, rng):
        p = dc.parameter(rng.normal(size=4))
        before = p.data.copy()
        p.grad = np.zeros(4)
        opt = Adam({"p": p})
        opt.step(0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_is_signed_lr(self):
        p = dc.parameter(np.zeros(3))
        p.grad = np.array([2.0, -0.5, 1e-3])
        Adam({"p": p}).step(0.01)
        assert np.allclose(p.data, -0.01 * np.sign(p.grad), rtol=1e-4)

    def test_moments_only_for_given_params(self, data):
        model = init_model(_config(), data)
        opt = Adam(model.trainable())
        target_ids = {id(t) for t in model.target_params().values()}
        assert not target_ids & {id(p) for p in opt.params.values()}
        assert set(opt.m) == set(model.trainable())


class TestConfig:
    @pytest.mark.parametrize("field, value", [
        ("mode", "simclr"), ("warmup_fraction", 0.0), ("warmup_fraction", 1.0),
        ("tau", 1.5), ("lam", -0.1), ("accumulation_factor", 0), ("norm_kind", "rms"),
    ])
    def test_invalid_fields_named(self, field, value):
        with pytest.raises(ConfigError, match=field):
            replace(TrainConfig(), **{field: value}).validate()

    def test_clap_needs_two(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="clap", base_batch=1).validate()

    def test_ignored_fields_warn(self):
        with pytest.warns(UserWarning, match="ignores"):
            TrainConfig(mode="clap", lam=0.3).validate()
        with pytest.warns(UserWarning, match="ignores"):
            TrainConfig(mode="slap", temperature=0.2).validate()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            TrainConfig().validate()


class TestTrain:
    def test_zero_epochs_returns_init(self, data):
        cfg = _config(epochs=0)
        model, trace = train(cfg, data)
        fresh = _params(init_model(cfg, data))
        assert trace.records == []
        assert all(np.array_equal(v, fresh[k]) for k, v in _params(model).items())

    @pytest.mark.parametrize("mode", ["slap", "clap"])
    def test_deterministic(self, data, mode):
        a, ta = train(_config(mode=mode), data)
        b, tb = train(_config(mode=mode), data)
        pa, pb = _params(a), _params(b)
        assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
        assert np.array_equal(ta.losses(), tb.losses())

    def test_toy_run_reduces_loss(self):
        dataset = generate(SynthSpec())
        _, trace = train(TrainConfig(max_steps=200), dataset)
        losses = trace.losses()
        assert len(losses) == 200
        assert losses[-20:].mean() < losses[0]

    def test_one_record_and_ema_step_per_optimizer_step(self, data):
        _, trace = train(_config(base_batch=8, accumulation_factor=2), data)
        steps = 2 * (64 // 16)
        assert [r.step for r in trace.records] == list(range(steps))
        assert trace.ema_steps == steps
        assert [r.ema_steps for r in trace.records] == list(range(1, steps + 1))

    def test_clap_has_no_ema(self, data):
        _, trace = train(_config(mode="clap"), data)
        assert trace.ema_steps == 0

    def test_target_params_never_get_gradients(self, data):
        model, _ = train(_config(), data)
        for p in model.target_params().values():
            assert p.grad is None

    def test_dataset_smaller_than_batch(self, data):
        with pytest.raises(BatchSizeError):
            train(_config(base_batch=128), data)

    def test_trace_csv(self, data, tmp_path):
        _, trace = train(_config(epochs=1), data)
        trace.write_csv(tmp_path / "trace.csv")
        with open(tmp_path / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TRACE_COLUMNS
        assert len(rows) == 1 + len(trace.records)

    def test_accumulated_training_matches_full_batch(self, data):
        ln = dict(norm_kind="layernorm", epochs=2)
        full, _ = train(_config(base_batch=16, accumulation_factor=1, **ln), data)
        acc, _ = train(_config(base_batch=4, accumulation_factor=4, **ln), data)
        pf, pa = _params(full), _params(acc)
        worst = max(np.linalg.norm(pf[k] - pa[k]) / max(np.linalg.norm(pf[k]), 1e-300) for k in pf)
        assert worst < 1e-6


class TestAccumulationCheck:
    def test_factor_one_is_exact(self, data):
        assert accumulate_equivalence_check(_config(norm_kind="layernorm"), data, 1, batch_size=32) == 0.0

    def test_layernorm_factor_four(self, data):
        dev = accumulate_equivalence_check(_config(norm_kind="layernorm"), data, 4, batch_size=32)
        assert dev < 1e-9

    def test_batchnorm_breaks_equivalence(self, data):
        dev = accumulate_equivalence_check(_config(norm_kind="batchnorm"), data, 4, batch_size=32)
        assert dev > 1e-6

    def test_rejects_indivisible(self, data):
        with pytest.raises(ConfigError):
            accumulate_equivalence_check(_config(), data, 3, batch_size=32)


class TestCollapseStatistic:
    def test_identical_rows(self):
        assert collapse_statistic(np.tile([1.0, 2.0, 3.0], (5, 1))) == pytest.approx(1.0)

    def test_orthonormal_rows(self):
        assert collapse_statistic(np.eye(6)) == pytest.approx(0.0, abs=1e-15)

    def test_random_unit_vectors(self):
        x = dc.make_rng(0, 7).normal(size=(256, 32))
        assert collapse_statistic(x) < 0.2

    def test_matches_brute_force(self, rng):
        x = rng.normal(size=(9, 4))
        u = x / np.linalg.norm(x, axis=1, keepdims=True)
        pairs = [u[i] @ u[j] for i in range(9) for j in range(9) if i != j]
        assert collapse_statistic(x) == pytest.approx(np.mean(pairs), abs=1e-14)

    def test_max_over_modalities(self, rng):
        a = np.tile([1.0, 0.0], (4, 1))
        t = rng.normal(size=(4, 2))
        emb = EmbeddingSet.from_pairs(a, t, [f"p{i}" for i in range(4)])
        assert collapse_statistic(emb) == pytest.approx(1.0)

    def test_too_few_rows(self):
        with pytest.raises(BatchSizeError):
            collapse_statistic(np.ones((1, 3)))

    def test_flag_threshold(self, data):
        _, trace = train(_config(collapse_threshold=-1.0), data)
        assert trace.collapsed
        _, trace = train(_config(), data)
        assert trace.collapsed == (trace.final_collapse_stat > 0.9)
