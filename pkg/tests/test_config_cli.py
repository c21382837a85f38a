"""Tests for config parsing and the command-line interface."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from slap import cli
from slap.config import ExperimentConfig, load_config, parse_config, render_config
from slap.data import PairedDataset, save_pairs
from slap.errors import ConfigError
from slap.nn import TowerSpec, build_model, save_model

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "docs" / "schemas"
BENCHMARK_INI = Path(__file__).resolve().parents[1] / "configs" / "benchmark.ini"

TINY_INI = """\
[data]
n_pairs = 48
latent_dim = 3
input_dim_a = 8
input_dim_t = 6
seed = 0

[train]
epochs = 1
max_steps = 4
base_batch = 8
peak_lr = 0.01
encoder_hidden = 12
embed_dim = 8
proj_dim = 6
predictor_hidden = 10
"""


@pytest.fixture(scope="module")
def registry():
    resources = []
    for path in SCHEMA_DIR.glob("*.schema.json"):
        schema = json.loads(path.read_text())
        resources.append((schema["$id"], Resource.from_contents(schema)))
    return Registry().with_resources(resources)


def _validate(registry, name, instance):
    schema = json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
    Draft202012Validator(schema, registry=registry).validate(instance)


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_ini):
    """One slap and one clap training run shared by the eval/gap tests."""
    out = {}
    for mode in ("slap", "clap"):
        d = tmp_path_factory.mktemp(f"train_{mode}")
        assert cli.main(["train", "--config", tiny_ini, "--out", str(d), "--mode", mode]) == 0
        out[mode] = d
    return out


def _read_json(path):
    return json.loads(Path(path).read_text())


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_without_sections(self):
        assert parse_config("") == ExperimentConfig()

    def test_types_converted(self):
        cfg = parse_config("[train]\nepochs = 3\npeak_lr = 0.2\nencoder_hidden = 16, 8\n"
                           "[data]\ntie_maps = no\n[eval]\nk_values = 1, 3\n")
        assert cfg.train.epochs == 3 and cfg.train.peak_lr == 0.2
        assert cfg.train.encoder_hidden == (16, 8)
        assert cfg.data.tie_maps is False
        assert cfg.eval.k_values == (1, 3)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config("[train]\nbogus = 1\n")

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError, match="model"):
            parse_config("[model]\nx = 1\n")

    @pytest.mark.parametrize("text, field", [
        ("[train]\nepochs = many\n", "epochs"),
        ("[train]\ntau = 2.0\n", "tau"),
        ("[eval]\nanchor = w\n", "anchor"),
        ("[data]\nlatent_dim = 99\n", "latent_dim"),
    ])
    def test_bad_values_named(self, text, field):
        with pytest.raises(ConfigError, match=field):
            parse_config(text)

    def test_malformed_ini(self):
        with pytest.raises(ConfigError):
            parse_config("no section header\n")

    def test_render_round_trip(self):
        cfg = load_config(BENCHMARK_INI)
        assert parse_config(render_config(cfg)) == cfg

    def test_benchmark_file_values(self):
        cfg = load_config(BENCHMARK_INI)
        assert cfg.train.mode == "slap" and cfg.train.lam == 0.5 and cfg.train.tau == 0.95
        assert cfg.sweep.lambdas == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_seed_override_hits_data_and_model(self):
        cfg = ExperimentConfig().with_seed(7)
        assert cfg.data.seed == 7 and cfg.train.seed == 7


class TestExitCodes:
    def test_help_and_version(self, capsys):
        assert cli.main(["--help"]) == 0
        assert cli.main(["--version"]) == 0

    @pytest.mark.parametrize("argv", [
        [],
        ["train"],
        ["frobnicate", "--out", "x"],
        ["eval", "--out", "x", "--checkpoint", "c", "--k", "0"],
        ["train", "--out", "x", "--mode", "simclr"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert cli.main(argv) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        ini = tmp_path / "bad.ini"
        ini.write_text("[train]\nbogus = 1\n")
        assert cli.main(["train", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 3

    def test_q_anchor_on_clap(self, trained, tiny_ini, tmp_path, capsys):
        ckpt = trained["clap"] / "model.ckpt"
        argv = ["eval", "--config", tiny_ini, "--checkpoint", str(ckpt), "--anchor", "q", "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_compare_anchors_on_clap(self, trained, tiny_ini, tmp_path, capsys):
        ckpt = trained["clap"] / "model.ckpt"
        argv = ["eval", "--config", tiny_ini, "--checkpoint", str(ckpt), "--compare-anchors",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_indivisible_sweep_batch(self, tiny_ini, tmp_path, capsys):
        argv = ["sweep-batch", "--config", tiny_ini, "--batches", "24", "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_clap_sweep_batch_of_one(self, tiny_ini, tmp_path, capsys):
        argv = ["sweep-batch", "--config", tiny_ini, "--mode", "clap", "--batches", "1", "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_lambda_out_of_range(self, tiny_ini, tmp_path, capsys):
        argv = ["sweep-lambda", "--config", tiny_ini, "--lambdas", "0.5,1.5", "--out", str(tmp_path)]
        assert cli.main(argv) == 2

    def test_missing_checkpoint(self, tiny_ini, tmp_path, capsys):
        argv = ["eval", "--config", tiny_ini, "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]
        assert cli.main(argv) == 3

    def test_corrupt_checkpoint(self, trained, tiny_ini, tmp_path, capsys):
        raw = bytearray((trained["slap"] / "model.ckpt").read_bytes())
        raw[-5] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        argv = ["gap", "--config", tiny_ini, "--checkpoint", str(bad), "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 3

    def test_bad_data_file(self, trained, tiny_ini, tmp_path, capsys):
        data = tmp_path / "pairs.jsonl"
        data.write_text('{"pair_id": "x", "a": [1.0]\n')
        argv = ["eval", "--config", tiny_ini, "--checkpoint", str(trained["slap"] / "model.ckpt"),
                "--data", str(data), "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 3

    def test_internal_error(self, monkeypatch, tmp_path, capsys):
        def boom(args, run):
            raise RuntimeError("unexpected")

        monkeypatch.setitem(cli.COMMANDS, "train", boom)
        assert cli.main(["train", "--out", str(tmp_path)]) == 4
        assert "unexpected" in capsys.readouterr().err


class TestArtifacts:
    def test_train_outputs_and_manifest(self, trained, registry):
        d = trained["slap"]
        manifest = _read_json(d / "manifest.json")
        _validate(registry, "manifest", manifest)
        listed = {a["path"] for a in manifest["artifacts"]}
        on_disk = {p.name for p in d.iterdir()} - {"manifest.json"}
        assert listed == on_disk == {"model.ckpt", "trace.csv", "train_summary.json"}
        newest = max((d / name).stat().st_mtime_ns for name in listed)
        assert (d / "manifest.json").stat().st_mtime_ns >= newest
        assert manifest["command"] == "train" and manifest["config"]["train"]["mode"] == "slap"
        _validate(registry, "train_summary", _read_json(d / "train_summary.json"))

    def test_manifest_hashes_match(self, trained):
        import hashlib

        d = trained["clap"]
        for art in _read_json(d / "manifest.json")["artifacts"]:
            assert hashlib.sha256((d / art["path"]).read_bytes()).hexdigest() == art["sha256"]

    def test_same_seed_is_byte_identical(self, trained, tiny_ini, tmp_path):
        assert cli.main(["train", "--config", tiny_ini, "--out", str(tmp_path), "--mode", "slap"]) == 0
        for name in ("model.ckpt", "trace.csv", "train_summary.json"):
            assert (tmp_path / name).read_bytes() == (trained["slap"] / name).read_bytes()

    def test_seed_override_changes_run(self, trained, tiny_ini, tmp_path):
        argv = ["train", "--config", tiny_ini, "--out", str(tmp_path), "--mode", "slap", "--seed", "5"]
        assert cli.main(argv) == 0
        assert (tmp_path / "model.ckpt").read_bytes() != (trained["slap"] / "model.ckpt").read_bytes()
        assert _read_json(tmp_path / "manifest.json")["seed"] == 5

    def test_eval_reports(self, trained, tiny_ini, tmp_path, registry):
        argv = ["eval", "--config", tiny_ini, "--checkpoint", str(trained["slap"] / "model.ckpt"),
                "--compare-anchors", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        a2t = _read_json(tmp_path / "retrieval_a2t.json")
        _validate(registry, "retrieval_report", a2t)
        _validate(registry, "retrieval_report", _read_json(tmp_path / "retrieval_t2a.json"))
        _validate(registry, "anchor_comparison", _read_json(tmp_path / "anchor_comparison.json"))
        assert sorted(a2t["recall_at"], key=int) == ["1", "5", "10"]
        assert a2t["anchor_kind"] == "query_q"
        assert "zero_shot.json" not in {p.name for p in tmp_path.iterdir()}

    def test_eval_is_deterministic(self, trained, tiny_ini, tmp_path):
        outs = []
        for i in range(2):
            d = tmp_path / str(i)
            argv = ["eval", "--config", tiny_ini, "--checkpoint", str(trained["clap"] / "model.ckpt"),
                    "--k", "1,2", "--out", str(d)]
            assert cli.main(argv) == 0
            outs.append((d / "retrieval_a2t.json").read_bytes())
        assert outs[0] == outs[1]
        assert _read_json(tmp_path / "0" / "retrieval_a2t.json")["anchor_kind"] == "projection_z"

    def test_zero_shot_written_with_labels(self, trained, tmp_path, registry):
        ini = tmp_path / "cls.ini"
        ini.write_text(TINY_INI.replace("seed = 0", "seed = 0\nn_classes = 3\nn_prompts = 2"))
        argv = ["eval", "--config", str(ini), "--checkpoint", str(trained["slap"] / "model.ckpt"),
                "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 0
        _validate(registry, "zero_shot", _read_json(tmp_path / "o" / "zero_shot.json"))

    def test_gap_outputs(self, trained, tiny_ini, tmp_path, registry):
        argv = ["gap", "--config", tiny_ini, "--checkpoint", str(trained["clap"] / "model.ckpt"),
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        gap = _read_json(tmp_path / "gap.json")
        _validate(registry, "gap_report", gap)
        assert gap["anchor_kind"] == "projection_z"
        rows = _rows(tmp_path / "pca.csv")
        assert len(rows) == gap["n_a"] + gap["n_t"]
        assert {r["modality"] for r in rows} == {"A", "T"}

    def test_compare(self, tiny_ini, tmp_path, registry):
        assert cli.main(["compare", "--config", tiny_ini, "--out", str(tmp_path)]) == 0
        report = _read_json(tmp_path / "compare.json")
        _validate(registry, "compare", report)
        assert report["models"]["slap"]["anchor_kind"] == "query_q"
        assert report["models"]["clap"]["anchor_kind"] == "projection_z"
        assert {p.name for p in tmp_path.iterdir()} >= {"slap.ckpt", "clap.ckpt", "compare.json"}


class TestPerfectRetrieval:
    @pytest.fixture
    def mirrored(self, tmp_path):
        """A model whose two towers are identical, fed identical inputs."""
        spec = TowerSpec(input_dim=6, encoder_hidden=(12,), embed_dim=8, proj_dim=6, predictor_hidden=10,
                         norm_kind="layernorm")
        model = build_model("slap", spec, spec, seed=3)
        arrays = model.arrays()
        model.load_arrays({k: arrays["a." + k[2:]] if k.startswith("t.") else v for k, v in arrays.items()})
        save_model(model, tmp_path / "mirror.ckpt")
        x = np.random.default_rng(0).normal(size=(20, 6))
        save_pairs(PairedDataset(x, x.copy(), [f"p{i}" for i in range(20)]), tmp_path / "pairs.jsonl")
        return tmp_path

    @pytest.mark.parametrize("anchor", ["z", "q"])
    def test_recall_at_one_is_100(self, mirrored, anchor, capsys):
        out = mirrored / f"out_{anchor}"
        argv = ["eval", "--checkpoint", str(mirrored / "mirror.ckpt"), "--data", str(mirrored / "pairs.jsonl"),
                "--anchor", anchor, "--out", str(out)]
        assert cli.main(argv) == 0
        for name in ("retrieval_a2t.json", "retrieval_t2a.json"):
            rep = _read_json(out / name)
            assert rep["recall_at"]["1"] == 100.0
            assert rep["num_queries"] == rep["num_keys"] == 20


class TestSweeps:
    def test_lambda_sweep_rows(self, tiny_ini, tmp_path, registry):
        argv = ["sweep-lambda", "--config", tiny_ini, "--lambdas", "0,0.5,1", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        rows = _rows(tmp_path / "sweep_lambda.csv")
        assert [float(r["lambda"]) for r in rows] == [0.0, 0.5, 1.0]
        assert all(r["status"] == "ok" for r in rows)
        assert tuple(rows[0]) == cli.SWEEP_LAMBDA_COLUMNS
        assert all(r["collapsed"] in ("true", "false") for r in rows)
        _validate(registry, "manifest", _read_json(tmp_path / "manifest.json"))

    def test_lambda_sweep_parallel_matches_serial(self, tiny_ini, tmp_path):
        for jobs in ("1", "2"):
            argv = ["sweep-lambda", "--config", tiny_ini, "--lambdas", "0.25,0.75", "--jobs", jobs,
                    "--out", str(tmp_path / jobs)]
            assert cli.main(argv) == 0
        assert (tmp_path / "1" / "sweep_lambda.csv").read_bytes() == (tmp_path / "2" / "sweep_lambda.csv").read_bytes()

    def test_failed_point_becomes_error_row(self, tmp_path):
        # 4 training pairs cannot fill a batch of 8: every point fails in isolation
        ini = tmp_path / "small.ini"
        ini.write_text(TINY_INI.replace("n_pairs = 48", "n_pairs = 4"))
        argv = ["sweep-lambda", "--config", str(ini), "--lambdas", "0.5,1", "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 0
        rows = _rows(tmp_path / "o" / "sweep_lambda.csv")
        assert len(rows) == 2
        assert all(r["status"] == "error" and "BatchSizeError" in r["error"] for r in rows)

    def test_batch_sweep(self, tiny_ini, tmp_path):
        argv = ["sweep-batch", "--config", tiny_ini, "--batches", "8,16", "--base-batch", "8",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        rows = _rows(tmp_path / "sweep_batch.csv")
        assert tuple(rows[0]) == cli.SWEEP_BATCH_COLUMNS
        assert [(int(r["effective_batch"]), int(r["accumulation_factor"])) for r in rows] == [(8, 1), (16, 2)]
        assert all(r["status"] == "ok" for r in rows)
        assert all(float(r["layernorm_grad_deviation"]) < 1e-9 for r in rows)

    def test_clap_batch_sweep_uses_true_batch(self, tiny_ini, tmp_path):
        argv = ["sweep-batch", "--config", tiny_ini, "--mode", "clap", "--batches", "4,12", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        rows = _rows(tmp_path / "sweep_batch.csv")
        assert [(int(r["base_batch"]), int(r["accumulation_factor"])) for r in rows] == [(4, 1), (12, 1)]
        assert all(r["layernorm_grad_deviation"] == "" for r in rows)
