"""Command-line entry point: ``slap {train,eval,gap,sweep-lambda,sweep-batch,compare}``.

Every command writes deterministic JSON/CSV reports into ``--out`` and
finishes by writing ``manifest.json``, the only file carrying timestamps.
Exit codes: 0 success, 2 usage/config, 3 IO or bad input files, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from slap import __version__
from slap.config import ExperimentConfig, load_config
from slap.data import generate, load_pairs
from slap.errors import (
    BatchSizeError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    ParseError,
    SchemaError,
    SlapError,
    SpecError,
    UnsupportedError,
)
from slap.evaluation import bidirectional, compare_anchors, embed, zero_shot_report
from slap.gap import gap_report, pca_project, write_projection_csv
from slap.nn import load_model, save_model
from slap.trainer import accumulate_equivalence_check, train

log = logging.getLogger("slap")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4
ANCHOR_FLAGS = {"z": "projection_z", "q": "query_q"}
SWEEP_LAMBDA_COLUMNS = (
    "lambda", "seed", "status",
    "recall1_a2t", "recall5_a2t", "recall10_a2t",
    "recall1_t2a", "recall5_t2a", "recall10_t2a",
    "linear_separability", "centroid_distance", "collapse_stat", "collapsed", "error",
)
SWEEP_BATCH_COLUMNS = (
    "mode", "effective_batch", "base_batch", "accumulation_factor", "seed", "status",
    "recall1_a2t", "recall1_t2a", "layernorm_grad_deviation", "error",
)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def exit_code_for(exc):
    """Map an exception to the CLI exit-code class."""
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ConfigError, UnsupportedError, SpecError, BatchSizeError)):
        return EXIT_USAGE
    if isinstance(exc, (OSError, CorruptCheckpointError, CheckpointVersionError,
                        ParseError, SchemaError, DataError)):
        return EXIT_IO
    return EXIT_INTERNAL


# -- output plumbing -----------------------------------------------------------

class RunDir:
    """Collects the artifacts of one command; the manifest goes in last."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.started = time.time()

    def file(self, name):
        p = self.path / name
        self.artifacts.append(name)
        return p

    def write_json(self, name, obj):
        self.file(name).write_text(dumps(obj))

    def write_csv(self, name, columns, rows):
        with open(self.file(name), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _cell(row.get(k, "")) for k in columns})

    def write_manifest(self, command, config, seed, argv):
        finished = time.time()
        manifest = {
            "tool": "slap",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config": config.snapshot() if config is not None else None,
            "artifacts": [
                {"path": name, "sha256": _sha256(self.path / name)} for name in self.artifacts
            ],
            "started_at": _iso(self.started),
            "finished_at": _iso(finished),
            "duration_seconds": round(finished - self.started, 6),
        }
        (self.path / "manifest.json").write_text(dumps(manifest))
        return manifest


def dumps(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _iso(ts):
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


# -- shared helpers ------------------------------------------------------------

def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, train=replace(cfg.train, mode=args.mode))
        cfg.train.validate()
    return cfg


def _datasets(cfg):
    """(train, eval) datasets: from files when configured, else synthetic."""
    train_ds = load_pairs(cfg.source.path) if cfg.source.path else generate(cfg.data, "train")
    if cfg.source.eval_path:
        eval_ds = load_pairs(cfg.source.eval_path)
    elif cfg.source.path:
        eval_ds = train_ds
    else:
        eval_ds = generate(cfg.data, "eval")
    return train_ds, eval_ds


def _eval_dataset(args, cfg):
    if args.data:
        return load_pairs(args.data)
    return _datasets(cfg)[1]


def _anchor(flag, mode):
    if flag is None or flag == "auto":
        return "query_q" if mode == "slap" else "projection_z"
    if flag == "q" and mode != "slap":
        raise UnsupportedError("anchor q requires a slap checkpoint (clap models have no predictor)")
    return ANCHOR_FLAGS[flag]


def _k_list(text):
    try:
        ks = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k-list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _retrieval_dicts(reports):
    return {d: r.to_dict() for d, r in reports.items()}


def _evaluate(model, dataset, anchor, k_values):
    emb = embed(model, dataset, anchor)
    return emb, bidirectional(emb, k_values)


# -- commands ------------------------------------------------------------------

def cmd_train(args, run):
    cfg = _config(args)
    train_ds, eval_ds = _datasets(cfg)
    model, trace = train(cfg.train, train_ds)
    crc = save_model(model, run.file("model.ckpt"), {"seed": cfg.train.seed})
    trace.write_csv(run.file("trace.csv"))
    run.write_json("train_summary.json", {
        "mode": cfg.train.mode,
        "steps": len(trace.records),
        "ema_steps": trace.ema_steps,
        "final_loss": trace.records[-1].loss if trace.records else None,
        "final_collapse_stat": trace.final_collapse_stat,
        "collapsed": trace.collapsed,
        "checkpoint_crc32": crc,
        "n_train": len(train_ds),
        "n_eval": len(eval_ds),
    })
    return cfg


def cmd_eval(args, run):
    cfg = _config(args)
    model = load_model(args.checkpoint)
    anchor = _anchor(args.anchor or cfg.eval.anchor, model.mode)
    k_values = args.k or cfg.eval.k_values
    dataset = _eval_dataset(args, cfg)
    _, reports = _evaluate(model, dataset, anchor, k_values)
    run.write_json("retrieval_a2t.json", reports["A->T"].to_dict())
    run.write_json("retrieval_t2a.json", reports["T->A"].to_dict())
    if args.compare_anchors:
        both = compare_anchors(model, dataset, k_values)
        run.write_json("anchor_comparison.json",
                       {kind: _retrieval_dicts(r) for kind, r in both.items()})
    if dataset.prototypes and (dataset.class_label is not None or dataset.tag_matrix is not None):
        run.write_json("zero_shot.json", zero_shot_report(model, dataset, anchor).to_dict())
    return cfg


def cmd_gap(args, run):
    cfg = _config(args)
    model = load_model(args.checkpoint)
    anchor = _anchor(args.anchor or cfg.eval.anchor, model.mode)
    dataset = _eval_dataset(args, cfg)
    emb = embed(model, dataset, anchor)
    run.write_json("gap.json", gap_report(emb).to_dict())
    write_projection_csv(emb, pca_project(emb), run.file("pca.csv"))
    return cfg


def _lambda_point(cfg, lam, k_values):
    """One isolated sweep run; never raises, failures become an error row."""
    row = {"lambda": lam, "seed": cfg.train.seed}
    try:
        train_ds, eval_ds = _datasets(cfg)
        tc = replace(cfg.train, mode="slap", lam=lam)
        model, trace = train(tc, train_ds)
        emb, reports = _evaluate(model, eval_ds, "query_q", k_values)
        for direction, tag in (("A->T", "a2t"), ("T->A", "t2a")):
            for k, v in reports[direction].recall_at.items():
                row[f"recall{k}_{tag}"] = v
        g = gap_report(emb)
        row.update(status="ok", linear_separability=g.linear_separability,
                   centroid_distance=g.centroid_distance,
                   collapse_stat=trace.final_collapse_stat, collapsed=trace.collapsed)
    except Exception as exc:  # a failed point is data, not a reason to abort
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _batch_point(cfg, mode, batch, base):
    row = {"mode": mode, "effective_batch": batch, "seed": cfg.train.seed}
    try:
        factor = batch // base if mode == "slap" else 1
        b0 = base if mode == "slap" else batch
        tc = replace(cfg.train, mode=mode, base_batch=b0, accumulation_factor=factor)
        row.update(base_batch=b0, accumulation_factor=factor)
        train_ds, eval_ds = _datasets(cfg)
        model, _ = train(tc, train_ds)
        _, reports = _evaluate(model, eval_ds, _anchor(None, mode), (1,))
        row.update(recall1_a2t=reports["A->T"].recall_at[1], recall1_t2a=reports["T->A"].recall_at[1])
        if mode == "slap":
            ln = replace(tc, norm_kind="layernorm")
            row["layernorm_grad_deviation"] = accumulate_equivalence_check(
                ln, train_ds, factor, batch_size=batch)
        row["status"] = "ok"
    except Exception as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _run_points(fn, jobs, arglists):
    if jobs <= 1:
        return [fn(*a) for a in arglists]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in arglists]
        return [f.result() for f in futures]


def cmd_sweep_lambda(args, run):
    cfg = _config(args)
    if cfg.train.mode != "slap":
        raise ConfigError("mode: sweep-lambda requires slap mode")
    lambdas = args.lambdas or cfg.sweep.lambdas
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambdas: {lam} lies outside [0, 1]")
    k_values = args.k or cfg.eval.k_values
    rows = _run_points(_lambda_point, args.jobs, [(cfg, lam, k_values) for lam in lambdas])
    run.write_csv("sweep_lambda.csv", SWEEP_LAMBDA_COLUMNS, rows)
    return cfg


def cmd_sweep_batch(args, run):
    cfg = _config(args)
    mode = cfg.train.mode
    batch_list = args.batches or cfg.sweep.batches
    base = args.base_batch or cfg.sweep.sweep_base_batch
    for b in batch_list:
        if mode == "slap" and (b < base or b % base):
            raise ConfigError(f"batches: {b} is not a multiple of base batch {base}")
        if mode == "clap" and b < 2:
            raise ConfigError(f"batches: clap needs an effective batch of at least 2, got {b}")
    rows = _run_points(_batch_point, args.jobs, [(cfg, mode, b, base) for b in batch_list])
    run.write_csv("sweep_batch.csv", SWEEP_BATCH_COLUMNS, rows)
    return cfg


def cmd_compare(args, run):
    cfg = _config(args)
    k_values = args.k or cfg.eval.k_values
    train_ds, eval_ds = _datasets(cfg)
    out = {"seed": cfg.train.seed, "n_eval": len(eval_ds), "models": {}}
    for mode in ("slap", "clap"):
        model, trace = train(replace(cfg.train, mode=mode), train_ds)
        save_model(model, run.file(f"{mode}.ckpt"), {"seed": cfg.train.seed})
        anchor = _anchor(None, mode)
        emb, reports = _evaluate(model, eval_ds, anchor, k_values)
        out["models"][mode] = {
            "anchor_kind": anchor,
            "retrieval": _retrieval_dicts(reports),
            "gap": gap_report(emb).to_dict(),
            "final_collapse_stat": trace.final_collapse_stat,
            "collapsed": trace.collapsed,
        }
    s, c = out["models"]["slap"], out["models"]["clap"]
    out["summary"] = {
        "slap_r1_ge_clap": {d: s["retrieval"][d]["recall_at"]["1"] >= c["retrieval"][d]["recall_at"]["1"]
                            for d in ("A->T", "T->A")},
        "slap_smaller_gap": {m: s["gap"][m] < c["gap"][m]
                             for m in ("centroid_distance", "linear_separability")},
    }
    run.write_json("compare.json", out)
    return cfg


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gap": cmd_gap,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-batch": cmd_sweep_batch,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="slap", description="SLAP / CLAP desk-scale experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", help="INI config file (defaults to the built-in benchmark)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override data and model seed")
        if mode:
            p.add_argument("--mode", choices=("slap", "clap"))
        return p

    common(sub.add_parser("train", help="train one model"))
    for name in ("eval", "gap"):
        p = common(sub.add_parser(name, help=f"{name} a checkpoint"), mode=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="pair file (jsonl/csv); default: the config's eval split")
        p.add_argument("--anchor", choices=("z", "q"), help="default: q for slap, z for clap")
        if name == "eval":
            p.add_argument("--k", type=_k_list, help="comma-separated cutoffs, default 1,5,10")
            p.add_argument("--compare-anchors", action="store_true",
                           help="also report z- and q-anchored retrieval side by side")
    p = common(sub.add_parser("sweep-lambda", help="one slap run per lambda"))
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--k", type=_k_list)
    p.add_argument("--jobs", type=int, default=1)
    p = common(sub.add_parser("sweep-batch", help="scale the effective batch"))
    p.add_argument("--batches", type=_int_list)
    p.add_argument("--base-batch", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p = common(sub.add_parser("compare", help="slap vs clap on one seed"), mode=False)
    p.add_argument("--k", type=_k_list)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = RunDir(args.out)
        cfg = COMMANDS[args.command](args, run)
        run.write_manifest(args.command, cfg, cfg.train.seed, argv)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL and not isinstance(exc, SlapError):
            traceback.print_exc()
        print(f"slap {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
