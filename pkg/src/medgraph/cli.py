"""Command-line workflow: generate, train, eval, export, report, stats.

Exit status is 0 on success, 1 for invalid usage, configuration or input
data, and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .cohort import CohortError, cohort_stats, load_cohort_dir
from .experiments import (PROBE_FRACTIONS, probe_curve, risk_metrics, uncertainty,
                          variant_name)
from .risk import LOSS_MODES, MissingLabelError
from .synth import GenConfig, GenConfigError, generate, write_cohort
from .temporal import CELLS, MARKER_NOISE
from .trainer import (ConfigError, TrainConfig, TrainData, embed, export_embeddings,
                      load_checkpoint, model_cohort, save_checkpoint, train)

log = logging.getLogger("medgraph")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "MEDGRAPH_SEED"


class UsageError(Exception):
    """Bad flags or flag combinations, caught before any work starts."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- parser

def _common(p, seed=True, workers=False, config=True):
    if config:
        p.add_argument("--config", metavar="PATH", help="JSON file of config fields; "
                       "explicit flags take precedence")
    if seed:
        p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    if workers:
        p.add_argument("--workers", type=int, default=1, metavar="N",
                       help="parallel workers; results do not depend on N (default 1)")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> Parser:
    parser = Parser(prog="medgraph", description="Gaussian graph embeddings of visits and "
                    "codes with a temporal point process over visit sequences.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    parser._subs = {}

    p = sub.add_parser("generate", help="write a synthetic cohort",
                       description="Write patients.jsonl, codes.jsonl and manifest.json.")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--patients", type=int, metavar="N", help="number of patients")
    p.add_argument("--codes", type=int, metavar="N", help="number of codes")
    p.add_argument("--classes", type=int, metavar="N", help="number of planted code classes")
    _common(p, workers=True)
    parser._subs["generate"] = p

    p = sub.add_parser("train", help="train a model and write a checkpoint",
                       description="Train on a cohort directory and write a checkpoint.")
    p.add_argument("--data", required=True, metavar="DIR", help="cohort directory")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint file to write")
    p.add_argument("--task", help="label key for the supervised term")
    p.add_argument("--alpha", type=float, help="structural loss weight (default 1)")
    p.add_argument("--beta", type=float, help="temporal loss weight (default 1)")
    p.add_argument("--gamma", type=float, help="task loss weight (default 1)")
    p.add_argument("--epochs", type=int, help="passes over the training patients (default 30)")
    p.add_argument("--dim", type=int, help="embedding size (default 128)")
    p.add_argument("--m", type=int, help="encoder hidden width (default 256)")
    p.add_argument("--hidden", type=int, help="recurrent state size (default 64)")
    p.add_argument("--negatives", type=int, help="negative codes per edge (default 10)")
    p.add_argument("--lr", type=float, help="Adam step size (default 0.001)")
    p.add_argument("--batch-visits", type=int, help="visits per structural batch (default 128)")
    p.add_argument("--batch-seqs", type=int, help="patients per sequence batch (default 32)")
    p.add_argument("--cell", choices=CELLS, help="recurrent cell (default gated)")
    p.add_argument("--marker-noise", choices=MARKER_NOISE,
                   help="noise scale of event markers (default variance)")
    p.add_argument("--loss-mode", choices=LOSS_MODES, help="task loss form (default softmax-ce)")
    p.add_argument("--time-scale", type=float, help="days per model time unit (default 30)")
    p.add_argument("--holdout", type=float, help="fraction of patients held out (default 0.2)")
    p.add_argument("--clip-norm", type=float, help="clip the global gradient norm")
    p.add_argument("--no-structure", action="store_true", help="ablation: alpha = 0")
    p.add_argument("--no-temporal", action="store_true",
                   help="ablation: beta = 0 and every input gap set to 1")
    p.add_argument("--no-code-attrs", action="store_true",
                   help="ablation: identity code attributes")
    _common(p)
    parser._subs["train"] = p

    p = sub.add_parser("eval", help="AUC/AP of a checkpoint on a risk task",
                       description="Print a JSON metric report for held-out patients.")
    p.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint file")
    p.add_argument("--data", required=True, metavar="DIR", help="cohort directory")
    p.add_argument("--task", help="label key (default: the checkpoint's task)")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="patients to score (default test)")
    p.add_argument("--out", metavar="PATH", help="also write the report to this file")
    _common(p, seed=False, config=False)
    parser._subs["eval"] = p

    p = sub.add_parser("export", help="write node embeddings as TSV",
                       description="One row per visit then per code: id, kind, mu, var.")
    p.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint file")
    p.add_argument("--data", required=True, metavar="DIR", help="cohort directory")
    p.add_argument("--out", required=True, metavar="PATH", help="TSV file to write")
    _common(p, seed=False, config=False)
    parser._subs["export"] = p

    p = sub.add_parser("report", help="write JSON and CSV reports for checkpoints",
                       description="Risk metrics, code-class probe curves, uncertainty "
                       "trends and a 2-D projection for one or more checkpoints.")
    p.add_argument("--ckpt", required=True, action="append", metavar="PATH",
                   help="checkpoint file (repeat to compare variants)")
    p.add_argument("--data", required=True, metavar="DIR", help="cohort directory")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--probe-features", choices=("mu", "mu+var"), default="mu",
                   help="code features for the probe (default mu)")
    _common(p, workers=True)
    parser._subs["report"] = p

    p = sub.add_parser("stats", help="summary statistics of a cohort",
                       description="Patient, visit and code counts of a cohort directory.")
    p.add_argument("--data", required=True, metavar="DIR", help="cohort directory")
    _common(p, seed=False, config=False)
    parser._subs["stats"] = p
    return parser


# ---------------------------------------------------------------- helpers

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def resolve_seed(flag, config: dict) -> int:
    """Explicit flag, then the config file, then $MEDGRAPH_SEED, then 0."""
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _need_dir(path, what="--data"):
    if not Path(path).is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _need_file(path, what="--ckpt"):
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _need_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"directory {parent} does not exist")


def _emit(args, payload: dict, text: str):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    config = _read_config(args.config)
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    values = dict(config)
    for flag, name in (("patients", "n_patients"), ("codes", "n_codes"),
                       ("classes", "n_code_classes")):
        if getattr(args, flag) is not None:
            values[name] = getattr(args, flag)
    values["seed"] = resolve_seed(args.seed, config)
    cfg = GenConfig.from_dict(values).validate()
    cohort = generate(cfg, workers=args.workers)
    manifest = write_cohort(cohort, cfg, args.out)
    _emit(args, {"out": str(args.out), **manifest},
          f"wrote {manifest['stats']['patients']} patients, "
          f"{manifest['stats']['visits']} visits to {args.out}")
    return EXIT_OK


TRAIN_FLAGS = ("task", "alpha", "beta", "gamma", "epochs", "dim", "m", "hidden", "negatives",
               "lr", "batch_visits", "batch_seqs", "cell", "marker_noise", "loss_mode",
               "time_scale", "holdout", "clip_norm")


def train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags, then ablation flags."""
    config = _read_config(args.config)
    values = dict(config)
    for name in TRAIN_FLAGS:
        if getattr(args, name) is not None:
            values[name] = getattr(args, name)
    values["seed"] = resolve_seed(args.seed, config)
    if args.no_structure:
        if args.alpha not in (None, 0.0):
            raise UsageError("--no-structure conflicts with a nonzero --alpha")
        values["alpha"] = 0.0
    if args.no_temporal:
        if args.beta not in (None, 0.0):
            raise UsageError("--no-temporal conflicts with a nonzero --beta")
        values["beta"] = 0.0
        values["constant_gaps"] = True
    if args.no_code_attrs:
        values["identity_code_attrs"] = True
    return TrainConfig.from_dict(values).validate()


def cmd_train(args) -> int:
    cfg = train_config(args)
    _need_dir(args.data)
    _need_parent(args.out)
    cohort = load_cohort_dir(args.data)
    data = TrainData.from_cohort(cohort, cfg)
    store, history = train(cohort, cfg, data)
    save_checkpoint(store, cfg, args.out, history)
    last = history.epochs[-1] if history.epochs else {}
    _emit(args, {"checkpoint": str(args.out), "config": asdict(cfg), "final": last},
          f"wrote {args.out} after {cfg.epochs} epochs"
          + (f", total loss {last['total']:.4f}" if last else ""))
    return EXIT_OK


def _load_model(ckpt_path, data_dir, task=None):
    _need_file(ckpt_path)
    _need_dir(data_dir)
    ck = load_checkpoint(ckpt_path)
    cfg = ck.config
    if task is not None and task != cfg.task:
        if cfg.task is None:
            raise UsageError(f"{ckpt_path} has no risk head (trained without a task)")
        raise UsageError(f"{ckpt_path} was trained for task {cfg.task!r}, not {task!r}")
    cohort = load_cohort_dir(data_dir)
    return ck, cohort


def _patients(data: TrainData, split: str):
    if split == "test":
        return data.test_patients
    if split == "train":
        return data.train_patients
    return np.arange(len(data.sequences))


def cmd_eval(args) -> int:
    if args.out is not None:
        _need_parent(args.out)
    ck, cohort = _load_model(args.ckpt, args.data, args.task)
    if ck.config.task is None:
        raise UsageError(f"{args.ckpt} has no risk head (trained without a task)")
    data = TrainData.from_cohort(cohort, ck.config)
    patients = _patients(data, args.split)
    if len(patients) == 0:
        raise UsageError(f"split {args.split!r} has no patients")
    report = risk_metrics(ck.arrays, ck.config, data, patients)
    payload = asdict(report)
    if args.out is not None:
        ev.write_json(payload, args.out)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    _need_parent(args.out)
    ck, cohort = _load_model(args.ckpt, args.data)
    export_embeddings(ck.arrays, model_cohort(cohort, ck.config), args.out)
    _emit(args, {"out": str(args.out), "rows": len(cohort.visits) + len(cohort.codes)},
          f"wrote {len(cohort.visits) + len(cohort.codes)} embeddings to {args.out}")
    return EXIT_OK


def _report_one(path, cohort, seed, features):
    ck = load_checkpoint(path)
    cfg = ck.config
    seen = model_cohort(cohort, cfg)
    entry = {"checkpoint": str(path), "variant": variant_name(cfg), "task": cfg.task,
             "metrics": None}
    if cfg.task is not None:
        data = TrainData.from_cohort(cohort, cfg)
        entry["metrics"] = asdict(risk_metrics(ck.arrays, cfg, data))
    if all(c.code_class is not None for c in seen.codes):
        entry["probe"] = [asdict(r) for r in probe_curve(ck.arrays, seen, PROBE_FRACTIONS,
                                                          seed, features)]
    else:
        entry["probe"] = []
    entry["uncertainty"] = asdict(uncertainty(ck.arrays, seen))
    mu_c, _ = embed(ck.arrays, seen.graph.code_attributes, "code")
    xy = ev.pca_2d(mu_c)
    entry["pca"] = [{"node_id": c.id, "class": c.code_class or "", "x": float(a), "y": float(b)}
                    for c, (a, b) in zip(seen.codes, xy)]
    return entry, _scatter_rows(ck.arrays, seen)


def _scatter_rows(params, cohort):
    _, var_v = embed(params, cohort.graph.visit_attributes, "visit")
    _, var_c = embed(params, cohort.graph.code_attributes, "code")
    nv_v, nv_c = ev.node_variance(var_v), ev.node_variance(var_c)
    rows = []
    for p in cohort.patients:
        for v in p.visits:
            rows.append({"kind": "visit", "node_id": v.id, "key": float(len(p)),
                         "variance": float(nv_v[v.index])})
    deg = cohort.graph.code_degree
    for c in cohort.codes:
        if deg[c.index] > 0:
            rows.append({"kind": "code", "node_id": c.id, "key": float(np.log10(deg[c.index])),
                         "variance": float(nv_c[c.index])})
    return rows


def cmd_report(args) -> int:
    config = _read_config(args.config)
    seed = resolve_seed(args.seed, config)
    _need_dir(args.data)
    for path in args.ckpt:
        _need_file(path)
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    cohort = load_cohort_dir(args.data)
    out = Path(args.out)
    os.makedirs(out, exist_ok=True)
    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            results = list(pool.map(lambda p: _report_one(p, cohort, seed, args.probe_features),
                                    args.ckpt))
    else:
        results = [_report_one(p, cohort, seed, args.probe_features) for p in args.ckpt]
    entries = [e for e, _ in results]

    auc_rows, probe_rows, bucket_rows, scatter_rows, pca_rows = [], [], [], [], []
    for e, scatter in results:
        label = {"variant": e["variant"], "checkpoint": e["checkpoint"]}
        if e["metrics"] is not None:
            m = e["metrics"]
            auc_rows.append({**label, "task": m["task"], "auc": m["auc"], "ap": m["ap"]})
        for r in e["probe"]:
            probe_rows.append({**label, **r})
        for kind in ("visits", "codes"):
            t = e["uncertainty"][kind]
            for c, mv, n in zip(t["centers"], t["mean_variance"], t["counts"]):
                bucket_rows.append({**label, "kind": kind, "bucket_center": c,
                                    "mean_variance": mv, "count": n, "spearman": t["spearman"]})
        scatter_rows.extend({**label, **r} for r in scatter)
        pca_rows.extend({**label, **r} for r in e["pca"])

    ev.write_json({"seed": seed, "runs": entries}, out / "report.json")
    ev.write_csv(auc_rows, out / "readmission_auc.csv")
    ev.write_csv(probe_rows, out / "probe_f1.csv")
    ev.write_csv(bucket_rows, out / "uncertainty_buckets.csv")
    ev.write_csv(scatter_rows, out / "uncertainty_scatter.csv")
    ev.write_csv(pca_rows, out / "pca.csv")
    files = sorted(p.name for p in out.iterdir())
    _emit(args, {"out": str(out), "files": files}, f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    _need_dir(args.data)
    s = cohort_stats(load_cohort_dir(args.data))
    _emit(args, asdict(s), "\n".join(f"{k}: {v}" for k, v in asdict(s).items()))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "export": cmd_export, "report": cmd_report, "stats": cmd_stats}

VALIDATION_ERRORS = (UsageError, ConfigError, GenConfigError, CohortError, MissingLabelError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # --help or a usage error already reported
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    sub = parser._subs[args.command]
    if extra:
        try:
            sub.error(f"unrecognized arguments: {' '.join(extra)}")
        except SystemExit as exc:
            return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"medgraph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"medgraph {args.command}: runtime error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
