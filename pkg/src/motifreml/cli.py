"""Command-line front end.

Every command writes into a staging directory inside ``--out`` and moves the
files into place only after all of them were written, so a failing run leaves
no partial outputs behind.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import tempfile
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .clustering import hard_cluster
from .core_types import (InputError, load_dataset, load_fit, load_loadings, save_fit,
                         write_matrix_tsv)
from .grn import grn_scores, write_grn
from .pipeline import FitOptions, fit_model
from .simgen import (TABLE_ROWS, GeneratorConfig, baseline_metrics, evaluate, generate,
                     mara_baseline, save_simulation)

GLOBAL_DEFAULTS = {"seed": 0, "threads": None, "out": "."}
KNOBS = ("p", "s", "m", "variance_ratio", "zm_frac", "sigma_het", "sigma_var", "s_het",
         "s_var_max", "s_het_sample", "s_sample_var", "groups")


def _global_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the command name
    gp = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    gp.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
    gp.add_argument("--threads", type=int, help="BLAS threads (default: all cores)")
    gp.add_argument("--out", help="output directory (default: current directory)")
    return gp


def _add_data_args(p: argparse.ArgumentParser, loadings: bool = True):
    p.add_argument("--data", help="directory with expression.tsv, groups.tsv, loadings.tsv")
    p.add_argument("--expression", help="promoter x sample expression TSV")
    p.add_argument("--groups", help="sample to group TSV")
    if loadings:
        p.add_argument("--loadings", help="promoter x motif loading TSV")


def _add_knob_args(p: argparse.ArgumentParser):
    p.add_argument("--p", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--variance-ratio", type=float)
    p.add_argument("--zm-frac", type=float)
    p.add_argument("--sigma-var", type=float)
    p.add_argument("--s-var-max", type=float)
    p.add_argument("--s-sample-var", type=float)
    p.add_argument("--groups", type=int)
    for flag in ("sigma-het", "s-het", "s-het-sample"):
        p.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    gp = _global_parser()
    parser = argparse.ArgumentParser(prog="motifreml", parents=[gp],
                                     description="Motif activity estimation with REML "
                                                 "variance components.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[gp], help="fit the model and write all outputs")
    _add_data_args(p)
    p.add_argument("--promoter-variance", action="store_true",
                   help="estimate per-promoter noise variances first")
    p.add_argument("--no-motif-variance", action="store_true",
                   help="keep every motif variance at 1")
    p.add_argument("--clusters", type=int, help="reduce motifs to C k-means clusters")
    p.add_argument("--tune-snr", action="store_true",
                   help="choose the signal-to-noise ratio by cross-validation")
    p.add_argument("--no-tests", action="store_true", help="skip information and tests")
    p.add_argument("--plot", action="store_true", help="also write activities.png")

    p = sub.add_parser("generate", parents=[gp], help="write a synthetic dataset")
    p.add_argument("--table-row", choices=sorted(TABLE_ROWS), help="named configuration")
    p.add_argument("--config", help="file of key = value generator knobs")
    _add_knob_args(p)

    p = sub.add_parser("evaluate", parents=[gp], help="compare a fit with ground truth")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--truth", help="truth directory written by generate")
    p.add_argument("--data", help="dataset directory; enables the held-out refit")
    p.add_argument("--holdout-frac", type=float, default=0.1)
    p.add_argument("--promoter-variance", action="store_true",
                   help="use promoter variances in the held-out refit")

    p = sub.add_parser("grn", parents=[gp], help="promoter-level motif effect probabilities")
    _add_data_args(p)
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--prior", type=float, default=0.5, help="prior probability of an effect")

    p = sub.add_parser("baseline", parents=[gp], help="double-centered ridge regression")
    _add_data_args(p)
    p.add_argument("--ridge", type=float, help="fixed penalty (default: cross-validated)")

    p = sub.add_parser("cluster", parents=[gp], help="k-means reduction of the loadings")
    _add_data_args(p)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--scale-by-size", action="store_true",
                   help="divide summed loadings by sqrt(cluster size)")

    p = sub.add_parser("sweep", parents=[gp],
                       help="generate, fit and score over one knob of a named configuration")
    p.add_argument("--table-row", choices=sorted(TABLE_ROWS), required=True)
    p.add_argument("--values", help="comma-separated knob values (default: the row's)")
    p.add_argument("--seeds", type=int, default=5, help="replicates per value")
    p.add_argument("--promoter-variance", action="store_true")
    p.add_argument("--no-plot", action="store_true")
    _add_knob_args(p)
    return parser


def _resolve_paths(args):
    base = Path(args.data) if getattr(args, "data", None) else None
    paths = {}
    for name in ("expression", "groups", "loadings"):
        if not hasattr(args, name):
            continue
        given = getattr(args, name)
        if given is None and base is not None:
            given = base / f"{name}.tsv"
        if given is None:
            raise InputError(f"--{name} (or --data) is required")
        paths[name] = Path(given)
    return paths


def _load_inputs(args, loadings: bool = True):
    paths = _resolve_paths(args)
    ds = load_dataset(paths["expression"], paths["groups"])
    ld = load_loadings(paths["loadings"], ds) if loadings else None
    return ds, ld


@contextmanager
def _staged_output(out):
    """Yield a staging directory whose files are moved into ``out`` on success."""
    out = Path(out)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        yield stage
        for src in sorted(stage.rglob("*")):
            if src.is_file():
                dst = out / src.relative_to(stage)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    shutil.rmtree(stage, ignore_errors=True)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def cmd_fit(args) -> int:
    ds, ld = _load_inputs(args)
    opts = FitOptions(promoter_variance=args.promoter_variance,
                      motif_variance=not args.no_motif_variance, clusters=args.clusters,
                      tune_snr=args.tune_snr, seed=args.seed, run_tests=not args.no_tests)
    fit = fit_model(ds, ld, opts)
    with _staged_output(args.out) as stage:
        save_fit(fit.params, fit.posterior, stage, fit.motif_ids, ds.group_labels,
                 ds.promoter_ids, fit.tests)
        if fit.clusters is not None:
            pd.DataFrame({"motif_id": list(ld.motif_ids),
                          "cluster": [fit.motif_ids[c] for c in fit.clusters.assignment]}
                         ).to_csv(stage / "clusters.tsv", sep="\t", index=False,
                                  lineterminator="\n")
        if args.plot:
            from .plotting import plot_activities

            plot_activities(fit.posterior.mean, fit.posterior.zscores, fit.motif_ids,
                            ds.group_labels, stage / "activities.png")
        _write_json(stage / "run_log.json", fit.run_log)
    return 0


def _generator_config(args) -> GeneratorConfig:
    overrides = {k: getattr(args, k) for k in KNOBS if getattr(args, k, None) is not None}
    overrides["seed"] = args.seed
    if getattr(args, "config", None):
        base = GeneratorConfig.from_file(args.config)
        return dataclasses.replace(base, **overrides)
    if getattr(args, "table_row", None):
        return GeneratorConfig.from_row(args.table_row, **overrides)
    return GeneratorConfig(**overrides)


def cmd_generate(args) -> int:
    cfg = _generator_config(args)
    sim = generate(cfg)
    with _staged_output(args.out) as stage:
        save_simulation(sim, stage)
    return 0


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = (x.strip() for x in line.split("=", 1))
            out[k] = v
    return out


def cmd_evaluate(args) -> int:
    params, posterior, meta = load_fit(args.fit)
    truth = true_act = None
    manifest = {}
    truth_dir = Path(args.truth) if args.truth else None
    if truth_dir is None and args.data and (Path(args.data) / "truth").is_dir():
        truth_dir = Path(args.data) / "truth"
    if truth_dir is not None:
        if not (truth_dir / "params.txt").exists():
            raise InputError(f"no ground truth in {truth_dir}")
        truth, tpost, _ = load_fit(truth_dir)
        true_act = tpost.mean if tpost is not None else None
        manifest = _read_manifest(truth_dir.parent / "manifest.txt")
    ds = ld = None
    if args.data:
        args.expression = args.groups = args.loadings = None
        ds, ld = _load_inputs(args)
    if truth is None and ds is None:
        raise InputError("evaluate needs --truth or --data")
    opts = FitOptions(promoter_variance=args.promoter_variance, seed=args.seed)
    metrics = evaluate(params, posterior, truth, true_act, ds, ld, args.holdout_frac, opts,
                       seed=int(manifest.get("seed", args.seed)))
    row = {"config": "; ".join(f"{k}={v}" for k, v in manifest.items() if k != "seed"),
           "seed": manifest.get("seed", args.seed), **metrics}
    with _staged_output(args.out) as stage:
        pd.DataFrame([row]).to_csv(stage / "metrics.tsv", sep="\t", index=False,
                                   float_format="%.17g", lineterminator="\n")
    return 0


def cmd_grn(args) -> int:
    ds, ld = _load_inputs(args)
    params, posterior, meta = load_fit(args.fit)
    if posterior is None:
        raise InputError(f"no activities.tsv in {args.fit}")
    if list(meta["motif_ids"]) != list(ld.motif_ids):
        raise InputError("fit motifs differ from the loading matrix motifs")
    probs = grn_scores(ds, ld, params, posterior, args.prior)
    with _staged_output(args.out) as stage:
        write_grn(stage / "grn.tsv", probs, ds.promoter_ids, ld.motif_ids, ds.group_labels,
                  args.prior)
    return 0


def cmd_baseline(args) -> int:
    ds, ld = _load_inputs(args)
    A, ridge = mara_baseline(ds, ld, ridge=args.ridge, seed=args.seed)
    with _staged_output(args.out) as stage:
        write_matrix_tsv(stage / "baseline_activities.tsv", A, ld.motif_ids, ds.sample_ids,
                         index_name="motif_id")
        _write_json(stage / "baseline.json", {"ridge": ridge})
    return 0


def cmd_cluster(args) -> int:
    ds, ld = _load_inputs(args)
    res = hard_cluster(ld, args.clusters, args.seed, scale_by_size=args.scale_by_size)
    with _staged_output(args.out) as stage:
        write_matrix_tsv(stage / "loadings_clustered.tsv", res.loadings.values,
                         ds.promoter_ids, res.loadings.motif_ids, index_name="promoter_id")
        pd.DataFrame({"motif_id": list(ld.motif_ids),
                      "cluster": [res.loadings.motif_ids[c] for c in res.assignment]}
                     ).to_csv(stage / "clusters.tsv", sep="\t", index=False,
                              lineterminator="\n")
    return 0


def cmd_sweep(args) -> int:
    _, knob, default_values = TABLE_ROWS[args.table_row]
    if args.values:
        values = [type(default_values[0])(float(v)) if isinstance(default_values[0], int)
                  else float(v) for v in args.values.split(",")]
    else:
        values = list(default_values)
    rows = []
    for value in values:
        for rep in range(args.seeds):
            seed = args.seed + rep
            ns = argparse.Namespace(**{**vars(args), knob: value, "seed": seed})
            cfg = _generator_config(ns)
            sim = generate(cfg)
            opts = FitOptions(promoter_variance=args.promoter_variance, seed=seed)
            fit = fit_model(sim.dataset, sim.loadings, opts)
            met = evaluate(fit.params, fit.posterior, sim.truth, sim.group_activities,
                           sim.dataset, sim.loadings, fit_options=opts, seed=seed)
            rows.append({"row": args.table_row, knob: value, "seed": seed,
                         "method": "pipeline", **met})
            rows.append({"row": args.table_row, knob: value, "seed": seed,
                         "method": "baseline", **baseline_metrics(sim, seed=seed)})
    table = pd.DataFrame(rows)
    with _staged_output(args.out) as stage:
        table.to_csv(stage / "metrics.tsv", sep="\t", index=False, float_format="%.17g",
                     lineterminator="\n")
        summary = table.drop(columns=["seed", "row"]).groupby(["method", knob]).mean()
        summary.to_csv(stage / "metrics_summary.tsv", sep="\t", float_format="%.6g",
                       lineterminator="\n")
        if not args.no_plot:
            from .plotting import plot_metrics

            plot_metrics(table, knob, stage / "metrics.png")
    return 0


COMMANDS = {"fit": cmd_fit, "generate": cmd_generate, "evaluate": cmd_evaluate,
            "grn": cmd_grn, "baseline": cmd_baseline, "cluster": cmd_cluster,
            "sweep": cmd_sweep}


def _thread_limits(requested):
    """Per-library limits capped at each pool's startup size.

    OpenBLAS can crash when asked for more threads than it allocated at load
    time, so larger requests are clamped rather than passed through.
    """
    if requested is None:
        return None
    return {info["prefix"]: max(1, min(requested, info["num_threads"]))
            for info in threadpool_info()}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            with threadpool_limits(limits=_thread_limits(args.threads)):
                return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("motifreml: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # single-line diagnostic for every failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"motifreml {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
