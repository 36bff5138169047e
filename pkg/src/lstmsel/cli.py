"""Command-line interface.

Subcommands: simulate, fit, select, study, effects, report. Every command
that writes artifacts also writes a manifest.json recording the merged
configuration, input hashes, output hashes, library versions, and, kept
apart from the reproducible payload, wall-clock readings. Deterministic
artifacts are byte-identical across reruns with the same seed on the same
machine.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit or
selection failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    aghq_from,
    default_config,
    load_config,
    merge_config,
    penalty_from,
    pipeline_from,
    train_from,
    vi_from,
)
from .dataio import (
    DataError,
    fit_result_to_dict,
    load_dataset,
    read_json,
    report_from_dict,
    report_to_dict,
    save_dataset,
    write_json,
)
from .effects import selection_effects
from .numerics import EvaluationError, Rng
from .selection import SelectionError, bic_curve, stepwise_hif
from .studies import SimSpec, generate, run_study
from .training import FitError, fit
from .variational import fit_vi

_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_FIT = 4


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: str, header: list, rows: list):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_manifest(out_dir: str, command: str, cfg: dict, inputs: dict,
                    outputs: list, excluded: dict):
    manifest = {
        "schema": 1,
        "tool": "lstmsel",
        "version": __version__,
        "command": command,
        "config": cfg,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs.values()},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
        "versions": {
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
        },
        "excluded_from_determinism": dict(
            excluded,
            started_at=datetime.now(timezone.utc).isoformat(),
        ),
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _merged_config(args) -> dict:
    cfg = (load_config(args.config) if getattr(args, "config", None)
           else default_config())
    override = {}

    def put(section, key, value):
        if value is None:
            return
        if section is None:
            override[key] = value
        else:
            override.setdefault(section, {})[key] = value

    put(None, "seed", getattr(args, "seed", None))
    put("model", "hidden", getattr(args, "hidden", None))
    put("model", "penalty", getattr(args, "penalty", None))
    put("model", "lam", getattr(args, "lam", None))
    put("model", "zero_tol", getattr(args, "zero_tol", None))
    put("train", "learning_rate", getattr(args, "learning_rate", None))
    put("train", "max_epochs", getattr(args, "epochs", None))
    put("train", "restarts", getattr(args, "restarts", None))
    put("train", "patience", getattr(args, "patience", None))
    put("vi", "state_noise", getattr(args, "state_noise", None))
    put("aghq", "k", getattr(args, "quad_order", None))
    if getattr(args, "state_noise", None) is not None:
        put("aghq", "state_noise", args.state_noise)
    put("selection", "estimator", getattr(args, "estimator", None))
    put("selection", "criterion", getattr(args, "criterion", None))
    if getattr(args, "q_grid", None) is not None:
        put("selection", "q_grid", _int_list(args.q_grid, "--q-grid"))
    put("selection", "oos_fraction", getattr(args, "oos_fraction", None))
    return merge_config(cfg, override, source="flags")


def _int_list(text: str, flag: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers") from None


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_simulate(args) -> int:
    cfg = _merged_config(args)
    out = _ensure_out(args.out)
    spec = SimSpec(study=args.study, n_obs=args.n, seed=cfg["seed"],
                   noise_sd=args.noise_sd,
                   n_test=args.n_test)
    rng = Rng(spec.seed).child(args.replicate + 1).child(0)
    t0 = time.perf_counter()
    train, test, truth = generate(spec, rng)
    train_path = os.path.join(out, "train.csv")
    test_path = os.path.join(out, "test.csv")
    truth_path = os.path.join(out, "truth.json")
    save_dataset(train_path, train)
    save_dataset(test_path, test)
    write_json(truth_path, {
        "study": spec.study,
        "relevant": list(truth.relevant),
        "hidden": truth.hidden,
        "n_inputs": truth.n_inputs,
        "replicate": args.replicate,
    })
    _write_manifest(out, "simulate",
                    dict(cfg, study=spec.study, n=args.n,
                         replicate=args.replicate),
                    {}, [train_path, test_path, truth_path],
                    {"wall_clock_s": time.perf_counter() - t0})
    print(f"wrote {len(train)} train and {len(test)} test sequences to "
          f"{out}")
    return 0


def _cmd_fit(args) -> int:
    cfg = _merged_config(args)
    out = _ensure_out(args.out)
    dataset = load_dataset(args.data)
    spec = penalty_from(cfg)
    tc = train_from(cfg)
    estimator = cfg["selection"]["estimator"]
    hidden = cfg["model"]["hidden"]
    t0 = time.perf_counter()
    if estimator == "pmle":
        res = fit(dataset, cfg["seed"], spec, tc, hidden=hidden)
    elif estimator == "vi":
        res, _ = fit_vi(dataset, spec, tc, cfg["seed"], hidden,
                        vi_from(cfg))
    elif estimator == "aghq":
        from .aghq import rescore

        res, _ = fit_vi(dataset, spec, tc, cfg["seed"], hidden,
                        vi_from(cfg))
        res = rescore(res, dataset, aghq_from(cfg))
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    fit_path = os.path.join(out, "fit.json")
    write_json(fit_path, fit_result_to_dict(res))
    _write_manifest(out, "fit", cfg, {"data": args.data}, [fit_path],
                    {"wall_clock_s": time.perf_counter() - t0})
    print(f"loglik={res.loglik:.4f} ({res.loglik_kind}) df={res.df} "
          f"aic={res.aic:.4f} bic={res.bic:.4f} -> {fit_path}")
    return 0


def _candidate_rows(report):
    rows = []
    for stage in report.stages:
        for i, sm in enumerate(stage.table):
            rows.append([
                stage.name,
                str(sm.candidate.q),
                ";".join(str(v + 1) for v in sm.candidate.active_indices()),
                str(sm.candidate.n_active),
                str(sm.fit.df),
                _fmt(sm.fit.loglik),
                sm.fit.loglik_kind,
                _fmt(sm.aic),
                _fmt(sm.bic),
                _fmt(sm.validation_rmse),
                "1" if i == stage.chosen else "0",
            ])
    return rows


def _cmd_select(args) -> int:
    cfg = _merged_config(args)
    out = _ensure_out(args.out)
    dataset = load_dataset(args.data)
    pipeline = pipeline_from(cfg)
    q_grid = cfg["selection"]["q_grid"]
    criterion = cfg["selection"]["criterion"]
    t0 = time.perf_counter()
    report = stepwise_hif(dataset, q_grid, criterion, pipeline, cfg["seed"])
    body, timing = report_to_dict(report)
    sel_path = os.path.join(out, "selection.json")
    cand_path = os.path.join(out, "candidates.csv")
    write_json(sel_path, body)
    _write_csv(cand_path,
               ["stage", "q", "inputs", "n_active", "df", "loglik",
                "loglik_kind", "aic", "bic", "validation_rmse", "chosen"],
               _candidate_rows(report))
    _write_manifest(out, "select", cfg, {"data": args.data},
                    [sel_path, cand_path],
                    dict(timing, wall_clock_s=time.perf_counter() - t0))
    inputs = ",".join(str(v) for v in report.selected_inputs)
    print(f"selected q={report.chosen_q} inputs=[{inputs}] by "
          f"{criterion} -> {sel_path}")
    if report.degenerate_noise:
        print("warning: all recurrent and input weights are at zero; the "
              "selected model is effectively noise-only")
    return 0


def _cmd_study(args) -> int:
    cfg = _merged_config(args)
    out = _ensure_out(args.out)
    pipeline = pipeline_from(cfg)
    estimators = [tok.strip() for tok in args.estimators.split(",")
                  if tok.strip()]
    criteria = [tok.strip() for tok in args.criteria.split(",")
                if tok.strip()]
    n_values = _int_list(args.n, "--n")
    if not n_values:
        raise ConfigError("--n expects at least one value")
    q_grid = (tuple(cfg["selection"]["q_grid"])
              if args.q_grid is not None else None)
    t0 = time.perf_counter()
    all_rows = []
    cell_meta = {}
    for n in n_values:
        spec = SimSpec(study=args.study, n_obs=n,
                       replicates=args.replicates, seed=cfg["seed"],
                       q_grid=q_grid, noise_sd=args.noise_sd,
                       n_test=args.n_test)
        rows, records = run_study(spec, pipeline, estimators, criteria,
                                  workers=args.workers)
        all_rows.extend(rows)
        for row in rows:
            key = f"n={n} estimator={row.estimator} criterion={row.criterion}"
            cell_meta[key] = {
                "runtime_s_mean": None if np.isnan(row.runtime_s)
                else row.runtime_s,
                "n_failed": row.n_failed,
            }
        for rec in records:
            if rec["error"] is not None:
                key = (f"n={n} rep={rec['rep']} "
                       f"estimator={rec['estimator']} "
                       f"criterion={rec['criterion']}")
                cell_meta[key] = {"error": rec["error"]}
    csv_path = os.path.join(out, f"study_{args.study}.csv")
    header = ["study", "n_obs", "estimator", "criterion", "n_ok",
              "n_failed", "tnr", "fdr", "pi", "ph", "pt", "q_mean",
              "oos_rmse"]
    rows_out = []
    for r in all_rows:
        rows_out.append([
            r.study, str(r.n_obs), r.estimator, r.criterion, str(r.n_ok),
            str(r.n_failed), _fmt(r.tnr), _fmt(r.fdr), _fmt(r.pi),
            _fmt(r.ph), _fmt(r.pt), _fmt(r.q_mean), _fmt(r.oos_rmse),
        ])
    _write_csv(csv_path, header, rows_out)
    _write_manifest(out, "study",
                    dict(cfg, study=args.study, n=n_values,
                         replicates=args.replicates,
                         estimators=estimators, criteria=criteria),
                    {}, [csv_path],
                    {"wall_clock_s": time.perf_counter() - t0,
                     "cells": cell_meta,
                     "workers": args.workers})
    print(f"wrote {len(rows_out)} aggregate rows to {csv_path}")
    return 0


def _cmd_effects(args) -> int:
    cfg = _merged_config(args)
    out = _ensure_out(args.out)
    dataset = load_dataset(args.data)
    report = report_from_dict(read_json(args.selection))
    scored = report.final
    if args.covariates in (None, "all"):
        covs = None
    else:
        covs = _int_list(args.covariates, "--covariates")
    pipeline = pipeline_from(cfg)
    t0 = time.perf_counter()
    rows = selection_effects(dataset, scored, cfg=pipeline,
                             seed=cfg["seed"], covariates=covs,
                             b=args.bootstrap, with_delta=args.delta)
    eff_path = os.path.join(out, "effects.csv")
    _write_csv(eff_path,
               ["covariate", "tau", "ci_low", "ci_high", "delta_bic"],
               [[str(r.covariate), _fmt(r.tau), _fmt(r.ci_low),
                 _fmt(r.ci_high), _fmt(r.delta_bic)] for r in rows])
    _write_manifest(out, "effects", cfg,
                    {"data": args.data, "selection": args.selection},
                    [eff_path],
                    {"wall_clock_s": time.perf_counter() - t0})
    print(f"wrote {len(rows)} effect rows to {eff_path}")
    return 0


def _cmd_report(args) -> int:
    out = _ensure_out(args.out)
    report = report_from_dict(read_json(args.selection))
    curve_path = os.path.join(out, "bic_curve.csv")
    _write_csv(curve_path, ["n_active", "q", "bic"],
               [[str(a), str(q), _fmt(b)] for a, q, b in bic_curve(report)])
    _write_manifest(out, "report", {"selection": args.selection},
                    {"selection": args.selection}, [curve_path], {})
    print(f"wrote criterion curve ({len(bic_curve(report))} rows) to "
          f"{curve_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lstmsel",
        description="Penalized LSTM fitting and likelihood-based "
                    "architecture selection.")
    parser.add_argument("--version", action="version",
                        version=f"lstmsel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset CSV (seq_id,t,y,x1..xp)")

    p = sub.add_parser("simulate", help="write one synthetic replicate")
    common(p, data=False)
    p.add_argument("--study", required=True,
                   choices=["sim1", "sim2", "sim3"])
    p.add_argument("--n", type=int, required=True,
                   help="total pooled training observations")
    p.add_argument("--replicate", type=int, default=0,
                   help="replicate index; matches the study command's "
                        "per-replicate stream")
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit one architecture")
    common(p)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--estimator", choices=["pmle", "vi", "aghq"],
                   default=None)
    p.add_argument("--penalty", default=None,
                   choices=["none", "ridge", "lasso", "group_lasso",
                            "gate_shrinkage"])
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--zero-tol", type=float, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--state-noise", type=float, default=None)
    p.add_argument("--quad-order", type=int, default=None)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("select", help="staged architecture search")
    common(p)
    p.add_argument("--q-grid", default=None,
                   help="comma-separated hidden sizes")
    p.add_argument("--criterion", choices=["aic", "bic", "oos"],
                   default=None)
    p.add_argument("--estimator", choices=["pmle", "vi", "aghq"],
                   default=None)
    p.add_argument("--penalty", default=None,
                   choices=["none", "ridge", "lasso", "group_lasso",
                            "gate_shrinkage"])
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--zero-tol", type=float, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--state-noise", type=float, default=None)
    p.add_argument("--quad-order", type=int, default=None)
    p.add_argument("--oos-fraction", type=float, default=None)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("study", help="replicated selection study")
    common(p, data=False)
    p.add_argument("--study", required=True,
                   choices=["sim1", "sim2", "sim3"])
    p.add_argument("--n", required=True,
                   help="pooled training sizes, comma separated")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--estimators", default="pmle")
    p.add_argument("--criteria", default="bic")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--q-grid", default=None)
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--penalty", default=None,
                   choices=["none", "ridge", "lasso", "group_lasso",
                            "gate_shrinkage"])
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--state-noise", type=float, default=None)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("effects", help="covariate effect sizes of a "
                                       "selected model")
    common(p)
    p.add_argument("--selection", required=True,
                   help="selection.json from the select command")
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--covariates", default="all",
                   help="'all' or comma-separated 1-based labels")
    p.add_argument("--delta", action="store_true",
                   help="also refit without each covariate")
    p.set_defaults(func=_cmd_effects)

    p = sub.add_parser("report", help="criterion curves from a selection")
    p.add_argument("--selection", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error("ConfigError", exc)
        return _EXIT_CONFIG
    except DataError as exc:
        _emit_error("DataError", exc, line=exc.line)
        return _EXIT_DATA
    except (FitError, SelectionError, EvaluationError) as exc:
        _emit_error(type(exc).__name__, exc)
        return _EXIT_FIT
    except ValueError as exc:
        # invalid settings surface as ValueError from the core modules
        _emit_error("ConfigError", exc)
        return _EXIT_CONFIG
    except OSError as exc:
        _emit_error("DataError", exc)
        return _EXIT_DATA


def _emit_error(kind: str, exc: Exception, line=None):
    payload = {"error": kind, "message": str(exc)}
    if line is not None:
        payload["line"] = line
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
