"""Dataset and artifact serialization.

Datasets travel as long-format CSV with header seq_id,t,y,x1..xp; one row
per time step, t strictly increasing within each sequence. Floats are
written with repr so a load/save round trip is exact. Fit results and
selection reports serialize to JSON.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .lstm import LstmParams, Sequence
from .selection import (
    CandidateModel,
    ScoredModel,
    SelectionReport,
    StageReport,
)
from .penalties import PenaltySpec
from .training import FitResult


class DataError(Exception):
    """Malformed dataset or artifact; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


def _fmt(x) -> str:
    return repr(float(x))


def save_dataset(path: str, dataset: list):
    if not dataset:
        raise DataError("refusing to write an empty dataset")
    p = dataset[0].n_inputs
    header = ["seq_id", "t", "y"] + [f"x{i + 1}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for seq in dataset:
            if seq.n_inputs != p:
                raise DataError("sequences disagree on input width")
            for t in range(seq.length):
                row = [seq.seq_id, str(t + 1), _fmt(seq.targets[t])]
                row += [_fmt(v) for v in seq.inputs[t]]
                writer.writerow(row)


def load_dataset(path: str) -> list:
    """Parse a long-format dataset CSV, validating structure.

    Errors carry the 1-based line number: bad header, non-numeric fields,
    wrong column counts, duplicate (seq_id, t) pairs, or time indices that
    fail to increase strictly within a sequence.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", line=1) from None
        if len(header) < 4 or header[:3] != ["seq_id", "t", "y"]:
            raise DataError(
                "header must start with seq_id,t,y followed by x1..xp",
                line=1)
        p = len(header) - 3
        expect = [f"x{i + 1}" for i in range(p)]
        if header[3:] != expect:
            raise DataError(
                f"input columns must be named {','.join(expect)}", line=1)
        order = []
        rows = {}
        last_t = {}
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 3:
                raise DataError(
                    f"expected {p + 3} fields, found {len(row)}",
                    line=lineno)
            sid = row[0]
            try:
                t = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError:
                raise DataError("non-numeric field", line=lineno) from None
            if (sid, t) in seen:
                raise DataError(
                    f"duplicate time index {t} for sequence {sid!r}",
                    line=lineno)
            seen.add((sid, t))
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            elif t <= last_t[sid]:
                raise DataError(
                    f"time index must increase within sequence {sid!r}",
                    line=lineno)
            last_t[sid] = t
            rows[sid].append(vals)
        if not order:
            raise DataError("no data rows", line=2)
    out = []
    for sid in order:
        arr = np.asarray(rows[sid], dtype=np.float64)
        out.append(Sequence(inputs=arr[:, 1:], targets=arr[:, 0],
                            seq_id=sid))
    return out


# ---------------------------------------------------------------------------
# JSON artifacts


def params_to_dict(params: LstmParams) -> dict:
    return {
        "W": params.W.tolist(),
        "U": params.U.tolist(),
        "b": params.b.tolist(),
        "w_y": params.w_y.tolist(),
        "b_y": params.b_y,
        "sigma2": params.sigma2,
        "state_noise": params.state_noise,
    }


def params_from_dict(d: dict) -> LstmParams:
    return LstmParams(
        W=np.asarray(d["W"], dtype=np.float64),
        U=np.asarray(d["U"], dtype=np.float64),
        b=np.asarray(d["b"], dtype=np.float64),
        w_y=np.asarray(d["w_y"], dtype=np.float64),
        b_y=float(d["b_y"]),
        sigma2=float(d["sigma2"]),
        state_noise=float(d["state_noise"]),
    )


def fit_result_to_dict(res: FitResult) -> dict:
    return {
        "params": params_to_dict(res.params),
        "objective_trace": [float(v) for v in res.objective_trace],
        "loglik": res.loglik,
        "loglik_kind": res.loglik_kind,
        "df": res.df,
        "aic": res.aic,
        "bic": res.bic,
        "n_obs": res.n_obs,
        "seed": res.seed,
        "epochs": res.epochs,
        "converged": res.converged,
        "extra": res.extra,
    }


def fit_result_from_dict(d: dict) -> FitResult:
    return FitResult(
        params=params_from_dict(d["params"]),
        objective_trace=np.asarray(d["objective_trace"], dtype=np.float64),
        loglik=float(d["loglik"]),
        df=int(d["df"]),
        aic=float(d["aic"]),
        bic=float(d["bic"]),
        n_obs=int(d["n_obs"]),
        seed=int(d["seed"]),
        epochs=int(d["epochs"]),
        converged=bool(d["converged"]),
        loglik_kind=d.get("loglik_kind", "exact"),
        extra=dict(d.get("extra", {})),
    )


def _penalty_to_dict(p: PenaltySpec) -> dict:
    return {"kind": p.kind, "lam": p.lam, "alpha1": p.alpha1,
            "alpha2": p.alpha2, "alpha3": p.alpha3, "beta": p.beta,
            "lam_hidden": p.lam_hidden, "dropout_p": p.dropout_p,
            "zero_tol": p.zero_tol}


def _penalty_from_dict(d: dict) -> PenaltySpec:
    return PenaltySpec(**d)


def _scored_to_dict(sm: ScoredModel) -> dict:
    return {
        "q": sm.candidate.q,
        "input_mask": [int(b) for b in sm.candidate.input_mask],
        "penalty": _penalty_to_dict(sm.candidate.penalty),
        "estimator": sm.candidate.estimator,
        "fit": fit_result_to_dict(sm.fit),
        "aic": sm.aic,
        "bic": sm.bic,
        "validation_rmse": sm.validation_rmse,
    }


def _scored_from_dict(d: dict) -> ScoredModel:
    cand = CandidateModel(
        q=int(d["q"]),
        input_mask=tuple(bool(v) for v in d["input_mask"]),
        penalty=_penalty_from_dict(d["penalty"]),
        estimator=d["estimator"],
    )
    return ScoredModel(candidate=cand, fit=fit_result_from_dict(d["fit"]),
                       aic=float(d["aic"]), bic=float(d["bic"]),
                       validation_rmse=d.get("validation_rmse"))


def report_to_dict(report: SelectionReport):
    """Serialize a selection report; wall-clock readings are returned
    separately so the JSON artifact is run-to-run identical."""
    stages = []
    timing = {"total_s": report.wall_clock_s}
    for st in report.stages:
        stages.append({
            "name": st.name,
            "table": [_scored_to_dict(sm) for sm in st.table],
            "chosen": st.chosen,
            "failures": [list(f) for f in st.failures],
        })
        timing[f"stage_{st.name}_s"] = st.wall_clock_s
    body = {
        "stages": stages,
        "final": _scored_to_dict(report.final),
        "selected_inputs": list(report.selected_inputs),
        "chosen_q": report.chosen_q,
        "criterion": report.criterion,
        "seed": report.seed,
        "n_obs": report.n_obs,
        "degenerate_noise": report.degenerate_noise,
    }
    return body, timing


def report_from_dict(d: dict) -> SelectionReport:
    stages = [StageReport(name=s["name"],
                          table=[_scored_from_dict(v) for v in s["table"]],
                          chosen=int(s["chosen"]),
                          failures=[tuple(f) for f in s.get("failures", [])])
              for s in d["stages"]]
    return SelectionReport(
        stages=stages,
        final=_scored_from_dict(d["final"]),
        selected_inputs=[int(v) for v in d["selected_inputs"]],
        chosen_q=int(d["chosen_q"]),
        criterion=d["criterion"],
        seed=int(d["seed"]),
        n_obs=int(d["n_obs"]),
        degenerate_noise=bool(d["degenerate_noise"]),
    )


def write_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc}", line=exc.lineno) from None
