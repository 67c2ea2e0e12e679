"""Command-line front end: fit a dataset, run recovery studies, regenerate
diagnostics from a saved fit.

Input CSV schema: columns y,t,z (required) and w,cluster (optional; defaults
1 and the row index). All outputs are deterministic CSV/JSON given the same
inputs and seed. Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .core import Dataset, ModelParams, StrataGrid, effective_sample_size, param_names
from .densities import Family
from .diagnostics import marginal_fit_table, posterior_histogram, solution_trace_table
from .effects import EffectTable, effect_ses, natural_param_ses, observed_information_se, cluster_sandwich_se, treatment_effects
from .em import FitConfig, FitResult, StartRecord, fit, parse_starts
from .errors import ConvergenceError, DataError, EstimationError, InferenceError, StratfitError
from .simulate import (
    MisspecStudy,
    RecoveryReport,
    SimConfig,
    misspecification_study,
    parse_shape,
    run_grid,
    shape_label,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# dataset ingestion
# --------------------------------------------------------------------------

def read_dataset(path: str, levels: int, dichotomize: bool, family: Family) -> Dataset:
    """Read the y,t,z[,w,cluster] CSV, reporting violations with row numbers."""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("input file is empty")
        cols = [c.strip() for c in reader.fieldnames]
        for required in ("y", "t", "z"):
            if required not in cols:
                raise DataError(f"missing required column '{required}'")
        has_w = "w" in cols
        has_cluster = "cluster" in cols
        y, t, z, w, cluster = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            row = {k.strip(): (v.strip() if v is not None else "") for k, v in row.items()}
            try:
                y.append(float(row["y"]))
                t.append(int(row["t"]))
                z_raw = float(row["z"])
                if z_raw != int(z_raw):
                    raise ValueError("z must be an integer level")
                z.append(int(z_raw))
                w.append(float(row["w"]) if has_w and row["w"] != "" else 1.0)
            except (TypeError, ValueError, KeyError) as exc:
                raise DataError(f"row {line}: {exc}") from None
            cluster.append(row["cluster"] if has_cluster and row["cluster"] != "" else str(line))
    if not y:
        raise DataError("input file has no data rows")
    z_arr = np.array(z)
    if dichotomize:
        z_arr = np.where(z_arr > 0, 1, 0)
    if np.any((z_arr < 0) | (z_arr >= levels)):
        bad = int(np.flatnonzero((z_arr < 0) | (z_arr >= levels))[0])
        raise DataError(
            f"row {bad + 2}: z={z_arr[bad]} outside [0, {levels}) "
            "(use --dichotomize to collapse levels above 0)"
        )
    return Dataset.from_arrays(
        np.array(y), np.array(t), z_arr, np.array(w), np.array(cluster, dtype=object),
        k_levels=levels, family=family,
    )


# --------------------------------------------------------------------------
# fit serialization
# --------------------------------------------------------------------------

def _params_to_dict(p: ModelParams) -> dict:
    return {
        "k_levels": p.grid.k_levels,
        "probs": p.probs.tolist(),
        "locations": p.locations.tolist(),
        "scales": p.scales.tolist(),
        "family": p.family.value,
        "mean_structure": p.mean_structure.value,
    }


def _params_from_dict(d: dict) -> ModelParams:
    from .core import MeanStructure

    return ModelParams(
        grid=StrataGrid(int(d["k_levels"])),
        probs=np.array(d["probs"]),
        locations=np.array(d["locations"]),
        scales=np.array(d["scales"]),
        family=Family(d["family"]),
        mean_structure=MeanStructure(d["mean_structure"]),
    )


def save_fit(path: str, result: FitResult, data_options: dict) -> None:
    payload = {
        "data_options": data_options,
        "params": _params_to_dict(result.params),
        "loglik": result.loglik,
        "mapping_id": result.mapping_id,
        "iterations": result.iterations,
        "converged": result.converged,
        "tie_ids": list(result.tie_ids),
        "scale_floor": list(result.scale_floor),
        "floor_active": list(result.floor_active),
        "frozen": [list(f) for f in result.frozen],
        "trace": [
            {
                "mapping_id": r.mapping_id,
                "loglik": r.loglik,
                "iterations": r.iterations,
                "converged": r.converged,
                "params": _params_to_dict(r.params),
            }
            for r in result.trace
        ],
    }
    _write_json(path, payload)


def load_fit(path: str) -> tuple[FitResult, dict]:
    if not os.path.exists(path):
        raise DataError(f"fit file not found: {path}")
    try:
        with open(path) as fh:
            payload = json.load(fh)
        params = _params_from_dict(payload["params"])
        trace = tuple(
            StartRecord(
                mapping_id=int(r["mapping_id"]),
                loglik=float(r["loglik"]),
                params=_params_from_dict(r["params"]),
                iterations=int(r["iterations"]),
                converged=bool(r["converged"]),
                floor_active=(False, False),
                frozen=(),
            )
            for r in payload["trace"]
        )
        result = FitResult(
            params=params,
            loglik=float(payload["loglik"]),
            posterior=np.zeros((0, params.grid.n_strata)),
            mapping_id=int(payload["mapping_id"]),
            iterations=int(payload["iterations"]),
            converged=bool(payload["converged"]),
            trace=trace,
            tie_ids=tuple(payload["tie_ids"]),
            scale_floor=tuple(payload["scale_floor"]),
            floor_active=tuple(payload["floor_active"]),
            frozen=tuple(tuple(f) for f in payload["frozen"]),
        )
        return result, payload["data_options"]
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"invalid fit file {path}: {exc}") from None


# --------------------------------------------------------------------------
# shared writers
# --------------------------------------------------------------------------

def _write_effects(path: str, table: EffectTable) -> None:
    rows = table.rows()
    header = list(rows[0].keys())
    _write_csv(path, header, [[r[h] for h in header] for r in rows])


def _write_trace(path: str, result: FitResult) -> None:
    rows = solution_trace_table(result)
    header = list(rows[0].keys())
    _write_csv(path, header, [[r[h] for h in header] for r in rows])


def _write_histogram(path: str, result: FitResult, dataset: Dataset) -> None:
    hists = posterior_histogram(result, dataset)
    rows = []
    for h in hists:
        for b in range(len(h.counts)):
            rows.append(
                [h.t, h.z, h.stratum[0], h.stratum[1],
                 float(h.edges[b]), float(h.edges[b + 1]), int(h.counts[b])]
            )
    _write_csv(
        path,
        ["t", "z", "stratum_z0", "stratum_z1", "bin_lo", "bin_hi", "count"],
        rows,
    )


def _write_marginals(path: str, result: FitResult, dataset: Dataset) -> None:
    table = marginal_fit_table(result, dataset)
    rows = [[r.arm, r.quantity, r.predicted, r.observed] for r in table.rows]
    for arm in table.excluded_arms:
        rows.append([arm, "excluded_zero_weight_arm", None, None])
    _write_csv(path, ["arm", "quantity", "predicted", "observed"], rows)


def _write_params(path: str, result: FitResult, se_naive, se_cluster) -> None:
    names = param_names(result.params)
    values = np.concatenate(
        [result.params.probs, result.params.locations.ravel(), result.params.scales]
    )
    rows = []
    for i, name in enumerate(names):
        rows.append(
            [name, float(values[i]),
             None if se_naive is None else float(se_naive[i]),
             None if se_cluster is None else float(se_cluster[i])]
        )
    _write_csv(path, ["name", "value", "se_naive", "se_cluster"], rows)


def _diagnostics_files(out_dir: str, result: FitResult, dataset: Dataset) -> dict:
    paths = {
        "trace": os.path.join(out_dir, "trace.csv"),
        "posterior_hist": os.path.join(out_dir, "posterior_hist.csv"),
        "marginal_fit": os.path.join(out_dir, "marginal_fit.csv"),
    }
    _write_trace(paths["trace"], result)
    _write_histogram(paths["posterior_hist"], result, dataset)
    _write_marginals(paths["marginal_fit"], result, dataset)
    return paths


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_fit(args) -> int:
    family = Family(args.family)
    levels = 2 if args.dichotomize else args.levels
    dataset = read_dataset(args.data, levels, args.dichotomize, family)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    config = FitConfig(
        tol=args.tol, max_iter=args.max_iter, starts=parse_starts(args.starts)
    )
    from .core import MeanStructure

    structure = MeanStructure(args.mean_structure)
    try:
        result = fit(dataset, family, structure, config)
    except ConvergenceError as exc:
        _write_json(
            os.path.join(out_dir, "summary.json"),
            {"command": "fit", "converged": False, "error": str(exc)},
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    table = treatment_effects(result)
    se_note = None
    nat_naive = nat_cluster = None
    try:
        cov_n = observed_information_se(result, dataset)
        se, se_obs, _ = effect_ses(result, cov_n)
        table = replace(table, se_naive=se, se_naive_observed=se_obs)
        nat_naive = natural_param_ses(result, cov_n)
        cov_c = cluster_sandwich_se(result, dataset, bread=cov_n)
        se, se_obs, _ = effect_ses(result, cov_c)
        table = replace(table, se_cluster=se, se_cluster_observed=se_obs)
        nat_cluster = natural_param_ses(result, cov_c)
    except (InferenceError, EstimationError) as exc:
        se_note = str(exc)

    data_options = {
        "data": os.path.abspath(args.data),
        "levels": levels,
        "dichotomize": bool(args.dichotomize),
        "family": family.value,
        "mean_structure": structure.value,
    }
    paths = {
        "params": os.path.join(out_dir, "params.csv"),
        "effects": os.path.join(out_dir, "effects.csv"),
        "fit": os.path.join(out_dir, "fit.json"),
        "summary": os.path.join(out_dir, "summary.json"),
    }
    _write_params(paths["params"], result, nat_naive, nat_cluster)
    _write_effects(paths["effects"], table)
    paths.update(_diagnostics_files(out_dir, result, dataset))
    save_fit(paths["fit"], result, data_options)

    summary = {
        "command": "fit",
        "n_cases": dataset.n,
        "n_clusters": dataset.n_clusters,
        "ess": {str(t): effective_sample_size(dataset, t) for t in (0, 1)},
        "loglik": result.loglik,
        "converged": result.converged,
        "mapping_id": result.mapping_id,
        "tie_ids": list(result.tie_ids),
        "iterations": result.iterations,
        "n_starts": len(result.trace),
        "effects": table.rows(),
        "se_error": se_note,
        "files": {k: os.path.abspath(v) for k, v in paths.items()},
    }
    _write_json(paths["summary"], summary)
    print(f"fit converged: loglik={result.loglik!r}, mapping={result.mapping_id}, "
          f"outputs in {out_dir}")
    if se_note:
        print(f"standard errors unavailable: {se_note}", file=sys.stderr)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    result, data_options = load_fit(args.fit)
    data_path = args.data or data_options.get("data")
    if not data_path:
        raise DataError("no dataset path given and none recorded in the fit file")
    dataset = read_dataset(
        data_path,
        int(data_options["levels"]),
        bool(data_options["dichotomize"]),
        Family(data_options["family"]),
    )
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = _diagnostics_files(out_dir, result, dataset)
    print(f"diagnostics written to {out_dir}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

_CONFIG_LIST_KEYS = {"n_per_arm", "dispersion_sd", "prob_scenario", "shapes"}
_CONFIG_KEYS = _CONFIG_LIST_KEYS | {
    "replicates", "k_levels", "effect", "sigma", "shape", "starts", "tol", "max_iter",
}


def read_sim_config(path: str, seed: int) -> tuple[list[SimConfig], list[tuple[str, float | None]] | None]:
    """Parse the key=value grid file into the config cross product.

    Grid keys (comma lists allowed): n_per_arm, dispersion_sd, prob_scenario.
    A ``shapes`` list switches to the misspecification study, always fitting
    the normal family and pairing each shape with the normal baseline.
    """
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    raw: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            if not sep:
                key, sep, value = text.partition(":")
            if not sep:
                raise DataError(f"config line {lineno}: expected key = value")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise DataError(f"config line {lineno}: unknown key '{key}'")
            raw[key] = value.strip()
    try:
        n_list = [int(v) for v in raw.get("n_per_arm", "1000").split(",")]
        d_list = [float(v) for v in raw.get("dispersion_sd", "1.6").split(",")]
        p_list = [v.strip() for v in raw.get("prob_scenario", "unequal").split(",")]
        base = dict(
            k_levels=int(raw.get("k_levels", "2")),
            effect=float(raw.get("effect", "2.0")),
            sigma=float(raw.get("sigma", "1.0")),
            replicates=int(raw.get("replicates", "100")),
            starts=parse_starts(raw.get("starts", "all")),
            tol=float(raw.get("tol", "1e-9")),
            max_iter=int(raw.get("max_iter", "2000")),
            seed=seed,
        )
        shape, shape_param = parse_shape(raw.get("shape", "normal"))
        shapes = None
        if "shapes" in raw:
            shapes = [parse_shape(v.strip()) for v in raw["shapes"].split(",")]
        configs = [
            SimConfig(
                n_per_arm=n, dispersion_sd=d, prob_scenario=p,
                shape=shape, shape_param=shape_param, **base,
            )
            for n in n_list
            for d in d_list
            for p in p_list
        ]
    except ValueError as exc:
        raise DataError(f"invalid config value: {exc}") from None
    return configs, shapes


_REP_FIXED = ["n_per_arm", "dispersion_sd", "prob_scenario", "shape", "replicate",
              "ok", "error", "loglik", "mapping_id", "label_correct", "n_near_ties"]


def _replicate_rows(report: RecoveryReport) -> list[list]:
    cfg = report.config
    label = shape_label(cfg.shape, cfg.shape_param)
    truth = report.truth
    strata = truth.grid.strata
    true_table = truth.location_table()
    rows = []
    for r in report.replicates:
        row = [cfg.n_per_arm, cfg.dispersion_sd, cfg.prob_scenario, label,
               r.index, r.ok, r.error, r.loglik, r.mapping_id, r.label_correct,
               r.n_near_ties]
        for s in range(len(strata)):
            for t in (0, 1):
                if r.ok:
                    row.append(float(true_table[s, t] + r.location_error[s, t]))
                else:
                    row.append(None)
                row.append(float(true_table[s, t]))
        for s in range(len(strata)):
            row.append(float(truth.probs[s] + r.prob_error[s]) if r.ok else None)
            row.append(float(truth.probs[s]))
        rows.append(row)
    return rows


def _replicate_header(k_levels: int) -> list[str]:
    grid = StrataGrid(k_levels)
    header = list(_REP_FIXED)
    for z0, z1 in grid.strata:
        for t in (0, 1):
            header += [f"loc_z0{z0}_z1{z1}_t{t}", f"true_loc_z0{z0}_z1{z1}_t{t}"]
    for z0, z1 in grid.strata:
        header += [f"p_z0{z0}_z1{z1}", f"true_p_z0{z0}_z1{z1}"]
    return header


def _nanmax(arr: np.ndarray) -> float:
    if np.all(np.isnan(arr)):
        return float("nan")
    return float(np.nanmax(arr))


def _summary_row(report: RecoveryReport) -> list:
    cfg = report.config
    return [
        cfg.n_per_arm, cfg.dispersion_sd, cfg.prob_scenario,
        shape_label(cfg.shape, cfg.shape_param), cfg.replicates,
        report.n_failed, report.fraction_label_correct, report.near_tie_fraction,
        report.prob_mae, _nanmax(report.location_rmse(correct_only=False)),
        _nanmax(report.location_rmse(correct_only=True)),
    ]


_SUMMARY_HEADER = [
    "n_per_arm", "dispersion_sd", "prob_scenario", "shape", "replicates",
    "n_failed", "fraction_label_correct", "near_tie_fraction", "prob_mae",
    "location_rmse_max", "location_rmse_correct_max",
]


def cmd_simulate(args) -> int:
    configs, shapes = read_sim_config(args.config, args.seed)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    reports: list[RecoveryReport] = []
    studies: list[MisspecStudy] = []
    if shapes is None:
        reports = run_grid(configs)
    else:
        for cfg in configs:
            study = misspecification_study(cfg, shapes)
            studies.append(study)
            reports.append(study.baseline)
            reports.extend(study.shaped.values())

    k_levels = configs[0].k_levels
    rep_rows = []
    sum_rows = []
    for report in reports:
        rep_rows += _replicate_rows(report)
        sum_rows.append(_summary_row(report))
    rep_path = os.path.join(out_dir, "replicates.csv")
    sum_path = os.path.join(out_dir, "summary.csv")
    _write_csv(rep_path, _replicate_header(k_levels), rep_rows)
    _write_csv(sum_path, _SUMMARY_HEADER, sum_rows)

    payload = {
        "command": "simulate",
        "seed": args.seed,
        "n_configs": len(configs),
        "files": {"replicates": os.path.basename(rep_path),
                  "summary": os.path.basename(sum_path)},
    }
    if studies:
        payload["misspecification"] = [
            {
                "n_per_arm": st.baseline.config.n_per_arm,
                "dispersion_sd": st.baseline.config.dispersion_sd,
                "prob_scenario": st.baseline.config.prob_scenario,
                "baseline_label_correct": st.baseline.fraction_label_correct,
                "degradation": {lbl: st.degradation(lbl) for lbl in st.shaped},
            }
            for st in studies
        ]
    _write_json(os.path.join(out_dir, "grid_summary.json"), payload)
    print(f"simulation outputs in {out_dir} ({len(reports)} report(s))")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratfit",
        description="Principal-stratum mixture models for outcomes suppressed "
                    "by institutionalization at follow-up.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the strata mixture to a CSV dataset")
    p_fit.add_argument("data", help="CSV with columns y,t,z[,w,cluster]")
    p_fit.add_argument("--family", choices=["normal", "tobit"], default="normal")
    p_fit.add_argument("--levels", type=int, choices=[2, 3], default=2)
    p_fit.add_argument("--dichotomize", action="store_true",
                       help="collapse z > 0 to 1 before fitting (implies --levels 2)")
    p_fit.add_argument("--mean-structure", choices=["saturated", "linear"],
                       default="saturated")
    p_fit.add_argument("--tol", type=float, default=1e-9)
    p_fit.add_argument("--max-iter", type=int, default=2000)
    p_fit.add_argument("--starts", default="all",
                       help="'all', 'topk:N' or 'spread:N' (default all)")
    p_fit.add_argument("--out-dir", default=".")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run parameter-recovery studies")
    p_sim.add_argument("config", help="key=value grid file")
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out-dir", default=".")
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = sub.add_parser("diagnose",
                            help="regenerate diagnostics from a saved fit")
    p_diag.add_argument("--fit", required=True, help="fit.json from a previous run")
    p_diag.add_argument("--data", default=None,
                        help="dataset CSV (defaults to the path recorded in the fit)")
    p_diag.add_argument("--out-dir", default=".")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EstimationError, InferenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StratfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
