"""Command-line interface: fit, simulate, benchmark, predict, metrics, edges.

Data files are CSV with rows as observations and columns as variables; an
optional header row is auto-detected by a non-numeric first line. Multi-study
input is a JSON manifest {"studies": ["a.csv", ...]}. Exit codes: 0 success,
2 usage/config errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import serialize
from .fa_cavi import fit_fa_cavi
from .fa_svi import fit_fa_svi
from .metrics import (
    export_edges,
    mse,
    node_degrees,
    predict,
    reconstruct_sigma_fa,
    reconstruct_sigma_msfa,
    rv_coefficient,
)
from .model import (
    ConfigError,
    Dataset,
    DimensionError,
    FaHyperParams,
    FaState,
    FitConfig,
    MsfaHyperParams,
    MsfaState,
    MultiStudyDataset,
    NumericalError,
    PreconditionError,
    SviConfig,
)
from .msfa_cavi import fit_msfa_cavi
from .msfa_svi import fit_msfa_svi
from .simulate import (
    generate_fa_truth,
    generate_msfa_truth,
    sample_fa_dataset,
    sample_msfa_dataset,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# Data ingestion
# ---------------------------------------------------------------------------

def _is_numeric_row(tokens) -> bool:
    try:
        for tok in tokens:
            float(tok)
        return True
    except ValueError:
        return False


def read_csv_matrix(path) -> tuple[np.ndarray, list[str] | None]:
    """Load a CSV observation matrix; a non-numeric first line is a header."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ConfigError(f"{path}: empty data file")
    names = None
    if not _is_numeric_row(rows[0]):
        names = [tok.strip() for tok in rows[0]]
        rows = rows[1:]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    try:
        x = np.asarray([[float(tok) for tok in row] for row in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry in data rows ({exc})") from None
    return x, names


def write_csv_matrix(path, x, names=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if names is not None:
            writer.writerow(names)
        for row in np.atleast_2d(x):
            writer.writerow([format(float(v), ".17g") for v in row])


def _read_manifest(path) -> list[str]:
    with open(path) as fh:
        doc = json.load(fh)
    studies = doc.get("studies")
    if not isinstance(studies, list) or not studies:
        raise ConfigError(f"{path}: manifest needs a non-empty 'studies' list")
    base = Path(path).parent
    return [str(base / s) if not Path(s).is_absolute() else s for s in studies]


def filter_top_variance(matrices: list[np.ndarray], fraction: float) -> np.ndarray:
    """Columns whose variance is in the top `fraction` in at least one study."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"--filter-top-var must lie in (0, 1], got {fraction}")
    keep = np.zeros(matrices[0].shape[1], dtype=bool)
    for x in matrices:
        variances = x.var(axis=0)
        cutoff = np.quantile(variances, 1.0 - fraction)
        keep |= variances >= cutoff
    return keep


def _load_single(args) -> Dataset:
    x, _ = read_csv_matrix(args.data)
    if args.filter_top_var is not None:
        keep = filter_top_variance([x], args.filter_top_var)
        x = x[:, keep]
    return Dataset.preprocess(x, center=args.center, scale=args.scale)


def _load_multi(args) -> MultiStudyDataset:
    paths = _read_manifest(args.data)
    mats = [read_csv_matrix(p)[0] for p in paths]
    widths = {m.shape[1] for m in mats}
    if len(widths) > 1:
        raise DimensionError(f"studies disagree on column count: {sorted(widths)}")
    if args.filter_top_var is not None:
        keep = filter_top_variance(mats, args.filter_top_var)
        mats = [m[:, keep] for m in mats]
    return MultiStudyDataset(
        [Dataset.preprocess(m, center=args.center, scale=args.scale) for m in mats])


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_config(args) -> FitConfig:
    svi = None
    if args.algo == "svi":
        svi = SviConfig(batch_fraction=args.batch, kappa=args.kappa, delay=args.delay)
    return FitConfig(max_iter=args.max_iter, tol=args.tol, seed=args.seed,
                     svi=svi, track_elbo=args.track_elbo)


def cmd_fit(args) -> int:
    config = _fit_config(args)
    if args.model == "fa":
        if args.jstar is None:
            raise ConfigError("--jstar is required for --model fa")
        data = _load_single(args)
        hyper = FaHyperParams(j_star=args.jstar, nu=args.nu, a1=args.a1, a2=args.a2,
                              a_psi=args.a_psi, b_psi=args.b_psi)
        fit = fit_fa_cavi if args.algo == "cavi" else fit_fa_svi
        result = fit(data, hyper, config)
    else:
        if args.jstar is None or args.kstar is None:
            raise ConfigError("--jstar and --kstar are required for --model msfa")
        data = _load_multi(args)
        hyper = MsfaHyperParams.symmetric(
            data.n_studies, args.kstar, args.jstar, nu=args.nu, a1=args.a1,
            a2=args.a2, a_psi=args.a_psi, b_psi=args.b_psi)
        fit = fit_msfa_cavi if args.algo == "cavi" else fit_msfa_svi
        result = fit(data, hyper, config)
    serialize.save_fit_result(result, args.out)
    print(f"wrote {args.out}: converged={result.converged} "
          f"iterations={result.iterations} seconds={result.elapsed_seconds:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.model == "fa":
        if args.p is None or args.n is None or args.j is None:
            raise ConfigError("fa simulation needs --p, --n and --j")
        truth = generate_fa_truth(args.p, args.j, args.seed)
        data = sample_fa_dataset(truth, args.n, args.seed + 1)
        write_csv_matrix(outdir / "data.csv", data.x)
        truth_doc = {"model": "fa", "loadings": truth.loadings, "psi": truth.psi}
    else:
        if args.p is None or args.ns is None or args.k is None:
            raise ConfigError("msfa simulation needs --p, --ns and --k")
        n_s = [int(v) for v in args.ns.split(",")]
        j_s = [int(v) for v in args.js.split(",")] if args.js else [args.k] * len(n_s)
        truth = generate_msfa_truth(len(n_s), args.p, args.k, j_s, args.seed)
        data = sample_msfa_dataset(truth, n_s, args.seed + 1)
        files = []
        for s, study in enumerate(data.studies):
            name = f"study_{s:02d}.csv"
            write_csv_matrix(outdir / name, study.x)
            files.append(name)
        with open(outdir / "manifest.json", "w") as fh:
            json.dump({"studies": files}, fh)
        truth_doc = {"model": "msfa", "phi": truth.phi,
                     "lambdas": truth.lambdas, "psis": truth.psis}
    with open(outdir / "truth.json", "w") as fh:
        fh.write(serialize.dumps(truth_doc))
        fh.write("\n")
    print(f"wrote simulated data and truth.json to {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _peak_rss_mb():
    try:
        import resource

        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        # ru_maxrss is KiB on Linux, bytes on macOS.
        return peak / 1024.0 if sys.platform.startswith("linux") else peak / (1024.0 ** 2)
    except Exception:
        return None


def _benchmark_cell(spec, cell, replicates):
    """Run one grid cell; every replicate derives its seeds from (seed, cell id)."""
    model = spec["model"]
    seconds, rvs, iters = [], [], []
    for rep in range(replicates):
        root = np.random.SeedSequence(entropy=spec.get("seed", 0),
                                      spawn_key=(cell["index"], rep))
        truth_seed, data_seed, fit_seed = (int(s.generate_state(1)[0])
                                           for s in root.spawn(3))
        config = FitConfig(max_iter=spec.get("max_iter"), tol=spec.get("tol", 1e-6),
                           seed=fit_seed, svi=cell["svi"])
        if model == "fa":
            truth = generate_fa_truth(cell["p"], spec.get("j", 4), truth_seed)
            raw = sample_fa_dataset(truth, cell["n"], data_seed)
            data = Dataset.preprocess(raw.x, center=True, scale=False)
            hyper = FaHyperParams(j_star=spec.get("jstar", 5))
            fit = fit_fa_cavi if cell["svi"] is None else fit_fa_svi
            result = fit(data, hyper, config)
            rv = rv_coefficient(reconstruct_sigma_fa(result.state), truth.sigma())
        else:
            s_count = cell["s"]
            truth = generate_msfa_truth(s_count, cell["p"], spec.get("k", 4),
                                        [spec.get("j", 4)] * s_count, truth_seed)
            raw = sample_msfa_dataset(truth, [cell["n"]] * s_count, data_seed)
            data = MultiStudyDataset(
                [Dataset.preprocess(st.x, center=True, scale=False) for st in raw.studies])
            hyper = MsfaHyperParams.symmetric(s_count, spec.get("kstar", 5),
                                              spec.get("jstar", 5))
            fit = fit_msfa_cavi if cell["svi"] is None else fit_msfa_svi
            result = fit(data, hyper, config)
            rv = float(np.mean([
                rv_coefficient(reconstruct_sigma_msfa(result.state, s), truth.sigma(s))
                for s in range(s_count)]))
        seconds.append(result.elapsed_seconds)
        rvs.append(rv)
        iters.append(result.iterations)

    def stats(values):
        arr = np.asarray(values, dtype=float)
        return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0

    row = {
        "model": model, "p": cell["p"], "n": cell["n"],
        "s": cell.get("s"), "algorithm": cell["label"],
        "batch_fraction": cell["fraction"],
        "batch_size": (None if cell["fraction"] is None
                       else int(np.floor(cell["fraction"] * cell["n"]))),
        "replicates": replicates,
    }
    row["seconds_mean"], row["seconds_sd"] = stats(seconds)
    row["rv_mean"], row["rv_sd"] = stats(rvs)
    row["iterations_mean"], row["iterations_sd"] = stats(iters)
    row["peak_rss_mb"] = _peak_rss_mb()
    return row


def cmd_benchmark(args) -> int:
    with open(args.scenarios) as fh:
        spec = json.load(fh)
    model = spec.get("model")
    if model not in ("fa", "msfa"):
        raise ConfigError("scenario grid needs \"model\": \"fa\" or \"msfa\"")
    p_list = spec.get("p") or []
    n_list = spec.get("n") or spec.get("n_s") or []
    s_list = spec.get("s") or ([None] if model == "fa" else [])
    algorithms = spec.get("algorithms") or ["cavi"]
    fractions = spec.get("batch_fractions") or [0.5]
    replicates = int(spec.get("replicates", 1))
    if not p_list or not n_list or not s_list or replicates < 1:
        raise ConfigError("scenario grid needs non-empty p, n(/n_s), s lists "
                          "and replicates >= 1")

    variants = []
    for algo in algorithms:
        if algo == "cavi":
            variants.append(("cavi", None))
        elif algo == "svi":
            variants.extend((f"svi-{b:g}", b) for b in fractions)
        else:
            raise ConfigError(f"unknown algorithm {algo!r} in scenario grid")

    kappa = spec.get("kappa", 0.75)
    delay = spec.get("delay", 1.0)
    cells = []
    for index, (p, n, s, (label, frac)) in enumerate(
            itertools.product(p_list, n_list, s_list, variants)):
        svi = None if frac is None else SviConfig(batch_fraction=frac,
                                                  kappa=kappa, delay=delay)
        cells.append({"index": index, "p": int(p), "n": int(n),
                      "s": None if s is None else int(s),
                      "label": label, "fraction": frac, "svi": svi})

    workers = max(1, int(os.environ.get("VBFACTOR_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda c: _benchmark_cell(spec, c, replicates), cells))
    else:
        rows = [_benchmark_cell(spec, c, replicates) for c in cells]

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with open(outdir / "benchmark.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    with open(outdir / "benchmark.json", "w") as fh:
        fh.write(serialize.dumps({"scenario": Path(args.scenarios).name, "cells": rows}))
        fh.write("\n")
    print(f"wrote {len(rows)} benchmark cells to {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict (with optional k-fold cross-validation)
# ---------------------------------------------------------------------------

def _fold_assignments(n, k, rng) -> np.ndarray:
    folds = np.tile(np.arange(k), int(np.ceil(n / k)))[:n]
    return folds[rng.permutation(n)]


def _cv_fa(args, x) -> list[float]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(0,)))
    folds = _fold_assignments(x.shape[0], args.cv, rng)
    hyper = FaHyperParams(j_star=args.jstar, nu=args.nu, a1=args.a1, a2=args.a2,
                          a_psi=args.a_psi, b_psi=args.b_psi)
    fit = fit_fa_cavi if args.algo == "cavi" else fit_fa_svi
    per_fold = []
    for fold in range(args.cv):
        train = Dataset.preprocess(x[folds != fold], center=args.center, scale=args.scale)
        result = fit(train, hyper, _fit_config(args))
        held = x[folds == fold]
        if args.center:
            held = held - train.column_means
        if args.scale:
            held = held / np.where(train.column_sds > 1e-12, train.column_sds, 1.0)
        per_fold.append(mse(held, predict("stacked", result.state, held)))
    return per_fold


def _cv_msfa(args, mats) -> list[float]:
    folds = []
    for s, m in enumerate(mats):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed,
                                                           spawn_key=(s,)))
        folds.append(_fold_assignments(m.shape[0], args.cv, rng))
    hyper = MsfaHyperParams.symmetric(len(mats), args.kstar, args.jstar, nu=args.nu,
                                      a1=args.a1, a2=args.a2, a_psi=args.a_psi,
                                      b_psi=args.b_psi)
    fit = fit_msfa_cavi if args.algo == "cavi" else fit_msfa_svi
    per_fold = []
    for fold in range(args.cv):
        trains = [Dataset.preprocess(m[f != fold], center=args.center, scale=args.scale)
                  for m, f in zip(mats, folds)]
        result = fit(MultiStudyDataset(trains), hyper, _fit_config(args))
        errors, count = 0.0, 0
        for s, (m, f) in enumerate(zip(mats, folds)):
            held = m[f == fold]
            if held.shape[0] == 0:
                continue
            if args.center:
                held = held - trains[s].column_means
            if args.scale:
                held = held / np.where(trains[s].column_sds > 1e-12,
                                       trains[s].column_sds, 1.0)
            x_hat = predict("msfa", result.state, held, study=s)
            errors += np.sum((held - x_hat) ** 2)
            count += held.shape[0]
        per_fold.append(float(errors / count))
    return per_fold


def cmd_predict(args) -> int:
    if args.cv is not None:
        if args.cv < 2:
            raise ConfigError("--cv needs at least 2 folds")
        if args.model is None or args.jstar is None:
            raise ConfigError("--cv mode needs --model and truncation flags")
        if args.model == "msfa" and args.kstar is None:
            raise ConfigError("--cv with --model msfa needs --kstar")
        if args.model == "fa":
            x, _ = read_csv_matrix(args.data)
            per_fold = _cv_fa(args, x)
        else:
            mats = [read_csv_matrix(p)[0] for p in _read_manifest(args.data)]
            per_fold = _cv_msfa(args, mats)
        arr = np.asarray(per_fold)
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "mse"])
            for fold, value in enumerate(per_fold):
                writer.writerow([fold, format(value, ".17g")])
            writer.writerow(["mean(sd)",
                             f"{arr.mean():.6g}({arr.std(ddof=1):.6g})"])
        print(f"cv mse mean={arr.mean():.6g} sd={arr.std(ddof=1):.6g} -> {args.out}")
        return EXIT_OK

    result = serialize.load_fit_result(args.state)
    x, _ = read_csv_matrix(args.data)
    x_hat = predict(args.mode, result.state, x, study=args.study)
    write_csv_matrix(args.out, x_hat)
    report = {"mode": args.mode, "mse": mse(x, x_hat), "n": int(x.shape[0])}
    with open(str(args.out) + ".mse.json", "w") as fh:
        fh.write(serialize.dumps(report))
        fh.write("\n")
    print(f"wrote predictions to {args.out} (mse={report['mse']:.6g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics / edges
# ---------------------------------------------------------------------------

def cmd_metrics(args) -> int:
    result = serialize.load_fit_result(args.state)
    with open(args.truth) as fh:
        truth = json.load(fh)
    state = result.state
    if isinstance(state, FaState):
        if truth.get("model") != "fa":
            raise ConfigError("state is single-study but truth.json is not")
        lam = np.asarray(truth["loadings"], dtype=float)
        sigma = lam @ lam.T + np.diag(np.asarray(truth["psi"], dtype=float))
        values = [rv_coefficient(reconstruct_sigma_fa(state), sigma)]
    else:
        if truth.get("model") != "msfa":
            raise ConfigError("state is multi-study but truth.json is not")
        phi = np.asarray(truth["phi"], dtype=float)
        values = []
        for s in range(state.n_studies):
            lam = np.asarray(truth["lambdas"][s], dtype=float)
            psi = np.asarray(truth["psis"][s], dtype=float)
            sigma = phi @ phi.T + lam @ lam.T + np.diag(psi)
            values.append(rv_coefficient(reconstruct_sigma_msfa(state, s), sigma))
    report = {"rv": values, "rv_mean": float(np.mean(values))}
    with open(args.out, "w") as fh:
        fh.write(serialize.dumps(report))
        fh.write("\n")
    print(f"rv_mean={report['rv_mean']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_edges(args) -> int:
    result = serialize.load_fit_result(args.state)
    state = result.state
    if isinstance(state, MsfaState):
        cov = state.phi_mean @ state.phi_mean.T
    else:
        cov = state.load_mean @ state.load_mean.T
    names = None
    if args.names:
        with open(args.names) as fh:
            names = [line.strip() for line in fh if line.strip()]
    edges = export_edges(cov, threshold=args.threshold, names=names)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "target", "weight"])
        for source, target, weight in edges:
            writer.writerow([source, target, format(weight, ".17g")])
    if args.degrees:
        with open(args.degrees, "w") as fh:
            fh.write(serialize.dumps({"degrees": node_degrees(edges)}))
            fh.write("\n")
    print(f"wrote {len(edges)} edges to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_fit_flags(sub):
    sub.add_argument("--jstar", type=int, default=None,
                     help="truncation for the (study-specific) loading matrices")
    sub.add_argument("--kstar", type=int, default=None,
                     help="truncation for the shared loading matrix (msfa)")
    sub.add_argument("--batch", type=float, default=0.5,
                     help="SVI batch fraction in (0, 1]")
    sub.add_argument("--kappa", type=float, default=0.75, help="SVI forgetting rate")
    sub.add_argument("--delay", type=float, default=1.0, help="SVI schedule delay")
    sub.add_argument("--tol", type=float, default=1e-6,
                     help="convergence tolerance on the mean squared parameter change")
    sub.add_argument("--max-iter", type=int, default=None)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--center", action=argparse.BooleanOptionalAction, default=True)
    sub.add_argument("--scale", action=argparse.BooleanOptionalAction, default=False)
    sub.add_argument("--filter-top-var", type=float, default=None,
                     help="keep columns with variance in the top fraction in >= 1 study")
    sub.add_argument("--track-elbo", action="store_true")
    sub.add_argument("--nu", type=float, default=3.0)
    sub.add_argument("--a1", type=float, default=2.1)
    sub.add_argument("--a2", type=float, default=3.1)
    sub.add_argument("--a-psi", type=float, default=1.0)
    sub.add_argument("--b-psi", type=float, default=0.3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vbfactor",
        description="Variational Bayes for single- and multi-study factor analysis")
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="fit a model to CSV data")
    fit.add_argument("--model", choices=["fa", "msfa"], required=True)
    fit.add_argument("--algo", choices=["cavi", "svi"], required=True)
    fit.add_argument("--data", required=True,
                     help="CSV for fa, JSON manifest for msfa")
    fit.add_argument("--out", required=True, help="output fit-result JSON")
    _add_common_fit_flags(fit)
    fit.set_defaults(func=cmd_fit)

    sim = subs.add_parser("simulate", help="generate benchmark data and truth")
    sim.add_argument("--model", choices=["fa", "msfa"], required=True)
    sim.add_argument("--p", type=int, default=None)
    sim.add_argument("--n", type=int, default=None, help="observations (fa)")
    sim.add_argument("--ns", type=str, default=None,
                     help="comma-separated per-study observations (msfa)")
    sim.add_argument("--j", type=int, default=None, help="true factors (fa)")
    sim.add_argument("--k", type=int, default=None, help="true shared factors (msfa)")
    sim.add_argument("--js", type=str, default=None,
                     help="comma-separated true study-specific factors (msfa)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--outdir", required=True)
    sim.set_defaults(func=cmd_simulate)

    bench = subs.add_parser("benchmark", help="run a scenario grid")
    bench.add_argument("--scenarios", required=True, help="grid spec JSON")
    bench.add_argument("--outdir", required=True)
    bench.set_defaults(func=cmd_benchmark)

    pred = subs.add_parser("predict", help="Bartlett prediction, optionally k-fold CV")
    pred.add_argument("--state", default=None, help="fit-result JSON (non-CV mode)")
    pred.add_argument("--data", required=True)
    pred.add_argument("--mode", choices=["msfa", "stacked", "independent"],
                      default="stacked")
    pred.add_argument("--study", type=int, default=None)
    pred.add_argument("--out", required=True)
    pred.add_argument("--cv", type=int, default=None,
                      help="run k-fold cross-validation (refits per fold)")
    pred.add_argument("--model", choices=["fa", "msfa"], default=None)
    pred.add_argument("--algo", choices=["cavi", "svi"], default="cavi")
    _add_common_fit_flags(pred)
    pred.set_defaults(func=cmd_predict)

    met = subs.add_parser("metrics", help="RV accuracy of a fit against truth")
    met.add_argument("--state", required=True)
    met.add_argument("--truth", required=True)
    met.add_argument("--out", required=True)
    met.set_defaults(func=cmd_metrics)

    edges = subs.add_parser("edges", help="export thresholded co-expression edges")
    edges.add_argument("--state", required=True)
    edges.add_argument("--threshold", type=float, default=0.5)
    edges.add_argument("--out", required=True)
    edges.add_argument("--names", default=None, help="one node label per line")
    edges.add_argument("--degrees", default=None, help="optional degrees JSON")
    edges.set_defaults(func=cmd_edges)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error reading input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
