"""JSON serialization of states and fit results.

One document per state with top-level keys {"model", "dims", ...}; matrices
are row-major arrays of arrays and every real is written with 17 significant
digits, which round-trips float64 exactly (the round trip back to a state is
bit-identical).
"""

from __future__ import annotations

import json

import numpy as np

from .model import (
    ConfigError,
    FaHyperParams,
    FaState,
    FitResult,
    MsfaHyperParams,
    MsfaState,
    ShrinkagePrior,
)


def _format_real(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite real {x!r}")
    return format(float(x), ".17g")


def dumps(obj) -> str:
    """Deterministic JSON text with 17-significant-digit reals."""
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, dict):
        parts = (f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items())
        return "{" + ",".join(parts) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _gaussian_block(mean, cov):
    return {"mean": np.asarray(mean), "cov": np.asarray(cov)}


def _gamma_block(shape, rate):
    return {"shape": np.asarray(shape), "rate": np.asarray(rate)}


def _fa_hyper_dict(h: FaHyperParams) -> dict:
    return {"j_star": h.j_star, "nu": h.nu, "a1": h.a1, "a2": h.a2,
            "a_psi": h.a_psi, "b_psi": h.b_psi}


def _shrinkage_dict(b: ShrinkagePrior) -> dict:
    return {"truncation": b.truncation, "nu": b.nu, "a1": b.a1, "a2": b.a2}


def _msfa_hyper_dict(h: MsfaHyperParams) -> dict:
    return {"shared": _shrinkage_dict(h.shared),
            "per_study": [_shrinkage_dict(b) for b in h.per_study],
            "a_psi": h.a_psi, "b_psi": h.b_psi}


def state_to_dict(state) -> dict:
    if isinstance(state, FaState):
        return {
            "model": "fa",
            "dims": {"n": state.n, "p": state.p, "j_star": state.j_star},
            "hyper": _fa_hyper_dict(state.hyper),
            "loadings": _gaussian_block(state.load_mean, state.load_cov),
            "scores": _gaussian_block(state.score_mean, state.score_cov),
            "psi": _gamma_block(state.psi_shape, state.psi_rate),
            "omega": _gamma_block(state.omega_shape, state.omega_rate),
            "delta": _gamma_block(state.delta_shape, state.delta_rate),
        }
    if isinstance(state, MsfaState):
        return {
            "model": "msfa",
            "dims": {"s": state.n_studies, "n_s": list(state.n_per_study),
                     "p": state.p, "k_star": state.k_star,
                     "j_star": list(state.j_stars)},
            "hyper": _msfa_hyper_dict(state.hyper),
            "phi": _gaussian_block(state.phi_mean, state.phi_cov),
            "lambda": [_gaussian_block(m, c)
                       for m, c in zip(state.lam_mean, state.lam_cov)],
            "f_scores": [_gaussian_block(m, c)
                         for m, c in zip(state.f_mean, state.f_cov)],
            "l_scores": [_gaussian_block(m, c)
                         for m, c in zip(state.l_mean, state.l_cov)],
            "psi": _gamma_block(state.psi_shape, state.psi_rate),
            "omega_shared": _gamma_block(state.omega_shared_shape, state.omega_shared_rate),
            "delta_shared": _gamma_block(state.delta_shared_shape, state.delta_shared_rate),
            "omega_specific": [_gamma_block(a, b) for a, b in
                               zip(state.omega_specific_shape, state.omega_specific_rate)],
            "delta_specific": [_gamma_block(a, b) for a, b in
                               zip(state.delta_specific_shape, state.delta_specific_rate)],
        }
    raise TypeError(f"not a serializable state: {type(state).__name__}")


def _arr(obj) -> np.ndarray:
    return np.asarray(obj, dtype=float)


def state_from_dict(doc: dict):
    model = doc.get("model")
    if model == "fa":
        h = doc["hyper"]
        hyper = FaHyperParams(j_star=int(h["j_star"]), nu=h["nu"], a1=h["a1"],
                              a2=h["a2"], a_psi=h["a_psi"], b_psi=h["b_psi"])
        return FaState(
            hyper=hyper,
            load_mean=_arr(doc["loadings"]["mean"]), load_cov=_arr(doc["loadings"]["cov"]),
            score_mean=_arr(doc["scores"]["mean"]), score_cov=_arr(doc["scores"]["cov"]),
            psi_shape=_arr(doc["psi"]["shape"]), psi_rate=_arr(doc["psi"]["rate"]),
            omega_shape=_arr(doc["omega"]["shape"]), omega_rate=_arr(doc["omega"]["rate"]),
            delta_shape=_arr(doc["delta"]["shape"]), delta_rate=_arr(doc["delta"]["rate"]),
        )
    if model == "msfa":
        h = doc["hyper"]
        shared = ShrinkagePrior(truncation=int(h["shared"]["truncation"]),
                                nu=h["shared"]["nu"], a1=h["shared"]["a1"],
                                a2=h["shared"]["a2"])
        per_study = tuple(
            ShrinkagePrior(truncation=int(b["truncation"]), nu=b["nu"],
                           a1=b["a1"], a2=b["a2"])
            for b in h["per_study"])
        hyper = MsfaHyperParams(shared, per_study, a_psi=h["a_psi"], b_psi=h["b_psi"])
        return MsfaState(
            hyper=hyper,
            phi_mean=_arr(doc["phi"]["mean"]), phi_cov=_arr(doc["phi"]["cov"]),
            lam_mean=[_arr(b["mean"]) for b in doc["lambda"]],
            lam_cov=[_arr(b["cov"]) for b in doc["lambda"]],
            f_mean=[_arr(b["mean"]) for b in doc["f_scores"]],
            f_cov=[_arr(b["cov"]) for b in doc["f_scores"]],
            l_mean=[_arr(b["mean"]) for b in doc["l_scores"]],
            l_cov=[_arr(b["cov"]) for b in doc["l_scores"]],
            psi_shape=_arr(doc["psi"]["shape"]), psi_rate=_arr(doc["psi"]["rate"]),
            omega_shared_shape=_arr(doc["omega_shared"]["shape"]),
            omega_shared_rate=_arr(doc["omega_shared"]["rate"]),
            delta_shared_shape=_arr(doc["delta_shared"]["shape"]),
            delta_shared_rate=_arr(doc["delta_shared"]["rate"]),
            omega_specific_shape=[_arr(b["shape"]) for b in doc["omega_specific"]],
            omega_specific_rate=[_arr(b["rate"]) for b in doc["omega_specific"]],
            delta_specific_shape=[_arr(b["shape"]) for b in doc["delta_specific"]],
            delta_specific_rate=[_arr(b["rate"]) for b in doc["delta_specific"]],
        )
    raise ConfigError(f"unknown model kind in state document: {model!r}")


def fit_result_to_dict(result: FitResult) -> dict:
    return {
        "state": state_to_dict(result.state),
        "iterations": result.iterations,
        "converged": result.converged,
        "trace": result.trace,
        "elbo_trace": result.elbo_trace,
        "elapsed_seconds": result.elapsed_seconds,
    }


def fit_result_from_dict(doc: dict) -> FitResult:
    elbo = doc.get("elbo_trace")
    return FitResult(
        state=state_from_dict(doc["state"]),
        iterations=int(doc["iterations"]),
        converged=bool(doc["converged"]),
        trace=_arr(doc["trace"]),
        elbo_trace=None if elbo is None else _arr(elbo),
        elapsed_seconds=float(doc["elapsed_seconds"]),
    )


def save_state(state, path):
    with open(path, "w") as fh:
        fh.write(dumps(state_to_dict(state)))
        fh.write("\n")


def load_state(path):
    with open(path) as fh:
        return state_from_dict(json.load(fh))


def save_fit_result(result: FitResult, path):
    with open(path, "w") as fh:
        fh.write(dumps(fit_result_to_dict(result)))
        fh.write("\n")


def load_fit_result(path) -> FitResult:
    with open(path) as fh:
        return fit_result_from_dict(json.load(fh))
