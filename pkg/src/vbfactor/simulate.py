"""Ground-truth generators and samplers for the benchmark scenarios.

Loading entries are zero with probability 2/3 and Uniform(0,1) otherwise;
noise variances are Uniform(0.1, 1). Sampling goes through the latent
construction x = Lambda z + e (never a dense P x P factorization), which has
exactly the N(0, Lambda Lambda^T + Psi) law at O(NPJ) cost.

All randomness uses numpy's PCG64 via default_rng; per-study substreams come
from SeedSequence.spawn, so results are reproducible from (seed, dims) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, DimensionError, MultiStudyDataset

ZERO_PROBABILITY = 2.0 / 3.0


@dataclass
class FaTruth:
    """True single-study parameters: loadings (P, J) and noise variances (P,)."""

    loadings: np.ndarray
    psi: np.ndarray

    def sigma(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.psi)


@dataclass
class MsfaTruth:
    """True multi-study parameters: shared and per-study loadings plus noise."""

    phi: np.ndarray
    lambdas: list[np.ndarray]
    psis: list[np.ndarray]

    @property
    def n_studies(self) -> int:
        return len(self.lambdas)

    def sigma(self, s: int) -> np.ndarray:
        lam = self.lambdas[s]
        return self.phi @ self.phi.T + lam @ lam.T + np.diag(self.psis[s])


def _sparse_uniform_loadings(rng, p, j):
    values = rng.uniform(0.0, 1.0, size=(p, j))
    keep = rng.random(size=(p, j)) >= ZERO_PROBABILITY
    return values * keep


def generate_fa_truth(p: int, j: int, seed: int) -> FaTruth:
    if p < 1 or j < 1:
        raise DimensionError(f"need P, J >= 1, got ({p}, {j})")
    rng = np.random.default_rng(seed)
    loadings = _sparse_uniform_loadings(rng, p, j)
    psi = rng.uniform(0.1, 1.0, size=p)
    return FaTruth(loadings=loadings, psi=psi)


def _sample_rows(rng, loadings, psi, n):
    j = loadings.shape[1]
    z = rng.standard_normal((n, j))
    eps = rng.standard_normal((n, loadings.shape[0])) * np.sqrt(psi)
    return z @ loadings.T + eps


def sample_fa_dataset(truth: FaTruth, n: int, seed: int) -> Dataset:
    if n < 1:
        raise DimensionError(f"need N >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return Dataset(_sample_rows(rng, truth.loadings, truth.psi, n))


def generate_msfa_truth(s: int, p: int, k: int, j_s, seed: int) -> MsfaTruth:
    j_s = [int(v) for v in (j_s if np.iterable(j_s) else [j_s] * s)]
    if s < 1 or p < 1 or k < 1 or len(j_s) != s or any(v < 1 for v in j_s):
        raise DimensionError(f"bad multi-study dims S={s}, P={p}, K={k}, J_s={j_s}")
    children = np.random.SeedSequence(seed).spawn(s + 1)
    phi = _sparse_uniform_loadings(np.random.default_rng(children[0]), p, k)
    lambdas, psis = [], []
    for st in range(s):
        rng = np.random.default_rng(children[st + 1])
        lambdas.append(_sparse_uniform_loadings(rng, p, j_s[st]))
        psis.append(rng.uniform(0.1, 1.0, size=p))
    return MsfaTruth(phi=phi, lambdas=lambdas, psis=psis)


def sample_msfa_dataset(truth: MsfaTruth, n_s, seed: int) -> MultiStudyDataset:
    n_s = [int(v) for v in (n_s if np.iterable(n_s) else [n_s] * truth.n_studies)]
    if len(n_s) != truth.n_studies or any(v < 1 for v in n_s):
        raise DimensionError(f"need one positive N per study, got {n_s}")
    children = np.random.SeedSequence(seed).spawn(truth.n_studies)
    studies = []
    for s in range(truth.n_studies):
        rng = np.random.default_rng(children[s])
        stacked = np.hstack([truth.phi, truth.lambdas[s]])
        studies.append(Dataset(_sample_rows(rng, stacked, truth.psis[s], n_s[s])))
    return MultiStudyDataset(studies)


def center_dataset(d: Dataset) -> Dataset:
    """Center a raw simulated dataset (the models assume centered columns)."""
    return Dataset.preprocess(d.x, center=True, scale=False)


def center_multistudy(d: MultiStudyDataset) -> MultiStudyDataset:
    return MultiStudyDataset([center_dataset(s) for s in d.studies])
