"""Domain types shared by all the variational inference algorithms.

Variational states store each factor family as stacked numpy arrays (one row
per factor) and expose single-factor accessors used by the update operations
and their tests. Types are plain values: updates produce new field contents
written by a single-owner fit driver, so copies are safe to move across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class DimensionError(ValueError):
    """Shapes or indices inconsistent with the bound model dimensions."""


class PreconditionError(ValueError):
    """An operation precondition (e.g. centered data) does not hold."""


class ConfigError(ValueError):
    """Invalid fit or CLI configuration."""


class NumericalError(RuntimeError):
    """A numerical operation failed beyond recovery (Cholesky after jitter)."""


def _require_positive(**kwargs):
    for name, value in kwargs.items():
        if not value > 0:
            raise ConfigError(f"{name} must be strictly positive, got {value!r}")


# ---------------------------------------------------------------------------
# Variational factors
# ---------------------------------------------------------------------------

@dataclass
class GaussianFactor:
    """A multivariate normal variational factor: mean vector + SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise DimensionError(
                f"mean of length {d} needs a {d}x{d} covariance, got {self.cov.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def validate(self):
        """Check symmetry to 1e-12 and positive definiteness (Cholesky)."""
        asym = np.max(np.abs(self.cov - self.cov.T)) if self.dim else 0.0
        if asym > 1e-12:
            raise NumericalError(f"covariance asymmetric by {asym:.3e}")
        from .linalg import chol  # local import: linalg depends on the errors here

        chol(self.cov)
        return self


@dataclass
class GammaFactor:
    """A gamma variational factor in shape/rate form.

    mean() is the only accessor through which gamma expectations enter the
    update formulas.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(
                f"gamma factor needs alpha,beta > 0, got ({self.alpha}, {self.beta})"
            )

    def mean(self) -> float:
        return self.alpha / self.beta


def expected_tau(delta: Sequence[GammaFactor], j: int) -> float:
    """Cumulative-product shrinkage weight: product of the first j delta means.

    j is the 1-based column index; the weight for column j multiplies the
    means of delta_1 .. delta_j. Never materialized as state, always
    recomputed from the delta factors.
    """
    if not 1 <= j <= len(delta):
        raise DimensionError(f"column index {j} outside 1..{len(delta)}")
    out = 1.0
    for f in delta[:j]:
        out *= f.mean()
    return out


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShrinkagePrior:
    """Gamma-process shrinkage block for one loading matrix.

    Column j of the loading matrix gets element precisions omega_pj * tau_j
    with tau_j a cumulative product of gamma variables delta_l; delta_1 has
    shape a1, later columns shape a2, all with unit rate.
    """

    truncation: int
    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1

    def __post_init__(self):
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ConfigError(f"truncation must be a positive integer, got {self.truncation}")
        _require_positive(nu=self.nu, a1=self.a1, a2=self.a2)

    def delta_prior_shapes(self) -> np.ndarray:
        """(a_1, a_2, ..., a_2) up to the truncation."""
        out = np.full(self.truncation, self.a2)
        out[0] = self.a1
        return out

    def fixed_delta_shapes(self, p: int) -> np.ndarray:
        """Iteration-independent optimal shapes a_l + (P/2)(T - l + 1)."""
        t = self.truncation
        return self.delta_prior_shapes() + 0.5 * p * np.arange(t, 0, -1)


@dataclass(frozen=True)
class FaHyperParams:
    """Prior settings for single-study FA.

    Defaults are the simulation-study settings: nu=3, a1=2.1, a2=3.1,
    a_psi=1, b_psi=0.3.
    """

    j_star: int
    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    a_psi: float = 1.0
    b_psi: float = 0.3

    def __post_init__(self):
        if int(self.j_star) != self.j_star or self.j_star < 1:
            raise ConfigError(f"j_star must be a positive integer, got {self.j_star}")
        _require_positive(nu=self.nu, a1=self.a1, a2=self.a2,
                          a_psi=self.a_psi, b_psi=self.b_psi)

    def shrinkage(self) -> ShrinkagePrior:
        return ShrinkagePrior(self.j_star, self.nu, self.a1, self.a2)


@dataclass(frozen=True)
class MsfaHyperParams:
    """Prior settings for multi-study FA: one shared block, one per study."""

    shared: ShrinkagePrior
    per_study: tuple[ShrinkagePrior, ...]
    a_psi: float = 1.0
    b_psi: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "per_study", tuple(self.per_study))
        if len(self.per_study) < 1:
            raise ConfigError("need at least one per-study shrinkage block")
        _require_positive(a_psi=self.a_psi, b_psi=self.b_psi)

    @property
    def n_studies(self) -> int:
        return len(self.per_study)

    @property
    def k_star(self) -> int:
        return self.shared.truncation

    @property
    def j_stars(self) -> tuple[int, ...]:
        return tuple(b.truncation for b in self.per_study)

    @classmethod
    def symmetric(cls, n_studies, k_star, j_star, nu=3.0, a1=2.1, a2=3.1,
                  a_psi=1.0, b_psi=0.3) -> "MsfaHyperParams":
        """Same shrinkage settings for the shared block and every study."""
        shared = ShrinkagePrior(k_star, nu, a1, a2)
        per_study = tuple(ShrinkagePrior(j_star, nu, a1, a2) for _ in range(n_studies))
        return cls(shared, per_study, a_psi, b_psi)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """An N x P observation matrix plus preprocessing metadata."""

    x: np.ndarray
    centered: bool = False
    scaled: bool = False
    column_means: Optional[np.ndarray] = None
    column_sds: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise DimensionError(f"data must be a non-empty 2-d matrix, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise PreconditionError("data contains NaN or Inf entries")
        if self.centered:
            worst = np.max(np.abs(self.x.mean(axis=0)))
            if worst > 1e-10:
                raise PreconditionError(
                    f"dataset flagged centered but a column mean is {worst:.3e}"
                )

    @classmethod
    def preprocess(cls, x, center: bool = True, scale: bool = False) -> "Dataset":
        """Center and/or scale columns, recording the statistics used."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        means = x.mean(axis=0)
        sds = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.ones(x.shape[1])
        out = x.copy()
        if center:
            out = out - means
        if scale:
            safe = np.where(sds > 1e-12, sds, 1.0)  # constant columns pass through
            out = out / safe
        return cls(out, centered=center, scaled=scale,
                   column_means=means, column_sds=sds)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass
class MultiStudyDataset:
    """S datasets measuring the same P variables in the same column order."""

    studies: list[Dataset]

    def __post_init__(self):
        self.studies = list(self.studies)
        if len(self.studies) < 1:
            raise DimensionError("need at least one study")
        p0 = self.studies[0].p
        for s, d in enumerate(self.studies):
            if d.p != p0:
                raise DimensionError(
                    f"study {s} has {d.p} variables, expected {p0} as in study 0"
                )

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def p(self) -> int:
        return self.studies[0].p

    @property
    def n_per_study(self) -> tuple[int, ...]:
        return tuple(d.n for d in self.studies)


# ---------------------------------------------------------------------------
# Fit configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SviConfig:
    """Minibatch and step-size schedule settings.

    `delay` is the schedule's down-weighting constant (the step size is
    (t + delay)^-kappa); it is deliberately not called tau to avoid collision
    with the shrinkage weights.
    """

    batch_fraction: Union[float, tuple[float, ...]] = 0.5
    kappa: float = 0.75
    delay: float = 1.0

    def __post_init__(self):
        fracs = self.batch_fraction
        fracs = (fracs,) if np.isscalar(fracs) else tuple(fracs)
        for b in fracs:
            if not 0.0 < b <= 1.0:
                raise ConfigError(f"batch fraction must lie in (0, 1], got {b}")
        if not 0.5 < self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in (0.5, 1], got {self.kappa}")
        _require_positive(delay=self.delay)

    def fraction_for(self, s: int) -> float:
        fracs = self.batch_fraction
        if np.isscalar(fracs):
            return float(fracs)
        return float(fracs[s]) if len(fracs) > 1 else float(fracs[0])


DEFAULT_MAX_ITER_CAVI = 5000
DEFAULT_MAX_ITER_SVI = 10000


@dataclass(frozen=True)
class FitConfig:
    """Iteration control shared by all fit drivers.

    max_iter=None resolves to 5000 for CAVI and 10000 for SVI. The tolerance
    applies to the mean squared difference between consecutive iterations of
    the monitored parameter vector (all Gaussian means for CAVI; loading
    means only for SVI, where score factors of unsampled rows are stale).
    """

    max_iter: Optional[int] = None
    tol: float = 1e-6
    seed: int = 0
    svi: Optional[SviConfig] = None
    track_elbo: bool = False

    def __post_init__(self):
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        _require_positive(tol=self.tol)

    def resolved_max_iter(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return DEFAULT_MAX_ITER_SVI if self.svi is not None else DEFAULT_MAX_ITER_CAVI


# ---------------------------------------------------------------------------
# Variational states
# ---------------------------------------------------------------------------

@dataclass
class FaState:
    """Full variational parameter vector for one single-study FA fit.

    Arrays are stacked over factors: loadings row p lives in load_mean[p] /
    load_cov[p], observation i's score factor in score_mean[i] /
    score_cov[i]. Gamma families are stored as shape/rate arrays.
    """

    hyper: FaHyperParams
    load_mean: np.ndarray        # (P, J*)
    load_cov: np.ndarray         # (P, J*, J*)
    score_mean: np.ndarray       # (N, J*)
    score_cov: np.ndarray        # (N, J*, J*)
    psi_shape: np.ndarray        # (P,)
    psi_rate: np.ndarray         # (P,)
    omega_shape: np.ndarray      # (P, J*)
    omega_rate: np.ndarray       # (P, J*)
    delta_shape: np.ndarray      # (J*,)
    delta_rate: np.ndarray       # (J*,)

    @property
    def n(self) -> int:
        return self.score_mean.shape[0]

    @property
    def p(self) -> int:
        return self.load_mean.shape[0]

    @property
    def j_star(self) -> int:
        return self.load_mean.shape[1]

    # Single-factor accessors (views, not copies).
    def loadings(self, p: int) -> GaussianFactor:
        return GaussianFactor(self.load_mean[p], self.load_cov[p])

    def scores(self, i: int) -> GaussianFactor:
        return GaussianFactor(self.score_mean[i], self.score_cov[i])

    def psi(self, p: int) -> GammaFactor:
        return GammaFactor(self.psi_shape[p], self.psi_rate[p])

    def omega(self, p: int, j: int) -> GammaFactor:
        return GammaFactor(self.omega_shape[p, j], self.omega_rate[p, j])

    def delta(self, l: int) -> GammaFactor:
        return GammaFactor(self.delta_shape[l], self.delta_rate[l])

    def delta_factors(self) -> list[GammaFactor]:
        return [self.delta(l) for l in range(self.j_star)]

    def expected_tau_vector(self) -> np.ndarray:
        """E[tau_j] for every column, recomputed from the delta factors."""
        return np.cumprod(self.delta_shape / self.delta_rate)

    def copy(self) -> "FaState":
        return FaState(
            hyper=self.hyper,
            load_mean=self.load_mean.copy(), load_cov=self.load_cov.copy(),
            score_mean=self.score_mean.copy(), score_cov=self.score_cov.copy(),
            psi_shape=self.psi_shape.copy(), psi_rate=self.psi_rate.copy(),
            omega_shape=self.omega_shape.copy(), omega_rate=self.omega_rate.copy(),
            delta_shape=self.delta_shape.copy(), delta_rate=self.delta_rate.copy(),
        )

    def validate(self, data: Optional[Dataset] = None):
        p, j = self.load_mean.shape
        if self.load_cov.shape != (p, j, j):
            raise DimensionError("loading covariance stack inconsistent with means")
        n = self.score_mean.shape[0]
        if self.score_mean.shape != (n, j) or self.score_cov.shape != (n, j, j):
            raise DimensionError("score factors inconsistent with truncation")
        for name, arr in (("psi", self.psi_shape), ("psi", self.psi_rate),
                          ("omega", self.omega_shape), ("omega", self.omega_rate),
                          ("delta", self.delta_shape), ("delta", self.delta_rate)):
            if not np.all(arr > 0):
                raise NumericalError(f"{name} gamma parameters must stay positive")
        tau = self.expected_tau_vector()
        if not np.all(np.isfinite(tau)) or not np.all(tau > 0):
            raise NumericalError("implied E[tau] is not finite and positive")
        if data is not None and (data.n != n or data.p != p):
            raise DimensionError(
                f"state of dims (N={n}, P={p}) not bound to data (N={data.n}, P={data.p})"
            )
        return self


@dataclass
class MsfaState:
    """Full variational parameter vector for one multi-study fit.

    Shared quantities are stacked arrays as in FaState; study-specific
    families are lists indexed by study (truncations may differ per study).
    """

    hyper: MsfaHyperParams
    phi_mean: np.ndarray                 # (P, K*)
    phi_cov: np.ndarray                  # (P, K*, K*)
    lam_mean: list[np.ndarray]           # per study (P, J*_s)
    lam_cov: list[np.ndarray]            # per study (P, J*_s, J*_s)
    f_mean: list[np.ndarray]             # per study (N_s, K*)
    f_cov: list[np.ndarray]              # per study (N_s, K*, K*)
    l_mean: list[np.ndarray]             # per study (N_s, J*_s)
    l_cov: list[np.ndarray]              # per study (N_s, J*_s, J*_s)
    psi_shape: np.ndarray                # (S, P)
    psi_rate: np.ndarray                 # (S, P)
    omega_shared_shape: np.ndarray       # (P, K*)
    omega_shared_rate: np.ndarray        # (P, K*)
    delta_shared_shape: np.ndarray       # (K*,)
    delta_shared_rate: np.ndarray        # (K*,)
    omega_specific_shape: list[np.ndarray]   # per study (P, J*_s)
    omega_specific_rate: list[np.ndarray]
    delta_specific_shape: list[np.ndarray]   # per study (J*_s,)
    delta_specific_rate: list[np.ndarray]

    @property
    def n_studies(self) -> int:
        return len(self.lam_mean)

    @property
    def p(self) -> int:
        return self.phi_mean.shape[0]

    @property
    def k_star(self) -> int:
        return self.phi_mean.shape[1]

    @property
    def j_stars(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.lam_mean)

    @property
    def n_per_study(self) -> tuple[int, ...]:
        return tuple(m.shape[0] for m in self.f_mean)

    def phi(self, p: int) -> GaussianFactor:
        return GaussianFactor(self.phi_mean[p], self.phi_cov[p])

    def lam(self, s: int, p: int) -> GaussianFactor:
        return GaussianFactor(self.lam_mean[s][p], self.lam_cov[s][p])

    def f_scores(self, s: int, i: int) -> GaussianFactor:
        return GaussianFactor(self.f_mean[s][i], self.f_cov[s][i])

    def l_scores(self, s: int, i: int) -> GaussianFactor:
        return GaussianFactor(self.l_mean[s][i], self.l_cov[s][i])

    def psi(self, s: int, p: int) -> GammaFactor:
        return GammaFactor(self.psi_shape[s, p], self.psi_rate[s, p])

    def expected_tau_shared(self) -> np.ndarray:
        return np.cumprod(self.delta_shared_shape / self.delta_shared_rate)

    def expected_tau_specific(self, s: int) -> np.ndarray:
        return np.cumprod(self.delta_specific_shape[s] / self.delta_specific_rate[s])

    def copy(self) -> "MsfaState":
        return MsfaState(
            hyper=self.hyper,
            phi_mean=self.phi_mean.copy(), phi_cov=self.phi_cov.copy(),
            lam_mean=[a.copy() for a in self.lam_mean],
            lam_cov=[a.copy() for a in self.lam_cov],
            f_mean=[a.copy() for a in self.f_mean],
            f_cov=[a.copy() for a in self.f_cov],
            l_mean=[a.copy() for a in self.l_mean],
            l_cov=[a.copy() for a in self.l_cov],
            psi_shape=self.psi_shape.copy(), psi_rate=self.psi_rate.copy(),
            omega_shared_shape=self.omega_shared_shape.copy(),
            omega_shared_rate=self.omega_shared_rate.copy(),
            delta_shared_shape=self.delta_shared_shape.copy(),
            delta_shared_rate=self.delta_shared_rate.copy(),
            omega_specific_shape=[a.copy() for a in self.omega_specific_shape],
            omega_specific_rate=[a.copy() for a in self.omega_specific_rate],
            delta_specific_shape=[a.copy() for a in self.delta_specific_shape],
            delta_specific_rate=[a.copy() for a in self.delta_specific_rate],
        )

    def validate(self, data: Optional[MultiStudyDataset] = None):
        s, p, k = self.n_studies, self.p, self.k_star
        if self.psi_shape.shape != (s, p) or self.psi_rate.shape != (s, p):
            raise DimensionError("psi family inconsistent with (S, P)")
        if self.phi_cov.shape != (p, k, k):
            raise DimensionError("shared loading covariances inconsistent")
        for st in range(s):
            js = self.lam_mean[st].shape[1]
            ns = self.f_mean[st].shape[0]
            if self.lam_cov[st].shape != (p, js, js):
                raise DimensionError(f"study {st} loading covariances inconsistent")
            if (self.f_mean[st].shape != (ns, k) or self.f_cov[st].shape != (ns, k, k)
                    or self.l_mean[st].shape != (ns, js) or self.l_cov[st].shape != (ns, js, js)):
                raise DimensionError(f"study {st} score factors inconsistent")
        if data is not None:
            if data.n_studies != s or data.p != p or data.n_per_study != self.n_per_study:
                raise DimensionError("state not bound to the given multi-study data")
        return self


# ---------------------------------------------------------------------------
# Fit results
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Converged state plus the convergence trace and timing of one fit."""

    state: Union[FaState, MsfaState]
    iterations: int
    converged: bool
    trace: np.ndarray
    elbo_trace: Optional[np.ndarray] = None
    elapsed_seconds: float = 0.0

    def __post_init__(self):
        self.trace = np.asarray(self.trace, dtype=float)
        if self.elbo_trace is not None:
            self.elbo_trace = np.asarray(self.elbo_trace, dtype=float)
        if self.trace.shape[0] != self.iterations:
            raise DimensionError("trace length must equal the iteration count")


def mean_squared_difference(new: np.ndarray, old: np.ndarray) -> float:
    """Convergence metric: mean over entries of the squared change."""
    return float(np.mean((new - old) ** 2))
