"""Variational Bayes for factor analysis in single- and multi-study settings.

Coordinate-ascent (CAVI) and stochastic (SVI) mean-field inference under a
multiplicative gamma-process shrinkage prior, with simulation, accuracy
metrics, Bartlett prediction, and a CLI for running benchmark grids.
"""

from .fa_cavi import (
    elbo_fa,
    fit_fa_cavi,
    update_global_shrinkage,
    update_loadings_row,
    update_local_shrinkage,
    update_psi_rate,
    update_scores,
)
from .fa_svi import (
    NaturalGaussian,
    fit_fa_svi,
    from_natural,
    sample_minibatch,
    step_size,
    svi_step_fa,
    to_natural,
)
from .initialize import SparsePcaResult, init_fa, init_msfa, sparse_pca
from .metrics import (
    bartlett_scores,
    export_edges,
    mse,
    near_zero_proportion,
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
    FitResult,
    GammaFactor,
    GaussianFactor,
    MsfaHyperParams,
    MsfaState,
    MultiStudyDataset,
    NumericalError,
    PreconditionError,
    ShrinkagePrior,
    SviConfig,
    expected_tau,
)
from .msfa_cavi import (
    elbo_msfa,
    fit_msfa_cavi,
    update_lambda_row,
    update_phi_row,
    update_psi_rate_msfa,
    update_scores_msfa,
    update_shared_delta,
    update_shared_shrinkage,
    update_specific_delta,
    update_specific_shrinkage,
)
from .msfa_svi import fit_msfa_svi, svi_step_msfa
from .serialize import (
    load_fit_result,
    load_state,
    save_fit_result,
    save_state,
    state_from_dict,
    state_to_dict,
)
from .simulate import (
    FaTruth,
    MsfaTruth,
    center_dataset,
    center_multistudy,
    generate_fa_truth,
    generate_msfa_truth,
    sample_fa_dataset,
    sample_msfa_dataset,
)

__version__ = "0.1.0"
