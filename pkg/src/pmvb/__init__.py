"""Variational Bayes for sparse linear models with Perturb-and-MAP variance estimation."""

import logging

from .deblur import (
    DeblurProblem,
    EmConfig,
    build_tv_model,
    deblur_nonblind,
    em_blind_deblur,
    kernel_ncc,
    m_step_kernel,
    psnr,
)
from .gmrf import (
    GmrfSystem,
    SampleBatch,
    SolverConfig,
    SparseLinearModel,
    assemble_system,
    clip_variances,
    draw_samples,
    exact_logdet_dense,
    exact_variances_dense,
    mc_covariance_entries,
    mc_logdet,
    mc_variances,
    perturb_and_map_sample,
    posterior_mean,
)
from .operators import (
    LinearOperator,
    conv2_operator,
    finite_difference_operator,
    materialize_dense,
)
from .potentials import Laplacian, StudentT, gamma_update, h_dual, make_potential
from .solvers import (
    CirculantPreconditioner,
    circulant_preconditioner,
    lanczos_variance,
    lm_quasi_newton_minimize,
    pcg_solve,
)
from .varbayes import VbConfig, VariationalState, map_estimate, vb_fit

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
