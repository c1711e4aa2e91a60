"""Gaussian-process regression with a grid of inducing points and a truncated
eigenfunction expansion of the kernel.

The grid may hold far more points than could ever be stored: every operation
works on per-dimension factors, so cost depends on the number of retained
eigenfunctions ``p`` rather than the grid size.
"""

from .basis import GriefBasis, GridInducing, build_basis, build_grid, phi_at
from .errors import (
    ConfigError,
    DimensionError,
    GriefError,
    NotPositiveDefiniteError,
    NumericalError,
    NumericalOverflowError,
)
from .inference import (
    ChainConfig,
    Prior,
    SampleSet,
    default_priors,
    init_hypers,
    mala_sample,
    optimize_type2,
    predict_type1,
)
from .kernels import BaseKernel1D, KernelFamily, ProductKernel
from .model import (
    ModelState,
    SuffStats,
    lml,
    lml_fast,
    lml_grads,
    orthogonalize,
    precompute,
    predict,
)
from .preconditioner import WoodburyApplier, pcg_solve
from .tensor_algebra import KronMatrix, RowKhatriRao, kr_q_select, kron_matvec, top_p_kron_eigs

__version__ = "0.1.0"
