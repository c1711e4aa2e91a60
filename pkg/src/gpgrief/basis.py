"""Grid of inducing points, per-dimension eigendecompositions and the scaled
eigenfunction matrix ``Phi``.

``Phi[:, j]`` holds the j-th Nystrom eigenfunction ``lambda_j^-1/2 K_xU q_j``
evaluated on the rows of ``X``. The grid is a Cartesian product of ``d`` axes
and is never expanded.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError
from .kernels import ProductKernel, cross_cov_1d
from .tensor_algebra import (
    KronMatrix,
    RowKhatriRao,
    Selection,
    hadamard_combine_log,
    reduce_columns,
    selected_blocks,
    top_p_kron_eigs,
)

logger = logging.getLogger(__name__)

EIG_CLAMP = 1e-12
GRID_MARGIN = 0.05
DUPLICATE_NUDGE = 1e-8

__all__ = [
    "GridInducing",
    "KronEig",
    "GriefBasis",
    "build_grid",
    "decompose",
    "build_phi",
    "phi_at",
    "build_basis",
    "convergence_probe",
]


@dataclass(frozen=True)
class GridInducing:
    axes: tuple
    degenerate: tuple = ()

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float).reshape(-1) for a in self.axes)
        if not axes:
            raise DimensionError("grid needs at least one axis")
        for i, a in enumerate(axes):
            if a.size == 0:
                raise DimensionError(f"axis {i} is empty")
            if a.size > 1 and not np.all(np.diff(a) > 0):
                raise ValueError(f"axis {i} is not strictly increasing")
        object.__setattr__(self, "axes", axes)
        deg = tuple(self.degenerate) or (False,) * len(axes)
        object.__setattr__(self, "degenerate", deg)

    @property
    def d(self):
        return len(self.axes)

    @property
    def mbar(self):
        return tuple(a.size for a in self.axes)

    @property
    def log_m(self):
        """log of the number of grid points; ``m`` itself may not fit a float."""
        return float(sum(math.log(a.size) for a in self.axes))

    @property
    def log10_m(self):
        return self.log_m / math.log(10.0)


@dataclass(frozen=True)
class KronEig:
    Q_factors: tuple
    lambda_factors: tuple

    @property
    def Q(self):
        return KronMatrix(self.Q_factors)


@dataclass(frozen=True)
class GriefBasis:
    """Everything needed to evaluate the p scaled eigenfunctions anywhere.

    Only the eigenvector columns referenced by the selection are retained
    (``columns[i]`` is ``m_i x c_i``), so storage is ``O(p d m_i)``.
    """

    grid: GridInducing
    kernel: ProductKernel
    selection: Selection
    columns: tuple
    col_index: np.ndarray
    phi: np.ndarray = field(repr=False)

    @property
    def p(self):
        return self.selection.p

    @property
    def d(self):
        return self.grid.d


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionError(f"inputs must be 2-D, got shape {X.shape}")
    return X


def _make_increasing(axis, span):
    axis = axis.copy()
    nudge = DUPLICATE_NUDGE * span
    for j in range(1, axis.size):
        if axis[j] <= axis[j - 1]:
            axis[j] = axis[j - 1] + nudge
    return axis


def build_grid(X, mbar) -> GridInducing:
    """Place ``mbar[i]`` points per dimension at evenly spaced empirical
    quantiles of ``X[:, i]``; the two end points are pushed 5% of the data
    range beyond the extreme observations.

    A constant column gets ``linspace(c - 1, c + 1, mbar[i])`` and is flagged
    in ``GridInducing.degenerate``.
    """
    X = _as_2d(X)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two rows to place a grid")
    mbar = np.broadcast_to(np.asarray(mbar, dtype=int), (d,))
    if np.any(mbar < 2):
        raise ValueError(f"need at least 2 points per axis, got {mbar.tolist()}")
    axes, degenerate = [], []
    for i in range(d):
        col = X[:, i]
        lo, hi = float(col.min()), float(col.max())
        span = hi - lo
        if not span > 0:
            warnings.warn(
                f"column {i} is constant; placing its axis on [c-1, c+1]", stacklevel=2
            )
            axes.append(np.linspace(lo - 1.0, lo + 1.0, mbar[i]))
            degenerate.append(True)
            continue
        axis = np.quantile(col, np.linspace(0.0, 1.0, mbar[i]))
        axis[0] -= GRID_MARGIN * span
        axis[-1] += GRID_MARGIN * span
        axes.append(_make_increasing(axis, span))
        degenerate.append(False)
    return GridInducing(tuple(axes), tuple(degenerate))


def decompose(grid: GridInducing, kernel: ProductKernel) -> KronEig:
    """Symmetric eigendecomposition of each 1-D ``K_UU`` factor.

    Eigenpairs are returned in descending eigenvalue order and eigenvalues
    are clamped below at ``1e-12 * max``.
    """
    if kernel.d != grid.d:
        raise DimensionError(f"kernel has d={kernel.d}, grid has d={grid.d}")
    Qs, lams = [], []
    for i, (k, axis) in enumerate(zip(kernel.dims, grid.axes)):
        Kuu = cross_cov_1d(k, axis, axis)
        try:
            lam, Q = scipy.linalg.eigh(Kuu)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"eigendecomposition failed for dimension {i}: {exc}")
        lam, Q = lam[::-1], Q[:, ::-1]
        top = lam[0]
        if not top > 0:
            raise NumericalError(f"K_UU factor {i} has no positive eigenvalue")
        lam = np.maximum(lam, EIG_CLAMP * top)
        Qs.append(np.ascontiguousarray(Q))
        lams.append(lam)
    return KronEig(tuple(Qs), tuple(lams))


def _eval_phi(basis_parts, X):
    grid, kernel, selection, columns, col_index = basis_parts
    KR = RowKhatriRao(
        tuple(cross_cov_1d(k, X[:, i], axis)
              for i, (k, axis) in enumerate(zip(kernel.dims, grid.axes)))
    )
    blocks = selected_blocks(KR, columns, col_index)
    return hadamard_combine_log(blocks, -0.5 * selection.log_values)


def build_phi(X, grid: GridInducing, kernel: ProductKernel, eig: KronEig, p: int):
    """Select the top-p Kronecker eigenpairs and evaluate ``Phi`` on ``X``."""
    X = _as_2d(X)
    if X.shape[1] != grid.d:
        raise DimensionError(f"X has {X.shape[1]} columns, grid has d={grid.d}")
    total = math.prod(grid.mbar)
    if p > total:
        raise ValueError(f"p={p} exceeds the number of grid points {total}")
    selection = top_p_kron_eigs(eig.lambda_factors, p)
    columns, col_index = reduce_columns(eig.Q, selection)
    columns = tuple(columns)
    phi = _eval_phi((grid, kernel, selection, columns, col_index), X)
    return GriefBasis(grid, kernel, selection, columns, col_index, phi)


def phi_at(basis: GriefBasis, Xstar):
    """Evaluate the stored eigenfunctions at new inputs (no re-selection)."""
    Xstar = _as_2d(Xstar)
    if Xstar.shape[1] != basis.d:
        raise DimensionError(
            f"inputs have {Xstar.shape[1]} features, model expects d={basis.d}"
        )
    parts = (basis.grid, basis.kernel, basis.selection, basis.columns, basis.col_index)
    return _eval_phi(parts, Xstar)


def build_basis(X, kernel: ProductKernel, mbar, p: int, grid: GridInducing = None):
    """Grid (unless given), eigendecomposition and ``Phi`` in one call."""
    X = _as_2d(X)
    if grid is None:
        grid = build_grid(X, mbar)
    return build_phi(X, grid, kernel, decompose(grid, kernel), p)


def _probe_axis(x, mbar):
    n = x.size
    extra = mbar - n
    if extra < 0:
        raise ValueError(f"schedule entry {mbar} is smaller than n={n}")
    if extra == 0:
        pts = np.array([])
    elif extra == 1:
        pts = np.array([np.median(x)])
    else:
        pts = build_grid(x[:, None], extra).axes[0]
    span = float(x.max() - x.min()) or 1.0
    # keep training coordinates exact; nudge coincident extra points instead
    tol = DUPLICATE_NUDGE * span
    for j in range(pts.size):
        while np.min(np.abs(x - pts[j])) < tol:
            pts[j] += tol
    return np.unique(np.concatenate([x, pts]))


def convergence_probe(X, kernel: ProductKernel, schedule):
    """Angle between the Nystrom top eigenfunction on X and the top eigenvector
    of the dense ``K_XX`` for each grid size in ``schedule``.

    The grid always contains every training coordinate; the remaining
    ``mbar - n`` points are placed by :func:`build_grid`. The Nystrom vector
    is scaled by ``sqrt(m / n) / lambda`` before comparison.

    Returns
    -------
    angles : ndarray
        One subspace angle (radians) per schedule entry.
    """
    X = _as_2d(X)
    if X.shape[1] != 1 or kernel.d != 1:
        raise DimensionError("convergence_probe is defined for 1-D inputs")
    x = X[:, 0]
    n = x.size
    if np.unique(x).size != n:
        raise ValueError("training coordinates must be distinct")
    lam_x, Q_x = scipy.linalg.eigh(kernel.gram(X))
    q_n = Q_x[:, -1]
    angles = []
    for mbar in schedule:
        axis = _probe_axis(x, int(mbar))
        grid = GridInducing((axis,))
        eig = decompose(grid, kernel)
        lam, q = eig.lambda_factors[0][0], eig.Q_factors[0][:, 0]
        m = axis.size
        f = math.sqrt(m / n) / lam * (cross_cov_1d(kernel.dims[0], x, axis) @ q)
        angle = scipy.linalg.subspace_angles(f[:, None], q_n[:, None])[0]
        logger.debug("probe mbar=%d angle=%.3e", m, angle)
        angles.append(float(angle))
    return np.array(angles)
