"""Linear solves and moment extraction from Laplace transforms."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = math.inf

# pivot magnitude below this fraction of its row scale counts as singular
PIVOT_TOL = 1e-13


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, index: int, pivot: float, scale: float):
        self.index = index
        self.pivot = pivot
        super().__init__(
            f"matrix is singular to working precision: pivot {index} is {pivot:.3e} "
            f"(row scale {scale:.3e})"
        )


class InvalidTransformError(ValueError):
    """The function handed to :func:`lst_moment` is not a Laplace transform."""


@dataclass(frozen=True)
class DenseSystem:
    """Square system ``A x = rhs`` with one or more right-hand sides.

    ``rhs`` is stored as an (n, r) array; a 1-d input becomes a single column.
    """

    A: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        rhs = np.asarray(self.rhs, dtype=float)
        if rhs.ndim == 1:
            rhs = rhs[:, None]
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError(f"A must be square and non-empty, got shape {A.shape}")
        if rhs.shape[0] != A.shape[0]:
            raise ValueError(f"rhs has {rhs.shape[0]} rows, A has {A.shape[0]}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(rhs))):
            raise ValueError("system has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "rhs", rhs)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class Solution:
    x: np.ndarray  # (n, r), one column per right-hand side
    residuals: np.ndarray  # relative inf-norm residual per right-hand side

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))


def _relative_residuals(A, x, rhs) -> np.ndarray:
    r = A @ x - rhs
    num = np.max(np.abs(r), axis=0)
    den = np.max(np.abs(rhs), axis=0)
    den = np.where(den > 0, den, 1.0)
    return num / den


def solve(sys: DenseSystem) -> Solution:
    """LU with partial pivoting; one factorization serves every rhs column."""
    A = sys.A
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=False)
    # recover which original row ended up at each pivot position
    perm = np.arange(sys.n)
    for i, p in enumerate(piv):
        perm[i], perm[p] = perm[p], perm[i]
    row_scale = np.max(np.abs(A), axis=1)[perm]
    diag = np.abs(np.diag(lu))
    bad = np.nonzero(diag <= PIVOT_TOL * np.where(row_scale > 0, row_scale, 1.0))[0]
    if bad.size:
        i = int(bad[0])
        raise SingularMatrixError(i, float(diag[i]), float(row_scale[i]))
    x = sla.lu_solve((lu, piv), sys.rhs, check_finite=False)
    # one step of iterative refinement
    x += sla.lu_solve((lu, piv), sys.rhs - A @ x, check_finite=False)
    return Solution(x, _relative_residuals(A, x, sys.rhs))


def solve_sparse(A: sp.spmatrix, rhs: np.ndarray) -> Solution:
    """Sparse LU (SuperLU) for the large phase-expanded systems."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise np.linalg.LinAlgError(f"sparse LU failed: {exc}") from exc
    x = lu.solve(rhs)
    x += lu.solve(rhs - A @ x)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("sparse LU produced non-finite solution")
    return Solution(x, _relative_residuals(A, x, rhs))


# ---------------------------------------------------------------------------
# moments from a transform

# one-sided 5-point stencils at 0; weights applied to f(0), f(h), ..., f(4h)
_FWD1 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0  # O(h^4)
_FWD2 = np.array([35.0, -104.0, 114.0, -56.0, 11.0]) / 12.0  # O(h^3)
_ORDER = {1: 4, 2: 3}


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    error: float
    estimates: tuple[float, ...]  # raw stencil values, coarsest step first

    @property
    def is_infinite(self) -> bool:
        return self.value == INF


def lst_moment(
    f: Callable[[float], float],
    order: int,
    mean_guess: float | None = None,
    levels: int = 4,
) -> MomentEstimate:
    """E[Y^order] from the transform f(s) = E[exp(-sY)].

    One-sided stencil at s = 0 plus Richardson extrapolation over step
    halvings.  The initial step is 1e-3 / mean_guess; without a guess the
    mean is estimated from f near the origin.  Estimates that keep growing
    under refinement are reported as ``inf``.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    f0 = f(0.0)
    if not abs(f0 - 1.0) <= 1e-12:
        raise InvalidTransformError(f"transform at 0 is {f0!r}, expected 1")
    if mean_guess is None or not (mean_guess > 0 and math.isfinite(mean_guess)):
        s0 = 1e-6
        fs = f(s0)
        mean_guess = -math.log(fs) / s0 if 0 < fs < 1 else 1.0
        if not (mean_guess > 0 and math.isfinite(mean_guess)):
            mean_guess = 1.0
    h0 = 1e-3 / mean_guess
    w = _FWD1 if order == 1 else _FWD2
    sign = -1.0 if order == 1 else 1.0
    p = _ORDER[order]

    raw = []
    for lvl in range(levels):
        h = h0 / 2**lvl
        vals = np.array([f(j * h) for j in range(5)])
        raw.append(sign * float(w @ vals) / h**order)

    # a finite moment makes successive differences shrink geometrically;
    # rising estimates whose increments do not shrink mean divergence
    steps = np.diff(raw)
    if (
        raw[0] > 0
        and np.all(steps > 0)
        and steps[-1] > 1e-6 * abs(raw[-1])
        and np.all(steps[1:] > 0.9 * steps[:-1])
    ):
        return MomentEstimate(INF, INF, tuple(raw))

    # Richardson table; leading error terms h^p, h^(p+1), ...
    table = [list(raw)]
    for j in range(1, levels):
        prev = table[-1]
        fac = 2.0 ** (p + j - 1)
        table.append([(fac * prev[i + 1] - prev[i]) / (fac - 1.0) for i in range(len(prev) - 1)])
    best = table[-1][0]
    diff = abs(best - table[-2][-1]) if levels > 1 else abs(raw[0])
    # cancellation floor of the finest stencil
    h_min = h0 / 2 ** (levels - 1)
    roundoff = 64.0 * np.finfo(float).eps * float(np.sum(np.abs(w))) / h_min**order
    return MomentEstimate(best, max(diff, roundoff), tuple(raw))
