"""Finite element primitives: quadrature, P1/Q1/Q2 bases, sparse solves.

Reference elements are [0,1] (interval) and [0,1]^2 (quadrilateral).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, SolverFailure


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (n,) for interval, (n, 2) for quad
    weights: np.ndarray
    degree: int


def _gauss01(npts):
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def quad_rule(family, degree):
    """Gauss-Legendre rule exact for polynomials of the given degree.

    For 'quad' the rule is a tensor product, exact for every monomial
    x^i z^j with i, j <= degree.
    """
    if not isinstance(degree, (int, np.integer)) or degree < 1 or degree > 41:
        raise InvalidArgument(f"unsupported quadrature degree {degree!r}")
    npts = (int(degree) + 2) // 2
    x, w = _gauss01(npts)
    if family == "interval":
        return QuadratureRule(x, w, int(degree))
    if family == "quad":
        X, Z = np.meshgrid(x, x, indexing="ij")
        W = np.outer(w, w)
        return QuadratureRule(np.column_stack([X.ravel(), Z.ravel()]), W.ravel(), int(degree))
    raise InvalidArgument(f"unknown quadrature family {family!r}")


# 1D Lagrange bases on [0,1]; quadratic nodes at 0, 1/2, 1

def p1_1d(x):
    x = np.asarray(x, dtype=float)
    return np.stack([1.0 - x, x], axis=-1)


def p1_1d_deriv(x):
    x = np.asarray(x, dtype=float)
    return np.stack([-np.ones_like(x), np.ones_like(x)], axis=-1)


def p2_1d(x):
    x = np.asarray(x, dtype=float)
    return np.stack([(1.0 - x) * (1.0 - 2.0 * x), 4.0 * x * (1.0 - x), x * (2.0 * x - 1.0)], axis=-1)


def p2_1d_deriv(x):
    x = np.asarray(x, dtype=float)
    return np.stack([4.0 * x - 3.0, 4.0 - 8.0 * x, 4.0 * x - 1.0], axis=-1)


def _tensor(fx, fz):
    # local index = ax * nz_loc + az
    return (fx[..., :, None] * fz[..., None, :]).reshape(fx.shape[:-1] + (-1,))


def q1_basis(pts):
    """Q1 values (npts, 4) and reference gradients (npts, 4, 2)."""
    pts = np.atleast_2d(pts)
    xi, eta = pts[:, 0], pts[:, 1]
    val = _tensor(p1_1d(xi), p1_1d(eta))
    dxi = _tensor(p1_1d_deriv(xi), p1_1d(eta))
    deta = _tensor(p1_1d(xi), p1_1d_deriv(eta))
    return val, np.stack([dxi, deta], axis=-1)


def q2_basis(pts):
    """Q2 values (npts, 9) and reference gradients (npts, 9, 2)."""
    pts = np.atleast_2d(pts)
    xi, eta = pts[:, 0], pts[:, 1]
    val = _tensor(p2_1d(xi), p2_1d(eta))
    dxi = _tensor(p2_1d_deriv(xi), p2_1d(eta))
    deta = _tensor(p2_1d(xi), p2_1d_deriv(eta))
    return val, np.stack([dxi, deta], axis=-1)


# local node offsets (ax, az) matching the tensor ordering above
Q1_OFFSETS = np.array([(ax, az) for ax in range(2) for az in range(2)])
Q2_OFFSETS = np.array([(ax, az) for ax in range(3) for az in range(3)])


@dataclass
class SparseSystem:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    rhs: np.ndarray
    shape: tuple = None

    def __post_init__(self):
        n = len(self.rhs)
        if self.shape is None:
            self.shape = (n, n)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise InvalidArgument("row/column/value arrays differ in length")
        if self.shape[0] != n:
            raise InvalidArgument("right-hand side length does not match matrix rows")

    def matrix(self):
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape)


def solve_sparse(system, rtol=1e-10):
    """Direct sparse LU solve of a SparseSystem (or a (matrix, rhs) pair).

    Raises SolverFailure when the factorization breaks down or the
    relative residual exceeds `rtol`.
    """
    if isinstance(system, SparseSystem):
        A, b = system.matrix(), np.asarray(system.rhs, dtype=float)
    else:
        A, b = system
        A = sp.csc_matrix(A)
        b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise InvalidArgument(f"matrix is not square: {A.shape}")
    if A.shape[0] == 0:
        return np.zeros(0)
    A = sp.csc_matrix(A)
    bnorm = np.linalg.norm(b, np.inf)
    # Minimum degree on A^T + A with diagonal pivots is far cheaper for the
    # (structurally symmetric) saddle-point systems here; fall back to
    # partial pivoting if it breaks down or loses accuracy.
    attempts = [dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True)), {}]
    for k, opts in enumerate(attempts):
        try:
            lu = spla.splu(A, **opts)
        except RuntimeError as err:
            if k + 1 < len(attempts):
                continue
            raise SolverFailure(f"sparse LU failed: {err}", diagnostics={"n": A.shape[0]}) from err
        x = lu.solve(b)
        res = np.linalg.norm(A @ x - b, np.inf)
        ok = np.all(np.isfinite(x)) and not (bnorm > 0 and res > rtol * bnorm)
        if ok:
            return x
    udiag = np.abs(lu.U.diagonal())
    raise SolverFailure(
        "sparse LU solution inaccurate",
        diagnostics={
            "relative_residual": res / bnorm if bnorm > 0 else res,
            "min_pivot": float(udiag.min()),
            "max_pivot": float(udiag.max()),
        },
    )
