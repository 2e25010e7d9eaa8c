import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
from scipy import sparse

from ..core.errors import (
    BreakdownIndefinite,
    DimensionMismatch,
    NotConverged,
    SingularMatrix,
)
from ..types.arrays import FloatArray, IntArray
from .observation import ObservationSet

logger = logging.getLogger(__name__)

DENSE_ORACLE_LIMIT = 2000
BREAKDOWN_RATIO = 1e-14

Operator = Callable[[FloatArray], FloatArray]


def canonical_csr(
    rows: IntArray, cols: IntArray, values: FloatArray, shape: tuple[int, int]
) -> sparse.csr_matrix:
    """CSR with summed duplicates, no explicit zeros and sorted column indices."""
    m = sparse.coo_matrix(
        (np.asarray(values, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
        shape=shape,
    ).tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def dot(a: FloatArray, b: FloatArray) -> float:
    # pairwise summation: fixed order, no threaded BLAS
    return float(np.sum(a * b))


def spmv(m: sparse.csr_matrix, x: FloatArray) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != m.shape[1]:
        raise DimensionMismatch(
            f"vector of length {x.shape[0]} does not match {m.shape[1]} columns"
        )
    return m @ x


@dataclass
class SolveStats:
    iterations: int
    relative_residual: float
    converged: bool


@dataclass
class PrecisionOperator:
    """Q = Q0 + A^T W A applied matrix-free, with its diagonal kept explicitly."""

    q0: sparse.csr_matrix
    observations: ObservationSet
    a: sparse.csr_matrix = field(init=False, repr=False)
    at: sparse.csr_matrix = field(init=False, repr=False)
    w: FloatArray = field(init=False, repr=False)
    diag: FloatArray = field(init=False)

    def __post_init__(self):
        n = self.n
        self.a = self.observations.design_matrix(n)
        self.at = self.a.T.tocsr()
        self.at.sort_indices()
        self.w = self.observations.precision_weights
        self.diag = self.q0.diagonal() + self.a.multiply(self.a).T.tocsr() @ self.w

    @property
    def n(self) -> int:
        return int(self.q0.shape[0])

    def apply(self, x: FloatArray) -> FloatArray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.n:
            raise DimensionMismatch(f"vector of length {x.shape[0]} for N = {self.n}")
        out = self.q0 @ x
        if self.a.shape[0]:
            out = out + self.at @ (self.w * (self.a @ x))
        return out

    __call__ = apply

    def rhs(self, b0: FloatArray) -> FloatArray:
        h = np.asarray(b0, dtype=np.float64).copy()
        if self.a.shape[0]:
            h += self.at @ (self.w * self.observations.y)
        return h

    def augmented(self, extra: ObservationSet) -> "PrecisionOperator":
        if extra.is_empty:
            return self
        return PrecisionOperator(self.q0, ObservationSet.concatenate([self.observations, extra]))


def default_max_iter(n: int) -> int:
    return int(10 * math.sqrt(n)) + 200


def pcg(
    apply: Operator,
    h: FloatArray,
    precond_diag: FloatArray,
    tol: float = 1e-8,
    max_iter: int | None = None,
    x0: FloatArray | None = None,
) -> tuple[FloatArray, SolveStats]:
    """Jacobi-preconditioned conjugate gradients with a relative residual stop."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    if precond_diag.shape[0] != n:
        raise DimensionMismatch("preconditioner length differs from right-hand side")
    if np.any(precond_diag <= 0):
        raise BreakdownIndefinite("Jacobi preconditioner needs a positive diagonal")
    max_iter = default_max_iter(n) if max_iter is None else max_iter
    inv_diag = 1.0 / precond_diag

    h_norm = math.sqrt(dot(h, h))
    if h_norm == 0.0:
        return np.zeros(n), SolveStats(0, 0.0, True)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = h - apply(x)
    z = inv_diag * r
    p = z.copy()
    rz = dot(r, z)
    residual = math.sqrt(dot(r, r)) / h_norm
    if residual <= tol:
        return x, SolveStats(0, residual, True)

    k = 0
    while k < max_iter:
        k += 1
        q = apply(p)
        pq = dot(p, q)
        if pq <= BREAKDOWN_RATIO * dot(p, p):
            raise BreakdownIndefinite(
                f"p^T Q p = {pq:.3e} at iteration {k}; operator is not SPD",
                iteration=k,
            )
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        residual = math.sqrt(dot(r, r)) / h_norm
        if residual <= tol:
            # confirm against the true residual, restart from it on drift
            r = h - apply(x)
            residual = math.sqrt(dot(r, r)) / h_norm
            if residual <= tol:
                return x, SolveStats(k, residual, True)
            z = inv_diag * r
            p = z.copy()
            rz = dot(r, z)
            continue
        z = inv_diag * r
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    stats = SolveStats(k, math.sqrt(dot(h - apply(x), h - apply(x))) / h_norm, False)
    raise NotConverged(
        f"PCG stopped after {k} iterations at relative residual {stats.relative_residual:.3e}",
        x=x,
        stats=stats,
        iterations=k,
    )


def dense_matrix(op: PrecisionOperator) -> FloatArray:
    if op.n > DENSE_ORACLE_LIMIT:
        raise DimensionMismatch(f"dense oracle is limited to N <= {DENSE_ORACLE_LIMIT}")
    basis = np.eye(op.n)
    return np.column_stack([op.apply(basis[:, i]) for i in range(op.n)])


def dense_solve_oracle(op: PrecisionOperator) -> tuple[FloatArray, FloatArray]:
    q = dense_matrix(op)
    sym = 0.5 * (q + q.T)
    try:
        factor = scipy.linalg.cho_factor(sym, lower=True)
    except np.linalg.LinAlgError as e:
        raise SingularMatrix(f"Cholesky factorization failed: {e}")
    return q, scipy.linalg.cho_solve(factor, np.eye(op.n))
