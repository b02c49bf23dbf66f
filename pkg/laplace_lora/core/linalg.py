"""
Dense Linear Algebra Helpers

Small-matrix building blocks shared by the curvature, Laplace and prediction
code: Cholesky with a jitter ladder, truncated SVD, guarded Kronecker
products and log-determinants.

Vectorization convention (used everywhere in this package):
    vec(X) stacks the columns of X, i.e. X.reshape(-1, order="F").
    With this convention vec(A X B) = (B^T kron A) vec(X), so a weight
    gradient G = g a^T has vec(G) = a kron g and a Kronecker-factored
    curvature block reads (input factor) kron (output-gradient factor).
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import numpy.typing as npt
from scipy import linalg as sla

from laplace_lora.core.errors import (
    DimTooLarge,
    KTooLarge,
    NonSquare,
    NotPositiveDefinite,
    NotSymmetric,
)

logger = logging.getLogger("laplace-lora.linalg")

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
SYMMETRY_TOL = 1e-8
MAX_KRON_DIM = 4096


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor with lower @ lower.T == matrix + jitter * I

    Attributes:
        lower: Lower-triangular matrix with strictly positive diagonal
        jitter: Diagonal jitter that was needed for the factorization
    """

    lower: Matrix
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return int(self.lower.shape[0])

    def reconstruct(self) -> Matrix:
        return self.lower @ self.lower.T

    def solve(self, rhs: Matrix) -> Matrix:
        """Solve (L L^T) x = rhs"""
        return sla.cho_solve((self.lower, True), rhs)

    def solve_lower(self, rhs: Matrix) -> Matrix:
        """Solve L x = rhs"""
        return sla.solve_triangular(self.lower, rhs, lower=True)


@dataclass(frozen=True)
class LowRankFactor:
    """Root of a PSD matrix root @ root.T with root of shape (d, k), k <= d"""

    root: Matrix

    @classmethod
    def empty(cls, dim: int) -> "LowRankFactor":
        return cls(np.zeros((dim, 0)))

    @property
    def dim(self) -> int:
        return int(self.root.shape[0])

    @property
    def rank(self) -> int:
        return int(self.root.shape[1])

    def gram(self) -> Matrix:
        """root^T root, the k x k matrix used by the determinant lemma"""
        return self.root.T @ self.root

    def dense(self) -> Matrix:
        """Materialize root @ root.T; only for small test oracles"""
        return self.root @ self.root.T


def _as_matrix(m: npt.ArrayLike) -> Matrix:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise NonSquare(f"Expected a 2-D matrix, got shape {arr.shape}")
    return arr


def cholesky(m: npt.ArrayLike, jitter: float = 0.0) -> CholeskyFactor:
    """
    Cholesky factorization with an escalating jitter ladder

    Args:
        m: Symmetric matrix
        jitter: Initial diagonal jitter; the ladder continues with every rung
            of JITTER_LADDER larger than this value

    Returns:
        CholeskyFactor of m + jitter_used * I
    """
    mat = _as_matrix(m)
    rows, cols = mat.shape
    if rows != cols:
        raise NonSquare(f"Cholesky needs a square matrix, got {rows}x{cols}")
    if not np.all(np.isfinite(mat)):
        raise NotPositiveDefinite("Matrix contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(mat)))) if mat.size else 1.0
    if not np.allclose(mat, mat.T, rtol=0.0, atol=SYMMETRY_TOL * scale):
        raise NotSymmetric("Cholesky needs a symmetric matrix")

    ladder = [jitter] + [j for j in JITTER_LADDER if j > jitter]
    eye = np.eye(rows)
    for rung in ladder:
        try:
            lower = sla.cholesky(mat + rung * eye, lower=True)
        except sla.LinAlgError:
            logger.debug(f"Cholesky failed with jitter {rung:g}, escalating")
            continue
        if np.all(np.diag(lower) > 0) and np.all(np.isfinite(lower)):
            if rung > 0:
                logger.debug(f"Cholesky succeeded with jitter {rung:g}")
            return CholeskyFactor(lower=lower, jitter=rung)

    raise NotPositiveDefinite(
        f"Matrix of size {rows} is not positive definite (jitter up to {ladder[-1]:g})"
    )


def svd_topk(m: npt.ArrayLike, k: int) -> Tuple[Matrix, Vector]:
    """
    Top-k left singular vectors and singular values

    Returns:
        (u, s) with u of shape (rows, k) having orthonormal columns and s
        sorted descending, so u @ diag(s) is the best rank-k left factor
    """
    mat = np.asarray(m, dtype=np.float64)
    if mat.ndim != 2:
        raise NonSquare(f"Expected a 2-D matrix, got shape {mat.shape}")
    limit = min(mat.shape)
    if k < 0 or k > limit:
        raise KTooLarge(f"k={k} exceeds min(rows, cols)={limit}")
    if k == 0:
        return np.zeros((mat.shape[0], 0)), np.zeros(0)

    u, s, _ = sla.svd(mat, full_matrices=False, lapack_driver="gesdd")
    return u[:, :k], s[:k]


def kron(a: npt.ArrayLike, b: npt.ArrayLike) -> Matrix:
    """Kronecker product guarded against accidental large materialization"""
    left = _as_matrix(a)
    right = _as_matrix(b)
    rows = left.shape[0] * right.shape[0]
    cols = left.shape[1] * right.shape[1]
    if rows > MAX_KRON_DIM or cols > MAX_KRON_DIM:
        raise DimTooLarge(f"Kronecker product {rows}x{cols} exceeds {MAX_KRON_DIM}")
    return np.kron(left, right)


def logdet(c: CholeskyFactor) -> float:
    """log det(L L^T) = 2 * sum(log diag(L))"""
    return float(2.0 * np.sum(np.log(np.diag(c.lower))))


def vec(x: npt.ArrayLike) -> Vector:
    """Column-stacking vectorization"""
    return np.asarray(x, dtype=np.float64).reshape(-1, order="F")


def unvec(v: npt.ArrayLike, rows: int, cols: int) -> Matrix:
    """Inverse of vec"""
    return np.asarray(v, dtype=np.float64).reshape((rows, cols), order="F")
