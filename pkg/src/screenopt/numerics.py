"""Dense linear algebra and distribution helpers shared by the other modules.

Everything here is a pure function of its arguments. The t/F distribution
functions are computed from the regularized incomplete beta function
(continued fraction, modified Lentz) so results do not depend on which
SciPy build is installed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

RANK_RTOL = 1e-8
EIG_RTOL = 1e-8
SMW_SINGULAR_TOL = 1e-10
GRAM_PIVOT_RTOL = 1e-10


class SingularUpdateError(ArithmeticError):
    """A rank-2 exchange would make the information matrix singular."""


def _as_matrix(M) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {A.shape}")
    return A


def numerical_rank(M, rel_tol: float = RANK_RTOL) -> int:
    """Rank from the diagonal of a column-pivoted QR factorization.

    Counts |R_ii| > rel_tol * max|R_ii|.
    """
    A = _as_matrix(M)
    if A.size == 0:
        raise ValueError("rank of an empty matrix is undefined")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    R = sla.qr(A, mode="r", pivoting=True, check_finite=False)[0]
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.count_nonzero(d > rel_tol * d[0]))


def orthonormal_basis(M, rel_tol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (n x rank) for the column space of ``M``."""
    A = _as_matrix(M)
    if A.shape[1] == 0:
        return np.zeros((A.shape[0], 0))
    Q, R, _ = sla.qr(A, mode="economic", pivoting=True, check_finite=False)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return np.zeros((A.shape[0], 0))
    r = int(np.count_nonzero(d > rel_tol * d[0]))
    return Q[:, :r]


def projector(M, rel_tol: float = RANK_RTOL) -> np.ndarray:
    """Orthogonal projector onto the column space of ``M``.

    Well defined for rank-deficient ``M``; the rank is decided by pivoted QR.
    """
    A = _as_matrix(M)
    if A.shape[1] < 1:
        raise ValueError("projector needs at least one column")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    Q = orthonormal_basis(A, rel_tol)
    return Q @ Q.T


def residual_projector(M, rel_tol: float = RANK_RTOL) -> np.ndarray:
    A = _as_matrix(M)
    return np.eye(A.shape[0]) - projector(A, rel_tol)


@dataclass(frozen=True)
class SymEigen:
    """Eigenpairs of a symmetric matrix, eigenvalues ascending."""

    values: np.ndarray
    vectors: np.ndarray
    positive: np.ndarray  # bool mask, value > EIG_RTOL * max|value|

    def smallest_positive(self, m: int) -> np.ndarray:
        """Up to ``m`` smallest eigenvalues flagged positive."""
        return self.values[self.positive][:m]


def sym_eigen(S, rel_tol: float = EIG_RTOL) -> SymEigen:
    A = _as_matrix(S)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"sym_eigen needs a square matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    scale = np.max(np.abs(w)) if w.size else 0.0
    positive = w > rel_tol * scale if scale > 0 else np.zeros(w.shape, dtype=bool)
    return SymEigen(values=w, vectors=V, positive=positive)


def smw_update(V, x_old, x_new, r_i: int = 1, tol: float = SMW_SINGULAR_TOL) -> np.ndarray:
    """Inverse information matrix after swapping ``r_i`` copies of a row.

    Given V = (X'X)^-1, returns (X'X + r_i (x_new x_new' - x_old x_old'))^-1
    through the closed-form 2x2 Sherman-Morrison-Woodbury inverse.
    Raises SingularUpdateError when the 2x2 determinant vanishes.
    """
    V = np.asarray(V, dtype=float)
    xo = np.asarray(x_old, dtype=float)
    xn = np.asarray(x_new, dtype=float)
    if xo.shape != (V.shape[0],) or xn.shape != (V.shape[0],):
        raise ValueError("row vectors must match the size of V")
    if r_i < 1:
        raise ValueError("r_i must be >= 1")
    Vn = V @ xn
    Vo = V @ xo
    v_new = xn @ Vn
    v_old = xo @ Vo
    v_cross = xo @ Vn
    det = (1.0 + r_i * v_new) * (1.0 - r_i * v_old) + (r_i * v_cross) ** 2
    if abs(det) < tol:
        raise SingularUpdateError(f"exchange gives singular information matrix (det={det:.3g})")
    # (I + F2'VF1)^-1 applied between V F1 and F2' V, written out for the 2x2 case
    a11 = (1.0 - r_i * v_old) / det
    a12 = r_i * v_cross / det
    a21 = -r_i * v_cross / det
    a22 = (1.0 + r_i * v_new) / det
    # V F1 = sqrt(r)(Vn, -Vo); F2' V = sqrt(r)(Vn, Vo)'
    L0, L1 = Vn, -Vo
    R0, R1 = Vn, Vo
    corr = r_i * (
        a11 * np.outer(L0, R0)
        + a12 * np.outer(L0, R1)
        + a21 * np.outer(L1, R0)
        + a22 * np.outer(L1, R1)
    )
    return V - corr


def woodbury_add_rows(V, U) -> np.ndarray:
    """(V^-1 + U'U)^-1 for a block of added rows ``U`` (m x p)."""
    V = np.asarray(V, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] == 0:
        return V.copy()
    VU = V @ U.T
    S = np.eye(U.shape[0]) + U @ VU
    return V - VU @ np.linalg.solve(S, VU.T)


def gram_quadratic_batch(C, Z, R, rel_tol: float = GRAM_PIVOT_RTOL):
    """Batched R_Z' C_ZZ^-1 R_Z diagonals for many index sets Z.

    ``C`` is an m x m Gram matrix, ``Z`` a (B, p) array of column indices and
    ``R`` an (m, q) right-hand side indexed by the same columns. Returns the
    (B, q) sums of squares of L^-1 R_Z, where C_ZZ = LL', and a (B,) mask that
    is False when some Cholesky pivot falls below rel_tol times its diagonal
    entry (the selected columns are then numerically dependent).
    """
    C = np.asarray(C, dtype=float)
    R = np.asarray(R, dtype=float)
    Z = np.asarray(Z, dtype=int)
    B, p = Z.shape
    q = R.shape[1]
    ok = np.ones(B, dtype=bool)
    if p == 0:
        return np.zeros((B, q)), ok
    L = np.zeros((B, p, p))
    W = np.empty((B, p, q))
    for j in range(p):
        zj = Z[:, j]
        for l in range(j):
            acc = C[zj, Z[:, l]] - np.einsum("bt,bt->b", L[:, j, :l], L[:, l, :l])
            L[:, j, l] = acc / L[:, l, l]
        cjj = C[zj, zj]
        d = cjj - np.einsum("bt,bt->b", L[:, j, :j], L[:, j, :j])
        good = d > rel_tol * np.maximum(cjj, 0.0)
        good &= cjj > 0
        ok &= good
        L[:, j, j] = np.sqrt(np.where(good, d, 1.0))
        W[:, j, :] = (R[zj] - np.einsum("bt,btq->bq", L[:, j, :j], W[:, :j, :])) / L[:, j, j, None]
    return np.einsum("bpq,bpq->bq", W, W), ok


# ---------------------------------------------------------------------------
# special functions

def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    eps = 1e-16
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _invert_betainc(a: float, b: float, target: float) -> float:
    """Solve I_x(a, b) = target for x by bisection, polished with Newton."""
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if betainc_reg(a, b, mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(mid, 1e-300):
            break
    x = 0.5 * (lo + hi)
    log_beta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    for _ in range(3):
        if not 0.0 < x < 1.0:
            break
        dens = math.exp((a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - log_beta)
        if dens <= 0 or not math.isfinite(dens):
            break
        step = (betainc_reg(a, b, x) - target) / dens
        x_new = x - step
        if not lo <= x_new <= hi:
            break
        x = x_new
    return x


def _check_df(*dfs: float) -> None:
    for df in dfs:
        if not (df >= 1 and math.isfinite(df)):
            raise ValueError(f"degrees of freedom must be >= 1, got {df}")


def _check_prob(p: float, name: str = "probability") -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {p}")


def t_cdf(t: float, df: float) -> float:
    _check_df(df)
    x = df / (df + t * t)
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| > |t|) for a t variable with ``df`` degrees of freedom."""
    _check_df(df)
    return betainc_reg(0.5 * df, 0.5, df / (df + t * t))


@lru_cache(maxsize=4096)
def t_quantile(alpha_two_sided: float, g: int) -> float:
    """Upper alpha/2 point of Student's t with ``g`` df: P(|T| > q) = alpha."""
    _check_prob(alpha_two_sided, "alpha")
    _check_df(g)
    x = _invert_betainc(0.5 * g, 0.5, alpha_two_sided)
    return math.sqrt(g * (1.0 - x) / x)


def f_cdf(f: float, d1: float, d2: float) -> float:
    _check_df(d1, d2)
    if f <= 0:
        return 0.0
    return betainc_reg(0.5 * d1, 0.5 * d2, d1 * f / (d1 * f + d2))


def f_sf(f: float, d1: float, d2: float) -> float:
    _check_df(d1, d2)
    if f <= 0:
        return 1.0
    # upper tail through the complementary argument keeps precision for tiny p
    return betainc_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))


@lru_cache(maxsize=4096)
def f_quantile(p: float, d1: int, d2: int) -> float:
    """Point q with P(F_{d1,d2} <= q) = p."""
    _check_prob(p)
    _check_df(d1, d2)
    x = _invert_betainc(0.5 * d1, 0.5 * d2, p)
    return d2 * x / (d1 * (1.0 - x))


@lru_cache(maxsize=1024)
def chi_mean_sqrt(g: int) -> float:
    """E sqrt(chi2_g / g) = sqrt(2/g) Gamma((g+1)/2) / Gamma(g/2)."""
    if g < 1:
        raise ValueError("g must be >= 1")
    return math.sqrt(2.0 / g) * math.exp(math.lgamma(0.5 * (g + 1)) - math.lgamma(0.5 * g))
