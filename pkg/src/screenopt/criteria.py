"""Design-quality functionals.

The ECI criterion averages, over the k main effects, the expected half-width
of a stage-1 confidence interval plus the expected absolute bias from
aliased second-order terms:

    ECI = (1/k) sum_j [ sqrt(2 tau^2 / pi * A_j A_j') + c * sqrt(v_j) ]

When the design cannot supply ``ell_min`` lack-of-fit df, the constant c is
replaced by one that accounts for the bias of a variance estimator built
from the ell* directions of C_{2|1} with the smallest positive eigenvalues.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import (
    Design,
    ModelMatrices,
    ModelSpec,
    dof_account,
    expand_model,
)
from .numerics import (
    EIG_RTOL,
    chi_mean_sqrt,
    f_quantile,
    gram_quadratic_batch,
    numerical_rank,
    sym_eigen,
    t_quantile,
)

SELECTION_TAU2 = 20.0


class CriterionError(ValueError):
    """A criterion is undefined for the given design (e.g. no error df)."""


class NoDesignMeetsThreshold(LookupError):
    """No design in the pool has an ECI value below the threshold S."""


@dataclass(frozen=True)
class EciParams:
    alpha: float = 0.10
    tau2: float = 20.0
    r_min: int = 0
    ell_min: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau2 < 0:
            raise ValueError("tau2 must be non-negative")
        if self.r_min < 0 or self.ell_min < 0:
            raise ValueError("r_min and ell_min must be non-negative")


@dataclass(frozen=True)
class EciEvaluation:
    bias: np.ndarray
    v: np.ndarray
    r: int
    g: int
    ell_tilde: int
    ell_star: int
    g_eff: int
    lambda_sum: float
    c: float
    total: float

    @property
    def sqrt_v(self) -> np.ndarray:
        return np.sqrt(self.v)

    @property
    def penalized(self) -> bool:
        return self.ell_star > 0


@dataclass(frozen=True)
class RlofParams:
    p2: int | None = None  # None: floor(rank(X_{2|1}) / 2)
    max_models: int = 5000
    rng_seed: int = 0

    def __post_init__(self):
        if self.p2 is not None and self.p2 < 0:
            raise ValueError("p2 must be non-negative")
        if self.max_models < 1:
            raise ValueError("max_models must be >= 1")


# ---------------------------------------------------------------------------
# alias matrix and variances

def _inverse_information(X1: np.ndarray) -> np.ndarray:
    M = X1.T @ X1
    if numerical_rank(X1) < X1.shape[1]:
        raise CriterionError("X1'X1 is singular: main effects are not estimable")
    return np.linalg.inv(M)


def alias_matrix(mm: ModelMatrices) -> np.ndarray:
    """A = (X1'X1)^-1 X1'X2, rows (intercept, factor 1..k)."""
    V = _inverse_information(mm.X1)
    return V @ (mm.X1.T @ mm.X2)


def alias_row_norms(A: np.ndarray) -> np.ndarray:
    """sqrt(A_j A_j') for the factor rows; the intercept row is skipped."""
    return np.sqrt(np.sum(A[1:] ** 2, axis=1))


def design_variances(mm: ModelMatrices) -> np.ndarray:
    V = _inverse_information(mm.X1)
    return np.diag(V)[1:].copy()


# ---------------------------------------------------------------------------
# ECI

def eci_constant(alpha: float, g: int) -> float:
    """c(alpha, g) = t_{alpha/2, g} * E sqrt(chi2_g / g)."""
    return t_quantile(alpha, g) * chi_mean_sqrt(g)


def penalized_constant(alpha: float, g: int, tau2: float, lambda_sum: float) -> float:
    return t_quantile(alpha, g) * math.sqrt(1.0 + tau2 / g * lambda_sum)


def eci_from_parts(
    X1: np.ndarray,
    X2: np.ndarray,
    V: np.ndarray,
    r: int,
    ell: int,
    params: EciParams,
) -> EciEvaluation:
    """ECI given model matrices, V = (X1'X1)^-1 and the df split."""
    X = np.hstack([X1, X2])
    return eci_from_gram(X.T @ X, V, X1.shape[1], r, ell, params)


def eci_from_gram(
    G: np.ndarray,
    V: np.ndarray,
    p1: int,
    r: int,
    ell: int,
    params: EciParams,
) -> EciEvaluation:
    """ECI from the Gram matrix X'X of [X1 | X2] and V = (X1'X1)^-1.

    The exchange search supplies G and V from rank-two updates rather than
    rebuilding them.
    """
    k = p1 - 1
    v = np.diag(V)[1:].copy()
    if np.any(v <= 0):
        raise CriterionError("non-positive design variance; X1'X1 is not positive definite")
    X1tX2 = G[:p1, p1:]
    A = V @ X1tX2
    if A.shape[1]:
        bias = np.sqrt(2.0 * params.tau2 / math.pi * np.sum(A[1:] ** 2, axis=1))
    else:
        bias = np.zeros(k)
    g = r + ell
    ell_star = max(0, params.ell_min - ell)
    lambda_sum = 0.0
    if ell_star == 0:
        if g < 1:
            raise CriterionError("no error degrees of freedom (g = 0): the ECI criterion is undefined")
        g_eff = g
        c = eci_constant(params.alpha, g)
    else:
        # the variance estimator borrows ell* directions of C_{2|1}, giving r + ell_min df
        g_eff = r + params.ell_min
        C21 = G[p1:, p1:] - X1tX2.T @ A
        lam = sym_eigen(C21).smallest_positive(ell_star)
        if lam.size < ell_star:
            return EciEvaluation(bias, v, r, g, ell, ell_star, g_eff, math.inf, math.inf, math.inf)
        lambda_sum = float(np.sum(lam))
        c = penalized_constant(params.alpha, g_eff, params.tau2, lambda_sum)
    total = float(np.mean(bias + c * np.sqrt(v)))
    return EciEvaluation(bias, v, r, g, ell, ell_star, g_eff, lambda_sum, c, total)


def eci_totals_batch(
    G: np.ndarray,
    p1: int,
    r: int,
    ell: int,
    params: EciParams,
) -> np.ndarray:
    """ECI totals for a stack of Gram matrices sharing the same df split.

    Singular X1'X1 gives +inf. Agrees with :func:`eci_from_gram` entry-wise.
    """
    B = G.shape[0]
    G11 = G[:, :p1, :p1]
    X1tX2 = G[:, :p1, p1:]
    out = np.full(B, math.inf)
    ev = np.linalg.eigvalsh(G11)
    ok = ev[:, 0] > 1e-10 * ev[:, -1]
    if not np.any(ok):
        return out
    V = np.linalg.inv(G11[ok])
    A = V @ X1tX2[ok]
    v = np.diagonal(V, axis1=1, axis2=2)[:, 1:]
    bias = np.sqrt(2.0 * params.tau2 / math.pi * np.sum(A[:, 1:, :] ** 2, axis=2))
    g = r + ell
    ell_star = max(0, params.ell_min - ell)
    if ell_star == 0:
        if g < 1:
            raise CriterionError("no error degrees of freedom (g = 0): the ECI criterion is undefined")
        c = np.full(A.shape[0], eci_constant(params.alpha, g))
    else:
        g_eff = r + params.ell_min
        C21 = G[ok][:, p1:, p1:] - np.swapaxes(X1tX2[ok], 1, 2) @ A
        C21 = 0.5 * (C21 + np.swapaxes(C21, 1, 2))
        w = np.linalg.eigvalsh(C21)
        scale = np.max(np.abs(w), axis=1, keepdims=True)
        pos = w > EIG_RTOL * scale
        wpos = np.where(pos, w, np.inf)
        wpos.sort(axis=1)
        lam = wpos[:, :ell_star]
        enough = np.all(np.isfinite(lam), axis=1)
        lam_sum = np.where(enough, np.sum(np.where(np.isfinite(lam), lam, 0.0), axis=1), np.inf)
        t = t_quantile(params.alpha, g_eff)
        c = t * np.sqrt(1.0 + params.tau2 / g_eff * lam_sum)
    out[ok] = np.mean(bias + c[:, None] * np.sqrt(v), axis=1)
    return out


def eci(design: Design, spec: ModelSpec, params: EciParams) -> EciEvaluation:
    mm = expand_model(design, spec)
    V = _inverse_information(mm.X1)
    dof = dof_account(design, spec)
    return eci_from_parts(mm.X1, mm.X2, V, dof.r, dof.ell, params)


# ---------------------------------------------------------------------------
# comparator criteria

def _centered_information(design: Design) -> np.ndarray:
    D = design.settings
    Dc = D - D.mean(axis=0)
    return Dc.T @ Dc


def _pure_error_df(design: Design, r: int | None) -> int:
    r = design.n - design.n_unique() if r is None else int(r)
    if r < 1:
        raise CriterionError("pure-error df r must be >= 1 for the modified criteria")
    return r


def gt_modified_d(design: Design, alpha: float, r: int | None = None) -> float:
    """(F_{k, r, 1-alpha})^k / |D'(I - P_1)D|.

    ``r`` defaults to the design's own pure-error df.
    """
    r = _pure_error_df(design, r)
    k = design.k
    det = np.linalg.det(_centered_information(design))
    if det <= 0:
        return math.inf
    return f_quantile(1.0 - alpha, k, r) ** k / det


def gt_modified_a(design: Design, alpha: float, r: int | None = None) -> float:
    """F_{1, r, 1-alpha} * tr[(D'(I - P_1)D)^-1]."""
    r = _pure_error_df(design, r)
    M = _centered_information(design)
    if numerical_rank(M) < design.k:
        return math.inf
    return f_quantile(1.0 - alpha, 1, r) * float(np.trace(np.linalg.inv(M)))


def bayes_d(design: Design, spec: ModelSpec, tau2: float) -> float:
    """|X'X + tau^-2 K|^-1 with K = diag(0 on primary terms, 1 on potential terms)."""
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    mm = expand_model(design, spec)
    X = mm.X
    K = np.zeros(X.shape[1])
    K[mm.X1.shape[1]:] = 1.0
    sign, logdet = np.linalg.slogdet(X.T @ X + np.diag(K) / tau2)
    if sign <= 0:
        return math.inf
    return math.exp(-logdet)


def d_efficiency(design: Design) -> float:
    """|D'(I - P_1)D|^(1/k) / n; equals 1 for an orthogonal 2-level design."""
    det = np.linalg.det(_centered_information(design))
    if det <= 0:
        return 0.0
    return det ** (1.0 / design.k) / design.n


# ---------------------------------------------------------------------------
# rLOF

def _candidate_sets(m: int, p2: int, max_models: int, rng: np.random.Generator):
    """Yield batches of term-index sets; exhaustive when small enough.

    In sampling mode, yields fresh uniformly drawn distinct sets until the
    consumer stops asking (rank-deficient sets do not count toward the cap).
    """
    total = math.comb(m, p2)
    if total <= max_models:
        combos = np.array(list(itertools.combinations(range(m), p2)), dtype=int).reshape(-1, p2)
        for s in range(0, len(combos), 2048):
            yield combos[s:s + 2048]
        return
    seen: set[tuple[int, ...]] = set()
    while len(seen) < total:
        batch = []
        for _ in range(2048):
            z = tuple(sorted(rng.choice(m, size=p2, replace=False).tolist()))
            if z not in seen:
                seen.add(z)
                batch.append(z)
        if batch:
            yield np.array(batch, dtype=int)


def _residual_diagonals(C: np.ndarray, Z: np.ndarray):
    """For each row of Z: diag(C - C[:,Z] C_ZZ^-1 C[Z,:]) and a full-rank flag."""
    red, ok = gram_quadratic_batch(C, Z, C)
    out = np.diag(C)[None, :] - red
    out[~ok] = np.nan
    return out, ok


def rlof(design: Design, spec: ModelSpec, params: RlofParams = RlofParams()) -> float:
    """Minimum over fitted term sets Z of the summed smallest reduced-LOF diagonals."""
    mm = expand_model(design, spec)
    return rlof_from_matrices(mm.X2_adj, params)


def rlof_from_matrices(X2_adj: np.ndarray, params: RlofParams = RlofParams()) -> float:
    m = X2_adj.shape[1]
    if m == 0:
        return 0.0
    q = numerical_rank(X2_adj) if np.any(X2_adj) else 0
    p2 = q // 2 if params.p2 is None else params.p2
    if p2 > q:
        raise ValueError(f"p2 = {p2} exceeds rank(X2|1) = {q}")
    n_keep = q - p2
    if n_keep == 0:
        return 0.0
    C = X2_adj.T @ X2_adj
    if p2 == 0:
        return float(np.sum(np.sort(np.diag(C))[:n_keep]))
    rng = np.random.default_rng(params.rng_seed)
    best = math.inf
    evaluated = 0
    for Z in _candidate_sets(m, p2, params.max_models, rng):
        red, ok = _residual_diagonals(C, Z)
        Zok = Z[ok]
        red = red[ok]
        if evaluated + len(Zok) > params.max_models:
            cut = params.max_models - evaluated
            Zok, red = Zok[:cut], red[:cut]
        if len(Zok):
            np.put_along_axis(red, Zok, np.inf, axis=1)
            vals = np.sum(np.sort(red, axis=1)[:, :n_keep], axis=1)
            best = min(best, float(np.min(vals)))
            evaluated += len(Zok)
        if evaluated >= params.max_models:
            break
    return best


# ---------------------------------------------------------------------------
# constrained selection

@dataclass(frozen=True)
class PoolScore:
    index: int
    eci_total: float
    rlof: float


def score_pool(
    pool: Sequence[Design],
    spec: ModelSpec,
    eci_params: EciParams,
    rlof_params: RlofParams = RlofParams(),
) -> list[PoolScore]:
    """ECI at tau^2 = 20 (no ell penalty) and rLOF for every design in the pool."""
    p = EciParams(alpha=eci_params.alpha, tau2=SELECTION_TAU2)
    out = []
    for i, d in enumerate(pool):
        try:
            total = eci(d, spec, p).total
        except CriterionError:
            total = math.inf
        out.append(PoolScore(i, total, rlof(d, spec, rlof_params)))
    return out


def constrained_select(
    pool: Sequence[Design],
    S: float,
    eci_params: EciParams,
    rlof_params: RlofParams = RlofParams(),
    spec: ModelSpec = ModelSpec("2fi"),
) -> Design:
    """Among designs with ECI < S, the one with the largest rLOF value.

    Ties on rLOF go to the smaller ECI, then to the earlier pool position.
    """
    if not pool:
        raise ValueError("design pool is empty")
    scores = [s for s in score_pool(pool, spec, eci_params, rlof_params) if s.eci_total < S]
    if not scores:
        raise NoDesignMeetsThreshold(
            f"no design has ECI < {S}; re-evaluate with a larger alpha or a smaller tau2"
        )
    best = min(scores, key=lambda s: (-s.rlof, s.eci_total, s.index))
    return pool[best.index]


def criteria_report(
    design: Design,
    spec: ModelSpec,
    eci_params: EciParams,
    rlof_params: RlofParams = RlofParams(),
    design_id: str = "",
) -> dict:
    ev = eci(design, spec, eci_params)
    return {
        "design_id": design_id or design.canonical_key()[:12],
        "eci": {
            "total": ev.total,
            "c": ev.c,
            "g": ev.g,
            "r": ev.r,
            "ell": ev.ell_tilde,
            "ell_star": ev.ell_star,
            "lambda_sum": ev.lambda_sum,
            "per_factor": [
                {"factor": name, "bias": float(b), "sqrt_v": float(s)}
                for name, b, s in zip(design.factor_names, ev.bias, ev.sqrt_v)
            ],
        },
        "rlof": rlof(design, spec, rlof_params),
        "d_efficiency": d_efficiency(design),
    }
