"""Two-stage analysis of a screening experiment.

Stage 1 fits the main-effect model and tests each factor with the
pre-selection variance estimate from the full second-order model. Stage 2
chooses second-order terms, either by guided subsets (reduced lack-of-fit
F-tests) or by an all-subsets search minimizing a BIC that conditions on
the pooled variance estimate.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .design import (
    Design,
    ModelSpec,
    Term,
    check_terms,
    expand_model,
    main_effects_matrix,
    second_order_matrix,
    term_label,
)
from .numerics import (
    f_quantile,
    gram_quadratic_batch,
    f_sf,
    numerical_rank,
    orthonormal_basis,
    t_quantile,
    t_sf_two_sided,
)

HEREDITY = ("strong", "weak", "full")
METHODS = ("allsubsets", "guided", "guided-extended")
GUIDED_ALPHA = 0.20
ALL_LOF_POLICIES = ("report", "largest")
TIE_TOL = 1e-10
BATCH = 20_000


class AnalysisError(ValueError):
    """The analysis is infeasible for this design (for instance g = 0)."""


def _response(y, design: Design) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != design.n:
        raise ValueError(f"response has {y.shape[0]} values but the design has {design.n} runs")
    if not np.all(np.isfinite(y)):
        raise ValueError("response has non-finite values")
    return y


def _rss(y: np.ndarray, X: np.ndarray) -> float:
    if X.shape[1] == 0:
        return float(y @ y)
    Q = orthonormal_basis(X)
    e = y - Q @ (Q.T @ y)
    return float(e @ e)


# ---------------------------------------------------------------------------
# heredity

@dataclass(frozen=True)
class HeredityRule:
    kind: str = "strong"

    def __post_init__(self):
        if self.kind not in HEREDITY:
            raise ValueError(f"heredity must be one of {HEREDITY}, got {self.kind!r}")

    def admits(self, term: Term, active) -> bool:
        i, j = term
        if self.kind == "full":
            return True
        if self.kind == "strong":
            return i in active and j in active
        return i in active or j in active

    def filter(self, terms, active) -> list[Term]:
        active = set(active)
        return [t for t in terms if self.admits(t, active)]


# ---------------------------------------------------------------------------
# variance estimation and stage 1

@dataclass(frozen=True)
class SigmaEstimate:
    sigma2: float
    g: int
    r: int
    ell: int
    ss_resid: float
    ss_pe: float
    ss_lof: float

    @property
    def ms_pe(self) -> float | None:
        return self.ss_pe / self.r if self.r else None

    @property
    def ms_lof(self) -> float | None:
        return self.ss_lof / self.ell if self.ell else None


def _pure_error_ss(y: np.ndarray, D: np.ndarray) -> float:
    _, inv = np.unique(D, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    sums = np.bincount(inv, weights=y)
    counts = np.bincount(inv)
    means = sums / counts
    e = y - means[inv]
    return float(e @ e)


def preselection_sigma2(y, design: Design, spec: ModelSpec) -> SigmaEstimate:
    """Residual mean square of the full model, split into pure error and lack of fit."""
    y = _response(y, design)
    X = expand_model(design, spec).X
    g = design.n - numerical_rank(X)
    if g < 1:
        raise AnalysisError("no error degrees of freedom (g = 0): sigma^2 cannot be estimated")
    ss = _rss(y, X)
    r = design.n - design.n_unique()
    ss_pe = _pure_error_ss(y, design.settings) if r else 0.0
    ss_lof = max(ss - ss_pe, 0.0)
    return SigmaEstimate(ss / g, g, r, g - r, ss, ss_pe, ss_lof)


def main_effect_estimates(y, design: Design) -> np.ndarray:
    """Least-squares main-effect fit (intercept first); needs no error df."""
    y = _response(y, design)
    X1 = main_effects_matrix(design.settings)
    if numerical_rank(X1) < X1.shape[1]:
        raise AnalysisError("main effects are not estimable (X1 is rank deficient)")
    return np.linalg.solve(X1.T @ X1, X1.T @ y)


@dataclass(frozen=True)
class Stage1Result:
    beta_hat: np.ndarray  # intercept first
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    ci: np.ndarray  # k x 2
    sigma2_hat: float
    g: int
    alpha: float
    active: tuple[int, ...]


def stage1(y, design: Design, alpha: float, spec: ModelSpec = ModelSpec("2fi")) -> Stage1Result:
    """Main-effect fit with t-tests using the pre-selection estimate of sigma^2."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    y = _response(y, design)
    est = preselection_sigma2(y, design, spec)
    X1 = main_effects_matrix(design.settings)
    if numerical_rank(X1) < X1.shape[1]:
        raise AnalysisError("main effects are not estimable (X1 is rank deficient)")
    V = np.linalg.inv(X1.T @ X1)
    beta = V @ (X1.T @ y)
    se = math.sqrt(est.sigma2) * np.sqrt(np.diag(V)[1:])
    b = beta[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, b / se, np.where(b == 0, 0.0, np.inf * np.sign(b)))
    p = np.array([t_sf_two_sided(tj, est.g) if np.isfinite(tj) else 0.0 for tj in t])
    q = t_quantile(alpha, est.g)
    ci = np.column_stack([b - q * se, b + q * se])
    active = tuple(int(j) for j in np.flatnonzero(p < alpha))
    return Stage1Result(beta, se, t, p, ci, est.sigma2, est.g, alpha, active)


@dataclass(frozen=True)
class PooledSigma:
    sigma2: float
    g_star: int
    ss_inactive: float
    n_inactive: int


def pooled_sigma2(y, design: Design, spec: ModelSpec, s1: Stage1Result) -> PooledSigma:
    """Pool the residual SS with the SS of the inactive main effects.

    SS_inactive = y'(P_X - P_Xred)y, where X_red drops the inactive main-effect
    columns from the full model matrix; g* = n - rank(X_red).
    """
    y = _response(y, design)
    mm = expand_model(design, spec)
    inactive = [j for j in range(design.k) if j not in s1.active]
    keep = [0] + [1 + j for j in s1.active]
    X = mm.X
    Xred = np.hstack([mm.X1[:, keep], mm.X2])
    ss_full = _rss(y, X)
    ss_red = _rss(y, Xred)
    g_star = design.n - numerical_rank(Xred)
    if g_star < 1:
        raise AnalysisError("no error degrees of freedom after pooling")
    return PooledSigma(ss_red / g_star, g_star, max(ss_red - ss_full, 0.0), len(inactive))


# ---------------------------------------------------------------------------
# shared second-order machinery

@dataclass
class _Space:
    """Second-order candidates adjusted for a main-effect matrix."""

    terms: list[Term]
    C: np.ndarray  # W'W
    u: np.ndarray  # W'y
    rss1: float  # y'(I - P_X1)y
    ss_all: float  # y'P_W y
    rank: int

    def explained(self, Z: np.ndarray):
        """y'P_Z y for each row of index sets Z, and a full-rank mask."""
        if Z.shape[1] == 0:
            return np.zeros(Z.shape[0]), np.ones(Z.shape[0], dtype=bool)
        ss, ok = gram_quadratic_batch(self.C, Z, self.u[:, None])
        return np.where(ok, ss[:, 0], np.nan), ok


def _space(y: np.ndarray, X1: np.ndarray, X2: np.ndarray, terms: list[Term]) -> _Space:
    Q1 = orthonormal_basis(X1)
    W = X2 - Q1 @ (Q1.T @ X2)
    r1 = y - Q1 @ (Q1.T @ y)
    rss1 = float(r1 @ r1)
    if W.shape[1] == 0 or not np.any(np.abs(W) > 1e-12):
        return _Space(terms, W.T @ W, W.T @ y, rss1, 0.0, 0)
    Qw = orthonormal_basis(W)
    pw = Qw.T @ y
    return _Space(terms, W.T @ W, W.T @ y, rss1, float(pw @ pw), Qw.shape[1])


def _combination_batches(m: int, p: int):
    it = itertools.combinations(range(m), p)
    while True:
        chunk = list(itertools.islice(it, BATCH))
        if not chunk:
            return
        yield np.array(chunk, dtype=int).reshape(len(chunk), p)


def _ratio(ss: np.ndarray, sigma2: float, scale: float) -> np.ndarray:
    if sigma2 > 0:
        return ss / sigma2
    return np.where(ss > 1e-10 * max(scale, 1.0), np.inf, 0.0)


# ---------------------------------------------------------------------------
# overall test and guided subsets

@dataclass(frozen=True)
class FTest:
    F: float
    p: float
    df1: int
    df2: int


def _overall_from_space(sp: _Space, pooled: PooledSigma, scale: float) -> FTest:
    if sp.rank < 1:
        raise AnalysisError("rank(X2|1) = 0: no second-order information to test")
    F = float(_ratio(np.array([sp.ss_all]), pooled.sigma2, scale)[0]) / sp.rank
    p = f_sf(F, sp.rank, pooled.g_star) if math.isfinite(F) else 0.0
    return FTest(F, p, sp.rank, pooled.g_star)


def overall_f_test(y, design: Design, spec: ModelSpec, pooled: PooledSigma, terms=None) -> FTest:
    """F = [y'P_{X2|1}y / rank(X2|1)] / sigma^2 on (rank(X2|1), g*) df."""
    y = _response(y, design)
    terms = spec.second_order_terms(design.k) if terms is None else list(terms)
    check_terms(design, terms)
    D = design.settings
    sp = _space(y, main_effects_matrix(D), second_order_matrix(D, terms), terms)
    return _overall_from_space(sp, pooled, float(y @ y))


@dataclass
class SelectionResult:
    method: str
    terms: tuple[Term, ...]
    status: str  # "selected", "none", "all-lof"
    sigma2: float
    g_star: int
    mbic: float | None = None
    overall: FTest | None = None
    size_searched: int = 0
    fallback_terms: tuple[Term, ...] = ()  # best largest-size model when all exhibit LOF
    top_models: list[tuple[float, tuple[Term, ...]]] = field(default_factory=list)
    scores: list[tuple[tuple[Term, ...], float, float]] | None = None  # (Z, rss, mbic)
    coefficients: dict[str, float] = field(default_factory=dict)


def guided_subsets(
    y,
    design: Design,
    spec: ModelSpec,
    heredity: HeredityRule,
    alpha: float = GUIDED_ALPHA,
    max_size: int | None = None,
    pooling_variant: bool = False,
    s1: Stage1Result | None = None,
    pooled: PooledSigma | None = None,
    stage1_alpha: float = 0.10,
    all_lof: str = "report",
) -> SelectionResult:
    """Smallest models free of reduced lack-of-fit, searched by increasing size.

    If every model up to ``max_size`` shows lack of fit the status is
    "all-lof" and the smallest-SS model of the largest size is kept in
    ``fallback_terms``. With ``all_lof="largest"`` that model is also
    returned as the selection; with "report" the selection is empty.
    """
    if all_lof not in ALL_LOF_POLICIES:
        raise ValueError(f"all_lof must be one of {ALL_LOF_POLICIES}")
    y = _response(y, design)
    s1 = stage1(y, design, stage1_alpha, spec) if s1 is None else s1
    pooled = pooled_sigma2(y, design, spec, s1) if pooled is None else pooled
    cand = heredity.filter(spec.second_order_terms(design.k), s1.active)
    check_terms(design, cand)
    D = design.settings
    X1 = main_effects_matrix(D)
    sp = _space(y, X1, second_order_matrix(D, cand), cand)
    method = "guided-pooled" if pooling_variant else "guided"
    base = dict(method=method, sigma2=pooled.sigma2, g_star=pooled.g_star)
    if sp.rank < 1:
        return _finish(SelectionResult(terms=(), status="none", **base), y, design, s1, False)
    scale = float(y @ y)
    overall = _overall_from_space(sp, pooled, scale)
    if not overall.p < alpha:
        res = SelectionResult(terms=(), status="none", overall=overall, **base)
        return _finish(res, y, design, s1, False)
    q = sp.rank
    max_size = q // 2 if max_size is None else min(max_size, q)
    m = len(cand)
    for p in range(1, max_size + 1):
        thresh = f_quantile(1.0 - alpha, q - p, pooled.g_star) if q > p else math.inf
        passing: list[tuple[float, tuple[int, ...]]] = []
        best_here: tuple[float, tuple[int, ...]] | None = None
        for Z in _combination_batches(m, p):
            expl, ok = sp.explained(Z)
            lof = sp.ss_all - expl[ok]
            Zok = Z[ok]
            if q > p:
                FZ = _ratio(np.maximum(lof, 0.0), pooled.sigma2, scale) / (q - p)
            else:
                FZ = np.zeros(len(Zok))
            if len(Zok):
                i = int(np.argmin(lof))
                cand_best = (float(lof[i]), tuple(Zok[i].tolist()))
                if best_here is None or cand_best < best_here:
                    best_here = cand_best
            for idx in np.flatnonzero(FZ <= thresh):
                passing.append((float(lof[idx]), tuple(Zok[idx].tolist())))
        if passing:
            if pooling_variant:
                chosen = sorted({i for _, z in passing for i in z})
            else:
                chosen = list(min(passing)[1])
            terms = tuple(cand[i] for i in chosen)
            res = SelectionResult(terms=terms, status="selected", overall=overall, size_searched=p, **base)
            return _finish(res, y, design, s1, False)
    fallback = () if best_here is None else tuple(cand[i] for i in best_here[1])
    res = SelectionResult(
        terms=fallback if all_lof == "largest" else (),
        status="all-lof",
        overall=overall,
        size_searched=max_size,
        fallback_terms=fallback,
        **base,
    )
    return _finish(res, y, design, s1, False)


# ---------------------------------------------------------------------------
# all-subsets mBIC

def all_subsets_mbic(
    y,
    design: Design,
    spec: ModelSpec,
    heredity: HeredityRule,
    max_terms: int | None = None,
    reduce_x1: bool = True,
    s1: Stage1Result | None = None,
    pooled: PooledSigma | None = None,
    stage1_alpha: float = 0.10,
    keep_scores: bool = False,
    n_top: int = 10,
) -> SelectionResult:
    """Minimize mBIC = y'(I - P_X1 - P_Z)y / sigma^2 + log(n)(1 + k + p2).

    Model sizes whose lower bound RSS_all / sigma^2 + log(n)(1 + k + p2)
    cannot beat the incumbent are skipped; the argmin is unaffected. Ties go
    to the smaller model, then to the lexicographically first term set.
    """
    y = _response(y, design)
    s1 = stage1(y, design, stage1_alpha, spec) if s1 is None else s1
    pooled = pooled_sigma2(y, design, spec, s1) if pooled is None else pooled
    cand = heredity.filter(spec.second_order_terms(design.k), s1.active)
    check_terms(design, cand)
    D = design.settings
    X1 = main_effects_matrix(D)
    if reduce_x1:
        X1 = X1[:, [0] + [1 + j for j in s1.active]]
    sp = _space(y, X1, second_order_matrix(D, cand), cand)
    n, k = design.n, design.k
    logn = math.log(n)
    scale = float(y @ y)
    sigma2 = pooled.sigma2
    max_terms = sp.rank if max_terms is None else min(max_terms, sp.rank)
    m = len(cand)

    rss_all = sp.rss1 - sp.ss_all
    best = math.inf
    best_z: tuple[int, ...] = ()
    top: list[tuple[float, int, tuple[int, ...]]] = []  # max-heap via negation
    scores = [] if keep_scores else None
    counter = 0
    for p in range(0, max_terms + 1):
        bound = float(_ratio(np.array([max(rss_all, 0.0)]), sigma2, scale)[0]) + logn * (1 + k + p)
        if bound > best + TIE_TOL and not keep_scores:
            break
        for Z in _combination_batches(m, p):
            expl, ok = sp.explained(Z)
            rss = np.maximum(sp.rss1 - expl[ok], 0.0)
            mb = _ratio(rss, sigma2, scale) + logn * (1 + k + p)
            Zok = Z[ok]
            if len(mb) == 0:
                continue
            i = int(np.argmin(mb))
            if mb[i] < best - TIE_TOL * max(1.0, abs(best) if math.isfinite(best) else 1.0):
                best, best_z = float(mb[i]), tuple(Zok[i].tolist())
            if n_top:
                for j in np.argsort(mb, kind="stable")[:n_top]:
                    item = (-float(mb[j]), -counter, tuple(Zok[j].tolist()))
                    counter += 1
                    if len(top) < n_top:
                        heapq.heappush(top, item)
                    elif item > top[0]:
                        heapq.heapreplace(top, item)
            if scores is not None:
                for z, r_, s_ in zip(Zok, rss, mb):
                    scores.append((tuple(cand[t] for t in z), float(r_), float(s_)))
    terms = tuple(cand[i] for i in best_z)
    top_models = [(-s, tuple(cand[i] for i in z)) for s, _, z in sorted(top, reverse=True)]
    res = SelectionResult(
        method="allsubsets",
        terms=terms,
        status="selected" if terms else "none",
        sigma2=sigma2,
        g_star=pooled.g_star,
        mbic=best,
        size_searched=max_terms,
        top_models=top_models,
        scores=scores,
    )
    return _finish(res, y, design, s1, reduce_x1)


def _finish(res: SelectionResult, y, design: Design, s1: Stage1Result, reduce_x1: bool) -> SelectionResult:
    """Attach least-squares coefficients of the final model."""
    D = design.settings
    mains = list(s1.active) if reduce_x1 else list(range(design.k))
    X = np.hstack([main_effects_matrix(D)[:, [0] + [1 + j for j in mains]],
                   second_order_matrix(D, list(res.terms))])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    labels = ["intercept"] + [design.factor_names[j] for j in mains]
    labels += [term_label(t, design.factor_names) for t in res.terms]
    res.coefficients = {lab: float(c) for lab, c in zip(labels, coef)}
    return res


# ---------------------------------------------------------------------------
# end-to-end

@dataclass
class AnalysisResult:
    stage1: Stage1Result
    sigma: SigmaEstimate
    pooled: PooledSigma
    selection: SelectionResult

    @property
    def active_factors(self) -> tuple[int, ...]:
        return self.stage1.active

    @property
    def selected_terms(self) -> tuple[Term, ...]:
        return self.selection.terms


def analyze(
    y,
    design: Design,
    spec: ModelSpec,
    alpha: float = 0.10,
    method: str = "allsubsets",
    heredity: str | HeredityRule = "strong",
    reduce_x1: bool = True,
    pooling_variant: bool = False,
    all_lof: str = "report",
) -> AnalysisResult:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    rule = heredity if isinstance(heredity, HeredityRule) else HeredityRule(heredity)
    y = _response(y, design)
    sig = preselection_sigma2(y, design, spec)
    s1 = stage1(y, design, alpha, spec)
    pooled = pooled_sigma2(y, design, spec, s1)
    if method == "allsubsets":
        sel = all_subsets_mbic(y, design, spec, rule, reduce_x1=reduce_x1, s1=s1, pooled=pooled)
    else:
        cand = rule.filter(spec.second_order_terms(design.k), s1.active)
        D = design.settings
        sp_rank = 0
        if cand:
            W = second_order_matrix(D, cand)
            Q1 = orthonormal_basis(main_effects_matrix(D))
            W = W - Q1 @ (Q1.T @ W)
            sp_rank = numerical_rank(W) if np.any(np.abs(W) > 1e-12) else 0
        max_size = sp_rank // 2 if method == "guided" else max(sp_rank - 1, 0)
        sel = guided_subsets(
            y, design, spec, rule, max_size=max_size, pooling_variant=pooling_variant,
            s1=s1, pooled=pooled, all_lof=all_lof,
        )
        if method == "guided-extended":
            sel.method = "guided-extended" + ("-pooled" if pooling_variant else "")
    return AnalysisResult(s1, sig, pooled, sel)


def analysis_report(result: AnalysisResult, design: Design) -> dict:
    s1 = result.stage1
    names = design.factor_names
    sel = result.selection
    return {
        "stage1": {
            "alpha": s1.alpha,
            "g": s1.g,
            "sigma2_hat": s1.sigma2_hat,
            "intercept": float(s1.beta_hat[0]),
            "factors": [
                {
                    "factor": names[j],
                    "estimate": float(s1.beta_hat[j + 1]),
                    "se": float(s1.se[j]),
                    "t": float(s1.t[j]),
                    "p": float(s1.p[j]),
                    "ci": [float(s1.ci[j, 0]), float(s1.ci[j, 1])],
                    "active": j in s1.active,
                }
                for j in range(design.k)
            ],
        },
        "sigma2": {
            "preselection": result.sigma.sigma2,
            "g": result.sigma.g,
            "r": result.sigma.r,
            "ell": result.sigma.ell,
            "ms_pure_error": result.sigma.ms_pe,
            "ms_lack_of_fit": result.sigma.ms_lof,
            "pooled": result.pooled.sigma2,
            "g_star": result.pooled.g_star,
        },
        "selection": {
            "method": sel.method,
            "status": sel.status,
            "terms": [term_label(t, names) for t in sel.terms],
            "fallback_terms": [term_label(t, names) for t in sel.fallback_terms],
            "mbic": sel.mbic,
            "overall_F": None if sel.overall is None else {
                "F": sel.overall.F, "p": sel.overall.p, "df1": sel.overall.df1, "df2": sel.overall.df2,
            },
            "top_models": [
                {"mbic": s, "terms": [term_label(t, names) for t in z]} for s, z in sel.top_models
            ],
        },
        "final_model": sel.coefficients,
    }
