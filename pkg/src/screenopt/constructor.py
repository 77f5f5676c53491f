"""ECI-optimal design search.

Each restart draws a random design, then alternates a coordinate-exchange
pass over the unreplicated rows D_u (moving any paired replicates along with
their row) with an all-assignments optimization of the replicate rows D_r.
Candidate exchanges are scored from rank-two updates of X'X and its main
effect inverse. Designs visited with ECI below the threshold S are kept in a
pool for the constrained rLOF selection step.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .criteria import (
    CriterionError,
    EciEvaluation,
    EciParams,
    eci,
    eci_from_gram,
    eci_totals_batch,
)
from .design import (
    THREE_LEVEL,
    TWO_LEVEL,
    Design,
    ModelSpec,
    check_terms,
    main_effects_matrix,
    second_order_matrix,
)
from .numerics import SingularUpdateError, numerical_rank, smw_update

IMPROVE_TOL = 1e-10
VERIFY_TOL = 1e-8
START_ATTEMPTS = 100


class SearchInfeasible(ValueError):
    """A random starting design with estimable main effects cannot be drawn."""


@dataclass(frozen=True)
class SearchConfig:
    k: int
    n: int
    spec: ModelSpec = ModelSpec("2fi")
    eci_params: EciParams = EciParams()
    levels: tuple[tuple[float, ...], ...] = ()
    restarts: int = 2000
    S: float = 1.0
    seed: int = 0
    max_passes: int = 50
    dr_cap: int = 100_000
    dr_sample: int = 10_000
    verify: bool = False

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.eci_params.r_min > self.n - 1:
            raise ValueError("r_min must be <= n - 1")
        if self.eci_params.r_min + self.eci_params.ell_min < 1:
            raise ValueError("need r_min + ell_min >= 1 so the criterion has error df")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")
        if self.levels:
            lv = tuple(tuple(sorted(float(x) for x in l)) for l in self.levels)
            if len(lv) != self.k:
                raise ValueError("need one level set per factor")
        else:
            terms = self.spec.second_order_terms(self.k)
            base = THREE_LEVEL if any(i == j for i, j in terms) else TWO_LEVEL
            lv = (base,) * self.k
        for l in lv:
            if len(l) < 2 or min(l) < -1 or max(l) > 1:
                raise ValueError("each level set needs >= 2 values in [-1, 1]")
        object.__setattr__(self, "levels", lv)


@dataclass(frozen=True)
class RestartTrace:
    index: int
    start: float
    final: float
    passes: int
    steps: tuple[float, ...] = ()


@dataclass
class SearchResult:
    best: Design
    best_eval: EciEvaluation
    pool: list[tuple[Design, float]]
    trace: list[RestartTrace] = field(default_factory=list)


# ---------------------------------------------------------------------------
# search state

class _State:
    """A design together with its Gram matrix, main-effect inverse and ECI."""

    def __init__(self, design: Design, spec: ModelSpec, params: EciParams):
        self.spec = spec
        self.params = params
        self.terms = spec.second_order_terms(design.k)
        self.k = design.k
        self.p1 = design.k + 1
        self.D = np.array(design.settings)
        self.rep = list(design.replicate_of)
        self.names = design.factor_names
        self.levels = design.levels
        self.X = self.model_rows(self.D)
        self.refresh()
        self.log = [self.eval.total]

    def model_rows(self, D: np.ndarray) -> np.ndarray:
        return np.hstack([main_effects_matrix(D), second_order_matrix(D, self.terms)])

    def refresh(self) -> None:
        self.G = self.X.T @ self.X
        G11 = self.G[: self.p1, : self.p1]
        if numerical_rank(self.X[:, : self.p1]) < self.p1:
            raise CriterionError("X1 is rank deficient")
        self.V = np.linalg.inv(G11)
        self.r, self.ell = self.dof(self.D, self.X)
        self.eval = eci_from_gram(self.G, self.V, self.p1, self.r, self.ell, self.params)

    def dof(self, D: np.ndarray, X: np.ndarray) -> tuple[int, int]:
        n = D.shape[0]
        n_u = np.unique(D, axis=0).shape[0]
        r = n - n_u
        g = n - numerical_rank(X)
        return r, g - r

    @property
    def total(self) -> float:
        return self.eval.total

    def group(self, i: int) -> list[int]:
        return [i] + [j for j, p in enumerate(self.rep) if p == i]

    def design(self) -> Design:
        return Design(self.D, tuple(self.rep), self.names, self.levels)

    def accept(self, config: SearchConfig) -> None:
        self.refresh()
        self.log.append(self.eval.total)
        if config.verify:
            self.check_pairing()

    def check_pairing(self) -> None:
        for i, p in enumerate(self.rep):
            if p is not None and not np.array_equal(self.D[i], self.D[p]):
                raise AssertionError(f"replicate row {i} differs from its paired row {p}")


def _model_spec_check(design: Design, spec: ModelSpec) -> None:
    check_terms(design, spec.second_order_terms(design.k))


# ---------------------------------------------------------------------------
# operations

def random_start(config: SearchConfig, rng: np.random.Generator) -> Design:
    """Random D_u rows plus r_min replicates of randomly chosen D_u rows."""
    k, n = config.k, config.n
    r_min = config.eci_params.r_min
    n_u = n - r_min
    if n_u < k + 1:
        raise SearchInfeasible(f"n - r_min = {n_u} runs cannot estimate {k + 1} main-effect parameters")
    levels = [np.asarray(l) for l in config.levels]
    for _ in range(START_ATTEMPTS):
        Du = np.column_stack([rng.choice(l, size=n_u) for l in levels])
        src = rng.integers(0, n_u, size=r_min)
        D = np.vstack([Du, Du[src]])
        if numerical_rank(main_effects_matrix(D)) == k + 1:
            rep = (None,) * n_u + tuple(int(s) for s in src)
            return Design(D, rep, levels=config.levels)
    raise SearchInfeasible(f"no full-rank starting design found in {START_ATTEMPTS} attempts")


def _exchange_pass(state: _State, config: SearchConfig, pool: dict | None) -> bool:
    improved = False
    params = state.params
    for i in range(state.D.shape[0]):
        if state.rep[i] is not None:
            continue
        rows = state.group(i)
        r_i = len(rows)
        for j in range(state.k):
            for level in config.levels[j]:
                if level == state.D[i, j]:
                    continue
                x_old = state.X[i]
                d_new = state.D[i].copy()
                d_new[j] = level
                x_new = state.model_rows(d_new[None, :])[0]
                try:
                    V = smw_update(state.V, x_old[: state.p1], x_new[: state.p1], r_i)
                except SingularUpdateError:
                    continue
                G = state.G + r_i * (np.outer(x_new, x_new) - np.outer(x_old, x_old))
                D = state.D.copy()
                D[rows] = d_new
                X = state.X.copy()
                X[rows] = x_new
                r, ell = state.dof(D, X)
                try:
                    ev = eci_from_gram(G, V, state.p1, r, ell, params)
                except CriterionError:
                    continue
                if ev.total < state.total - IMPROVE_TOL:
                    state.D, state.X = D, X
                    state.accept(config)
                    if config.verify:
                        direct = eci(state.design(), state.spec, params).total
                        if not math.isclose(direct, ev.total, rel_tol=0, abs_tol=VERIFY_TOL):
                            raise AssertionError(
                                f"update path {ev.total!r} disagrees with direct evaluation {direct!r}"
                            )
                    improved = True
                    _retain(pool, state, config)
    return improved


def _retain(pool: dict | None, state: _State, config: SearchConfig) -> None:
    if pool is None or not state.total < config.S:
        return
    d = state.design()
    key = d.canonical_key()
    if key not in pool:
        pool[key] = (d, state.total)


def coordinate_exchange_pass(
    design: Design,
    config: SearchConfig,
    pool: dict | None = None,
) -> tuple[Design, bool]:
    """One sweep of single-coordinate exchanges over the D_u rows.

    Replicates move with their D_u row. An exchange is accepted as soon as it
    lowers the criterion by more than IMPROVE_TOL.
    """
    _model_spec_check(design, config.spec)
    state = _State(design, config.spec, config.eci_params)
    improved = _exchange_pass(state, config, pool)
    return state.design(), improved


def _optimize_replicates(state: _State, config: SearchConfig, rng: np.random.Generator | None) -> bool:
    dr = [i for i, p in enumerate(state.rep) if p is not None]
    if not dr:
        return False
    du = [i for i, p in enumerate(state.rep) if p is None]
    # first D_u index for each distinct D_u setting
    _, first = np.unique(state.D[du], axis=0, return_index=True)
    targets = [du[f] for f in sorted(first)]
    n_t, n_r = len(targets), len(dr)

    count = math.comb(n_t + n_r - 1, n_r)
    if count <= config.dr_cap:
        assign = np.array(list(itertools.combinations_with_replacement(range(n_t), n_r)), dtype=int)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        assign = np.sort(rng.integers(0, n_t, size=(config.dr_sample, n_r)), axis=1)
        assign = np.unique(assign, axis=0)

    # df do not depend on the assignment: D_r rows only copy existing settings
    r, ell = state.r, state.ell
    Xu = state.X[du]
    Gu = Xu.T @ Xu
    Xt = state.X[targets]
    outer = Xt[:, :, None] * Xt[:, None, :]

    incumbent = sorted(targets.index(_target_of(state, i, targets)) for i in dr)
    best_total = state.total
    best_assign = None
    for s in range(0, len(assign), 1024):
        a = assign[s:s + 1024]
        G = Gu[None] + outer[a].sum(axis=1)
        totals = eci_totals_batch(G, state.p1, r, ell, state.params)
        m = int(np.argmin(totals))
        if totals[m] < best_total - IMPROVE_TOL:
            best_total = float(totals[m])
            best_assign = a[m]
    if best_assign is None or list(best_assign) == incumbent:
        return False
    for row, t in zip(dr, best_assign):
        tgt = targets[int(t)]
        state.D[row] = state.D[tgt]
        state.X[row] = state.X[tgt]
        state.rep[row] = tgt
    state.accept(config)
    return True


def _target_of(state: _State, row: int, targets: list[int]) -> int:
    for t in targets:
        if np.array_equal(state.D[t], state.D[row]):
            return t
    raise AssertionError("replicate row matches no D_u row")  # pragma: no cover


def optimize_replicates(
    design: Design,
    config: SearchConfig,
    rng: np.random.Generator | None = None,
) -> Design:
    """Re-pair every D_r row with the best multiset of distinct D_u settings."""
    _model_spec_check(design, config.spec)
    state = _State(design, config.spec, config.eci_params)
    _optimize_replicates(state, config, rng)
    return state.design()


def replicate_assignments(design: Design, config: SearchConfig) -> int:
    """Number of D_r assignments that exhaustive re-pairing would score."""
    n_r = len(design.dr_rows)
    if n_r == 0:
        return 0
    n_t = np.unique(design.settings[design.du_rows], axis=0).shape[0]
    return math.comb(n_t + n_r - 1, n_r)


# ---------------------------------------------------------------------------
# restarts

def _run_restart(config: SearchConfig, index: int):
    rng = np.random.default_rng([config.seed, index])
    design = random_start(config, rng)
    state = _State(design, config.spec, config.eci_params)
    pool: dict = {}
    start = state.total
    _retain(pool, state, config)
    passes = 0
    for passes in range(1, config.max_passes + 1):
        a = _exchange_pass(state, config, pool)
        b = _optimize_replicates(state, config, rng)
        if b:
            _retain(pool, state, config)
        if not (a or b):
            break
    trace = RestartTrace(index, start, state.total, passes, tuple(state.log))
    return state.design(), state.total, list(pool.items()), trace


def _run_block(config: SearchConfig, indices: Sequence[int]):
    return [_run_restart(config, i) for i in indices]


def resolve_workers(threads: int | None = None) -> int:
    env = os.environ.get("SCREENOPT_THREADS")
    if env:
        threads = int(env)
    if threads is None:
        try:
            threads = len(os.sched_getaffinity(0))
        except AttributeError:  # pragma: no cover
            threads = os.cpu_count() or 1
    return max(1, int(threads))


def search(config: SearchConfig, workers: int | None = None) -> SearchResult:
    """Multi-restart search; results do not depend on the worker count."""
    workers = resolve_workers(workers)
    idx = list(range(config.restarts))
    if workers == 1 or config.restarts == 1:
        outs = _run_block(config, idx)
    else:
        blocks = [idx[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_block, [config] * len(blocks), blocks))
        by_index = {}
        for block, res in zip(blocks, parts):
            for i, r in zip(block, res):
                by_index[i] = r
        outs = [by_index[i] for i in idx]

    best_design, best_total = None, math.inf
    pool: dict = {}
    trace = []
    for design, total, entries, tr in outs:
        trace.append(tr)
        if best_design is None or total < best_total:
            best_design, best_total = design, total
        for key, entry in entries:
            pool.setdefault(key, entry)
    best_eval = eci(best_design, config.spec, config.eci_params)
    return SearchResult(best_design, best_eval, list(pool.values()), trace)
