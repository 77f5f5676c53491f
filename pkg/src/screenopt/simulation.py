"""Simulation protocols and model-selection metrics.

Effects are drawn as offset + Exp(1) with a random sign. Active second-order
terms obey strong heredity with respect to the active main effects.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import ALL_LOF_POLICIES, METHODS, analyze
from .design import (
    Design,
    ModelSpec,
    Term,
    adsd,
    dsd,
    load_csv,
    load_fixture,
    load_fixture_responses,
    main_effects_matrix,
    second_order_matrix,
)

REACTOR_SIGMA = 3.331
REACTOR_INTERCEPT = 65.5
REACTOR_MAIN = (9.75, 5.375, -3.125)
REACTOR_2FI = (6.625, -5.5)  # (a, b) and (b, c) for active roles a, b, c
REACTOR_EXTRA_2FI = 10.0  # (a, c)
REACTOR_TRUE_FACTORS = (1, 3, 4)


def resolve_design(ref: str) -> Design:
    """Design reference: ``fixture:NAME``, ``dsd:K``, ``adsd:K:F[:nocenter]`` or a CSV path."""
    kind, _, rest = ref.partition(":")
    if kind == "fixture":
        return load_fixture(rest)
    if kind == "dsd":
        return dsd(int(rest))
    if kind == "adsd":
        parts = rest.split(":")
        drop = len(parts) > 2 and parts[2] == "nocenter"
        return adsd(int(parts[0]), int(parts[1]), drop_center=drop)
    return load_csv(ref)


@dataclass(frozen=True)
class Scenario:
    design: str
    model: str = "quad"
    n_active_main: int = 2
    n_active_2fi: int = 0
    n_active_quad: int = 0
    offset_main: float = 2.5
    offset_second: float = 2.5
    sigma2: float = 1.0
    reps: int = 100
    alpha: float = 0.10
    method: str = "allsubsets"
    heredity: str = "strong"
    reduce_x1: bool = True
    pooling_variant: bool = False
    all_lof: str = "largest"
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.all_lof not in ALL_LOF_POLICIES:
            raise ValueError(f"all_lof must be one of {ALL_LOF_POLICIES}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if self.n_active_main < 0 or self.n_active_2fi < 0 or self.n_active_quad < 0:
            raise ValueError("active counts must be non-negative")
        if self.n_active_2fi > math.comb(self.n_active_main, 2):
            raise ValueError("more active 2FIs than pairs of active factors")
        if self.n_active_quad > self.n_active_main:
            raise ValueError("more active quadratics than active factors")
        if self.n_active_quad and self.model != "quad":
            raise ValueError("active quadratics need the full-quadratic model")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def load_scenarios(path) -> list[Scenario]:
    """A scenario file holds one scenario object or {"scenarios": [...]}."""
    data = json.loads(Path(path).read_text())
    items = data["scenarios"] if isinstance(data, dict) and "scenarios" in data else [data]
    return [Scenario.from_dict(d) for d in items]


def packaged_scenario(name: str) -> Path:
    fname = name if name.endswith(".json") else f"{name}.json"
    p = resources.files("screenopt") / "scenarios" / fname
    if not p.is_file():
        raise FileNotFoundError(f"unknown packaged scenario {name!r}")
    return Path(str(p))


# ---------------------------------------------------------------------------
# truth and records

@dataclass(frozen=True)
class Truth:
    beta1: np.ndarray  # intercept first
    beta2: dict[Term, float]

    @property
    def active_factors(self) -> frozenset[int]:
        return frozenset(int(j) for j in np.flatnonzero(self.beta1[1:]))

    @property
    def active_terms(self) -> frozenset[Term]:
        return frozenset(t for t, b in self.beta2.items() if b != 0)


def _magnitudes(rng: np.random.Generator, m: int, offset: float) -> np.ndarray:
    return (offset + rng.exponential(1.0, size=m)) * rng.choice([-1.0, 1.0], size=m)


def gen_truth(scenario: Scenario, k: int, rng: np.random.Generator) -> Truth:
    if scenario.n_active_main > k:
        raise ValueError("more active main effects than factors")
    act = np.sort(rng.choice(k, size=scenario.n_active_main, replace=False))
    beta1 = np.zeros(k + 1)
    beta1[1 + act] = _magnitudes(rng, len(act), scenario.offset_main)
    pairs = list(itertools.combinations(act.tolist(), 2))
    beta2: dict[Term, float] = {}
    if scenario.n_active_2fi:
        pick = rng.choice(len(pairs), size=scenario.n_active_2fi, replace=False)
        vals = _magnitudes(rng, scenario.n_active_2fi, scenario.offset_second)
        for idx, b in zip(sorted(pick.tolist()), vals):
            beta2[pairs[idx]] = float(b)
    if scenario.n_active_quad:
        pick = np.sort(rng.choice(act, size=scenario.n_active_quad, replace=False))
        vals = _magnitudes(rng, scenario.n_active_quad, scenario.offset_second)
        for j, b in zip(pick.tolist(), vals):
            beta2[(j, j)] = float(b)
    return Truth(beta1, beta2)


def simulate_response(design: Design, truth: Truth, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    D = design.settings
    y = main_effects_matrix(D) @ truth.beta1
    if truth.beta2:
        terms = list(truth.beta2)
        y = y + second_order_matrix(D, terms) @ np.array([truth.beta2[t] for t in terms])
    return y + math.sqrt(sigma2) * rng.standard_normal(D.shape[0])


@dataclass
class RepRecord:
    index: int
    true_factors: tuple[int, ...]
    true_terms: tuple[Term, ...]
    est_factors: tuple[int, ...] = ()
    est_terms: tuple[Term, ...] = ()
    status: str = "ok"
    error: str = ""


def _score(index: int, truth_f, truth_t, est_f, est_t, status="ok") -> RepRecord:
    return RepRecord(
        index,
        tuple(sorted(truth_f)),
        tuple(sorted(truth_t)),
        tuple(sorted(est_f)),
        tuple(sorted(est_t)),
        status,
    )


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    TPR_F: float
    FPR_F: float
    exact_F_pct: float
    TPR_2FI: float
    FPR_2FI: float
    TPR_Q: float
    FPR_Q: float
    exact_A_pct: float
    mean_model_size: float
    n_reps: int
    n_errors: int
    records: list[RepRecord] = field(default_factory=list, repr=False)
    name: str = ""

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def aggregate(records: list[RepRecord], k: int, quad: bool, name: str = "") -> MetricsReport:
    """Pooled rates over reps; inactive counts run over every term in the model."""
    ok = [r for r in records if r.status != "error"]
    n_2fi = math.comb(k, 2)
    n_q = k if quad else 0
    tf = ff = pf = nf = 0
    t2 = f2 = p2 = n2 = 0
    tq = fq = pq = nq = 0
    exact_f = exact_a = 0
    size = 0
    for r in ok:
        F, Fh = set(r.true_factors), set(r.est_factors)
        A2 = {t for t in r.true_terms if t[0] != t[1]}
        AQ = {t for t in r.true_terms if t[0] == t[1]}
        E2 = {t for t in r.est_terms if t[0] != t[1]}
        EQ = {t for t in r.est_terms if t[0] == t[1]}
        tf += len(F & Fh)
        pf += len(F)
        ff += len(Fh - F)
        nf += k - len(F)
        t2 += len(A2 & E2)
        p2 += len(A2)
        f2 += len(E2 - A2)
        n2 += n_2fi - len(A2)
        tq += len(AQ & EQ)
        pq += len(AQ)
        fq += len(EQ - AQ)
        nq += n_q - len(AQ)
        exact_f += F == Fh
        exact_a += F == Fh and set(r.true_terms) == set(r.est_terms)
        size += len(Fh) + len(r.est_terms)
    m = len(ok)
    return MetricsReport(
        TPR_F=_rate(tf, pf),
        FPR_F=_rate(ff, nf),
        exact_F_pct=_rate(exact_f, m),
        TPR_2FI=_rate(t2, p2),
        FPR_2FI=_rate(f2, n2),
        TPR_Q=_rate(tq, pq),
        FPR_Q=_rate(fq, nq),
        exact_A_pct=_rate(exact_a, m),
        mean_model_size=_rate(size, m),
        n_reps=len(records),
        n_errors=len(records) - m,
        records=records,
        name=name,
    )


# ---------------------------------------------------------------------------
# runners

def _run_rep(scenario: Scenario, design: Design, index: int) -> RepRecord:
    rng = np.random.default_rng([scenario.seed, index])
    truth = gen_truth(scenario, design.k, rng)
    y = simulate_response(design, truth, scenario.sigma2, rng)
    try:
        res = analyze(
            y, design, ModelSpec(scenario.model), scenario.alpha, scenario.method,
            scenario.heredity, scenario.reduce_x1, scenario.pooling_variant, scenario.all_lof,
        )
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rec = _score(index, truth.active_factors, truth.active_terms, (), (), "error")
        rec.error = str(exc)
        return rec
    return _score(
        index, truth.active_factors, truth.active_terms, res.active_factors, res.selected_terms,
        res.selection.status,
    )


def _run_block(scenario: Scenario, indices):
    design = resolve_design(scenario.design)
    return [_run_rep(scenario, design, i) for i in indices]


def run_scenario(scenario: Scenario, workers: int = 1) -> MetricsReport:
    design = resolve_design(scenario.design)
    spec = ModelSpec(scenario.model)
    spec.second_order_terms(design.k)
    idx = list(range(scenario.reps))
    if workers <= 1:
        records = [_run_rep(scenario, design, i) for i in idx]
    else:
        blocks = [idx[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_block, [scenario] * len(blocks), blocks))
        records = sorted((r for part in parts for r in part), key=lambda r: r.index)
    return aggregate(records, design.k, scenario.model == "quad", scenario.name)


def reactor_truth() -> tuple[frozenset[int], frozenset[Term]]:
    a, b, c = REACTOR_TRUE_FACTORS
    return frozenset((a, b, c)), frozenset({(a, b), (b, c)})


def reactor_replay(alpha: float = 0.10, heredity: str = "strong") -> MetricsReport:
    """All-subsets analysis of the nine response completions of the New Design."""
    design = load_fixture("new_design")
    _, Y = load_fixture_responses("new_design")
    F, A2 = reactor_truth()
    records = []
    for i in range(Y.shape[1]):
        res = analyze(Y[:, i], design, ModelSpec("2fi"), alpha, "allsubsets", heredity)
        records.append(_score(i, F, A2, res.active_factors, res.selected_terms, res.selection.status))
    return aggregate(records, design.k, False, "reactor data")


def reactor_model(roles, variant: str = "base", k: int = 5) -> Truth:
    a, b, c = roles
    beta1 = np.zeros(k + 1)
    beta1[0] = REACTOR_INTERCEPT
    for j, v in zip((a, b, c), REACTOR_MAIN):
        beta1[1 + j] = v
    beta2 = {tuple(sorted((a, b))): REACTOR_2FI[0], tuple(sorted((b, c))): REACTOR_2FI[1]}
    if variant == "plus_2fi":
        beta2[tuple(sorted((a, c)))] = REACTOR_EXTRA_2FI
    elif variant != "base":
        raise ValueError("variant must be 'base' or 'plus_2fi'")
    return Truth(beta1, beta2)


def sim_reactor(
    variant: str = "base",
    reps: int = 100,
    seed: int = 0,
    alpha: float = 0.10,
    heredity: str = "strong",
) -> MetricsReport:
    """Responses simulated from the fitted reactor model with permuted factor roles."""
    design = load_fixture("new_design")
    records = []
    for i in range(reps):
        rng = np.random.default_rng([seed, i])
        roles = rng.permutation(design.k)[:3]
        truth = reactor_model(roles, variant, design.k)
        y = simulate_response(design, truth, REACTOR_SIGMA ** 2, rng)
        res = analyze(y, design, ModelSpec("2fi"), alpha, "allsubsets", heredity)
        records.append(
            _score(i, truth.active_factors, truth.active_terms, res.active_factors,
                   res.selected_terms, res.selection.status)
        )
    return aggregate(records, design.k, False, f"sim reactor ({variant})")


# ---------------------------------------------------------------------------
# output

TABLE_COLUMNS = (
    "TPR_F", "FPR_F", "exact_F_pct", "TPR_2FI", "FPR_2FI", "TPR_Q", "FPR_Q", "exact_A_pct", "mean_model_size",
)


def format_table(reports: list[MetricsReport]) -> str:
    width = max([len(r.name) for r in reports] + [8])
    head = "scenario".ljust(width) + "".join(f"{c:>16}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in reports:
        vals = "".join(f"{getattr(r, c):>16.3f}" for c in TABLE_COLUMNS)
        lines.append(r.name.ljust(width) + vals)
    return "\n".join(lines)


def records_csv(report: MetricsReport) -> str:
    lines = ["rep,status,true_factors,est_factors,true_terms,est_terms"]

    def fmt(items):
        return " ".join(f"{a + 1}" if isinstance(a, int) else f"{a[0] + 1}:{a[1] + 1}" for a in items)

    for r in report.records:
        lines.append(
            f"{r.index},{r.status},{fmt(r.true_factors)},{fmt(r.est_factors)},"
            f"{fmt(r.true_terms)},{fmt(r.est_terms)}"
        )
    return "\n".join(lines) + "\n"
