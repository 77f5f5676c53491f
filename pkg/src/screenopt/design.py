"""Designs, model expansion, degree-of-freedom accounting and catalog designs."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._conference import CONFERENCE
from .numerics import numerical_rank, projector

ORDERS = ("me", "2fi", "quad")
TWO_LEVEL = (-1.0, 1.0)
THREE_LEVEL = (-1.0, 0.0, 1.0)

Term = tuple[int, int]


class DesignError(ValueError):
    """Invalid design input (bad CSV, unsupported catalog order, ...)."""


class UnsupportedOrderError(DesignError):
    pass


@dataclass(frozen=True, eq=False)
class Design:
    """An n x k settings matrix plus its replicate pairing.

    ``replicate_of[i]`` is None for rows of the unrestricted part D_u and,
    for a D_r row, the 0-based index of the D_u row it repeats.
    """

    settings: np.ndarray
    replicate_of: tuple[int | None, ...] = ()
    factor_names: tuple[str, ...] = ()
    levels: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        D = np.array(self.settings, dtype=float)
        if D.ndim != 2 or D.shape[0] == 0 or D.shape[1] == 0:
            raise DesignError(f"design must be a non-empty n x k matrix, got shape {D.shape}")
        if not np.all(np.isfinite(D)):
            raise DesignError("design has non-finite entries")
        if np.any(np.abs(D) > 1.0 + 1e-12):
            raise DesignError("design levels must lie in [-1, 1]")
        D = D + 0.0  # normalise -0.0
        D.setflags(write=False)
        n, k = D.shape
        object.__setattr__(self, "settings", D)

        rep = tuple(self.replicate_of) if self.replicate_of else (None,) * n
        if len(rep) != n:
            raise DesignError("replicate_of must have one entry per run")
        for i, j in enumerate(rep):
            if j is None:
                continue
            if not 0 <= j < n or j == i:
                raise DesignError(f"run {i + 1}: replicate_of={j + 1} is not a valid run")
            if rep[j] is not None:
                raise DesignError(f"run {i + 1}: replicate_of must point to an unreplicated (D_u) run")
            if not np.array_equal(D[i], D[j]):
                raise DesignError(f"run {i + 1} is marked as a replicate of run {j + 1} but the settings differ")
        object.__setattr__(self, "replicate_of", rep)

        names = tuple(self.factor_names) if self.factor_names else tuple(f"x{j + 1}" for j in range(k))
        if len(names) != k:
            raise DesignError("need one factor name per column")
        object.__setattr__(self, "factor_names", names)

        if self.levels:
            lv = tuple(tuple(float(v) for v in l) for l in self.levels)
            if len(lv) != k:
                raise DesignError("need one level set per factor")
        else:
            lv = (THREE_LEVEL if np.any(D == 0.0) else TWO_LEVEL,) * k
        object.__setattr__(self, "levels", lv)

    @property
    def n(self) -> int:
        return self.settings.shape[0]

    @property
    def k(self) -> int:
        return self.settings.shape[1]

    @property
    def du_rows(self) -> list[int]:
        return [i for i, j in enumerate(self.replicate_of) if j is None]

    @property
    def dr_rows(self) -> list[int]:
        return [i for i, j in enumerate(self.replicate_of) if j is not None]

    def unique_settings(self) -> np.ndarray:
        return np.unique(self.settings, axis=0)

    def n_unique(self) -> int:
        return int(np.unique(self.settings, axis=0).shape[0])

    def has_zero_level(self, j: int) -> bool:
        return 0.0 in self.levels[j]

    def canonical_key(self) -> str:
        """Hash of the row multiset; pairing and run order are ignored."""
        D = self.settings
        order = np.lexsort(D.T[::-1])
        return hashlib.sha1(np.ascontiguousarray(D[order]).tobytes()).hexdigest()

    def with_settings(self, settings, replicate_of=None) -> "Design":
        return Design(
            settings,
            self.replicate_of if replicate_of is None else replicate_of,
            self.factor_names,
            self.levels,
        )

    def __eq__(self, other):
        if not isinstance(other, Design):
            return NotImplemented
        return (
            np.array_equal(self.settings, other.settings)
            and self.replicate_of == other.replicate_of
            and self.factor_names == other.factor_names
            and self.levels == other.levels
        )

    __hash__ = None  # mutable-looking payload; use canonical_key()


# ---------------------------------------------------------------------------
# model expansion

def interaction_terms(k: int) -> list[Term]:
    return list(itertools.combinations(range(k), 2))


def quadratic_terms(k: int) -> list[Term]:
    return [(j, j) for j in range(k)]


def sort_terms(terms: Iterable[Term]) -> list[Term]:
    return sorted(set(terms), key=lambda t: (t[0] == t[1], t[0], t[1]))


def term_label(term: Term, names: Sequence[str] | None = None) -> str:
    i, j = term
    a = names[i] if names else f"x{i + 1}"
    b = names[j] if names else f"x{j + 1}"
    return f"{a}^2" if i == j else f"{a}*{b}"


@dataclass(frozen=True)
class ModelSpec:
    """Model order plus an optional explicit subset of second-order terms."""

    order: str = "2fi"
    terms: tuple[Term, ...] | None = None

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.terms is not None:
            clean = []
            for t in self.terms:
                i, j = sorted((int(t[0]), int(t[1])))
                clean.append((i, j))
            if len(set(clean)) != len(clean):
                raise ValueError("duplicate second-order terms")
            object.__setattr__(self, "terms", tuple(sort_terms(clean)))

    def second_order_terms(self, k: int) -> list[Term]:
        if self.terms is not None:
            for i, j in self.terms:
                if not (0 <= i < k and 0 <= j < k):
                    raise ValueError(f"term {(i, j)} references a factor outside 0..{k - 1}")
            return list(self.terms)
        if self.order == "me":
            return []
        out = interaction_terms(k)
        if self.order == "quad":
            out += quadratic_terms(k)
        return out


def main_effects_matrix(D: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(D.shape[0]), D])


def second_order_matrix(D: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    if not terms:
        return np.zeros((D.shape[0], 0))
    idx = np.asarray(terms, dtype=int)
    return D[:, idx[:, 0]] * D[:, idx[:, 1]]


@dataclass(frozen=True)
class ModelMatrices:
    X1: np.ndarray
    X2: np.ndarray
    X2_adj: np.ndarray
    terms: tuple[Term, ...]

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.X1, self.X2])


def check_terms(design: Design, terms: Sequence[Term]) -> None:
    for i, j in terms:
        if not (0 <= i < design.k and 0 <= j < design.k):
            raise ValueError(f"term {(i, j)} references a factor outside the design")
        if i == j and not design.has_zero_level(i):
            raise ValueError(
                f"quadratic term for factor {design.factor_names[i]!r} needs a 3-level factor"
            )


def expand_model(design: Design, spec: ModelSpec) -> ModelMatrices:
    terms = spec.second_order_terms(design.k)
    check_terms(design, terms)
    D = design.settings
    X1 = main_effects_matrix(D)
    X2 = second_order_matrix(D, terms)
    if X2.shape[1]:
        X2_adj = X2 - projector(X1) @ X2
    else:
        X2_adj = X2.copy()
    return ModelMatrices(X1=X1, X2=X2, X2_adj=X2_adj, terms=tuple(terms))


@dataclass(frozen=True)
class DofAccount:
    n_u: int
    r: int
    ell: int
    g: int


def dof_account(design: Design, spec: ModelSpec) -> DofAccount:
    terms = spec.second_order_terms(design.k)
    check_terms(design, terms)
    D = design.settings
    Du = np.unique(D, axis=0)
    n_u = Du.shape[0]
    Xu = np.hstack([main_effects_matrix(Du), second_order_matrix(Du, terms)])
    X = np.hstack([main_effects_matrix(D), second_order_matrix(D, terms)])
    r = design.n - n_u
    ell = n_u - numerical_rank(Xu)
    g = r + ell
    g_direct = design.n - numerical_rank(X)
    if g != g_direct:  # pragma: no cover - would indicate a rank-tolerance problem
        raise ArithmeticError(f"df mismatch: r + ell = {g} but n - rank(X) = {g_direct}")
    return DofAccount(n_u=n_u, r=r, ell=ell, g=g)


# ---------------------------------------------------------------------------
# catalog constructions

def conference_matrix(order: int) -> np.ndarray:
    if order not in CONFERENCE:
        raise UnsupportedOrderError(
            f"no conference matrix of order {order} in the catalog (available: {sorted(CONFERENCE)})"
        )
    return np.array(CONFERENCE[order], dtype=float)


def foldover(half, append_center: bool = False, factor_names: Sequence[str] = ()) -> Design:
    H = np.asarray(half, dtype=float)
    if H.ndim != 2:
        raise DesignError("foldover needs a 2-d half fraction")
    if not np.all(np.isin(H, THREE_LEVEL)):
        raise DesignError("foldover entries must be in {-1, 0, 1}")
    parts = [H, -H]
    if append_center:
        parts.append(np.zeros((1, H.shape[1])))
    return Design(np.vstack(parts), factor_names=tuple(factor_names))


def dsd(k: int) -> Design:
    """Definitive screening design: folded conference matrix plus a center run."""
    return foldover(conference_matrix(k), append_center=True)


def adsd(k: int, f: int, drop_center: bool = False) -> Design:
    """DSD for k + f factors with only the first k columns kept."""
    if k < 1 or f < 0:
        raise ValueError("need k >= 1 and f >= 0")
    C = conference_matrix(k + f)
    full = foldover(C, append_center=not drop_center)
    return Design(full.settings[:, :k])


# ---------------------------------------------------------------------------
# CSV i/o

REPLICATE_COLUMN = "replicate_of"


def _format_level(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return format(float(v), ".15g")


def design_to_csv(design: Design, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    has_rep = any(j is not None for j in design.replicate_of)
    w.writerow(list(design.factor_names) + ([REPLICATE_COLUMN] if has_rep else []))
    for i, row in enumerate(design.settings):
        cells = [_format_level(v) for v in row]
        if has_rep:
            j = design.replicate_of[i]
            cells.append("" if j is None else str(j + 1))
        w.writerow(cells)
    return buf.getvalue()


def save_csv(design: Design, path, header_comment: str | None = None) -> None:
    Path(path).write_text(design_to_csv(design, header_comment))


def design_from_csv(text: str) -> Design:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise DesignError("empty design file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DesignError("design file has a header but no runs")
    has_rep = header[-1] == REPLICATE_COLUMN
    names = header[:-1] if has_rep else header
    if not names:
        raise DesignError("design file has no factor columns")
    settings = []
    rep: list[int | None] = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DesignError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row[: len(names)]]
        except ValueError as exc:
            raise DesignError(f"line {lineno}: {exc}") from None
        if any(abs(v) > 1.0 for v in vals):
            raise DesignError(f"line {lineno}: levels must lie in [-1, 1]")
        settings.append(vals)
        if has_rep:
            cell = row[-1].strip()
            if cell:
                try:
                    rep.append(int(cell) - 1)
                except ValueError:
                    raise DesignError(f"line {lineno}: replicate_of must be an integer run index") from None
            else:
                rep.append(None)
    return Design(np.array(settings), tuple(rep) if has_rep else (), tuple(names))


def load_csv(path) -> Design:
    return design_from_csv(Path(path).read_text())


def load_responses(path) -> tuple[list[str], np.ndarray]:
    """Response CSV: header of column names, one numeric row per run."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if len(rows) < 2:
        raise DesignError(f"{path}: response file needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    try:
        Y = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DesignError(f"{path}: {exc}") from None
    if Y.shape[1] != len(header):
        raise DesignError(f"{path}: rows do not match the header width")
    return header, Y


# ---------------------------------------------------------------------------
# packaged fixtures

FIXTURES = ("new_design", "nrffd", "bayes_d", "edma", "k6n17_adsd", "k6n17_best", "k7n24_best")


def fixture_path(name: str) -> Path:
    fname = name if name.endswith(".csv") else f"{name}.csv"
    p = resources.files("screenopt") / "fixtures" / fname
    if not p.is_file():
        raise DesignError(f"unknown fixture {name!r}")
    return Path(str(p))


def load_fixture(name: str) -> Design:
    return load_csv(fixture_path(name))


def load_fixture_responses(name: str) -> tuple[list[str], np.ndarray]:
    return load_responses(fixture_path(f"{name}_y"))
