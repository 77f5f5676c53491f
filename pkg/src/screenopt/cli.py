"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 no design meets the ECI threshold,
4 analysis infeasible (no error degrees of freedom).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ALL_LOF_POLICIES, HEREDITY, METHODS, AnalysisError, analysis_report, analyze
from .constructor import SearchConfig, SearchInfeasible, resolve_workers, search
from .criteria import (
    CriterionError,
    EciParams,
    NoDesignMeetsThreshold,
    RlofParams,
    alias_matrix,
    constrained_select,
    criteria_report,
    d_efficiency,
    eci,
    gt_modified_a,
    gt_modified_d,
    score_pool,
)
from .design import (
    ORDERS,
    Design,
    DesignError,
    ModelSpec,
    adsd,
    design_to_csv,
    dof_account,
    dsd,
    expand_model,
    load_csv,
    load_responses,
)
from .simulation import (
    Scenario,
    format_table,
    load_scenarios,
    packaged_scenario,
    reactor_replay,
    records_csv,
    run_scenario,
    sim_reactor,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_THRESHOLD = 3
EXIT_INFEASIBLE = 4


class UsageError(ValueError):
    pass


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(seed, config) -> dict:
    return {"tool": "screenopt", "version": __version__, "seed": seed, "config_hash": config_hash(config)}


def provenance_comment(prov: dict) -> str:
    return f"{prov['tool']} {prov['version']} seed={prov['seed']} config={prov['config_hash']}"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _p2(value: str) -> int | None:
    if value == "auto":
        return None
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("p2 must be an integer or 'auto'") from None
    if v < 0:
        raise argparse.ArgumentTypeError("p2 must be non-negative")
    return v


def _design_payload(d: Design) -> dict:
    return {
        "factor_names": list(d.factor_names),
        "settings": d.settings.tolist(),
        "replicate_of": [None if j is None else j + 1 for j in d.replicate_of],
    }


def _design_from_payload(p: dict) -> Design:
    rep = tuple(None if j is None else int(j) - 1 for j in p.get("replicate_of") or [])
    return Design(np.array(p["settings"], dtype=float), rep, tuple(p.get("factor_names") or ()))


# ---------------------------------------------------------------------------
# commands

def cmd_evaluate(args) -> int:
    design = load_csv(args.design)
    spec = ModelSpec(args.model)
    params = EciParams(args.alpha, args.tau2, 0, args.ell_min)
    rp = RlofParams(p2=args.p2, max_models=args.max_models, rng_seed=args.seed)
    dof = dof_account(design, spec)
    mm = expand_model(design, spec)
    A = alias_matrix(mm)
    main_rows = A[1:]
    report = criteria_report(design, spec, params, rp, design_id=Path(args.design).stem)
    report["dof"] = asdict(dof)
    report["alias"] = {
        "row_norms": np.sqrt(np.sum(main_rows ** 2, axis=1)).tolist(),
        "mean_abs": float(np.mean(np.abs(main_rows))) if main_rows.size else 0.0,
        "max_abs": float(np.max(np.abs(main_rows))) if main_rows.size else 0.0,
    }
    if dof.r >= 1:
        report["gt_modified"] = {
            "D": gt_modified_d(design, args.alpha),
            "A": gt_modified_a(design, args.alpha),
        }
    report["model"] = args.model
    cfg = {"cmd": "evaluate", "model": args.model, "alpha": args.alpha, "tau2": args.tau2,
           "ell_min": args.ell_min, "p2": args.p2, "design": design.canonical_key()}
    out = {"provenance": provenance(args.seed, cfg), **report}
    _emit(_dump(out), args.out)
    return EXIT_OK


def _search_config(cfg: dict, seed_override: int | None) -> SearchConfig:
    allowed = {"k", "n", "model", "alpha", "tau2", "r_min", "ell_min", "restarts", "S", "seed",
               "max_passes", "levels", "dr_cap", "dr_sample", "verify"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    seed = seed_override if seed_override is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("construct needs a seed (config key 'seed' or --seed)")
    for key in ("k", "n"):
        if key not in cfg:
            raise UsageError(f"config is missing {key!r}")
    params = EciParams(
        float(cfg.get("alpha", 0.10)), float(cfg.get("tau2", 20.0)),
        int(cfg.get("r_min", 0)), int(cfg.get("ell_min", 0)),
    )
    extra = {k: cfg[k] for k in ("restarts", "S", "max_passes", "dr_cap", "dr_sample", "verify") if k in cfg}
    levels = tuple(tuple(l) for l in cfg.get("levels", ()))
    return SearchConfig(
        k=int(cfg["k"]), n=int(cfg["n"]), spec=ModelSpec(cfg.get("model", "2fi")),
        eci_params=params, levels=levels, seed=int(seed), **extra,
    )


def cmd_construct(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    if args.restarts is not None:
        cfg["restarts"] = args.restarts
    config = _search_config(cfg, args.seed)
    res = search(config, resolve_workers(args.threads))
    prov = provenance(config.seed, {**cfg, "seed": config.seed})
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "best.csv").write_text(design_to_csv(res.best, provenance_comment(prov)))
    pool = {
        "provenance": prov,
        "model": config.spec.order,
        "alpha": config.eci_params.alpha,
        "S": config.S,
        "designs": [{"eci_total": t, **_design_payload(d)} for d, t in res.pool],
    }
    (outdir / "pool.json").write_text(_dump(pool))
    trace = {
        "provenance": prov,
        "best_eci": res.best_eval.total,
        "best_dof": {"r": res.best_eval.r, "ell": res.best_eval.ell_tilde, "g": res.best_eval.g},
        "restarts": [asdict(t) for t in res.trace],
    }
    (outdir / "trace.json").write_text(_dump(trace))
    print(f"best eci_total = {res.best_eval.total:.6f}; pool size = {len(res.pool)}", file=sys.stderr)
    return EXIT_OK


def cmd_select(args) -> int:
    designs: list[Design] = []
    model, alpha = args.model, args.alpha
    if args.pool:
        pool = json.loads(Path(args.pool).read_text())
        designs += [_design_from_payload(p) for p in pool.get("designs", [])]
        model = model or pool.get("model")
        alpha = alpha if alpha is not None else pool.get("alpha")
    designs += [load_csv(p) for p in args.designs or []]
    if not designs:
        raise UsageError("the design pool is empty")
    model = model or "2fi"
    alpha = 0.10 if alpha is None else float(alpha)
    spec = ModelSpec(model)
    params = EciParams(alpha=alpha)
    rp = RlofParams(p2=args.p2, max_models=args.max_models, rng_seed=args.seed)
    best = constrained_select(designs, args.S, params, rp, spec)
    scores = score_pool(designs, spec, params, rp)
    idx = next(i for i, d in enumerate(designs) if d is best)
    cfg = {"cmd": "select", "S": args.S, "p2": args.p2, "model": model, "alpha": alpha,
           "pool": [d.canonical_key() for d in designs]}
    prov = provenance(args.seed, cfg)
    s = scores[idx]
    comment = provenance_comment(prov) + f"\neci_total={s.eci_total:.6f} rlof={s.rlof:.6f}"
    _emit(design_to_csv(best, comment), args.out)
    return EXIT_OK


def _response_column(path: str, column: str | None) -> np.ndarray:
    header, Y = load_responses(path)
    if column is None:
        return Y[:, 0]
    if column in header:
        return Y[:, header.index(column)]
    try:
        i = int(column)
    except ValueError:
        raise UsageError(f"no response column {column!r} in {path}") from None
    if not 1 <= i <= Y.shape[1]:
        raise UsageError(f"response column index {i} out of range 1..{Y.shape[1]}")
    return Y[:, i - 1]


def cmd_analyze(args) -> int:
    design = load_csv(args.design)
    y = _response_column(args.responses, args.column)
    if y.shape[0] != design.n:
        raise UsageError(f"response has {y.shape[0]} values but the design has {design.n} runs")
    res = analyze(
        y, design, ModelSpec(args.model), args.alpha, args.method, args.heredity,
        reduce_x1=not args.full_x1, pooling_variant=args.pooling, all_lof=args.all_lof,
    )
    cfg = {"cmd": "analyze", **{k: v for k, v in vars(args).items() if k not in ("func", "out")}}
    out = {"provenance": provenance(None, cfg), "model": args.model, **analysis_report(res, design)}
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    workers = resolve_workers(args.threads)
    if args.reactor:
        if args.reactor == "replay":
            reports = [reactor_replay()]
            seed = None
        else:
            if args.seed is None:
                raise UsageError("simulate needs a seed (--seed)")
            reports = [sim_reactor(args.reactor, reps=args.reps or 100, seed=args.seed)]
            seed = args.seed
        cfg = {"reactor": args.reactor, "reps": args.reps, "seed": seed}
    else:
        if not args.scenario:
            raise UsageError("give a scenario file or --reactor")
        path = Path(args.scenario)
        if not path.exists():
            try:
                path = packaged_scenario(args.scenario)
            except FileNotFoundError:
                raise UsageError(f"scenario {args.scenario!r} not found") from None
        raw = json.loads(path.read_text())
        items = raw["scenarios"] if isinstance(raw, dict) and "scenarios" in raw else [raw]
        if args.seed is None and any("seed" not in d for d in items):
            raise UsageError("every scenario needs a seed (scenario key 'seed' or --seed)")
        scenarios = load_scenarios(path)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.reps is not None:
            over["reps"] = args.reps
        scenarios = [Scenario(**{**asdict(s), **over}) for s in scenarios]
        reports = [run_scenario(s, workers) for s in scenarios]
        seed = sorted({s.seed for s in scenarios})
        cfg = {"scenarios": [asdict(s) for s in scenarios]}
    out = {"provenance": provenance(seed, cfg), "reports": [r.summary() for r in reports]}
    _emit(_dump(out), args.out)
    if args.records:
        parts = [records_csv(r).splitlines(keepends=True) for r in reports]
        Path(args.records).write_text("".join(parts[0] + [l for p in parts[1:] for l in p[1:]]))
    print(format_table(reports), file=sys.stderr)
    return EXIT_OK


def cmd_catalog(args) -> int:
    if args.dsd is not None:
        design = dsd(args.dsd)
        cfg = {"dsd": args.dsd}
    else:
        k, f = args.adsd
        design = adsd(k, f, drop_center=args.drop_center)
        cfg = {"adsd": [k, f], "drop_center": args.drop_center}
    _emit(design_to_csv(design, provenance_comment(provenance(None, cfg))), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="screenopt", description="Screening designs for two-stage inference.")
    p.add_argument("--version", action="version", version=f"screenopt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("evaluate", help="criterion report for a design")
    e.add_argument("design")
    e.add_argument("--model", choices=ORDERS, default="2fi")
    e.add_argument("--alpha", type=float, default=0.10)
    e.add_argument("--tau2", type=float, default=20.0)
    e.add_argument("--ell-min", type=int, default=0)
    e.add_argument("--p2", type=_p2, default=None, help="rLOF model size or 'auto'")
    e.add_argument("--max-models", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("construct", help="ECI design search")
    c.add_argument("config")
    c.add_argument("--out", default=".")
    c.add_argument("--seed", type=int)
    c.add_argument("--restarts", type=int)
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_construct)

    s = sub.add_parser("select", help="constrained rLOF selection from a pool")
    s.add_argument("pool", nargs="?")
    s.add_argument("--designs", nargs="+", help="design CSVs added to the pool")
    s.add_argument("--S", type=float, default=1.0)
    s.add_argument("--p2", type=_p2, default=None)
    s.add_argument("--model", choices=ORDERS)
    s.add_argument("--alpha", type=float)
    s.add_argument("--max-models", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    a = sub.add_parser("analyze", help="two-stage analysis of a response")
    a.add_argument("design")
    a.add_argument("responses")
    a.add_argument("--column", help="response column name or 1-based index")
    a.add_argument("--model", choices=ORDERS, default="2fi")
    a.add_argument("--alpha", type=float, default=0.10)
    a.add_argument("--method", choices=METHODS, default="allsubsets")
    a.add_argument("--heredity", choices=HEREDITY, default="strong")
    a.add_argument("--full-x1", action="store_true", help="keep all main effects in the mBIC fits")
    a.add_argument("--pooling", action="store_true", help="union of passing guided-subsets models")
    a.add_argument("--all-lof", choices=ALL_LOF_POLICIES, default="report")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("simulate", help="run simulation scenarios")
    m.add_argument("scenario", nargs="?")
    m.add_argument("--reactor", choices=("replay", "base", "plus_2fi"))
    m.add_argument("--seed", type=int)
    m.add_argument("--reps", type=int)
    m.add_argument("--threads", type=int)
    m.add_argument("--records", help="write per-rep records as CSV")
    m.add_argument("--out")
    m.set_defaults(func=cmd_simulate)

    g = sub.add_parser("catalog", help="catalog designs")
    grp = g.add_mutually_exclusive_group(required=True)
    grp.add_argument("--dsd", type=int, metavar="K")
    grp.add_argument("--adsd", type=int, nargs=2, metavar=("K", "F"))
    g.add_argument("--drop-center", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_catalog)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except NoDesignMeetsThreshold as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (CriterionError, AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, DesignError, SearchInfeasible, ValueError, KeyError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
