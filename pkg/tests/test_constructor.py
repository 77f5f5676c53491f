import math

import numpy as np
import pytest

from screenopt.constructor import (
    SearchConfig,
    SearchInfeasible,
    coordinate_exchange_pass,
    optimize_replicates,
    random_start,
    replicate_assignments,
    resolve_workers,
    search,
)
from screenopt.criteria import EciParams, eci
from screenopt.design import Design, ModelSpec, load_fixture

TWO_FI = ModelSpec("2fi")
QUAD = ModelSpec("quad")


def k5_config(**kw):
    base = dict(k=5, n=12, spec=TWO_FI, eci_params=EciParams(r_min=2), restarts=4, seed=3)
    base.update(kw)
    return SearchConfig(**base)


def assert_paired(d: Design):
    for i, p in enumerate(d.replicate_of):
        if p is not None:
            np.testing.assert_array_equal(d.settings[i], d.settings[p])


class TestConfig:
    def test_levels_follow_model(self):
        assert k5_config().levels == ((-1.0, 1.0),) * 5
        cfg = SearchConfig(k=3, n=12, spec=QUAD, eci_params=EciParams(ell_min=1))
        assert cfg.levels == ((-1.0, 0.0, 1.0),) * 3

    @pytest.mark.parametrize(
        "kw",
        [dict(restarts=0), dict(eci_params=EciParams(r_min=12)), dict(eci_params=EciParams()),
         dict(max_passes=0), dict(levels=((-1.0, 1.0),))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            k5_config(**kw)


class TestRandomStart:
    def test_structure(self):
        d = random_start(k5_config(), np.random.default_rng(1))
        assert (d.n, d.k) == (12, 5)
        assert len(d.du_rows) == 10 and len(d.dr_rows) == 2
        assert d.du_rows == list(range(10))
        assert_paired(d)

    def test_infeasible(self):
        cfg = SearchConfig(k=3, n=3, eci_params=EciParams(r_min=1))
        with pytest.raises(SearchInfeasible):
            random_start(cfg, np.random.default_rng(0))

    def test_deterministic(self):
        a = random_start(k5_config(), np.random.default_rng(9))
        b = random_start(k5_config(), np.random.default_rng(9))
        assert a == b


class TestExchange:
    def test_improves_and_preserves_pairing(self):
        cfg = k5_config(verify=True)
        d = random_start(cfg, np.random.default_rng(2))
        before = eci(d, TWO_FI, cfg.eci_params).total
        after_d, improved = coordinate_exchange_pass(d, cfg)
        after = eci(after_d, TWO_FI, cfg.eci_params).total
        assert improved and after < before
        assert_paired(after_d)

    def test_fixed_point(self):
        cfg = k5_config()
        d = random_start(cfg, np.random.default_rng(5))
        improved = True
        while improved:
            d, improved = coordinate_exchange_pass(d, cfg)
        again, improved = coordinate_exchange_pass(d, cfg)
        assert not improved and again == d

    def test_pool_retains_only_below_threshold(self):
        cfg = k5_config(S=1.0)
        pool = {}
        d = random_start(cfg, np.random.default_rng(4))
        for _ in range(10):
            d, improved = coordinate_exchange_pass(d, cfg, pool)
            if not improved:
                break
        for design, total in pool.values():
            assert total < 1.0
            assert eci(design, TWO_FI, cfg.eci_params).total == pytest.approx(total, abs=1e-8)


class TestReplicates:
    def test_enumeration_count(self):
        d = load_fixture("new_design")
        one = Design(d.settings[[0, 1, 2, 4, 5, 6, 7, 8, 9, 10, 11]],
                     (None, 0) + (None,) * 9)
        cfg = SearchConfig(k=5, n=11, eci_params=EciParams(r_min=1))
        assert replicate_assignments(one, cfg) == one.n_unique()

    def test_never_worse(self, rng):
        cfg = k5_config()
        for seed in range(5):
            d = random_start(cfg, np.random.default_rng(seed))
            before = eci(d, TWO_FI, cfg.eci_params).total
            out = optimize_replicates(d, cfg, rng)
            assert eci(out, TWO_FI, cfg.eci_params).total <= before + 1e-12
            assert_paired(out)

    def test_matches_brute_force(self):
        d = load_fixture("new_design")
        cfg = k5_config()
        du = d.du_rows
        uniq = [i for i in du if not any(np.array_equal(d.settings[i], d.settings[j]) for j in du if j < i)]
        best = math.inf
        for a in uniq:
            for b in uniq:
                if b < a:
                    continue
                rows = list(du) + [a, b]
                cand = Design(d.settings[rows], (None,) * len(du) + (du.index(a), du.index(b)))
                best = min(best, eci(cand, TWO_FI, cfg.eci_params).total)
        out = optimize_replicates(d, cfg)
        assert eci(out, TWO_FI, cfg.eci_params).total == pytest.approx(best, abs=1e-10)

    def test_sampled_assignments(self):
        cfg = k5_config(dr_cap=10, dr_sample=20)
        d = random_start(cfg, np.random.default_rng(8))
        out = optimize_replicates(d, cfg, np.random.default_rng(0))
        assert eci(out, TWO_FI, cfg.eci_params).total <= eci(d, TWO_FI, cfg.eci_params).total + 1e-12


class TestSearch:
    def test_small_search_reaches_benchmark(self):
        cfg = k5_config(restarts=20, verify=True)
        res = search(cfg, workers=1)
        target = eci(load_fixture("new_design"), TWO_FI, cfg.eci_params).total
        assert res.best_eval.total <= target + 1e-12
        assert all(total < cfg.S for _, total in res.pool)
        assert all(res.best_eval.total <= total + 1e-12 for _, total in res.pool)
        for tr in res.trace:
            assert all(b < a for a, b in zip(tr.steps, tr.steps[1:]))
            assert tr.steps[0] == tr.start and tr.steps[-1] == tr.final

    def test_pool_is_deduplicated(self):
        res = search(k5_config(restarts=10), workers=1)
        keys = [d.canonical_key() for d, _ in res.pool]
        assert len(keys) == len(set(keys))

    def test_single_restart_reproducible(self):
        cfg = k5_config(restarts=1, seed=42)
        a, b = search(cfg, workers=1), search(cfg, workers=1)
        assert a.best == b.best and a.trace == b.trace
        assert [t for _, t in a.pool] == [t for _, t in b.pool]

    @pytest.mark.slow
    def test_worker_count_independent(self):
        cfg = k5_config(restarts=6, seed=7)
        a, b = search(cfg, workers=1), search(cfg, workers=3)
        assert a.best == b.best and a.trace == b.trace
        assert [(d.canonical_key(), t) for d, t in a.pool] == [(d.canonical_key(), t) for d, t in b.pool]

    @pytest.mark.slow
    def test_lof_penalized_quadratic(self):
        cfg = SearchConfig(k=6, n=17, spec=QUAD, eci_params=EciParams(ell_min=1), restarts=4, seed=1)
        res = search(cfg, workers=1)
        assert res.best_eval.ell_tilde >= 1
        assert res.best_eval.total < 1

    def test_resolve_workers_env(self, monkeypatch):
        monkeypatch.setenv("SCREENOPT_THREADS", "3")
        assert resolve_workers(1) == 3
        monkeypatch.delenv("SCREENOPT_THREADS")
        assert resolve_workers(2) == 2
        assert resolve_workers() >= 1
