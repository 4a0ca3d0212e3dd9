import numpy as np
import pytest

from saekit.errors import DomainError, MonteCarloAbort
from saekit.simulate import (
    AreaSimConfig,
    DirectSimConfig,
    UnitSimConfig,
    gen_area_level,
    gen_finite_population,
    gen_unit_level,
    lattice_adjacency,
    monte_carlo,
    population_domain,
    rank_uniformity_pvalue,
    ring_adjacency,
    sample_population,
)
import saekit.simulate as simulate


class TestConfigs:
    @pytest.mark.parametrize("kwargs", [{"n_domains": 1}, {"rho": 1.0}, {"sigma2": -1.0}, {"topology": "hex"}])
    def test_area_config_validation(self, kwargs):
        with pytest.raises(DomainError):
            AreaSimConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [{"n_units": 0}, {"sigma_eps": -1.0}, {"first_year": 1990}])
    def test_unit_config_validation(self, kwargs):
        with pytest.raises(DomainError):
            UnitSimConfig(**kwargs)


class TestAdjacency:
    def test_lattice(self):
        a = lattice_adjacency(12)  # 3 x 4 rook grid
        assert (a == a.T).all() and a.trace() == 0
        assert a.sum() / 2 == 3 * 3 + 2 * 4

    def test_ring(self):
        a = ring_adjacency(7)
        assert (a.sum(axis=1) == 2).all()


class TestGenAreaLevel:
    def test_noiseless(self):
        data, truth = gen_area_level(AreaSimConfig(seed=1, n_domains=10, sigma2=0.0, psi_scale=0.0))
        np.testing.assert_array_equal(data.y, data.X @ truth.beta)

    def test_deterministic_and_seed_sensitive(self):
        a, _ = gen_area_level(AreaSimConfig(seed=3, n_domains=20))
        b, _ = gen_area_level(AreaSimConfig(seed=3, n_domains=20))
        c, _ = gen_area_level(AreaSimConfig(seed=4, n_domains=20))
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.y, c.y)

    @pytest.mark.parametrize("topology", ["lattice", "ring", "random_geometric"])
    def test_topologies(self, topology):
        data, _ = gen_area_level(AreaSimConfig(seed=2, n_domains=25, topology=topology))
        rs = data.W.sum(axis=1)
        assert np.all((np.abs(rs - 1) < 1e-12) | (rs == 0))


class TestGenUnitLevel:
    def test_zero_scales_single_line(self):
        cfg = UnitSimConfig(seed=1, sigma_alpha_h=0, sigma_beta_h=0, sigma_alpha_hi=0, sigma_beta_hi=0, sigma_eps=0)
        frame, _ = gen_unit_level(cfg)
        for v in frame.visits:
            assert v.response == pytest.approx(cfg.alpha + cfg.beta * frame.t(v), rel=1e-15)

    def test_rotation_partitions_plots(self):
        cfg = UnitSimConfig(seed=2, n_units=1, strata_per_unit=4, plots_per_stratum=25, n_years=5, rotation=5)
        frame, _ = gen_unit_level(cfg)
        panels = {y: {v.plot_id for v in frame.visits if v.panel_year == y} for y in frame.years}
        assert all(len(p) == 20 for p in panels.values())
        assert set().union(*panels.values()) == set(frame.plot_ids)
        assert sum(len(p) for p in panels.values()) == 100

    def test_true_slope_by_enumeration(self):
        frame, truth = gen_unit_level(UnitSimConfig(seed=5))
        A = sum(s.area for s in frame.strata.values())
        num = sum(frame.strata[sid].area * (truth.beta + bh) for sid, bh in zip(truth.stratum_ids, truth.beta_h))
        assert truth.true_slope() == pytest.approx(num / A, rel=1e-13)
        assert truth.area == pytest.approx(frame.total_area, rel=1e-13)

    def test_deterministic(self):
        a, _ = gen_unit_level(UnitSimConfig(seed=8))
        b, _ = gen_unit_level(UnitSimConfig(seed=8))
        assert a.visits == b.visits


class TestFinitePopulation:
    def test_truth_by_enumeration(self):
        pop = gen_finite_population(DirectSimConfig(seed=1))
        # every plot covers the same area, so the area-weighted mean is the plain mean
        assert pop.true_mean == pytest.approx(float(np.mean(pop.values)), rel=1e-12)
        by_stratum = {}
        for sid, v in zip(pop.plot_stratum, pop.values):
            by_stratum.setdefault(sid, []).append(v)
        A = sum(s.area for s in pop.strata)
        weighted = sum(s.area * np.mean(by_stratum[s.id]) for s in pop.strata) / A
        assert pop.true_mean == pytest.approx(weighted, rel=1e-12)

    def test_sample_observes_every_stratum(self):
        pop = gen_finite_population(DirectSimConfig(seed=1))
        frame = sample_population(pop, 30, np.random.default_rng(0))
        for sid in frame.strata:
            assert frame.visits_in_stratum(sid)


class TestMonteCarlo:
    def test_requires_fifty(self):
        with pytest.raises(DomainError):
            monte_carlo("fh_recovery", AreaSimConfig(n_domains=20), 10)

    def test_unknown_study(self):
        with pytest.raises(DomainError):
            monte_carlo("nope", AreaSimConfig(), 50)

    def test_wrong_config_type(self):
        with pytest.raises(DomainError):
            monte_carlo("fh_recovery", UnitSimConfig(), 50)

    def test_deterministic_order_and_threads(self):
        cfg = AreaSimConfig(seed=4, n_domains=15)
        a = monte_carlo("fh_recovery", cfg, 50)
        b = monte_carlo("fh_recovery", cfg, 50, threads=2)
        assert a.metrics == b.metrics and a.replicates == b.replicates
        assert set(a.mc_se) <= set(a.metrics)

    def test_aborts_on_many_failures(self, monkeypatch):
        calls = {"n": 0}

        def flaky(cfg, seed):
            calls["n"] += 1
            if calls["n"] % 10 == 0:
                raise RuntimeError("boom")
            return {"sigma2": 1.0, "rho": 0.0, "converged": True, "mse_eblup": 1.0, "mse_direct": 2.0,
                    "mean_ser": 1.0, "mean_analytic_mse": 1.0, "sigma2_boundary": False, "beta0": 0.0}

        monkeypatch.setattr(simulate, "_rep_fh", flaky)
        with pytest.raises(MonteCarloAbort):
            monte_carlo("fh_recovery", AreaSimConfig(n_domains=15), 50)

    def test_few_failures_recorded(self, monkeypatch):
        calls = {"n": 0}

        def flaky(cfg, seed):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("boom")
            return {"sigma2": 1.0, "rho": 0.0, "converged": True, "mse_eblup": 1.0, "mse_direct": 2.0,
                    "mean_ser": 1.0, "mean_analytic_mse": 1.0, "sigma2_boundary": False, "beta0": 0.0}

        monkeypatch.setattr(simulate, "_rep_fh", flaky)
        r = monte_carlo("fh_recovery", AreaSimConfig(n_domains=15), 50)
        assert r.n_failed == 1


def test_rank_uniformity_pvalue():
    rng = np.random.default_rng(0)
    assert rank_uniformity_pvalue(rng.integers(0, 100, size=1000)) > 0.01
    assert rank_uniformity_pvalue(np.zeros(100, dtype=int)) < 1e-6
