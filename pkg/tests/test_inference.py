import math

import numpy as np
import pytest

from stratfit.core import Dataset, ModelParams, StrataGrid, pack, unpack
from stratfit.densities import Family, tobit_mean
from stratfit.effects import (
    HESS_STEP,
    cluster_sandwich_se,
    effect_ses,
    effect_table,
    natural_param_ses,
    observed_information_se,
    treatment_effects,
)
from stratfit.em import FitResult, case_loglik, fit, log_likelihood
from stratfit.errors import InferenceError

from test_estimation import simulate_four_strata

GRID2 = StrataGrid(2)


def fake_fit(params, floor_active=(False, False)) -> FitResult:
    return FitResult(
        params=params,
        loglik=0.0,
        posterior=np.zeros((0, params.grid.n_strata)),
        mapping_id=0,
        iterations=1,
        converged=True,
        trace=(),
        tie_ids=(0,),
        scale_floor=(0.0, 0.0),
        floor_active=floor_active,
        frozen=(),
    )


def swap_arms_params(params: ModelParams) -> ModelParams:
    """Relabel arms: strata transpose, location columns and scales swap."""
    grid = params.grid
    perm = [grid.index(z1, z0) for z0, z1 in grid.strata]
    table = params.location_table()[perm][:, ::-1]
    return ModelParams(
        grid=grid,
        probs=params.probs[perm],
        locations=table,
        scales=params.scales[::-1].copy(),
        family=params.family,
    )


class TestTreatmentEffects:
    def test_identical_arms_give_zero_effects(self):
        locations = np.tile(np.array([[1.0], [2.0], [3.0], [4.0]]), (1, 2))
        params = ModelParams(GRID2, np.full(4, 0.25), locations, np.ones(2))
        table = treatment_effects(fake_fit(params))
        np.testing.assert_array_equal(table.effect, 0.0)

    def test_effects_recompute_from_locations(self):
        ds, _ = simulate_four_strata(600, seed=30)
        res = fit(ds)
        table = treatment_effects(res)
        loc = res.params.location_table()
        np.testing.assert_array_equal(table.effect, loc[:, 1] - loc[:, 0])
        rows = table.rows()
        assert [r["diagonal"] for r in rows] == [
            z0 == z1 for z0, z1 in GRID2.strata
        ]

    def test_simulated_constant_effect_recovered(self):
        ds, truth = simulate_four_strata(5000, seed=31, dispersion=2.4, effect=2.0)
        res = fit(ds)
        table = treatment_effects(res)
        assert np.max(np.abs(table.effect - 2.0)) < 0.25

    def test_tobit_reports_observed_scale_contrast(self):
        ds, _ = simulate_four_strata(800, seed=32, dispersion=2.4, sigma=2.0,
                                     effect=3.0, censor=True)
        res = fit(ds, Family.TOBIT)
        table = treatment_effects(res)
        loc = res.params.location_table()
        expected = tobit_mean(loc[:, 1], res.params.scales[1]) - tobit_mean(
            loc[:, 0], res.params.scales[0]
        )
        np.testing.assert_allclose(table.effect_observed, expected, atol=1e-12)

    def test_antisymmetric_under_arm_swap(self):
        ds, _ = simulate_four_strata(400, seed=33)
        res = fit(ds)
        swapped = swap_arms_params(res.params)
        fwd = treatment_effects(res)
        perm = [GRID2.index(z1, z0) for z0, z1 in GRID2.strata]
        rev = treatment_effects(fake_fit(swapped))
        np.testing.assert_allclose(rev.effect[perm], -fwd.effect, atol=1e-12)


class TestObservedInformation:
    def test_single_component_matches_closed_form(self):
        rng = np.random.default_rng(34)
        n = 4000
        y = np.concatenate([rng.normal(1.0, 1.5, n), rng.normal(3.0, 2.0, n)])
        t = np.repeat([0, 1], n)
        ds = Dataset.from_arrays(y, t, np.zeros(2 * n, dtype=int), k_levels=1)
        res = fit(ds)
        cov = observed_information_se(res, ds)
        # packed layout for one stratum: loc_t0, loc_t1, log scales
        for arm in (0, 1):
            closed = res.params.scales[arm] / math.sqrt(n)
            assert cov.se[arm] == pytest.approx(closed, rel=0.01)

    def test_gradient_small_at_optimum(self):
        ds, _ = simulate_four_strata(500, seed=35)
        res = fit(ds)
        x = pack(res.params)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        grad = np.empty_like(x)
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h[i]
            grad[i] = (
                log_likelihood(unpack(x + e, res.params), ds)
                - log_likelihood(unpack(x - e, res.params), ds)
            ) / (2 * h[i])
        assert np.max(np.abs(grad)) < 1e-4 * abs(res.loglik)

    def test_mixed_partials_symmetric(self):
        ds, _ = simulate_four_strata(300, seed=36)
        res = fit(ds)
        x = pack(res.params)
        h = 1e-4 * np.maximum(1.0, np.abs(x))

        def grad(v):
            out = np.empty_like(v)
            for i in range(len(v)):
                e = np.zeros_like(v)
                e[i] = h[i]
                out[i] = (
                    log_likelihood(unpack(v + e, res.params), ds)
                    - log_likelihood(unpack(v - e, res.params), ds)
                ) / (2 * h[i])
            return out

        hess = np.empty((len(x), len(x)))
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h[j]
            hess[:, j] = (grad(x + e) - grad(x - e)) / (2 * h[j])
        asym = np.max(np.abs(hess - hess.T)) / np.max(np.abs(hess))
        assert asym < 1e-4

    def test_boundary_probability_rejected(self):
        params = ModelParams(
            GRID2, np.array([0.5, 0.5 - 1e-9, 1e-9, 0.0]), np.zeros((4, 2)), np.ones(2)
        )
        ds = Dataset.from_arrays([0.1], [0], [0], k_levels=2)
        with pytest.raises(InferenceError, match="interior maximum"):
            observed_information_se(fake_fit(params), ds)

    def test_active_scale_floor_rejected(self):
        ds, truth = simulate_four_strata(50, seed=37)
        with pytest.raises(InferenceError, match="scale floor"):
            observed_information_se(fake_fit(truth, floor_active=(True, False)), ds)

    def test_non_optimum_rejected_with_eigen_report(self):
        ds, truth = simulate_four_strata(400, seed=38, dispersion=2.4)
        off = ModelParams(
            GRID2, truth.probs,
            truth.locations + np.array([[3.0, -3.0]] * 4), truth.scales * 3.0,
            truth.family,
        )
        with pytest.raises(InferenceError, match="eigenvalues"):
            observed_information_se(fake_fit(off), ds)


class TestClusterSandwich:
    def test_needs_two_clusters(self):
        ds, _ = simulate_four_strata(100, seed=39)
        one = Dataset.from_arrays(ds.y, ds.t, ds.z, cluster=np.zeros(ds.n), k_levels=2)
        res = fit(one)
        with pytest.raises(InferenceError, match="clusters"):
            cluster_sandwich_se(res, one)

    def test_singleton_clusters_equal_classic_robust(self):
        ds, _ = simulate_four_strata(300, seed=40)
        res = fit(ds)
        cov_n = observed_information_se(res, ds)
        cov_c = cluster_sandwich_se(res, ds, bread=cov_n)  # singleton clusters
        # classic robust estimator computed independently from per-case scores
        x = pack(res.params)
        h = HESS_STEP * np.maximum(1.0, np.abs(x))
        scores = np.empty((ds.n, len(x)))
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h[j]
            scores[:, j] = (
                case_loglik(unpack(x + e, res.params), ds)
                - case_loglik(unpack(x - e, res.params), ds)
            ) / (2 * h[j])
        meat = (ds.w[:, None] * scores).T @ (ds.w[:, None] * scores)
        meat *= ds.n / (ds.n - 1.0)
        classic = cov_n.cov @ meat @ cov_n.cov
        assert np.max(np.abs(classic - cov_c.cov)) <= 1e-10 * max(
            1.0, np.max(np.abs(classic))
        )

    def test_cluster_aggregation_changes_meat(self):
        ds, _ = simulate_four_strata(300, seed=41)
        rng = np.random.default_rng(0)
        clustered = Dataset.from_arrays(
            ds.y, ds.t, ds.z, cluster=rng.integers(0, 10, ds.n), k_levels=2
        )
        res = fit(clustered)
        cov_n = observed_information_se(res, clustered)
        cov_c = cluster_sandwich_se(res, clustered, bread=cov_n)
        assert cov_c.n_clusters == 10
        assert not np.allclose(cov_c.cov, cov_n.cov)


class TestDeltaMethod:
    def test_effect_se_matches_covariance_identity(self):
        ds, _ = simulate_four_strata(600, seed=42)
        res = fit(ds)
        cov = observed_information_se(res, ds)
        se, _, _ = effect_ses(res, cov)
        # packed layout: 3 logits, then locations row-major (stratum, arm)
        for s in range(4):
            i0 = 3 + 2 * s
            i1 = i0 + 1
            direct = math.sqrt(
                cov.cov[i1, i1] + cov.cov[i0, i0] - 2.0 * cov.cov[i0, i1]
            )
            assert abs(direct - se[s]) < 1e-10

    def test_arm_swap_leaves_ses_unchanged(self):
        ds, _ = simulate_four_strata(400, seed=43)
        res = fit(ds)
        cov = observed_information_se(res, ds)
        se, _, _ = effect_ses(res, cov)
        swapped_ds = Dataset.from_arrays(ds.y, 1 - ds.t, ds.z, w=ds.w, k_levels=2)
        swapped = fake_fit(swap_arms_params(res.params))
        cov_s = observed_information_se(swapped, swapped_ds)
        se_s, _, _ = effect_ses(swapped, cov_s)
        perm = [GRID2.index(z1, z0) for z0, z1 in GRID2.strata]
        # repacking permutes the log-ratio coordinates, so the finite
        # differences run at slightly different steps; 2e-4 covers that noise
        np.testing.assert_allclose(se_s[perm], se, rtol=2e-4)

    def test_natural_param_ses_positive(self):
        ds, _ = simulate_four_strata(400, seed=44)
        res = fit(ds)
        cov = observed_information_se(res, ds)
        ses = natural_param_ses(res, cov)
        assert len(ses) == 4 + 8 + 2
        assert np.all(ses > 0.0)


class TestEffectTableConvenience:
    def test_full_table_rows(self):
        ds, _ = simulate_four_strata(500, seed=45)
        res = fit(ds)
        table, cov_n, cov_c = effect_table(res, ds)
        rows = table.rows()
        assert len(rows) == 4
        for row in rows:
            assert row["se_naive"] > 0.0
            assert row["se_cluster"] > 0.0
            assert isinstance(row["significant_naive"], bool)
