import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cntgw.measures import kl_divergence, marginal_error
from cntgw.sinkhorn import (
    DenseCost,
    SinkhornConfig,
    SquaredEuclideanCost,
    eot_primal_value,
    sinkhorn,
    transport_cost,
)


def _instance(n=8, m=6, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    a = rng.random(n) + 0.3
    a /= a.sum()
    b = rng.random(m) + 0.3
    b /= b.sum()
    c = rng.random((n, m)) * scale
    return a, b, c


def _reference_plan(a, b, c, eps, sweeps=5000):
    """Independent oracle: multiplicative-domain Sinkhorn run to the floor."""
    k = np.exp(-c / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(sweeps):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


class TestCostProviders:
    def test_dense_rows_and_transpose(self):
        c = np.arange(12.0).reshape(3, 4)
        p = DenseCost(c)
        assert np.array_equal(p.rows(1, 3), c[1:3])
        t = p.transpose()
        assert np.array_equal(t.full(), c.T)
        assert t.transpose() is p

    def test_dense_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            DenseCost(np.array([[np.inf]]))

    def test_sq_euclidean_matches_dense(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((7, 3))
        z = rng.standard_normal((5, 3))
        p = SquaredEuclideanCost(x, z)
        direct = ((x[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
        assert np.allclose(p.full(), direct, atol=1e-12)
        assert np.allclose(p.rows(2, 5), direct[2:5], atol=1e-12)

    def test_cached_and_uncached_agree(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((9, 2))
        z = rng.standard_normal((4, 2))
        cached = SquaredEuclideanCost(x, z)
        uncached = SquaredEuclideanCost(x, z, cache_entries=0)
        assert np.allclose(cached.rows(0, 9), uncached.full(), atol=1e-12)

    def test_nonnegative_rows(self):
        x = np.zeros((3, 2))
        p = SquaredEuclideanCost(x, x)
        assert np.all(p.full() >= 0.0)


class TestConfigValidation:
    def test_requires_one_budget(self):
        with pytest.raises(ValueError, match="exactly one"):
            SinkhornConfig(eps=1.0, n_inner=10, threshold=1e-6)

    def test_default_budget_is_fixed_sweeps(self):
        cfg = SinkhornConfig(eps=1.0)
        assert cfg.n_inner == 100 and cfg.threshold is None

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            SinkhornConfig(eps=0.0)

    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            SinkhornConfig(eps=1.0, mode="fast")


class TestFixedPoint:
    def test_single_point_symmetrized_splits_cost(self):
        c = DenseCost(np.array([[1.7]]))
        a = np.array([1.0])
        res = sinkhorn(a, a, c, SinkhornConfig(eps=0.5, mode="symmetrized", n_inner=80))
        assert res.coupling.f[0] == pytest.approx(1.7 / 2.0, abs=1e-12)
        assert res.coupling.g[0] == pytest.approx(1.7 / 2.0, abs=1e-12)
        assert res.coupling.densify().matrix[0, 0] == pytest.approx(1.0)

    def test_warm_start_at_solution_is_stationary(self):
        a, b, c, eps = *_instance(6, 5, seed=3), 0.4
        ref = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=eps, mode="standard", threshold=1e-14, max_inner=20000))
        cfg = SinkhornConfig(eps=eps, mode="standard", n_inner=1).with_warm_start(
            ref.coupling.f, ref.coupling.g
        )
        res = sinkhorn(a, b, DenseCost(c), cfg)
        assert np.abs(res.coupling.f - ref.coupling.f).max() < 1e-10
        assert np.abs(res.coupling.g - ref.coupling.g).max() < 1e-10


class TestAgainstOracle:
    @pytest.mark.parametrize("mode", ["standard", "symmetrized"])
    def test_plan_matches_multiplicative_reference(self, mode):
        a, b, c = _instance(9, 7, seed=4)
        eps = 0.3
        res = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=eps, mode=mode, threshold=1e-15, max_inner=30000)
        )
        ref = _reference_plan(a, b, c, eps)
        assert np.allclose(res.coupling.densify().matrix, ref, atol=1e-10)

    def test_marginals_met_after_threshold_run(self):
        a, b, c = _instance(10, 12, seed=5)
        res = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=0.2, threshold=1e-12, max_inner=50000)
        )
        assert res.converged
        assert res.marginal_err < 1e-5


class TestIterationControl:
    def test_fixed_budget_runs_exactly_n(self):
        a, b, c = _instance(5, 5, seed=6)
        res = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=0.5, n_inner=7))
        assert res.iterations == 7
        assert res.converged

    def test_threshold_cap_reports_unconverged(self):
        a, b, c = _instance(8, 8, seed=7)
        res = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=0.01, threshold=1e-14, max_inner=3)
        )
        assert res.iterations == 3
        assert not res.converged

    def test_standard_marginal_error_nonincreasing(self):
        for seed in range(10):
            a, b, c = _instance(9, 7, seed=seed)
            errors = []
            f = np.zeros(a.size)
            g = np.zeros(b.size)
            for _ in range(25):
                cfg = SinkhornConfig(eps=0.15, mode="standard", n_inner=1).with_warm_start(f, g)
                res = sinkhorn(a, b, DenseCost(c), cfg)
                f, g = res.coupling.f, res.coupling.g
                errors.append(res.marginal_err)
            diffs = np.diff(errors)
            assert np.all(diffs <= 1e-12), f"seed {seed}: {errors}"


class TestSwapSymmetry:
    def test_symmetrized_swap_is_bit_exact(self):
        a, b, c = _instance(11, 6, seed=8)
        cost = DenseCost(c)
        cfg = SinkhornConfig(eps=0.23, mode="symmetrized", n_inner=37)
        fwd = sinkhorn(a, b, cost, cfg)
        bwd = sinkhorn(b, a, cost.transpose(), cfg)
        assert np.array_equal(fwd.coupling.f, bwd.coupling.g)
        assert np.array_equal(fwd.coupling.g, bwd.coupling.f)

    def test_swap_with_squared_euclidean_provider(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((8, 3))
        z = rng.standard_normal((5, 3))
        a = np.full(8, 1.0 / 8)
        b = np.full(5, 1.0 / 5)
        cfg = SinkhornConfig(eps=0.4, mode="symmetrized", n_inner=21)
        fwd = sinkhorn(a, b, SquaredEuclideanCost(x, z), cfg)
        bwd = sinkhorn(b, a, SquaredEuclideanCost(z, x), cfg)
        assert np.array_equal(fwd.coupling.f, bwd.coupling.g)
        assert np.array_equal(fwd.coupling.g, bwd.coupling.f)


class TestAnnealing:
    def test_constant_schedule_reproduces_plain_run(self):
        a, b, c = _instance(7, 7, seed=10)
        cfg_plain = SinkhornConfig(eps=0.3, n_inner=40)
        cfg_anneal = SinkhornConfig(eps=0.3, n_inner=40, anneal_from=0.3)
        plain = sinkhorn(a, b, DenseCost(c), cfg_plain)
        annealed = sinkhorn(a, b, DenseCost(c), cfg_anneal)
        assert np.array_equal(plain.coupling.f, annealed.coupling.f)
        assert np.array_equal(plain.coupling.g, annealed.coupling.g)

    def test_annealed_run_lands_at_target_temperature(self):
        a, b, c = _instance(6, 6, seed=11)
        res = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=0.05, n_inner=500, anneal_from=1.0)
        )
        assert res.coupling.eps_eff == pytest.approx(0.05)

    def test_truncated_annealing_records_last_temperature(self):
        a, b, c = _instance(6, 6, seed=12)
        # only 4 sweeps: eps_4 = 1.0 / 2 = 0.5 > eps target
        res = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=0.01, n_inner=4, anneal_from=1.0)
        )
        assert res.coupling.eps_eff == pytest.approx(0.5)

    def test_annealing_helps_at_low_temperature(self):
        a, b, c = _instance(10, 10, seed=13)
        eps = 0.005
        budget = 60
        cold = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=eps, n_inner=budget))
        warm = sinkhorn(
            a, b, DenseCost(c), SinkhornConfig(eps=eps, n_inner=budget, anneal_from=0.5)
        )
        assert warm.marginal_err <= cold.marginal_err * 1.5


class TestPrimalValue:
    def test_matches_direct_computation(self):
        a, b, c = _instance(6, 8, seed=14)
        res = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=0.3, n_inner=300))
        pi = res.coupling.densify()
        direct = (pi.matrix * c).sum() + 0.3 * kl_divergence(pi)
        assert eot_primal_value(res.coupling) == pytest.approx(direct, rel=1e-10)
        assert transport_cost(res.coupling) == pytest.approx((pi.matrix * c).sum(), rel=1e-10)

    def test_dense_requires_cost_and_eps(self):
        a, b, c = _instance(4, 4, seed=15)
        res = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=0.5, n_inner=50))
        pi = res.coupling.densify()
        with pytest.raises(ValueError, match="dense couplings"):
            eot_primal_value(pi)
        val = eot_primal_value(pi, cost=DenseCost(c), eps=0.5)
        assert val == pytest.approx(eot_primal_value(res.coupling), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    shift=st.floats(min_value=-5.0, max_value=5.0, allow_nan=False),
)
def test_property_cost_shift_invariance(seed, shift):
    """Adding a constant to the cost leaves the plan unchanged."""
    a, b, c = _instance(6, 5, seed=seed)
    cfg = SinkhornConfig(eps=0.4, n_inner=200)
    base = sinkhorn(a, b, DenseCost(c), cfg)
    shifted = sinkhorn(a, b, DenseCost(c + shift), cfg)
    assert np.allclose(
        base.coupling.densify().matrix, shifted.coupling.densify().matrix, atol=1e-12
    )


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_property_plan_mass_near_one(seed):
    """Any finished run reconstructs a plan of mass close to 1."""
    a, b, c = _instance(7, 6, seed=seed)
    res = sinkhorn(a, b, DenseCost(c), SinkhornConfig(eps=0.25, n_inner=60))
    mass = res.coupling.row_marginal().sum()
    assert mass == pytest.approx(1.0, abs=1e-6)
