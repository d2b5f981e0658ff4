import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cntgw.kernels import (
    CostSpec,
    cnt_diagnostic,
    cost_gradients,
    cost_matrix,
    covariance_spectrum,
    embed_measure,
    kernel_from_cost,
    kernel_pca,
    parse_cost_spec,
    squared_distances,
)
from cntgw.measures import DiscreteMeasure


def _cloud(n=12, dim=3, seed=0, uniform=False):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, dim))
    if uniform:
        return DiscreteMeasure(pts)
    w = rng.random(n) + 0.2
    return DiscreteMeasure(pts, w / w.sum())


class TestCostSpec:
    def test_parse_grammar(self):
        assert parse_cost_spec("sq_euclidean").kind == "sq_euclidean"
        assert parse_cost_spec("euclidean").kind == "euclidean"
        spec = parse_cost_spec("p_norm:1.5")
        assert spec.kind == "p_norm" and spec.p == 1.5
        spec = parse_cost_spec("exp:0.7")
        assert spec.kind == "exp_kernel" and spec.sigma == 0.7

    def test_parse_rejects_garbage(self):
        for bad in ("nope", "p_norm:x", "exp:-1", "p_norm:2.5", "p_norm:0"):
            with pytest.raises(ValueError):
                parse_cost_spec(bad)

    def test_file_kinds_require_payload(self):
        with pytest.raises(ValueError, match="payload"):
            CostSpec(kind="dense_matrix", path="foo.csv")

    def test_differentiable_flags(self):
        assert CostSpec(kind="sq_euclidean").differentiable
        assert CostSpec(kind="p_norm", p=1.5).differentiable
        assert not CostSpec(kind="p_norm", p=1.0).differentiable
        assert not CostSpec(kind="euclidean").differentiable
        assert CostSpec(kind="exp_kernel", sigma=1.0).differentiable


class TestCostMatrix:
    def test_sq_euclidean_values(self):
        m = DiscreteMeasure(np.array([[0.0], [2.0]]))
        c = cost_matrix(CostSpec(kind="sq_euclidean"), m)
        assert np.allclose(c, [[0.0, 4.0], [4.0, 0.0]])

    def test_euclidean_is_p1(self):
        m = _cloud(6, 2, seed=1)
        c1 = cost_matrix(CostSpec(kind="euclidean"), m)
        c2 = cost_matrix(CostSpec(kind="p_norm", p=1.0), m)
        assert np.allclose(c1, c2)

    def test_p2_matches_sq_euclidean(self):
        m = _cloud(6, 2, seed=2)
        c1 = cost_matrix(CostSpec(kind="p_norm", p=2.0), m)
        c2 = cost_matrix(CostSpec(kind="sq_euclidean"), m)
        assert np.allclose(c1, c2)

    def test_exp_kernel_bounded(self):
        m = _cloud(8, 3, seed=3)
        c = cost_matrix(CostSpec(kind="exp_kernel", sigma=0.5), m)
        assert np.all(c >= 0.0) and np.all(c <= 2.0)
        assert np.allclose(np.diag(c), 0.0)

    def test_matrix_payload_size_check(self):
        m = _cloud(4, 2)
        mat = np.zeros((3, 3))
        spec = CostSpec(kind="dense_matrix", payload=mat)
        with pytest.raises(ValueError, match="match"):
            cost_matrix(spec, m)

    def test_zero_diagonal_and_symmetry(self):
        m = _cloud(9, 2, seed=4)
        for spec in (
            CostSpec(kind="sq_euclidean"),
            CostSpec(kind="euclidean"),
            CostSpec(kind="p_norm", p=0.7),
            CostSpec(kind="exp_kernel", sigma=1.3),
        ):
            c = cost_matrix(spec, m)
            assert np.allclose(c, c.T)
            assert np.all(np.diag(c) == 0.0)


class TestKernelFromCost:
    def test_frozen_two_point_example(self):
        d = 3.7
        cost = np.array([[0.0, d], [d, 0.0]])
        k = kernel_from_cost(cost, np.array([0.5, 0.5]))
        assert np.allclose(k.matrix, (d / 4.0) * np.array([[1.0, -1.0], [-1.0, 1.0]]))

    def test_weighted_row_sums_vanish(self):
        m = _cloud(10, 3, seed=5)
        cost = cost_matrix(CostSpec(kind="p_norm", p=1.5), m)
        k = kernel_from_cost(cost, m.weights)
        assert np.abs(k.matrix @ m.weights).max() < 1e-7

    def test_base_point_independence(self):
        m = _cloud(9, 2, seed=6)
        cost = cost_matrix(CostSpec(kind="euclidean"), m)
        k0 = kernel_from_cost(cost, m.weights, base_index=0)
        k5 = kernel_from_cost(cost, m.weights, base_index=5)
        assert np.allclose(k0.matrix, k5.matrix, atol=1e-12)

    def test_equals_centered_negative_half_cost(self):
        # the base-point construction collapses to -1/2 H C H^T
        m = _cloud(8, 2, seed=7)
        cost = cost_matrix(CostSpec(kind="sq_euclidean"), m)
        k = kernel_from_cost(cost, m.weights)
        h = np.eye(m.n) - np.outer(np.ones(m.n), m.weights)
        assert np.allclose(k.matrix, -0.5 * h @ cost @ h.T, atol=1e-12)

    def test_sq_euclidean_kernel_is_centered_gram(self):
        m = _cloud(7, 3, seed=8)
        cost = cost_matrix(CostSpec(kind="sq_euclidean"), m)
        k = kernel_from_cost(cost, m.weights)
        centered = m.points - m.weights @ m.points
        assert np.allclose(k.matrix, centered @ centered.T, atol=1e-12)


class TestKernelPca:
    def test_frozen_two_point_embedding(self):
        d = 2.5
        cost = np.array([[0.0, d], [d, 0.0]])
        k = kernel_from_cost(cost, np.array([0.5, 0.5]))
        res = kernel_pca(k, 1)
        assert np.allclose(res.features[:, 0], [np.sqrt(d) / 2.0, -np.sqrt(d) / 2.0])
        assert res.clamped == 0

    def test_distances_reproduced_at_full_rank(self):
        m = _cloud(10, 2, seed=9)
        cost = cost_matrix(CostSpec(kind="p_norm", p=1.2), m)
        k = kernel_from_cost(cost, m.weights)
        res = kernel_pca(k, m.n)
        rebuilt = squared_distances(res.features)
        assert np.allclose(rebuilt, cost, atol=1e-8)

    def test_eigenvalues_descending_and_clamped(self):
        # a non-CNT cost: squared distances to the 6th power on collinear points
        pts = np.linspace(0.0, 1.0, 7)[:, None] ** 1.3
        m = DiscreteMeasure(pts)
        cost = squared_distances(m.points) ** 3
        k = kernel_from_cost(cost, m.weights)
        res = kernel_pca(k, m.n)
        assert np.all(np.diff(res.eigenvalues) <= 1e-12)
        assert res.clamped > 0
        assert np.all(res.eigenvalues >= 0.0)

    def test_dim_out_of_range(self):
        k = kernel_from_cost(np.zeros((3, 3)), np.full(3, 1.0 / 3))
        with pytest.raises(ValueError, match="dimension"):
            kernel_pca(k, 4)

    def test_all_nonpositive_spectrum_refused(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        m = DiscreteMeasure(pts)
        cost = -squared_distances(m.points)  # negative-type violated everywhere
        k = kernel_from_cost(cost, m.weights)
        with pytest.raises(ValueError, match="not CNT"):
            kernel_pca(k, 2)

    def test_subspace_iteration_matches_dense(self):
        m = _cloud(60, 3, seed=10)
        cost = cost_matrix(CostSpec(kind="euclidean"), m)
        k = kernel_from_cost(cost, m.weights)
        dense = kernel_pca(k, 5)
        iterative = kernel_pca(k, 5, dense_cutoff=10)
        assert np.allclose(iterative.eigenvalues, dense.eigenvalues, rtol=1e-6, atol=1e-9)
        # eigenvector accuracy is gap-limited; the honest check is the residual
        resid = k.matrix @ iterative.eigenvectors - iterative.eigenvectors * iterative.eigenvalues
        scale = np.abs(dense.eigenvalues[0])
        assert np.abs(resid).max() < 1e-6 * scale

    def test_subspace_iteration_deterministic(self):
        m = _cloud(40, 2, seed=11)
        cost = cost_matrix(CostSpec(kind="euclidean"), m)
        k = kernel_from_cost(cost, m.weights)
        a = kernel_pca(k, 4, dense_cutoff=10)
        b = kernel_pca(k, 4, dense_cutoff=10)
        assert np.array_equal(a.features, b.features)


class TestEmbedMeasure:
    def test_sq_euclidean_fast_path_is_centered_input(self):
        m = _cloud(9, 2, seed=12)
        emb = embed_measure(m, CostSpec(kind="sq_euclidean"), dim=2)
        assert np.allclose(emb.features, m.points - m.weights @ m.points)
        assert emb.explained_variance == 1.0
        assert emb.eigenvalues is None

    def test_fast_path_requires_dim_at_least_ambient(self):
        m = _cloud(9, 3, seed=13)
        emb = embed_measure(m, CostSpec(kind="sq_euclidean"), dim=2)
        # truncated: goes through the kernel route, still centered
        assert emb.dim == 2
        assert emb.eigenvalues is not None

    def test_features_weighted_centered(self):
        m = _cloud(11, 3, seed=14)
        for spec in (
            CostSpec(kind="sq_euclidean"),
            CostSpec(kind="euclidean"),
            CostSpec(kind="exp_kernel", sigma=1.0),
        ):
            emb = embed_measure(m, spec, dim=5)
            assert np.abs(emb.weights @ emb.features).max() < 1e-7

    def test_embedding_reproduces_cost(self):
        m = _cloud(10, 2, seed=15)
        spec = CostSpec(kind="euclidean")
        emb = embed_measure(m, spec, dim=10)
        assert np.allclose(
            squared_distances(emb.features), cost_matrix(spec, m), atol=1e-8
        )

    def test_precomputed_embedding_fast_path(self):
        rng = np.random.default_rng(16)
        coords = rng.standard_normal((8, 4))
        m = DiscreteMeasure(rng.standard_normal((8, 2)))
        spec = CostSpec(kind="precomputed_embedding", payload=coords)
        emb = embed_measure(m, spec, dim=6)
        assert np.allclose(emb.features, coords - m.weights @ coords)

    def test_half_sq_norms(self):
        m = _cloud(7, 2, seed=17)
        emb = embed_measure(m, CostSpec(kind="sq_euclidean"), dim=2)
        assert np.allclose(emb.half_sq_norms, 0.5 * (emb.features**2).sum(axis=1))

    def test_dim_exceeding_support_rejected(self):
        m = _cloud(5, 2, seed=18)
        with pytest.raises(ValueError, match="support"):
            embed_measure(m, CostSpec(kind="euclidean"), dim=6)


class TestCntDiagnostic:
    def test_sq_euclidean_is_cnt(self):
        m = _cloud(12, 3, seed=19)
        diag = cnt_diagnostic(cost_matrix(CostSpec(kind="sq_euclidean"), m), m.weights)
        assert diag.is_cnt

    def test_p_norm_family_is_cnt(self):
        m = _cloud(12, 3, seed=20)
        for p in (0.5, 1.0, 1.5, 2.0):
            c = cost_matrix(CostSpec(kind="p_norm", p=p), m)
            assert cnt_diagnostic(c, m.weights).is_cnt, f"p={p}"

    def test_exp_kernel_is_cnt(self):
        m = _cloud(12, 3, seed=21)
        c = cost_matrix(CostSpec(kind="exp_kernel", sigma=0.8), m)
        assert cnt_diagnostic(c, m.weights).is_cnt

    def test_sixth_power_on_line_is_not_cnt(self):
        pts = np.linspace(0.0, 1.0, 9)[:, None] ** 1.1
        m = DiscreteMeasure(pts)
        c = squared_distances(m.points) ** 3
        diag = cnt_diagnostic(c, m.weights)
        assert not diag.is_cnt
        assert diag.min_eigenvalue < 0.0


class TestCovarianceSpectrum:
    def test_frozen_cross_example(self):
        pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        m = DiscreteMeasure(pts)
        emb = embed_measure(m, CostSpec(kind="sq_euclidean"), dim=2)
        vals = covariance_spectrum(emb)
        assert np.allclose(vals, [0.5, 0.5])

    def test_descending_nonnegative(self):
        m = _cloud(15, 4, seed=22)
        emb = embed_measure(m, CostSpec(kind="euclidean"), dim=6)
        vals = covariance_spectrum(emb)
        assert np.all(vals >= 0.0)
        assert np.all(np.diff(vals) <= 1e-12)


class TestCostGradients:
    @pytest.mark.parametrize(
        "spec",
        [
            CostSpec(kind="sq_euclidean"),
            CostSpec(kind="p_norm", p=1.5),
            CostSpec(kind="exp_kernel", sigma=0.9),
        ],
    )
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(23)
        pts = rng.standard_normal((5, 3))
        g = cost_gradients(spec, pts)
        m, i = 2, 4
        h = 1e-6

        def cost_of(x):
            d2 = ((x - pts[i]) ** 2).sum()
            if spec.kind == "sq_euclidean":
                return d2
            if spec.kind == "p_norm":
                return d2 ** (spec.p / 2.0)
            return 2.0 * (1.0 - np.exp(-d2 / (2.0 * spec.sigma**2)))

        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            fd = (cost_of(pts[m] + e) - cost_of(pts[m] - e)) / (2.0 * h)
            assert g[m, i, axis] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_p_norm_zero_at_coincident(self):
        pts = np.zeros((3, 2))
        g = cost_gradients(CostSpec(kind="p_norm", p=1.5), pts)
        assert np.all(g == 0.0)

    def test_nondifferentiable_rejected(self):
        with pytest.raises(ValueError, match="not differentiable"):
            cost_gradients(CostSpec(kind="euclidean"), np.zeros((2, 2)))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=3, max_value=12),
    p=st.sampled_from([0.5, 1.0, 1.5, 2.0]),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_property_powered_distances_are_cnt(n, p, seed):
    """Powered Euclidean distances with 0 < p <= 2 are of negative type."""
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 2))
    w = rng.random(n) + 0.1
    m = DiscreteMeasure(pts, w / w.sum())
    c = cost_matrix(CostSpec(kind="p_norm", p=p), m)
    assert cnt_diagnostic(c, m.weights).is_cnt


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=3, max_value=10),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_property_embedding_reproduces_cnt_cost(n, seed):
    """Full-rank embeddings reproduce the base cost as squared distances."""
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 2))
    m = DiscreteMeasure(pts)
    spec = CostSpec(kind="p_norm", p=1.0)
    emb = embed_measure(m, spec, dim=n)
    assert np.allclose(squared_distances(emb.features), cost_matrix(spec, m), atol=1e-7)
