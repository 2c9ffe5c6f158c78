import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tarot import ConfigError, FeatureMatrix, NumericalError, ShapeMismatchError
from tarot.metric import (
    ProjectionSpec,
    WhiteningTransform,
    apply_whitening,
    build_metric,
    default_projection_spec,
    fit_whitening,
    make_projection,
    normalize_rows,
    project,
    wfd,
)


class TestProjection:
    def test_deterministic(self):
        spec = ProjectionSpec(4, 4, seed=7)
        np.testing.assert_array_equal(make_projection(spec), make_projection(spec))

    def test_seed_changes_matrix(self):
        a = make_projection(ProjectionSpec(8, 4, seed=1))
        b = make_projection(ProjectionSpec(8, 4, seed=2))
        assert not np.array_equal(a, b)

    def test_rademacher_domain(self):
        p = make_projection(ProjectionSpec(16, 4, seed=3, family="rademacher"))
        np.testing.assert_allclose(np.abs(p), 0.5, atol=0)  # 1/sqrt(4)

    def test_shape(self):
        p = make_projection(ProjectionSpec(10, 3, seed=0))
        assert p.shape == (3, 10)

    def test_rejects_d_above_D(self):
        with pytest.raises(ConfigError):
            ProjectionSpec(4, 5, seed=0)

    def test_rejects_bad_family(self):
        with pytest.raises(ConfigError):
            ProjectionSpec(4, 2, seed=0, family="uniform")

    def test_johnson_lindenstrauss(self):
        # Squared distances survive projection to within +-30% for >=95% of pairs.
        rng = np.random.default_rng(42)
        p = make_projection(ProjectionSpec(1000, 256, seed=9))
        ok = 0
        for _ in range(200):
            a = rng.standard_normal(1000)
            b = rng.standard_normal(1000)
            true = np.sum((a - b) ** 2)
            got = np.sum((p @ a - p @ b) ** 2)
            if 0.7 * true <= got <= 1.3 * true:
                ok += 1
        assert ok >= 190

    def test_project_identity(self):
        rng = np.random.default_rng(0)
        m = FeatureMatrix(rng.standard_normal((3, 5)), ("a", "b", "c"))
        out = project(m, np.eye(5))
        np.testing.assert_array_equal(out.data, m.data)

    def test_project_zero_row(self):
        data = np.zeros((2, 8))
        data[1] = np.arange(8)
        m = FeatureMatrix(data, ("z", "nz"))
        p = make_projection(ProjectionSpec(8, 4, seed=1))
        out = project(m, p)
        np.testing.assert_array_equal(out.data[0], np.zeros(4))

    def test_project_matches_dot_oracle(self):
        rng = np.random.default_rng(5)
        m = FeatureMatrix(rng.standard_normal((3, 8)), ("a", "b", "c"))
        p = rng.standard_normal((4, 8))
        out = project(m, p)
        for i in range(3):
            want = np.array([np.dot(p[j], m.data[i]) for j in range(4)])
            np.testing.assert_allclose(out.data[i], want, atol=1e-12)

    def test_project_dim_mismatch(self):
        m = FeatureMatrix(np.ones((2, 3)), ("a", "b"))
        with pytest.raises(ShapeMismatchError):
            project(m, np.ones((2, 4)))

    def test_default_spec_passthrough(self):
        assert default_projection_spec(4096, seed=0) is None
        spec = default_projection_spec(5000, seed=0)
        assert spec is not None and spec.output_dim == 4096


def exact_cov_identity_data():
    r = np.sqrt(2.0)
    return np.array([[r, 0.0], [-r, 0.0], [0.0, r], [0.0, -r]])


class TestWhitening:
    def test_identity_covariance(self):
        t = fit_whitening(exact_cov_identity_data(), method="cholesky", eps=0.0)
        np.testing.assert_allclose(t.mean, np.zeros(2), atol=1e-15)
        np.testing.assert_allclose(t.whitener, np.eye(2), atol=1e-12)

    def test_diagonal_analytic(self):
        x = np.array([[2 * np.sqrt(2), 0.0], [-2 * np.sqrt(2), 0.0], [0.0, np.sqrt(2)], [0.0, -np.sqrt(2)]])
        t = fit_whitening(x, method="cholesky", eps=0.0)
        np.testing.assert_allclose(t.whitener, np.diag([0.5, 1.0]), atol=1e-12)

    @pytest.mark.parametrize("method", ["cholesky", "zca"])
    def test_transformed_cov_is_identity(self, method):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((200, 5)) @ rng.standard_normal((5, 5))
        t = fit_whitening(x, method=method, eps=0.0)
        w = apply_whitening(t, x)
        cov = (w.T @ w) / 200
        np.testing.assert_allclose(cov, np.eye(5), atol=1e-8)

    def test_cholesky_lower_triangular(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((50, 4))
        t = fit_whitening(x, method="cholesky", eps=0.0)
        np.testing.assert_allclose(t.whitener, np.tril(t.whitener), atol=0)

    def test_zca_symmetric(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((50, 4))
        t = fit_whitening(x, method="zca", eps=0.0)
        np.testing.assert_allclose(t.whitener, t.whitener.T, atol=1e-10)

    def test_eps_rescues_singular(self):
        # Rank-1 data: eps=0 must fail, the default ridge must succeed.
        x = np.outer(np.arange(1.0, 7.0), np.ones(3))
        with pytest.raises(NumericalError):
            fit_whitening(x, method="cholesky", eps=0.0)
        t = fit_whitening(x, method="cholesky", eps=1e-5)
        assert np.isfinite(t.whitener).all()

    def test_needs_two_rows(self):
        with pytest.raises(Exception):
            fit_whitening(np.ones((1, 3)), eps=0.0)

    def test_rejects_negative_eps(self):
        with pytest.raises(ConfigError):
            fit_whitening(np.eye(3), eps=-1.0)

    def test_rejects_bad_method(self):
        with pytest.raises(ConfigError):
            fit_whitening(np.eye(3), method="pca")

    def test_whitener_sandwich(self):
        # Both methods satisfy W cov_reg W^T = I.
        rng = np.random.default_rng(20)
        x = rng.standard_normal((100, 6))
        mu = x.mean(axis=0)
        cov = (x - mu).T @ (x - mu) / 100
        for method in ("cholesky", "zca"):
            t = fit_whitening(x, method=method, eps=0.0)
            np.testing.assert_allclose(t.whitener @ cov @ t.whitener.T, np.eye(6), atol=1e-9)

    def test_apply_mean_row_is_zero(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((30, 4))
        t = fit_whitening(x, eps=0.0)
        out = apply_whitening(t, t.mean[None, :])
        np.testing.assert_allclose(out, np.zeros((1, 4)), atol=1e-12)

    def test_apply_identity_transform(self):
        t = WhiteningTransform(np.zeros(3), np.eye(3), "zca", 0.0, 10)
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(apply_whitening(t, x), x)

    def test_apply_matches_row_oracle(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((10, 4))
        t = fit_whitening(x, eps=1e-5)
        out = apply_whitening(t, x)
        for i in range(10):
            want = t.whitener @ (x[i] - t.mean)
            np.testing.assert_allclose(out[i], want, atol=1e-12)

    def test_apply_dim_mismatch(self):
        t = WhiteningTransform(np.zeros(3), np.eye(3), "zca", 0.0, 10)
        with pytest.raises(ShapeMismatchError):
            apply_whitening(t, np.ones((2, 4)))

    def test_json_roundtrip(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal((40, 3))
        t = fit_whitening(x, method="zca", eps=1e-5)
        back = WhiteningTransform.from_json(t.to_json())
        np.testing.assert_array_equal(back.mean, t.mean)
        np.testing.assert_array_equal(back.whitener, t.whitener)
        assert back.method == t.method
        assert back.eps == t.eps
        assert back.fingerprint == t.fingerprint

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(24)
        t = fit_whitening(rng.standard_normal((20, 3)), eps=0.0)
        p = tmp_path / "w.json"
        t.save(p)
        back = WhiteningTransform.load(p)
        assert back.fingerprint == t.fingerprint


class TestNormalize:
    def test_three_four_five(self):
        out = normalize_rows(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(normalize_rows(row).data, row)

    def test_all_norms_one(self):
        rng = np.random.default_rng(30)
        out = normalize_rows(rng.standard_normal((10, 6)))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(10), atol=1e-12)

    def test_zero_row_names_sample(self):
        x = np.ones((3, 2))
        x[1] = 0.0
        with pytest.raises(NumericalError, match="'middle'"):
            normalize_rows(x, ids=("first", "middle", "last"))

    def test_records_norms(self):
        out = normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
        np.testing.assert_allclose(out.norms, [5.0, 2.0], atol=1e-15)


class TestWfd:
    def test_identical(self):
        a = np.array([1.0, 0.0])
        assert wfd(a, a) == 0.0

    def test_antipodal(self):
        a = np.array([0.0, 1.0])
        assert wfd(a, -a) == pytest.approx(2.0, abs=1e-15)

    def test_orthogonal(self):
        assert wfd(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(
            np.sqrt(2), abs=1e-12
        )

    def test_equals_euclidean(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            a = rng.standard_normal(5)
            b = rng.standard_normal(5)
            a /= np.linalg.norm(a)
            b /= np.linalg.norm(b)
            assert wfd(a, b) == pytest.approx(np.linalg.norm(a - b), abs=1e-12)

    def test_monotone_in_cosine(self):
        # Distance strictly decreases as alignment increases.
        angles = np.linspace(np.pi, 0.0, 12)
        dists = [wfd(np.array([1.0, 0.0]), np.array([np.cos(t), np.sin(t)])) for t in angles]
        assert all(dists[i] > dists[i + 1] for i in range(len(dists) - 1))


def unit_vectors(dim):
    return (
        st.lists(st.floats(-100, 100, allow_nan=False), min_size=dim, max_size=dim)
        .map(np.array)
        .filter(lambda v: np.linalg.norm(v) > 1e-6)
        .map(lambda v: v / np.linalg.norm(v))
    )


class TestWfdMetricAxioms:
    @given(unit_vectors(4))
    @settings(max_examples=50, deadline=None)
    def test_self_distance_zero(self, a):
        assert wfd(a, a) <= 1e-7

    @given(unit_vectors(4), unit_vectors(4))
    @settings(max_examples=50, deadline=None)
    def test_symmetry(self, a, b):
        assert wfd(a, b) == pytest.approx(wfd(b, a), abs=1e-12)

    @given(unit_vectors(4), unit_vectors(4), unit_vectors(4))
    @settings(max_examples=100, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert wfd(a, c) <= wfd(a, b) + wfd(b, c) + 1e-9

    @given(unit_vectors(4), unit_vectors(4))
    @settings(max_examples=50, deadline=None)
    def test_range(self, a, b):
        assert 0.0 <= wfd(a, b) <= 2.0 + 1e-12


class TestBuildMetric:
    def test_candidate_equals_target(self):
        rng = np.random.default_rng(40)
        m = FeatureMatrix(rng.standard_normal((8, 3)), tuple(f"s{i}" for i in range(8)))
        cw, tw, _ = build_metric(m, m, eps=0.0)
        np.testing.assert_array_equal(cw.data, tw.data)
        assert cw.ids == tw.ids

    def test_none_spec_skips_projection(self):
        rng = np.random.default_rng(41)
        c = FeatureMatrix(rng.standard_normal((10, 4)), tuple(f"c{i}" for i in range(10)))
        t = FeatureMatrix(rng.standard_normal((5, 4)), tuple(f"t{i}" for i in range(5)))
        cw, tw, tr = build_metric(c, t, spec=None, eps=0.0)
        assert cw.d == 4 and tw.d == 4

    def test_full_pipeline_invariants(self):
        rng = np.random.default_rng(42)
        c = FeatureMatrix(rng.standard_normal((60, 16)), tuple(f"c{i}" for i in range(60)))
        t = FeatureMatrix(rng.standard_normal((20, 16)), tuple(f"t{i}" for i in range(20)))
        spec = ProjectionSpec(16, 8, seed=5)
        cw, tw, tr = build_metric(c, t, spec=spec, eps=0.0)
        np.testing.assert_allclose(np.linalg.norm(cw.data, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(tw.data, axis=1), 1.0, atol=1e-9)
        # Joint covariance before normalization is identity.
        proj = make_projection(spec)
        joint = np.concatenate([project(c, proj).data, project(t, proj).data])
        w = apply_whitening(tr, joint)
        cov = (w - w.mean(axis=0)).T @ (w - w.mean(axis=0)) / joint.shape[0]
        np.testing.assert_allclose(cov, np.eye(8), atol=1e-8)
        assert cw.transform_fingerprint == tr.fingerprint

    def test_method_equivalence_pairwise_distances(self):
        # Cholesky and ZCA whiteners differ by a rotation, so distances agree.
        rng = np.random.default_rng(43)
        c = FeatureMatrix(rng.standard_normal((30, 6)), tuple(f"c{i}" for i in range(30)))
        t = FeatureMatrix(rng.standard_normal((12, 6)), tuple(f"t{i}" for i in range(12)))
        out = {}
        for method in ("cholesky", "zca"):
            cw, tw, _ = build_metric(c, t, method=method, eps=1e-5)
            d = np.sqrt(
                np.maximum(2.0 - 2.0 * cw.data @ tw.data.T, 0.0)
            )
            out[method] = d
        np.testing.assert_allclose(out["cholesky"], out["zca"], rtol=1e-8, atol=1e-10)

    def test_scale_invariance(self):
        rng = np.random.default_rng(44)
        base_c = rng.standard_normal((25, 5))
        base_t = rng.standard_normal((10, 5))
        ids_c = tuple(f"c{i}" for i in range(25))
        ids_t = tuple(f"t{i}" for i in range(10))
        ref = None
        for scale in (1.0, 37.5):
            c = FeatureMatrix(base_c * scale, ids_c)
            t = FeatureMatrix(base_t * scale, ids_t)
            cw, tw, _ = build_metric(c, t, eps=1e-5)
            d = np.sqrt(np.maximum(2.0 - 2.0 * cw.data @ tw.data.T, 0.0))
            if ref is None:
                ref = d
            else:
                np.testing.assert_allclose(d, ref, atol=1e-9)

    def test_dim_mismatch(self):
        c = FeatureMatrix(np.ones((2, 3)), ("a", "b"))
        t = FeatureMatrix(np.ones((2, 4)), ("c", "d"))
        with pytest.raises(ShapeMismatchError):
            build_metric(c, t)
