import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import silhouette_score

from dxarisk.cohort import LabeledDataset
from dxarisk.selection import (
    SelectionError,
    ensemble_select,
    interpret_correlation,
    is_degenerate,
    mutual_information,
    pca,
    pearson,
    score_features,
    tsne,
)

from conftest import make_dataset


def planted(seed, n=500, n_noise=20, effect=0.8):
    """One shifted feature among ``n_noise`` standard normals, 25% positives."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.25).astype(int)
    X = rng.standard_normal((n, n_noise + 1))
    X[:, 0] += effect * y
    perm = rng.permutation(n_noise + 1)
    names = [f"noise{j}" for j in range(n_noise + 1)]
    names[0] = "planted"
    return LabeledDataset(X[:, perm], y, [names[j] for j in perm], [str(i) for i in range(n)])


class TestPearson:
    def test_hand_example(self):
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_constant_is_zero_and_flagged(self):
        assert pearson([1, 1, 1], [0, 1, 0]) == 0.0
        assert is_degenerate([1, 1, 1], [0, 1, 0])
        assert not is_degenerate([1, 2, 1], [0, 1, 0])

    def test_length_mismatch(self):
        with pytest.raises(SelectionError):
            pearson([1, 2], [1, 2, 3])

    @given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-100, 100))
    def test_affine_invariance(self, seed, a, b):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal(30), r.standard_normal(30)
        assert abs(pearson(a * x + b, y) - np.sign(a) * pearson(x, y)) < 1e-12

    @given(st.integers(0, 10_000))
    def test_matches_numpy(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal(40), r.standard_normal(40)
        assert abs(pearson(x, y) - np.corrcoef(x, y)[0, 1]) < 1e-12


class TestBands:
    @pytest.mark.parametrize(
        "r,band",
        [(0.19999, "negligible"), (0.2, "weak"), (0.39999, "weak"), (0.4, "moderate"), (0.59999, "moderate"),
         (0.6, "strong"), (0.79999, "strong"), (0.8, "very_strong"), (1.0, "very_strong"), (-0.8, "very_strong"),
         (-0.2, "weak"), (0.0, "negligible")],
    )
    def test_boundaries(self, r, band):
        assert interpret_correlation(r) == band


class TestMutualInformation:
    def test_constant_is_zero(self):
        assert mutual_information(np.ones(100), np.r_[np.zeros(50), np.ones(50)]) == 0.0

    def test_identity_balanced_is_one_bit(self):
        y = np.r_[np.zeros(50), np.ones(50)]
        assert mutual_information(y, y, bins=2) == pytest.approx(1.0, abs=1e-12)

    def test_shuffled_null(self):
        r = np.random.default_rng(0)
        x = r.standard_normal(10_000)
        y = r.permutation(np.r_[np.zeros(5000), np.ones(5000)])
        assert mutual_information(x, y) < 0.02

    @given(st.integers(0, 10_000))
    def test_nonnegative_and_relabel_symmetric(self, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal(60)
        y = r.integers(0, 2, 60)
        mi = mutual_information(x, y)
        assert mi >= 0
        assert mutual_information(x, 1 - y) == pytest.approx(mi, abs=1e-12)

    def test_entropy_oracle(self):
        # x determines y through bins: MI = H(Y)
        x = np.r_[np.zeros(30), np.ones(10)]
        y = x.astype(int)
        p = 0.25
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
        assert mutual_information(x, y) == pytest.approx(h, abs=1e-12)


class TestEnsembleSelect:
    def test_weak_pearson_feature_selected(self):
        r = np.random.default_rng(3)
        n = 4000
        y = np.r_[np.zeros(n // 2, int), np.ones(n // 2, int)]
        target = 0.13
        noise = r.standard_normal(n)
        yc = (y - y.mean()) / y.std()
        noise -= (noise @ yc) / n * yc
        noise /= noise.std()
        x = target * yc + np.sqrt(1 - target**2) * noise
        others = r.standard_normal((n, 6))
        d = LabeledDataset(np.column_stack([x, others]), y, ["weak"] + [f"o{j}" for j in range(6)], [str(i) for i in range(n)])
        res = ensemble_select(d, alpha=0.01, r_min=0.12)
        assert res.scores["weak"].pearson_r == pytest.approx(0.13, abs=1e-9)
        assert "weak" in res.criteria["pearson"] and "weak" in res.selected

    def test_duplicates_keep_one(self):
        d = make_dataset(100, 100, n_features=2, seed=2)
        d = LabeledDataset(np.column_stack([d.matrix[:, 0], d.matrix[:, 0]]), d.labels, ["a", "b"], d.subject_ids)
        res = ensemble_select(d)
        assert res.selected == ["a"]
        assert res.dropped_collinear[0][:2] == ("b", "a")

    def test_planted_ranked_first(self):
        hits = sum(ensemble_select(planted(seed)).selected[0] == "planted" for seed in range(20))
        assert hits >= 19

    def test_empty_candidate_set(self):
        d = LabeledDataset(np.ones((10, 2)), np.r_[np.zeros(5), np.ones(5)], ["a", "b"], [str(i) for i in range(10)])
        with pytest.raises(SelectionError, match="relax"):
            ensemble_select(d)

    @given(st.integers(0, 10_000))
    def test_pairwise_cap_and_determinism(self, seed):
        r = np.random.default_rng(seed)
        base = r.standard_normal((80, 3))
        X = np.column_stack([base, base + 0.3 * r.standard_normal((80, 3))])
        y = (base[:, 0] + r.standard_normal(80) > 0).astype(int)
        d = LabeledDataset(X, y, [f"f{j}" for j in range(6)], [str(i) for i in range(80)])
        a = ensemble_select(d)
        assert a.selected == ensemble_select(d).selected
        assert a.selected
        for i, u in enumerate(a.selected):
            for v in a.selected[i + 1:]:
                assert abs(pearson(d.matrix[:, d.feature_names.index(u)], d.matrix[:, d.feature_names.index(v)])) <= 0.85

    def test_combined_score_range(self):
        scores = score_features(make_dataset(50, 50, seed=4))
        vals = [s.importance for s in scores.values()]
        assert min(vals) >= 0 and max(vals) <= 1


class TestPCA:
    def test_rank_one(self):
        u = np.arange(10.0)[:, None]
        p = pca(u @ np.array([[1.0, 2.0, -1.0]]))
        assert p.n_components == 1
        assert p.explained_variance[0] == pytest.approx(1.0, abs=1e-12)

    def test_isotropic_needs_all(self):
        X = np.random.default_rng(0).standard_normal((20_000, 3))
        assert pca(X, 0.95).n_components == 3

    def test_projection_zero_mean_and_sign(self):
        X = np.random.default_rng(1).standard_normal((50, 4)) + 7
        p = pca(X, n_components=4)
        assert np.abs(p.coordinates.mean(axis=0)).max() < 1e-10
        for col in p.loadings.T:
            assert col[np.argmax(np.abs(col))] > 0

    @given(st.integers(0, 10_000))
    def test_reconstruction_and_ordering(self, seed):
        r = np.random.default_rng(seed)
        X = r.standard_normal((25, 5)) @ r.standard_normal((5, 5))
        p = pca(X, n_components=5)
        np.testing.assert_allclose(p.loadings.T @ p.loadings, np.eye(5), atol=1e-10)
        assert np.abs(p.coordinates @ p.loadings.T + p.mean - X).max() < 1e-8
        assert np.all(np.diff(p.explained_variance) <= 1e-12)

    def test_transform_matches_fit(self):
        X = np.random.default_rng(2).standard_normal((30, 3))
        p = pca(X, n_components=2)
        np.testing.assert_allclose(p.transform(X), p.coordinates, atol=1e-12)


class TestTSNE:
    def test_blobs_separate(self):
        r = np.random.default_rng(0)
        X = np.vstack([r.standard_normal((60, 5)), r.standard_normal((60, 5)) + 10])
        labels = np.r_[np.zeros(60), np.ones(60)]
        p = tsne(X, perplexity=15, iterations=500, seed=1)
        assert p.coordinates.shape == (120, 2)
        assert silhouette_score(p.coordinates, labels) > 0.5

    def test_refuses_large_n(self):
        with pytest.raises(SelectionError, match="5000"):
            tsne(np.zeros((6000, 2)))

    def test_infeasible_perplexity(self):
        with pytest.raises(SelectionError, match="perplexity"):
            tsne(np.random.default_rng(0).standard_normal((30, 2)), perplexity=10)

    def test_pre_reduction_note(self):
        X = np.random.default_rng(0).standard_normal((40, 120))
        p = tsne(X, perplexity=5, iterations=260, seed=0)
        assert p.notes == ["pca pre-reduction 120 -> 50 dims"]

    def test_kl_tail_monotone_and_deterministic(self):
        r = np.random.default_rng(5)
        X = np.vstack([r.standard_normal((40, 4)), r.standard_normal((40, 4)) + 6])
        p = tsne(X, perplexity=10, iterations=1000, seed=3)
        tail = np.array(p.kl_history[-100:])
        assert np.all(np.isfinite(tail))
        assert np.all(np.diff(tail) <= 1e-3)
        np.testing.assert_array_equal(tsne(X, perplexity=10, iterations=1000, seed=3).coordinates, p.coordinates)
