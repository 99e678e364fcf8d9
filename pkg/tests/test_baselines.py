import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from dxarisk import baselines as bl
from dxarisk.cohort import LabeledDataset

from conftest import make_dataset


def dataset(X, y, names=None):
    X = np.asarray(X, dtype=float)
    names = names or [f"f{j}" for j in range(X.shape[1])]
    return LabeledDataset(X, np.asarray(y, int), names, [f"r{i}" for i in range(len(y))])


class Fixed:
    """Stand-in member with a constant probability."""

    def __init__(self, p):
        self.p = p

    def predict_proba(self, X):
        return np.full(np.asarray(X).shape[0], self.p)


class TestSpec:
    def test_paper_hyperparameters(self):
        p = {s.kind: s.params for s in bl.default_specs()}
        assert p["logistic_regression"]["max_iter"] == 1000
        assert p["random_forest"]["n_estimators"] == 100 and p["random_forest"]["max_depth"] == 10
        assert p["gradient_boosting"]["learning_rate"] == 0.1 and p["gradient_boosting"]["max_depth"] == 6
        assert p["knn"]["n_neighbors"] == 5
        assert p["decision_tree"]["max_depth"] == 10
        assert p["adaboost"]["n_estimators"] == 50
        assert len(p) == 8

    def test_invalid(self):
        with pytest.raises(bl.BaselineError):
            bl.BaselineSpec("perceptron")
        with pytest.raises(bl.BaselineError):
            bl.BaselineSpec("knn", {"depth": 3})

    def test_class_weights(self):
        w = bl.class_weights(np.array([0, 0, 0, 1]))
        np.testing.assert_allclose(w, [4 / 6, 4 / 6, 4 / 6, 2.0])
        assert w[:3].sum() == pytest.approx(w[3:].sum())


class TestFit:
    def test_tree_fits_xor(self):
        d = dataset([[0, 0], [0, 1], [1, 0], [1, 1]], [0, 1, 1, 0])
        m = bl.fit(bl.BaselineSpec("decision_tree", {"max_depth": 2}, class_weighting=False), d)
        assert np.array_equal((m.predict_proba(d.matrix) >= 0.5).astype(int), d.labels)

    def test_gaussian_nb_boundary_between_means(self):
        r = np.random.default_rng(0)
        X = np.r_[r.normal(-3, 1, 500), r.normal(3, 1, 500)][:, None]
        m = bl.fit(bl.BaselineSpec("gaussian_nb"), dataset(X, np.r_[np.zeros(500), np.ones(500)]))
        grid = np.linspace(-3, 3, 601)[:, None]
        p = m.predict_proba(grid)
        crossing = grid[np.argmin(np.abs(p - 0.5)), 0]
        assert -3 < crossing < 3 and abs(crossing) < 0.3

    def test_knn_needs_k_samples(self):
        with pytest.raises(bl.BaselineError, match="knn"):
            bl.fit(bl.BaselineSpec("knn"), dataset([[0.0], [1.0], [2.0]], [0, 1, 0]))

    def test_knn_zero_distance(self):
        d = make_dataset(20, 20, n_features=2, shift=3.0, seed=1)
        m = bl.fit(bl.BaselineSpec("knn"), d)
        np.testing.assert_array_equal(m.predict_proba(d.matrix), d.labels.astype(float))

    def test_single_class(self):
        with pytest.raises(bl.BaselineError):
            bl.fit(bl.BaselineSpec("gaussian_nb"), dataset(np.zeros((4, 1)), [1, 1, 1, 1]))

    @pytest.mark.parametrize("kind", bl.KINDS)
    @pytest.mark.parametrize("seed", [0, 1])
    def test_training_auc_not_inverted(self, kind, seed):
        d = make_dataset(80, 20, n_features=3, shift=0.4, seed=seed)
        m = bl.fit(bl.BaselineSpec(kind), d, seed=seed)
        p = m.predict_proba(d.matrix)
        assert np.all((p >= 0) & (p <= 1))
        assert roc_auc_score(d.labels, p) >= 0.5 - 1e-9

    def test_svm_subsample_recorded(self):
        d = make_dataset(150, 50, n_features=2, seed=3)
        m = bl.fit(bl.BaselineSpec("svm_rbf", {"subsample_cap": 100}), d)
        assert m.provenance["svm_subsample"] == 100


class TestProbabilities:
    def lr(self):
        return bl.fit(bl.BaselineSpec("logistic_regression"), make_dataset(50, 50, n_features=3, seed=2))

    def test_lr_zero_weights(self):
        m = self.lr()
        m.estimator.coef_[:] = 0.0
        m.estimator.intercept_[:] = 0.0
        np.testing.assert_array_equal(m.predict_proba(np.random.default_rng(0).standard_normal((9, 3))), 0.5)

    def test_lr_parameterization(self):
        m = self.lr()
        X = np.random.default_rng(1).standard_normal((20, 3))
        before = m.predict_proba(X)
        m.estimator.coef_ = m.estimator.coef_ / 2
        np.testing.assert_allclose(m.predict_proba(2 * X), before, atol=1e-12)

    def test_forest_averages_trees(self):
        d = make_dataset(60, 40, n_features=3, shift=0.8, seed=4)
        m = bl.fit(bl.BaselineSpec("random_forest", {"n_estimators": 15}), d)
        X = d.matrix[:10]
        trees = np.mean([t.predict_proba(X)[:, 1] for t in m.estimator.estimators_], axis=0)
        np.testing.assert_allclose(m.predict_proba(X), trees, atol=1e-12)

    def test_adaboost_logistic_link(self):
        d = make_dataset(60, 40, n_features=2, shift=1.0, seed=5)
        m = bl.fit(bl.BaselineSpec("adaboost", {"n_estimators": 2}), d)
        est = m.estimator
        X = d.matrix[:15]
        votes = [np.where(s.predict(X) == 1, 1.0, -1.0) for s in est.estimators_]
        w = est.estimator_weights_[: len(votes)]
        score = sum(a * v for a, v in zip(w, votes)) / w.sum()
        # binary SAMME: softmax over class scores (-score, +score) is sigmoid(2 * score)
        np.testing.assert_allclose(m.predict_proba(X), 1.0 / (1.0 + np.exp(-2.0 * score)), atol=1e-12)
        assert np.all((m.predict_proba(X) > 0) & (m.predict_proba(X) < 1))

    @pytest.mark.parametrize("kind", ["gradient_boosting", "adaboost", "decision_tree"])
    def test_monotone_transform_invariance(self, kind):
        d = make_dataset(60, 30, n_features=3, shift=0.8, seed=6)
        d.matrix[:, 0] = np.abs(d.matrix[:, 0]) + 0.1  # keep log defined
        t = dataset(np.column_stack([np.log(d.matrix[:, 0]), d.matrix[:, 1:] ** 3]), d.labels)
        spec = bl.BaselineSpec(kind, {"n_estimators": 20} if kind != "decision_tree" else {})
        a = bl.fit(spec, d, seed=1).predict_proba(d.matrix)
        b = bl.fit(spec, t, seed=1).predict_proba(t.matrix)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_forest_monotone_invariance(self):
        # bootstrap thresholds sit at midpoints of in-bag values, so out-of-bag rows can
        # cross them under a nonlinear map; the fitted partition itself is invariant
        d = make_dataset(60, 30, n_features=3, shift=0.8, seed=6)
        t = dataset(np.column_stack([np.exp(d.matrix[:, 0]), d.matrix[:, 1:] ** 3]), d.labels)
        spec = bl.BaselineSpec("random_forest", {"n_estimators": 20})
        a = bl.fit(spec, d, seed=1).estimator
        b = bl.fit(spec, t, seed=1).estimator
        for ta, tb, bag in zip(a.estimators_, b.estimators_, a.estimators_samples_):
            np.testing.assert_array_equal(ta.tree_.feature, tb.tree_.feature)
            np.testing.assert_allclose(ta.tree_.value, tb.tree_.value, atol=1e-12)
            np.testing.assert_allclose(ta.predict_proba(d.matrix[bag]), tb.predict_proba(t.matrix[bag]), atol=1e-12)

    def test_feature_mismatch(self):
        m = self.lr()
        with pytest.raises(bl.BaselineError):
            m.predict_proba(np.zeros((2, 4)))
        with pytest.raises(bl.BaselineError):
            bl.predict_proba(m, dataset(np.zeros((2, 3)), [0, 1], ["a", "b", "c"]))


class TestCrossValidation:
    def test_partition_and_stratification(self):
        y = np.r_[np.zeros(103, int), np.ones(27, int)]
        folds = bl.fold_indices(y, 5, seed=2)
        allidx = np.sort(np.concatenate(folds))
        np.testing.assert_array_equal(allidx, np.arange(y.size))
        for f in folds:
            assert abs(y[f].sum() - 27 / 5) <= 1
            assert abs(len(f) - y.size / 5) <= 1

    def test_deterministic_folds(self):
        y = np.r_[np.zeros(40, int), np.ones(10, int)]
        a, b = bl.fold_indices(y, seed=4), bl.fold_indices(y, seed=4)
        assert all(np.array_equal(x, z) for x, z in zip(a, b))

    def test_too_few_per_class(self):
        with pytest.raises(bl.BaselineError):
            bl.fold_indices(np.r_[np.zeros(20, int), np.ones(4, int)])

    def test_separable_mean_auc_one(self):
        res = bl.cross_validate(bl.BaselineSpec("logistic_regression"), make_dataset(50, 50, shift=8.0, seed=0))
        assert res.mean_auc == 1.0 and len(res.fold_auc) == 5

    def test_null_auc(self):
        r = np.random.default_rng(11)
        d = dataset(r.standard_normal((2000, 3)), r.permutation(np.r_[np.zeros(1000), np.ones(1000)]))
        res = bl.cross_validate(bl.BaselineSpec("logistic_regression"), d, seed=3)
        assert 0.45 <= res.mean_auc <= 0.55

    def test_prepare_sees_train_part_only(self):
        d = make_dataset(40, 10, n_features=2, seed=1)
        seen = []

        def prepare(i, part):
            seen.append(set(part.subject_ids))
            return part

        bl.cross_validate(bl.BaselineSpec("gaussian_nb"), d, prepare=prepare)
        folds = bl.fold_indices(d.labels)
        for ids, held in zip(seen, folds):
            assert ids.isdisjoint({d.subject_ids[i] for i in held})


class TestGridSearch:
    def test_singleton(self):
        d = make_dataset(40, 40, seed=0)
        spec, res, all_res = bl.grid_search(bl.BaselineSpec("knn"), {"n_neighbors": [7]}, d)
        assert spec.params["n_neighbors"] == 7 and len(all_res) == 1

    def test_tie_takes_first(self):
        d = make_dataset(40, 40, shift=9.0, seed=0)
        spec, _, all_res = bl.grid_search(bl.BaselineSpec("decision_tree"), {"max_depth": [4, 2, 8]}, d)
        assert all(r.mean_auc == 1.0 for r in all_res)
        assert spec.params["max_depth"] == 4

    def test_planted_depth(self):
        # threshold on one feature plus 20% label noise: depth 1 is optimal, deeper trees fit noise
        r = np.random.default_rng(0)
        X = r.standard_normal((600, 3))
        y = (X[:, 0] > 0).astype(int)
        flip = r.random(600) < 0.2
        y[flip] = 1 - y[flip]
        spec, _, _ = bl.grid_search(bl.BaselineSpec("decision_tree"), {"max_depth": [10, 1, 6]}, dataset(X, y))
        assert spec.params["max_depth"] == 1

    def test_empty_grid(self):
        with pytest.raises(bl.BaselineError):
            bl.grid_points({"C": []})


class TestVotingAndChampion:
    def test_soft_vote_arithmetic(self):
        X = np.zeros((3, 1))
        np.testing.assert_allclose(bl.soft_vote([Fixed(0.2), Fixed(0.8)], X), 0.5)
        np.testing.assert_allclose(bl.soft_vote([Fixed(0.3), Fixed(0.3)], X), 0.3)
        np.testing.assert_allclose(bl.soft_vote([Fixed(0.1), Fixed(0.2), Fixed(0.9)], X), 0.4)
        with pytest.raises(bl.BaselineError):
            bl.soft_vote([], X)

    def test_champion(self):
        assert bl.select_champion([("a", 0.7, 0.9), ("b", 0.8, 0.1)]) == "b"
        assert bl.select_champion([("a", 0.8, 0.5), ("b", 0.8, 0.6)]) == "b"
        assert bl.select_champion([("a", 0.8, 0.6), ("b", 0.8, 0.6)]) == "a"
        with pytest.raises(bl.BaselineError):
            bl.select_champion([])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        d = make_dataset(30, 30, seed=1)
        m = bl.fit(bl.BaselineSpec("random_forest", {"n_estimators": 10}), d)
        m.save(tmp_path / "rf")
        again = bl.FittedBaseline.load(tmp_path / "rf")
        np.testing.assert_array_equal(again.predict_proba(d.matrix), m.predict_proba(d.matrix))
        assert again.spec == bl.BaselineSpec("random_forest", m.spec.params)

    def test_checksum_mismatch(self, tmp_path):
        d = make_dataset(30, 30, seed=1)
        bl.fit(bl.BaselineSpec("gaussian_nb"), d).save(tmp_path / "nb")
        blob = tmp_path / "nb" / "model.pkl"
        blob.write_bytes(blob.read_bytes() + b"\0")
        with pytest.raises(bl.BaselineError, match="checksum"):
            bl.FittedBaseline.load(tmp_path / "nb")
