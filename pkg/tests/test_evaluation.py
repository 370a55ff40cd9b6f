import math

import numpy as np
import pytest

from gazerep import evaluation as ev
from gazerep import synthgen as sy
from gazerep.model import Autoencoder, ModelConfig
from oracles import covariance_eigenvalues, hinge_grid_search


def twenty_points():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal([1, 1], 0.8, (10, 2)), rng.normal([-1, -1], 0.8, (10, 2))])
    y = np.r_[np.ones(10), -np.ones(10)]
    return X, y


def blobs(n_per=12, k=4, dim=5, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(k, dim)) * sep
    X = np.vstack([c + rng.normal(size=(n_per, dim)) for c in centres])
    y = np.repeat(np.array([f"k{i}" for i in range(k)]), n_per)
    return X, y


def test_separable_pair():
    svm = ev.fit_linear_svm(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array(["A", "B"]), C=10.0)
    assert list(svm.predict(np.array([[-1.0, 0.0], [1.0, 0.0]]))) == ["A", "B"]
    w, b = svm.W[0], svm.b[0]
    assert abs(-b / w[0]) <= 0.1


def test_objective_matches_grid_search_oracle():
    X, y = twenty_points()
    best, _ = hinge_grid_search(X, y, C=1.0)
    svm = ev.fit_linear_svm(X, y, C=1.0)
    # classes sort as (-1, +1) so the single machine scores +1
    obj = ev.hinge_objective(X, y, svm.W[0], svm.b[0], 1.0)
    assert abs(obj - best) / best <= 0.01


@pytest.mark.parametrize("C", [0.1, 1.0, 10.0])
def test_solver_never_worse_than_grid(C):
    X, y = twenty_points()
    best, _ = hinge_grid_search(X, y, C, step=0.1)
    svm = ev.fit_linear_svm(X, y, C)
    assert ev.hinge_objective(X, y, svm.W[0], svm.b[0], C) <= best + 1e-9


@pytest.mark.parametrize("C", [0.1, 1.0, 10.0])
def test_interior_point_and_smo_agree(C):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 5))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=60) > 0, 1.0, -1.0)
    a = ev.fit_linear_svm(X, y, C, solver="ipm")
    b = ev.fit_linear_svm(X, y, C, solver="smo")
    oa = ev.hinge_objective(X, y, a.W[0], a.b[0], C)
    ob = ev.hinge_objective(X, y, b.W[0], b.b[0], C)
    assert abs(oa - ob) / oa < 1e-4
    assert oa <= ob + 1e-6


def test_duplication_and_permutation_invariance():
    X, y = blobs(sep=1.5)
    base = ev.fit_linear_svm(X, y, 1.0).predict(X)
    dup = ev.fit_linear_svm(np.vstack([X, X]), np.r_[y, y], 1.0).predict(X)
    perm = np.random.default_rng(0).permutation(len(y))
    shuffled = ev.fit_linear_svm(X[perm], y[perm], 1.0).predict(X)
    assert (dup == base).mean() >= 0.99
    assert (shuffled == base).mean() >= 0.99


def test_svm_input_validation():
    with pytest.raises(ValueError, match="2 classes"):
        ev.fit_linear_svm(np.zeros((3, 2)), np.array([1, 1, 1]), 1.0)
    with pytest.raises(ValueError, match="finite"):
        ev.fit_linear_svm(np.array([[np.nan, 0], [1, 1]]), np.array([0, 1]), 1.0)
    with pytest.raises(ValueError, match="solver"):
        ev.fit_linear_svm(np.eye(2), np.array([0, 1]), 1.0, solver="nope")


def test_pca_eigenvalues_match_dense_oracle():
    X = np.random.default_rng(0).normal(size=(10, 6))
    res = ev.pca_fit_transform(X, n_components=6)
    np.testing.assert_allclose(res.explained_variance, covariance_eigenvalues(X), atol=1e-8)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(6), atol=1e-6)
    np.testing.assert_allclose(res.scores @ res.components, X - X.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(res.scores.mean(axis=0), 0.0, atol=1e-8)


def test_pca_wide_matrix_uses_gram_path():
    X = np.random.default_rng(1).normal(size=(8, 40))
    res = ev.pca_fit_transform(X, n_components=7)
    np.testing.assert_allclose(res.explained_variance, covariance_eigenvalues(X)[:7], atol=1e-8)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(7), atol=1e-6)


def test_pca_rank_one_and_errors():
    t = np.linspace(-1, 1, 9)[:, None]
    res = ev.pca_fit_transform(t * np.array([[3.0, 4.0]]), n_components=2)
    assert res.explained_variance_ratio[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ev.pca_fit_transform(np.zeros((5, 3)), n_components=4)
    with pytest.raises(ValueError):
        ev.pca_fit_transform(np.zeros((1, 3)), n_components=1)


def test_kfold_partition():
    y = np.array(["a", "b"] * 5)
    fold = ev.stratified_folds(y, 5, seed=0)
    sizes = np.bincount(fold)
    assert list(sizes) == [2] * 5
    for f in range(5):
        assert sorted(y[fold == f]) == ["a", "b"]
    assert np.array_equal(fold, ev.stratified_folds(y, 5, seed=0))


def test_separable_subjects_reach_full_accuracy():
    X, y = blobs(sep=6.0)
    report = ev.cross_validate(ev.EvalTask("t", cv="kfold:5"), X, y)
    assert report.mean_accuracy == 1.0
    assert len(report.fold_accuracies) == 5 and all(c in ev.C_GRID for c in report.chosen_C)
    assert report.confusion.sum() == len(y)
    assert report.mean_accuracy == pytest.approx(np.mean(report.fold_accuracies))


def test_loocv_and_fixed_split():
    X, y = blobs(n_per=6, sep=6.0)
    loo = ev.cross_validate(ev.EvalTask("t", cv="loocv"), X, y)
    assert len(loo.fold_accuracies) == len(y) and loo.mean_accuracy == 1.0
    mask = np.arange(len(y)) % 3 != 0
    fixed = ev.cross_validate(ev.EvalTask("t", cv="fixed"), X, y, train_mask=mask)
    assert len(fixed.fold_accuracies) == 1
    with pytest.raises(ValueError):
        ev.cross_validate(ev.EvalTask("t", cv="fixed"), X, y)
    with pytest.raises(ValueError):
        ev.EvalTask("t", cv="bootstrap").scheme


def test_single_class_training_fold_is_an_error():
    X = np.random.default_rng(0).normal(size=(6, 2))
    y = np.array(["a", "a", "a", "a", "a", "b"])
    with pytest.raises(ValueError, match="single class"):
        ev.cross_validate(ev.EvalTask("t", cv="loocv"), X, y)


def test_permutation_baseline_is_near_chance():
    accs = []
    for seed in range(3):
        X, y = blobs(n_per=10, k=4, sep=6.0, seed=seed)
        accs.append(ev.permutation_baseline(ev.EvalTask("t", cv="kfold:5", seed=seed), X, y, seed=seed).mean_accuracy)
    assert 0.10 <= np.mean(accs) <= 0.40


def test_c_selection_prefers_smaller_on_ties():
    X, y = blobs(sep=8.0)
    assert ev.select_C(X, y) == 0.1


def test_feature_importance_counts():
    groups = ev.ZPV_GROUPS
    W = np.random.default_rng(0).normal(size=(4, 256))
    counts = ev.feature_importance(W, groups)
    assert sum(counts.values()) == math.ceil(0.2 * 256) == 52
    W = np.zeros((4, 256))
    W[:, 128:192] = np.random.default_rng(1).normal(size=(4, 64))
    assert ev.feature_importance(W, groups) == {"pos-micro": 0, "pos-macro": 0, "vel-micro": 52, "vel-macro": 0}
    with pytest.raises(ValueError, match="overlap"):
        ev.feature_importance(W, {"a": (0, 200), "b": (100, 256)})
    with pytest.raises(ValueError, match="cover"):
        ev.feature_importance(W, {"a": (0, 100)})


def test_extract_representations_shapes():
    trials = sy.generate_dataset(1, 1, 2, seed=0, duration_s=1.0)
    pos = Autoencoder(ModelConfig.position().reduced(4))
    vel = Autoencoder(ModelConfig.velocity().reduced(4))
    both = ev.extract_representations(trials, pos, vel)
    assert both.z.shape == (2, 256) and both.sources["z_pv"] == (0, 256)
    only = ev.extract_representations(trials, model_vel=vel)
    assert only.z.shape == (2, 128)
    np.testing.assert_allclose(both.select("z_v"), only.z)
    with pytest.raises(ValueError):
        ev.extract_representations(trials, model_pos=vel)
    with pytest.raises(ValueError):
        ev.extract_representations(trials)


def test_long_and_short_trials_give_same_width():
    long_t = sy.generate_dataset(1, 1, 1, seed=0, duration_s=45.0)[0]
    short_t = sy.generate_dataset(1, 1, 1, seed=1, duration_s=2.0)[0]
    vel = Autoencoder(ModelConfig.velocity().reduced(4))
    table = ev.extract_representations([long_t, short_t], model_vel=vel)
    assert table.z.shape == (2, 128) and np.isfinite(table.z).all()


def test_pca_pv_features():
    trials = sy.generate_dataset(2, 1, 3, seed=0, duration_s=2.0)
    feats = ev.pca_pv_features(trials)
    assert feats.shape == (6, 12)  # components capped at n_samples per modality


def test_report_layout():
    X, y = blobs(sep=6.0)
    r = ev.cross_validate(ev.EvalTask("subject", source="z_v", cv="kfold:4"), X, y)
    text = ev.format_report([r])
    lines = text.splitlines()
    assert lines[0] == "task,representation,fold,accuracy,C"
    assert len([l for l in lines if l.startswith("subject,z_v,")]) == 4
    assert "| Classification Task | z_v |" in text and "| subject | 100.0 |" in text
