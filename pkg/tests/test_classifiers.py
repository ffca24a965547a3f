import statistics

import numpy as np
import pytest
from scipy.stats import norm

from effectmap.classifiers import (
    ETA_GRID,
    EwGmmModel,
    LinearModel,
    TrainingError,
    ewgmm_effect_map,
    ewgmm_probit_scores,
    linear_effect_map,
    load_model_json,
    raw_effect_map,
    save_model_json,
    stratified_folds,
    train_ewgmm,
    train_linear_svm,
    train_logreg,
    train_model,
    tune_regularization,
)
from effectmap.core import Dataset, DimensionError, Sample


def blobs(n_per_class=10, d=2, gap=6.0, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    X0 = rng.normal(-gap / 2, scale, (n_per_class, d))
    X1 = rng.normal(+gap / 2, scale, (n_per_class, d))
    X = np.vstack([X0, X1])
    y = np.array([0] * n_per_class + [1] * n_per_class)
    return Dataset.from_arrays(X, y)


# ---------------------------------------------------------------------------
# element-wise Gaussian model

def test_ewgmm_sample_moments():
    ds = Dataset.from_arrays([[1.0], [3.0], [5.0], [9.0]], [0, 0, 1, 1])
    m = train_ewgmm(ds)
    assert m.mu0[0] == 2.0 and m.sigma0[0] == 1.0  # population std of {1,3}
    assert m.mu1[0] == 7.0 and m.sigma1[0] == 2.0
    assert m.prior1 == 0.5


def test_ewgmm_prior_proportions():
    ds = Dataset.from_arrays([[0.0]] * 3 + [[1.0]] * 1, [0, 0, 0, 1])
    assert train_ewgmm(ds).prior1 == 0.25


def test_ewgmm_matches_spreadsheet_recomputation():
    # six samples, two sites; oracle uses the statistics module and plain
    # Python arithmetic, independent of the numpy training path
    rows = [
        ([1.2, -0.5], 0),
        ([0.8, 0.1], 0),
        ([1.9, -1.2], 0),
        ([3.1, 2.0], 1),
        ([2.7, 1.1], 1),
        ([3.6, 2.9], 1),
    ]
    ds = Dataset.from_arrays([r[0] for r in rows], [r[1] for r in rows])
    m = train_ewgmm(ds)
    for j in range(2):
        c0 = [r[0][j] for r in rows if r[1] == 0]
        c1 = [r[0][j] for r in rows if r[1] == 1]
        assert m.mu0[j] == pytest.approx(statistics.fmean(c0), rel=1e-12)
        assert m.mu1[j] == pytest.approx(statistics.fmean(c1), rel=1e-12)
        assert m.sigma0[j] == pytest.approx(statistics.pstdev(c0), rel=1e-12)
        assert m.sigma1[j] == pytest.approx(statistics.pstdev(c1), rel=1e-12)


def test_ewgmm_std_floor_on_constant_site():
    ds = Dataset.from_arrays([[5.0, 1.0], [5.0, 2.0], [5.0, 8.0], [5.0, 9.0]],
                             [0, 0, 1, 1])
    m = train_ewgmm(ds)
    assert m.sigma0[0] > 0 and m.sigma1[0] > 0


def test_ewgmm_requires_both_classes():
    ds = Dataset.from_arrays([[1.0], [2.0]], [1, 1])
    with pytest.raises(TrainingError):
        train_ewgmm(ds)


def test_ewgmm_map_symmetric_case_is_zero():
    m = EwGmmModel(mu0=[0.0], sigma0=[1.0], mu1=[0.0], sigma1=[1.0], prior1=0.5)
    s = Sample([0.7], 0)
    assert ewgmm_effect_map(m, s).values[0] == 0.0


def test_ewgmm_map_clamp_value():
    # posterior driven to saturation; clamp pins the score at the
    # probit of 1 - 1e-6
    m = EwGmmModel(mu0=[0.0], sigma0=[1.0], mu1=[50.0], sigma1=[1.0], prior1=0.5)
    v = ewgmm_effect_map(m, Sample([50.0], 1)).values[0]
    assert v == pytest.approx(4.7534, abs=5e-5)
    assert v == norm.ppf(1.0 - 1e-6)


def test_ewgmm_map_matches_linear_space_oracle():
    # generic triple evaluated through scipy's pdf in linear space
    rng = np.random.default_rng(42)
    d = 7
    m = EwGmmModel(
        mu0=rng.normal(0, 1, d), sigma0=rng.uniform(0.5, 2.0, d),
        mu1=rng.normal(1, 1, d), sigma1=rng.uniform(0.5, 2.0, d),
        prior1=0.3,
    )
    f = rng.normal(0.5, 1.5, d)
    lik1 = norm.pdf(f, m.mu1, m.sigma1) * m.prior1
    lik0 = norm.pdf(f, m.mu0, m.sigma0) * m.prior0
    post = lik1 / (lik1 + lik0)
    expected = norm.ppf(np.clip(post, 1e-6, 1 - 1e-6))
    got = ewgmm_probit_scores(f, m.mu0, m.sigma0, m.mu1, m.sigma1, m.prior1)
    np.testing.assert_allclose(got, expected, rtol=1e-10)


def test_ewgmm_map_is_element_wise():
    rng = np.random.default_rng(3)
    m = EwGmmModel(mu0=rng.normal(size=4), sigma0=np.ones(4),
                   mu1=rng.normal(size=4) + 1, sigma1=np.ones(4), prior1=0.5)
    f = rng.normal(size=4)
    base = ewgmm_probit_scores(f, m.mu0, m.sigma0, m.mu1, m.sigma1, m.prior1)
    f2 = f.copy()
    f2[2] += 3.0
    bumped = ewgmm_probit_scores(f2, m.mu0, m.sigma0, m.mu1, m.sigma1, m.prior1)
    assert bumped[2] != base[2]
    for j in (0, 1, 3):
        assert bumped[j] == base[j]


def test_ewgmm_map_monotone_in_posterior():
    m = EwGmmModel(mu0=[0.0], sigma0=[1.0], mu1=[2.0], sigma1=[1.0], prior1=0.5)
    fs = np.linspace(-1.0, 3.0, 9)
    scores = [ewgmm_effect_map(m, Sample([f], 0)).values[0] for f in fs]
    assert np.all(np.diff(scores) > 0)


def test_ewgmm_broadcasts_over_model_stacks():
    rng = np.random.default_rng(8)
    R, d = 5, 3
    mu0 = rng.normal(size=(R, d))
    mu1 = mu0 + 1.0
    s = np.full((R, d), 1.3)
    f = rng.normal(size=d)
    stacked = ewgmm_probit_scores(f, mu0, s, mu1, s, 0.5)
    assert stacked.shape == (R, d)
    for r in range(R):
        row = ewgmm_probit_scores(f, mu0[r], s[r], mu1[r], s[r], 0.5)
        np.testing.assert_array_equal(stacked[r], row)


# ---------------------------------------------------------------------------
# linear SVM

def test_svm_separable_geometry():
    ds = Dataset.from_arrays([[-1.0], [1.0]], [0, 1])
    m = train_linear_svm(ds, eta=1e3)
    assert m.w[0] > 0
    margins = np.array([-1.0, 1.0]) * m.decision_values([[-1.0], [1.0]])
    assert np.all(margins >= 1.0 - 1e-6)


def test_svm_symmetric_data_zero_intercept():
    rng = np.random.default_rng(1)
    F = rng.normal(1.0, 1.0, (8, 3))
    X = np.vstack([F, -F])
    y = np.array([1] * 8 + [0] * 8)
    m = train_linear_svm(Dataset.from_arrays(X, y), eta=1.0)
    assert abs(m.b) < 1e-6


def test_svm_objective_matches_qp_oracle():
    cvxpy = pytest.importorskip("cvxpy")
    ds = blobs(n_per_class=5, d=2, gap=2.0, scale=1.5, seed=5)
    eta = 0.7
    m = train_linear_svm(ds, eta)
    X = ds.measurement_matrix()
    t = np.where(ds.labels() == 1, 1.0, -1.0)

    def objective(w, b):
        slack = np.maximum(0.0, 1.0 - t * (X @ w + b))
        return 0.5 * np.dot(w, w) + eta * slack.sum()

    w = cvxpy.Variable(2)
    b = cvxpy.Variable()
    xi = cvxpy.Variable(10)
    prob = cvxpy.Problem(
        cvxpy.Minimize(0.5 * cvxpy.sum_squares(w) + eta * cvxpy.sum(xi)),
        [cvxpy.multiply(t, X @ w + b) >= 1 - xi, xi >= 0],
    )
    prob.solve()
    assert abs(objective(m.w, m.b) - prob.value) < 1e-4


def test_svm_order_invariance():
    ds = blobs(seed=2)
    m1 = train_linear_svm(ds, eta=1.0)
    perm = np.random.default_rng(9).permutation(ds.n)
    m2 = train_linear_svm(ds.subset(perm), eta=1.0)
    np.testing.assert_allclose(m1.w, m2.w, rtol=1e-5, atol=1e-8)
    assert m1.b == pytest.approx(m2.b, abs=1e-5)


def test_svm_input_validation():
    ds = blobs()
    with pytest.raises(ValueError):
        train_linear_svm(ds, eta=0.0)
    single = Dataset.from_arrays([[1.0], [2.0]], [0, 0])
    with pytest.raises(TrainingError):
        train_linear_svm(single, eta=1.0)


# ---------------------------------------------------------------------------
# logistic regression

def logreg_objective(X, y, w, b, eta, penalty):
    z = X @ w + b
    loglik = np.sum(y * z - np.logaddexp(0.0, z))
    reg = 0.5 * eta * np.dot(w, w) if penalty == "l2" else eta * np.abs(w).sum()
    return loglik - reg


def test_logreg_l2_matches_high_precision_oracle():
    from scipy.optimize import minimize

    ds = blobs(n_per_class=6, d=3, gap=2.0, scale=1.2, seed=7)
    X, y = ds.measurement_matrix(), ds.labels()
    eta = 0.5
    m = train_logreg(ds, eta, penalty="l2")

    def neg_obj(params):
        return -logreg_objective(X, y, params[:-1], params[-1], eta, "l2")

    res = minimize(neg_obj, np.zeros(4), method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 10000})
    ours = logreg_objective(X, y, m.w, m.b, eta, "l2")
    assert abs(ours - (-res.fun)) < 1e-4


def test_logreg_l1_matches_convex_oracle():
    cvxpy = pytest.importorskip("cvxpy")
    ds = blobs(n_per_class=6, d=3, gap=2.0, scale=1.2, seed=11)
    X, y = ds.measurement_matrix(), ds.labels()
    eta = 0.3
    m = train_logreg(ds, eta, penalty="l1")

    w = cvxpy.Variable(3)
    b = cvxpy.Variable()
    z = X @ w + b
    loglik = cvxpy.sum(cvxpy.multiply(y, z) - cvxpy.logistic(z))
    prob = cvxpy.Problem(cvxpy.Maximize(loglik - eta * cvxpy.norm1(w)))
    prob.solve()
    ours = logreg_objective(X, y, m.w, m.b, eta, "l1")
    assert abs(ours - prob.value) < 1e-4


def test_logreg_symmetric_data_zero_intercept():
    rng = np.random.default_rng(4)
    F = rng.normal(1.0, 1.0, (10, 2))
    X = np.vstack([F, -F])
    y = np.array([1] * 10 + [0] * 10)
    m = train_logreg(Dataset.from_arrays(X, y), 1.0, penalty="l2")
    assert abs(m.b) < 1e-6


def test_logreg_l1_huge_eta_zeroes_weights():
    ds = blobs(seed=13)
    m = train_logreg(ds, 1e6, penalty="l1")
    assert np.all(m.w == 0.0)


def test_logreg_order_invariance():
    ds = blobs(seed=15)
    m1 = train_logreg(ds, 1.0, penalty="l2")
    perm = np.random.default_rng(1).permutation(ds.n)
    m2 = train_logreg(ds.subset(perm), 1.0, penalty="l2")
    np.testing.assert_allclose(m1.w, m2.w, rtol=1e-6, atol=1e-9)


def test_logreg_validation():
    ds = blobs(n_per_class=3, d=8)  # d > N
    with pytest.raises(ValueError):
        train_logreg(ds, 0.0, penalty="l2")
    with pytest.raises(ValueError):
        train_logreg(ds, 1.0, penalty="elastic")
    with pytest.raises(ValueError):
        train_logreg(ds, -1.0)
    single = Dataset.from_arrays([[1.0], [2.0]], [1, 1])
    with pytest.raises(TrainingError):
        train_logreg(single, 1.0)


def test_training_is_deterministic():
    ds = blobs(seed=21)
    for kind in ("svm", "logreg_l2", "logreg_l1"):
        a = train_model(kind, ds, eta=1.0)
        b = train_model(kind, ds, eta=1.0)
        assert a.w.tobytes() == b.w.tobytes() and a.b == b.b


# ---------------------------------------------------------------------------
# effect maps from linear models

def test_linear_effect_map_values():
    m = LinearModel(w=[2.0, -1.0], b=5.0, kind="svm", eta=1.0)
    out = linear_effect_map(m, Sample([3.0, 4.0], 1))
    np.testing.assert_array_equal(out.values, [6.0, -4.0])
    assert out.role == "raw"


def test_linear_effect_map_edge_cases():
    ones = LinearModel(w=[1.0, 1.0, 1.0], b=-2.0, kind="logreg_l2", eta=1.0)
    f = np.array([0.5, -1.5, 3.0])
    np.testing.assert_array_equal(linear_effect_map(ones, Sample(f, 0)).values, f)
    zero = LinearModel(w=[0.0, 0.0, 0.0], b=1.0, kind="logreg_l1", eta=1.0)
    np.testing.assert_array_equal(linear_effect_map(zero, Sample(f, 0)).values,
                                  np.zeros(3))


def test_effect_map_dimension_mismatch():
    m = LinearModel(w=[1.0, 2.0], b=0.0, kind="svm", eta=1.0)
    with pytest.raises(DimensionError):
        linear_effect_map(m, Sample([1.0, 2.0, 3.0], 0))
    g = EwGmmModel(mu0=[0.0], sigma0=[1.0], mu1=[1.0], sigma1=[1.0], prior1=0.5)
    with pytest.raises(DimensionError):
        ewgmm_effect_map(g, Sample([1.0, 2.0], 0))


def test_raw_effect_map_dispatch():
    ds = blobs(n_per_class=4, d=2)
    s = ds.samples[0]
    gmm = train_ewgmm(ds)
    svm = train_linear_svm(ds, 1.0)
    assert raw_effect_map(gmm, s).values.shape == (2,)
    np.testing.assert_array_equal(raw_effect_map(svm, s).values,
                                  svm.w * s.measurements)
    with pytest.raises(TypeError):
        raw_effect_map(object(), s)


# ---------------------------------------------------------------------------
# fold assignment and eta tuning

def test_stratified_folds_balanced():
    y = np.array([0] * 10 + [1] * 6)
    fold = stratified_folds(y, 4, seed=3)
    assert fold.shape == (16,)
    for f in range(4):
        n0 = int(np.sum((fold == f) & (y == 0)))
        n1 = int(np.sum((fold == f) & (y == 1)))
        assert n0 in (2, 3) and n1 in (1, 2)
    np.testing.assert_array_equal(fold, stratified_folds(y, 4, seed=3))
    assert not np.array_equal(fold, stratified_folds(y, 4, seed=4))


def test_stratified_folds_validation():
    with pytest.raises(ValueError):
        stratified_folds([0, 1], 1, seed=0)
    with pytest.raises(ValueError):
        stratified_folds([0, 1], 3, seed=0)


def test_tune_regularization_on_separable_data():
    ds = blobs(n_per_class=10, d=2, gap=8.0, scale=0.5, seed=17)
    eta = tune_regularization(ds, "svm", folds=5, seed=0)
    assert eta in ETA_GRID
    assert eta == tune_regularization(ds, "svm", folds=5, seed=0)
    # chosen eta must reach perfect held-out accuracy on this geometry
    y = ds.labels()
    fold = stratified_folds(y, 5, seed=0)
    X = ds.measurement_matrix()
    for f in range(5):
        m = train_linear_svm(ds.subset(np.flatnonzero(fold != f)), eta)
        pred = (m.decision_values(X[fold == f]) > 0).astype(int)
        assert np.all(pred == y[fold == f])


def test_tune_regularization_rejects_ewgmm():
    with pytest.raises(ValueError):
        tune_regularization(blobs(), "ewgmm")


# ---------------------------------------------------------------------------
# serialization

def test_model_json_round_trip(tmp_path):
    ds = blobs(n_per_class=4, d=3, seed=19)
    gmm = train_ewgmm(ds)
    lin = train_logreg(ds, 0.25, penalty="l1")
    p1, p2 = tmp_path / "gmm.json", tmp_path / "lin.json"
    save_model_json(gmm, p1)
    save_model_json(lin, p2)
    g2 = load_model_json(p1)
    l2 = load_model_json(p2)
    for name in ("mu0", "sigma0", "mu1", "sigma1"):
        assert getattr(g2, name).tobytes() == getattr(gmm, name).tobytes()
    assert g2.prior1 == gmm.prior1
    assert l2.kind == "logreg_l1" and l2.eta == 0.25
    assert l2.w.tobytes() == lin.w.tobytes() and l2.b == lin.b


def test_model_json_rejects_unknown_kind(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"kind": "mystery"}')
    with pytest.raises(ValueError):
        load_model_json(p)
