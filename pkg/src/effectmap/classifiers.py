"""Binary classifiers and the raw per-subject effect maps they induce.

Four classifier families are supported:

* ``ewgmm``: an element-wise two-component Gaussian model.  Each
  measurement site gets its own pair of class-conditional Gaussians; the
  effect map is the probit-transformed posterior probability of the
  condition at each site.
* ``svm``: a linear soft-margin SVM (hinge loss, squared-L2 weight
  penalty with slack weight ``eta``).
* ``logreg_l2`` / ``logreg_l1``: logistic regression maximizing the
  penalized log-likelihood ``loglik - eta * R(w)`` with ``R(w) = 0.5 *
  ||w||_2^2`` or ``R(w) = ||w||_1``; the intercept is never penalized.

For the linear families the effect map of a sample f is the element-wise
product w * f; the intercept does not enter the map.  SVM and logistic
regression training is delegated to scikit-learn, which solves exactly
these objectives; the element-wise Gaussian model is implemented here.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.svm import SVC

from .core import Dataset, DimensionError, EffectMap, Sample, atomic_write_text

__all__ = [
    "TrainingError",
    "EwGmmModel",
    "LinearModel",
    "CLASSIFIER_KINDS",
    "ETA_GRID",
    "train_ewgmm",
    "ewgmm_probit_scores",
    "ewgmm_effect_map",
    "train_linear_svm",
    "train_logreg",
    "linear_effect_map",
    "train_model",
    "raw_effect_map",
    "tune_regularization",
    "stratified_folds",
    "save_model_json",
    "load_model_json",
]

CLASSIFIER_KINDS = ("ewgmm", "svm", "logreg_l2", "logreg_l1")

# posterior clamp before the probit transform, keeps maps finite
PROBIT_CLAMP = 1e-6

# candidate regularization strengths for cross-validated tuning
ETA_GRID = tuple(np.logspace(-3.0, 3.0, 9))

_MAX_ITER = 100_000


class TrainingError(RuntimeError):
    """Classifier training could not produce a valid model."""


@dataclass(frozen=True)
class EwGmmModel:
    """Per-site class-conditional Gaussians plus class priors.

    Arrays have one entry per measurement site.  ``sigma0``/``sigma1``
    are strictly positive (training floors them).
    """

    mu0: np.ndarray
    sigma0: np.ndarray
    mu1: np.ndarray
    sigma1: np.ndarray
    prior1: float

    def __post_init__(self) -> None:
        arrays = {}
        d = None
        for name in ("mu0", "sigma0", "mu1", "sigma1"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim != 1:
                raise DimensionError(f"{name} must be 1-d")
            if d is None:
                d = a.size
            elif a.size != d:
                raise DimensionError("parameter arrays must share one length")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            a.flags.writeable = False
            arrays[name] = a
        if np.any(arrays["sigma0"] <= 0) or np.any(arrays["sigma1"] <= 0):
            raise ValueError("class standard deviations must be positive")
        p1 = float(self.prior1)
        if not 0.0 < p1 < 1.0:
            raise ValueError("prior1 must lie strictly between 0 and 1")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "prior1", p1)

    @property
    def prior0(self) -> float:
        return 1.0 - self.prior1

    @property
    def d(self) -> int:
        return self.mu0.size


@dataclass(frozen=True)
class LinearModel:
    """Weights and intercept of a trained linear classifier."""

    w: np.ndarray
    b: float
    kind: str
    eta: float

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DimensionError("w must be a nonempty 1-d vector")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.b)):
            raise ValueError("model parameters must be finite")
        if self.kind not in ("svm", "logreg_l2", "logreg_l1"):
            raise ValueError(f"unknown linear model kind {self.kind!r}")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "eta", float(self.eta))

    @property
    def d(self) -> int:
        return self.w.size

    def decision_values(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def _require_both_classes(dataset: Dataset) -> None:
    n0, n1 = dataset.label_counts()
    if n0 == 0 or n1 == 0:
        raise TrainingError("training requires samples of both classes")


def train_ewgmm(dataset: Dataset) -> EwGmmModel:
    """Fit per-site class-conditional Gaussians by sample moments.

    Means and standard deviations are population-style (divide by the
    class count); priors are the class proportions.  Standard deviations
    are floored at 1e-6 times the global std of the training values so a
    site that is constant within a class cannot produce a degenerate
    Gaussian.
    """
    _require_both_classes(dataset)
    X = dataset.measurement_matrix()
    y = dataset.labels()
    X0, X1 = X[y == 0], X[y == 1]
    floor = 1e-6 * float(X.std())
    if floor == 0.0:
        floor = 1e-6
    return EwGmmModel(
        mu0=X0.mean(axis=0),
        sigma0=np.maximum(X0.std(axis=0), floor),
        mu1=X1.mean(axis=0),
        sigma1=np.maximum(X1.std(axis=0), floor),
        prior1=X1.shape[0] / X.shape[0],
    )


def ewgmm_probit_scores(f, mu0, sigma0, mu1, sigma1, prior1) -> np.ndarray:
    """Probit-transformed clamped posterior p(y=1 | f), element-wise.

    All inputs broadcast, so one call can score one sample against a
    whole stack of models (parameter arrays of shape (R, d) against f of
    shape (d,)).  Computed in log space: the log odds of the posterior
    are log(prior1/prior0) plus the difference of Gaussian log densities,
    which avoids underflow for far-out measurements.
    """
    f = np.asarray(f, dtype=np.float64)
    log_odds = (
        np.log(prior1) - np.log1p(-prior1)
        + np.log(sigma0) - np.log(sigma1)
        + 0.5 * ((f - mu0) / sigma0) ** 2
        - 0.5 * ((f - mu1) / sigma1) ** 2
    )
    p = np.clip(expit(log_odds), PROBIT_CLAMP, 1.0 - PROBIT_CLAMP)
    return ndtri(p)


def ewgmm_effect_map(model: EwGmmModel, sample: Sample) -> EffectMap:
    """Raw effect map of one sample under an element-wise Gaussian model."""
    if sample.d != model.d:
        raise DimensionError(
            f"sample has {sample.d} measurements, model expects {model.d}"
        )
    scores = ewgmm_probit_scores(
        sample.measurements,
        model.mu0, model.sigma0, model.mu1, model.sigma1, model.prior1,
    )
    return EffectMap(scores, role="raw")


def _to_training_error(fit):
    # sklearn signals trouble via ConvergenceWarning or ValueError; both
    # become TrainingError so callers see one failure type.
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        try:
            result = fit()
        except ValueError as exc:
            raise TrainingError(str(exc)) from exc
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            raise TrainingError(f"solver did not converge: {w.message}")
    return result


def train_linear_svm(dataset: Dataset, eta: float) -> LinearModel:
    """Linear soft-margin SVM: minimize 0.5*||w||^2 + eta * sum(slacks).

    Labels are remapped to -1/+1 internally; positive decision values
    mean class 1.  Non-convergence within the iteration cap raises
    :class:`TrainingError` with the solver's status.
    """
    _require_both_classes(dataset)
    if not eta > 0:
        raise ValueError("eta must be positive")
    X = dataset.measurement_matrix()
    y = dataset.labels()
    svc = SVC(kernel="linear", C=float(eta), tol=1e-9, max_iter=_MAX_ITER)
    _to_training_error(lambda: svc.fit(X, y))
    return LinearModel(
        w=svc.coef_.ravel(), b=float(svc.intercept_[0]),
        kind="svm", eta=float(eta),
    )


def train_logreg(dataset: Dataset, eta: float, penalty: str = "l2",
                 tol: float | None = None) -> LinearModel:
    """Penalized logistic regression with an unpenalized intercept.

    Maximizes ``loglik - eta * R(w)`` where R is 0.5*||w||_2^2 for
    ``penalty="l2"`` and ||w||_1 for ``penalty="l1"``.  ``eta=0`` trains
    the unpenalized model and is only valid when the sample count
    exceeds the measurement count.  ``tol`` overrides the solver
    stopping tolerance (defaults: 1e-10 for l2/unpenalized, 1e-8 for
    l1); looser values trade precision for speed on badly conditioned
    inputs, such as wide unscaled feature matrices.
    """
    _require_both_classes(dataset)
    if penalty not in ("l1", "l2"):
        raise ValueError(f"penalty must be 'l1' or 'l2', got {penalty!r}")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if eta == 0 and dataset.d > dataset.n:
        raise ValueError("eta > 0 is required when d exceeds the sample count")
    if tol is not None and not tol > 0:
        raise ValueError("tol must be positive")
    X = dataset.measurement_matrix()
    y = dataset.labels()
    if eta == 0:
        clf = LogisticRegression(penalty=None, solver="lbfgs",
                                 tol=tol or 1e-10, max_iter=_MAX_ITER)
    elif penalty == "l2":
        clf = LogisticRegression(C=1.0 / float(eta), penalty="l2",
                                 solver="lbfgs", tol=tol or 1e-10,
                                 max_iter=_MAX_ITER)
    else:
        # saga handles l1 subgradients and leaves the intercept out of
        # the penalty, unlike the liblinear backend
        clf = LogisticRegression(C=1.0 / float(eta), penalty="l1",
                                 solver="saga", tol=tol or 1e-8,
                                 max_iter=_MAX_ITER, random_state=0)
    _to_training_error(lambda: clf.fit(X, y))
    return LinearModel(
        w=clf.coef_.ravel(), b=float(clf.intercept_[0]),
        kind="logreg_l2" if penalty == "l2" else "logreg_l1",
        eta=float(eta),
    )


def linear_effect_map(model: LinearModel, sample: Sample) -> EffectMap:
    """Raw effect map w * f (element-wise); the intercept is excluded."""
    if sample.d != model.d:
        raise DimensionError(
            f"sample has {sample.d} measurements, model expects {model.d}"
        )
    return EffectMap(model.w * sample.measurements, role="raw")


def train_model(kind: str, dataset: Dataset, eta: float = 1.0):
    """Train any supported classifier kind; ``eta`` is ignored by ewgmm."""
    if kind == "ewgmm":
        return train_ewgmm(dataset)
    if kind == "svm":
        return train_linear_svm(dataset, eta)
    if kind == "logreg_l2":
        return train_logreg(dataset, eta, penalty="l2")
    if kind == "logreg_l1":
        return train_logreg(dataset, eta, penalty="l1")
    raise ValueError(f"unknown classifier kind {kind!r}")


def raw_effect_map(model, sample: Sample) -> EffectMap:
    """Dispatch to the effect-map rule matching the model type."""
    if isinstance(model, EwGmmModel):
        return ewgmm_effect_map(model, sample)
    if isinstance(model, LinearModel):
        return linear_effect_map(model, sample)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def stratified_folds(labels, n_folds: int, seed) -> np.ndarray:
    """Assign each sample to one of ``n_folds`` folds, stratified by class.

    Every class is permuted with the seeded generator and dealt
    round-robin, so fold sizes per class never differ by more than one
    and a training part (all folds but one) always keeps both classes
    when each class has at least two members.
    """
    labels = np.asarray(labels)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_folds > labels.size:
        raise ValueError("more folds than samples")
    rng = np.random.default_rng(seed)
    fold = np.empty(labels.size, dtype=np.int64)
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        fold[idx] = np.arange(idx.size) % n_folds
    return fold


def tune_regularization(dataset: Dataset, kind: str, folds: int = 5, seed=0) -> float:
    """Pick the regularization strength by cross-validated accuracy.

    Scans :data:`ETA_GRID`, trains on each fold complement, and returns
    the grid value with the highest mean held-out accuracy.  Ties go to
    the smallest eta.  Deterministic given the seed.
    """
    if kind == "ewgmm":
        raise ValueError("the element-wise Gaussian model has no eta to tune")
    _require_both_classes(dataset)
    y = dataset.labels()
    fold = stratified_folds(y, folds, seed)
    X = dataset.measurement_matrix()
    accuracies = np.zeros(len(ETA_GRID))
    for f in range(folds):
        train = dataset.subset(np.flatnonzero(fold != f))
        test_X, test_y = X[fold == f], y[fold == f]
        if test_y.size == 0:
            continue
        for i, eta in enumerate(ETA_GRID):
            model = train_model(kind, train, eta)
            pred = (model.decision_values(test_X) > 0).astype(int)
            accuracies[i] += np.mean(pred == test_y)
    # first argmax hit = smallest eta among maximizers (grid is ascending)
    return float(ETA_GRID[int(np.argmax(accuracies))])


def save_model_json(model, path) -> None:
    """Serialize a trained model to JSON.

    Field names: ``kind`` tags the family; ewgmm stores ``mu0``,
    ``sigma0``, ``mu1``, ``sigma1``, ``prior1``; linear models store
    ``w``, ``b``, ``eta``.  Floats keep full precision.
    """
    if isinstance(model, EwGmmModel):
        payload = {
            "kind": "ewgmm",
            "prior1": model.prior1,
            "mu0": model.mu0.tolist(),
            "sigma0": model.sigma0.tolist(),
            "mu1": model.mu1.tolist(),
            "sigma1": model.sigma1.tolist(),
        }
    elif isinstance(model, LinearModel):
        payload = {
            "kind": model.kind,
            "eta": model.eta,
            "b": model.b,
            "w": model.w.tolist(),
        }
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    atomic_write_text(path, json.dumps(payload) + "\n")


def load_model_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    kind = payload.get("kind")
    if kind == "ewgmm":
        return EwGmmModel(
            mu0=payload["mu0"], sigma0=payload["sigma0"],
            mu1=payload["mu1"], sigma1=payload["sigma1"],
            prior1=payload["prior1"],
        )
    if kind in ("svm", "logreg_l2", "logreg_l1"):
        return LinearModel(w=payload["w"], b=payload["b"],
                           kind=kind, eta=payload["eta"])
    raise ValueError(f"unknown model kind {kind!r} in {path}")
