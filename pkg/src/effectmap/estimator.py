"""Scikit-learn style wrapper around the full map pipeline.

One estimator object covers fit (prior, noise ensemble, model, and the
cross-validated threshold on the training set), transform (continuous
per-site maps for new samples), and predict (binary detection maps
under the fitted threshold).  The ``method`` parameter selects the
reconstruction or one of the reference methods, so pipelines can swap
them without changing shape.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baseline import fit_normative, outlier_score_map
from .classifiers import CLASSIFIER_KINDS, raw_effect_map, stratified_folds, train_model
from .core import Dataset, DimensionError, NeighborhoodGraph, Sample
from .estimation import (
    BootstrapEnsemble,
    derive_seed,
    estimate_prior_params,
    noise_from_replicate_maps,
)
from .evaluation import METHODS
from .reconstruct import (
    RsmConfig,
    assemble_system,
    prepare_reconstruction,
    reconstruct_prepared,
    solve_map,
)
from .thresholding import _STREAM_TAU_FOLDS, _STREAM_TAU_PREP, compute_threshold

__all__ = ["EffectMapReconstructor"]

# same stream tags prepare_reconstruction uses, so transform output
# matches the prepared path for the same seed
_STREAM_FIT_PRIOR = 301
_STREAM_FIT_NOISE = 302


class EffectMapReconstructor(BaseEstimator):
    """Subject-level effect maps with an FPR-calibrated threshold.

    Parameters mirror the pipeline configuration; all validation is
    deferred to ``fit`` per scikit-learn convention.  ``graph`` must be
    a :class:`NeighborhoodGraph` whose node count equals the feature
    count.  After ``fit``, ``transform`` returns one continuous map per
    row and ``predict`` the corresponding binary detection maps.
    """

    def __init__(self, graph=None, classifier="ewgmm", method="rsm",
                 lam=1.0, l_fpr=0.01, n_bootstrap=100, cv_folds=5,
                 pairwise_mode="nonstationary", observation="raw",
                 prior_cv=True, eta=1.0, random_state=0):
        self.graph = graph
        self.classifier = classifier
        self.method = method
        self.lam = lam
        self.l_fpr = l_fpr
        self.n_bootstrap = n_bootstrap
        self.cv_folds = cv_folds
        self.pairwise_mode = pairwise_mode
        self.observation = observation
        self.prior_cv = prior_cv
        self.eta = eta
        self.random_state = random_state

    def _config(self) -> RsmConfig:
        return RsmConfig(
            lam=self.lam, l_fpr=self.l_fpr, n_bootstrap=self.n_bootstrap,
            folds=self.cv_folds, pairwise_mode=self.pairwise_mode,
            observation=self.observation, prior_cv=self.prior_cv,
            eta=self.eta, seed=self.random_state,
        )

    def _control_maps_for_fold(self, train: Dataset, samples, seed):
        """Held-out control maps of one threshold-CV fold, per method."""
        if self.method == "outlier":
            normative = fit_normative(train)
            return [outlier_score_map(normative, s) for s in samples]
        prep = prepare_reconstruction(
            self.classifier, train, self.graph, samples,
            n_bootstrap=self.n_bootstrap, folds=self.cv_folds, seed=seed,
            eta=self.eta, prior_cv=self.prior_cv,
        )
        if self.method == "wbs":
            return [n.mean_map for n in prep.noises]
        if self.method == "nbs":
            return list(prep.observations)
        return [reconstruct_prepared(prep, i, self.lam, self.pairwise_mode,
                                     self.observation, self.graph)
                for i in range(len(samples))]

    def _fit_threshold(self, dataset: Dataset) -> float:
        y = dataset.labels()
        n_controls = int(np.sum(y == 0))
        if n_controls < self.cv_folds:
            raise ValueError("need at least as many controls as cv_folds")
        fold = stratified_folds(
            y, self.cv_folds, derive_seed(self.random_state,
                                          _STREAM_TAU_FOLDS))
        pooled = []
        for f in range(self.cv_folds):
            train = dataset.subset(np.flatnonzero(fold != f))
            held = np.flatnonzero((fold == f) & (y == 0))
            samples = [dataset.samples[i] for i in held]
            if not samples:
                continue
            pooled.extend(self._control_maps_for_fold(
                train, samples,
                derive_seed(self.random_state, _STREAM_TAU_PREP, f)))
        return compute_threshold(pooled, self.l_fpr).tau

    def fit(self, X, y):
        """Fit prior, ensemble, model, and threshold on labeled maps."""
        X, y = check_X_y(X, y, dtype=np.float64)
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("y must contain only the labels 0 and 1")
        if not isinstance(self.graph, NeighborhoodGraph):
            raise ValueError("graph must be a NeighborhoodGraph")
        if self.graph.node_count != X.shape[1]:
            raise DimensionError("graph node count must match feature count")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.classifier not in CLASSIFIER_KINDS:
            raise ValueError(f"classifier must be one of {CLASSIFIER_KINDS}")
        self._config()  # validates the numeric parameters
        dataset = Dataset.from_arrays(X, y.astype(np.int64))
        self.n_features_in_ = X.shape[1]

        self.prior_ = None
        self.ensemble_ = None
        self.model_ = None
        self.normative_ = None
        if self.method == "outlier":
            self.normative_ = fit_normative(dataset)
        else:
            if self.method == "rsm":
                self.prior_ = estimate_prior_params(
                    self.classifier, dataset, self.graph,
                    folds=self.cv_folds, n_bootstrap=self.n_bootstrap,
                    seed=derive_seed(self.random_state, _STREAM_FIT_PRIOR),
                    use_cv=self.prior_cv, eta=self.eta,
                )
            if self.method in ("rsm", "wbs"):
                self.ensemble_ = BootstrapEnsemble(
                    self.classifier, dataset, self.n_bootstrap,
                    derive_seed(self.random_state, _STREAM_FIT_NOISE),
                    self.eta,
                )
            if self.method in ("rsm", "nbs"):
                self.model_ = train_model(self.classifier, dataset, self.eta)
        self.tau_ = self._fit_threshold(dataset)
        return self

    def _transform_sample(self, sample: Sample) -> np.ndarray:
        if self.method == "outlier":
            return outlier_score_map(self.normative_, sample).values
        if self.method == "nbs":
            return raw_effect_map(self.model_, sample).values
        noise = noise_from_replicate_maps(
            self.ensemble_.replicate_maps(sample))
        if self.method == "wbs":
            return noise.mean_map.values
        observed = raw_effect_map(self.model_, sample) \
            if self.observation == "raw" else noise.mean_map
        system = assemble_system(observed, noise, self.prior_, self.lam,
                                 self.graph, self.pairwise_mode)
        return solve_map(system).values

    def transform(self, X) -> np.ndarray:
        """Continuous per-site maps, one row per input sample."""
        check_is_fitted(self, "tau_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError("feature count changed since fit")
        return np.stack([self._transform_sample(Sample(row, 0))
                         for row in X])

    def predict(self, X) -> np.ndarray:
        """Binary detection maps under the fitted threshold."""
        return (self.transform(X) > self.tau_).astype(np.uint8)
