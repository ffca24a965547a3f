"""Comparison methods the reconstruction is benchmarked against.

Three reference points: the raw single-model map with no resampling,
the plain bootstrap-average map, and a per-site normative Gaussian fit
to controls whose absolute z-score flags abnormal measurements.  All
three produce continuous maps that go through the same thresholding
machinery as reconstructed ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifiers import raw_effect_map, train_model
from .core import Dataset, DimensionError, EffectMap, Sample
from .estimation import estimate_noise_and_mean

__all__ = [
    "NormativeModel",
    "fit_normative",
    "outlier_score_map",
    "nbs_map",
    "wbs_map",
]


@dataclass(frozen=True)
class NormativeModel:
    """Per-site Gaussian of the control population."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        std = np.ascontiguousarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise DimensionError("mean and std must be matching vectors")
        if not np.all(std > 0):
            raise ValueError("std must be positive everywhere")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def fit_normative(dataset: Dataset) -> NormativeModel:
    """Fit the per-site control Gaussian, ignoring case samples.

    Moments are population-style over the control rows only, so refits
    with different cases give the same model.  Standard deviations are
    floored like the per-site classifier's, at 1e-6 times the global
    control std, so constant sites stay usable.
    """
    X = dataset.measurement_matrix()
    controls = X[dataset.labels() == 0]
    if controls.shape[0] < 2:
        raise ValueError("need at least 2 controls")
    floor = 1e-6 * float(controls.std())
    if floor == 0.0:
        floor = 1e-6
    return NormativeModel(
        mean=controls.mean(axis=0),
        std=np.maximum(controls.std(axis=0), floor),
    )


def outlier_score_map(model: NormativeModel, sample: Sample) -> EffectMap:
    """Absolute z-score of each measurement under the control Gaussian.

    Strictly increasing in the deviation from the control mean, so the
    binary map after thresholding matches any other monotone
    abnormality score (one minus the likelihood included); unlike raw
    likelihoods it is comparable across sites with different spreads.
    """
    if sample.d != model.d:
        raise DimensionError("sample and model dimensions differ")
    z = (sample.measurements - model.mean) / model.std
    return EffectMap(np.abs(z), role="raw")


def nbs_map(classifier_kind: str, dataset: Dataset, test_sample: Sample,
            eta: float = 1.0) -> EffectMap:
    """Effect map of one model trained on the full set, no resampling."""
    model = train_model(classifier_kind, dataset, eta)
    return raw_effect_map(model, test_sample)


def wbs_map(classifier_kind: str, dataset: Dataset, test_sample: Sample,
            n_bootstrap: int = 100, seed=0, eta: float = 1.0) -> EffectMap:
    """Bootstrap-average effect map, no reconstruction on top."""
    est = estimate_noise_and_mean(classifier_kind, dataset, test_sample,
                                  n_bootstrap=n_bootstrap, seed=seed, eta=eta)
    return est.mean_map
