"""Global thresholding of reconstructed maps with an FPR budget.

The threshold ``tau`` is the smallest value such that, over a pool of
reconstructed control maps, the fraction of entries strictly above it
stays within the requested false-positive-rate limit.  Because the
constraint is a step function of the threshold, the exact answer is an
order statistic of the pooled values; a golden-section variant is kept
as an alternative.  The cross-validated driver reconstructs held-out
controls fold by fold so the pooled maps never come from models that
saw them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifiers import stratified_folds
from .core import BinaryEffectMap, Dataset, EffectMap, NeighborhoodGraph
from .estimation import derive_seed
from .reconstruct import RsmConfig, prepare_reconstruction, reconstruct_prepared

__all__ = [
    "Threshold",
    "compute_threshold",
    "golden_section_threshold",
    "threshold_map",
    "cv_threshold",
]

_STREAM_TAU_FOLDS = 201
_STREAM_TAU_PREP = 202

INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Threshold:
    """A fitted global threshold and the budget it was computed for."""

    tau: float
    l_fpr: float
    n_control_maps: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")
        if not 0.0 < self.l_fpr < 1.0:
            raise ValueError("l_fpr must lie in (0, 1)")


def _pooled_values(control_maps) -> np.ndarray:
    if len(control_maps) == 0:
        raise ValueError("need at least one control map")
    arrays = [np.asarray(getattr(m, "values", m), dtype=np.float64)
              for m in control_maps]
    return np.concatenate(arrays)


def _max_exceedances(l_fpr: float, pooled_count: int) -> int:
    # largest k with k / pooled_count <= l_fpr, evaluated with the same
    # float division the constraint itself uses
    k = int(np.floor(l_fpr * pooled_count))
    while (k + 1) / pooled_count <= l_fpr:
        k += 1
    while k > 0 and k / pooled_count > l_fpr:
        k -= 1
    return k


def compute_threshold(control_maps, l_fpr: float) -> Threshold:
    """Exact minimal threshold meeting the pooled FPR budget.

    Pools all control map values and returns the smallest t with
    ``count(values > t) / count(values) <= l_fpr``.  That minimum is
    attained at the (k+1)-th largest pooled value, where k is the
    largest admissible exceedance count, so a single partial sort
    answers the search exactly.
    """
    if not 0.0 < l_fpr < 1.0:
        raise ValueError("l_fpr must lie in (0, 1)")
    vals = _pooled_values(control_maps)
    m = vals.size
    k = _max_exceedances(l_fpr, m)
    pos = m - 1 - k  # ascending-order index of the (k+1)-th largest
    tau = float(np.partition(vals, pos)[pos])
    return Threshold(tau=tau, l_fpr=float(l_fpr),
                     n_control_maps=len(control_maps))


def golden_section_threshold(control_maps, l_fpr: float,
                             tol: float | None = None) -> Threshold:
    """Golden-section alternative to :func:`compute_threshold`.

    The feasibility indicator is folded into a V-shaped objective
    (infeasible thresholds score high and decreasing, feasible ones
    score as themselves), which golden-section search minimizes over
    the pooled value range.  The returned threshold is the smallest
    feasible candidate in the final bracket, so it always satisfies the
    budget; it can sit a hair above the exact order statistic.
    """
    if not 0.0 < l_fpr < 1.0:
        raise ValueError("l_fpr must lie in (0, 1)")
    vals = _pooled_values(control_maps)
    m = vals.size

    def feasible(t: float) -> bool:
        return np.count_nonzero(vals > t) / m <= l_fpr

    lo = float(vals.min()) - 1.0
    hi = float(vals.max())

    def objective(t: float) -> float:
        return t if feasible(t) else 2.0 * hi - t

    if tol is None:
        tol = 1e-12 * max(1.0, hi - lo)
    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = objective(x1), objective(x2)
    while b - a > tol:
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = objective(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = objective(x2)
    tau = min(t for t in (a, x1, x2, b) if feasible(t))
    return Threshold(tau=float(tau), l_fpr=float(l_fpr),
                     n_control_maps=len(control_maps))


def threshold_map(effect_map: EffectMap, tau: float) -> BinaryEffectMap:
    """Binarize a map: detection wherever the value strictly exceeds tau."""
    return BinaryEffectMap((effect_map.values > tau).astype(np.uint8))


def cv_threshold(classifier_kind: str, dataset: Dataset,
                 graph: NeighborhoodGraph, config: RsmConfig) -> Threshold:
    """Fit the threshold by cross-validated control reconstructions.

    Splits the training set into ``config.folds`` stratified folds; for
    each fold, estimates the prior and noise on the other folds and
    reconstructs only that fold's controls.  All reconstructed control
    maps are pooled into one exact threshold computation.
    """
    y = dataset.labels()
    n_controls = int(np.sum(y == 0))
    if n_controls < config.folds:
        raise ValueError("need at least as many controls as folds")
    fold = stratified_folds(y, config.folds,
                            derive_seed(config.seed, _STREAM_TAU_FOLDS))
    pooled = []
    for f in range(config.folds):
        train = dataset.subset(np.flatnonzero(fold != f))
        held_out = np.flatnonzero((fold == f) & (y == 0))
        samples = [dataset.samples[i] for i in held_out]
        if not samples:
            continue
        prep = prepare_reconstruction(
            classifier_kind, train, graph, samples,
            n_bootstrap=config.n_bootstrap, folds=config.folds,
            seed=derive_seed(config.seed, _STREAM_TAU_PREP, f),
            eta=config.eta, prior_cv=config.prior_cv,
        )
        for i in range(len(samples)):
            pooled.append(reconstruct_prepared(
                prep, i, config.lam, config.pairwise_mode,
                config.observation, graph,
            ))
    return compute_threshold(pooled, config.l_fpr)
