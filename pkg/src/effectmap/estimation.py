"""Bootstrap machinery behind the reconstruction model.

Three estimation stages live here:

* per-test-sample noise: train many classifiers on stratified bootstrap
  replicates of the training set, score the test sample with each, and
  take element-wise mean and variance over the replicate maps;
* smoothing-prior parameters: give every training sample its own
  bootstrap-average map (through an inner cross-validation so no sample
  is scored by a model trained on it, or from full-set replicates when
  ``use_cv`` is off), then take per-node and per-edge-difference
  variances of those maps across samples;
* the stationary summary: one pooled edge variance, the mean over edges.

All moments are population style (divide by the count, not count-1).
Every randomized step derives its generator from an explicit seed tuple,
so concurrent and serial runs reduce to identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import json

import numpy as np

from .classifiers import (
    TrainingError,
    ewgmm_probit_scores,
    stratified_folds,
    train_model,
)
from .core import (
    Dataset,
    DimensionError,
    EffectMap,
    NeighborhoodGraph,
    Sample,
    atomic_write_text,
    load_map_csv,
    save_map_csv,
)

__all__ = [
    "derive_seed",
    "stratified_bootstrap",
    "BootstrapEnsemble",
    "NoiseEstimate",
    "noise_from_replicate_maps",
    "estimate_noise_and_mean",
    "PriorParams",
    "prior_from_mean_maps",
    "estimate_prior_params",
    "stationary_variance",
    "save_prior_params",
    "load_prior_params",
]

# variance floor: 1e-5 * max(1, median positive value) of the field.
# Zero variances happen when classifier scores saturate their clamp on
# whole regions; the floor keeps the implied prior weights within what
# a double-precision solve can certify against the residual contract
# (weights beyond ~1e5 times typical push epsilon * ||A|| * ||x|| past
# the 1e-8 * ||rhs|| bound, making every solver "fail")
_FLOOR_REL = 1e-5

# sub-stream tags so the fold split, fold ensembles, and full-set
# ensembles never share a generator
_STREAM_FOLDS = 101
_STREAM_FOLD_ENSEMBLE = 102
_STREAM_FULL_ENSEMBLE = 103


def derive_seed(*parts) -> tuple:
    """Flatten ints and int tuples into one seed key for default_rng."""
    out = []
    for p in parts:
        if isinstance(p, (tuple, list)):
            out.extend(int(q) for q in p)
        else:
            out.append(int(p))
    return tuple(out)


def stratified_bootstrap(dataset: Dataset, seed) -> np.ndarray:
    """Resample N indices with replacement, preserving class counts exactly.

    Draws exactly n0 indices from the label-0 samples and n1 from the
    label-1 samples, so every replicate keeps the training set's class
    ratio.  Deterministic given the seed.
    """
    y = dataset.labels()
    n0, n1 = dataset.label_counts()
    if n0 == 0 or n1 == 0:
        raise TrainingError("bootstrap resampling requires both classes")
    rng = np.random.default_rng(derive_seed(seed))
    parts = []
    for cls, count in ((0, n0), (1, n1)):
        idx = np.flatnonzero(y == cls)
        parts.append(rng.choice(idx, size=count, replace=True))
    return np.concatenate(parts)


class BootstrapEnsemble:
    """Classifiers trained on ``n_replicates`` stratified bootstrap draws.

    For the element-wise Gaussian kind the per-replicate moments are
    computed through one weighted matrix product per class instead of
    refitting in a loop; the result matches per-replicate training up to
    floating-point reassociation.  Linear kinds are trained one by one.
    """

    def __init__(self, kind: str, dataset: Dataset, n_replicates: int,
                 seed, eta: float = 1.0):
        if n_replicates < 1:
            raise ValueError("need at least one replicate")
        n0, n1 = dataset.label_counts()
        if n0 == 0 or n1 == 0:
            raise TrainingError("ensemble training requires both classes")
        self.kind = kind
        self.n_replicates = int(n_replicates)
        self.d = dataset.d
        indices = np.stack([
            stratified_bootstrap(dataset, derive_seed(seed, r))
            for r in range(self.n_replicates)
        ])
        indices.flags.writeable = False
        self.replicate_indices = indices
        if kind == "ewgmm":
            self._fit_ewgmm_stack(dataset)
        elif kind in ("svm", "logreg_l2", "logreg_l1"):
            self._fit_linear_stack(dataset, eta)
        else:
            raise ValueError(f"unknown classifier kind {kind!r}")

    def _fit_ewgmm_stack(self, dataset: Dataset) -> None:
        X = dataset.measurement_matrix()
        y = dataset.labels()
        n, d = X.shape
        X2 = X * X
        counts = np.zeros((self.n_replicates, n))
        for r in range(self.n_replicates):
            np.add.at(counts[r], self.replicate_indices[r], 1.0)
        stats = {}
        for cls in (0, 1):
            mask = (y == cls).astype(np.float64)
            c = counts * mask
            n_cls = c[0].sum()  # identical across replicates by stratification
            mean = (c @ X) / n_cls
            var = (c @ X2) / n_cls - mean * mean
            stats[cls] = (mean, np.clip(var, 0.0, None))
        # per-replicate global std sets the per-replicate sigma floor
        m_row = X.mean(axis=1)
        q_row = X2.mean(axis=1)
        g_mean = (counts @ m_row) / n
        g_ex2 = (counts @ q_row) / n
        g_std = np.sqrt(np.clip(g_ex2 - g_mean * g_mean, 0.0, None))
        floor = 1e-6 * np.where(g_std > 0, g_std, 1.0)
        self.mu0, var0 = stats[0]
        self.mu1, var1 = stats[1]
        self.sigma0 = np.maximum(np.sqrt(var0), floor[:, None])
        self.sigma1 = np.maximum(np.sqrt(var1), floor[:, None])
        n0, n1 = dataset.label_counts()
        self.prior1 = n1 / (n0 + n1)

    def _fit_linear_stack(self, dataset: Dataset, eta: float) -> None:
        W = np.empty((self.n_replicates, self.d))
        b = np.empty(self.n_replicates)
        for r in range(self.n_replicates):
            replicate = dataset.subset(self.replicate_indices[r])
            try:
                model = train_model(self.kind, replicate, eta)
            except TrainingError as exc:
                raise TrainingError(f"replicate {r}: {exc}") from exc
            W[r] = model.w
            b[r] = model.b
        self.W, self.b = W, b
        self.eta = float(eta)

    def replicate_maps(self, sample: Sample) -> np.ndarray:
        """Raw effect maps of one sample under every replicate, (R, d)."""
        if sample.d != self.d:
            raise DimensionError(
                f"sample has {sample.d} measurements, ensemble expects {self.d}"
            )
        f = sample.measurements
        if self.kind == "ewgmm":
            return ewgmm_probit_scores(
                f, self.mu0, self.sigma0, self.mu1, self.sigma1, self.prior1
            )
        return self.W * f

    def mean_map(self, sample: Sample) -> np.ndarray:
        """Bootstrap-average map of one sample, (d,)."""
        return self.replicate_maps(sample).mean(axis=0)


@dataclass(frozen=True)
class NoiseEstimate:
    """Element-wise noise variance and bootstrap mean for one sample."""

    sigma2: np.ndarray
    mean_map: EffectMap

    def __post_init__(self) -> None:
        s = np.array(self.sigma2, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise DimensionError("sigma2 must be a nonempty 1-d vector")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("sigma2 must be finite and nonnegative")
        if s.size != self.mean_map.d:
            raise DimensionError("sigma2 and mean_map lengths differ")
        s.flags.writeable = False
        object.__setattr__(self, "sigma2", s)

    @property
    def d(self) -> int:
        return self.sigma2.size


def noise_from_replicate_maps(maps: np.ndarray) -> NoiseEstimate:
    """Population mean/variance over an (R, d) stack of replicate maps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 2 or maps.shape[0] < 1:
        raise DimensionError("need an (R, d) stack of replicate maps")
    mean = maps.mean(axis=0)
    var = maps.var(axis=0)  # divisor R
    return NoiseEstimate(var, EffectMap(mean, role="bootstrap_mean"))


def estimate_noise_and_mean(kind: str, dataset: Dataset, test_sample: Sample,
                            n_bootstrap: int = 100, seed=0,
                            eta: float = 1.0) -> NoiseEstimate:
    """Bootstrap noise variance and mean map for one held-out sample.

    The caller is responsible for keeping ``test_sample`` out of
    ``dataset``.  Requires at least two replicates so the variance
    carries information.
    """
    if n_bootstrap < 2:
        raise ValueError("need n_bootstrap >= 2")
    ensemble = BootstrapEnsemble(kind, dataset, n_bootstrap, seed, eta)
    return noise_from_replicate_maps(ensemble.replicate_maps(test_sample))


@dataclass(frozen=True)
class PriorParams:
    """Estimated parameters of the graph smoothing prior.

    ``node_var`` holds one variance per measurement site, ``edge_var``
    and ``edge_mean`` one entry per graph edge (aligned with the graph's
    canonical edge order).  ``stationary_var`` is the pooled single-value
    alternative to ``edge_var``.  ``mean_of_means`` keeps the across-
    sample average of the per-sample bootstrap maps for audit.
    """

    node_var: np.ndarray
    edge_var: np.ndarray
    edge_mean: np.ndarray
    stationary_var: float
    mean_of_means: np.ndarray

    def __post_init__(self) -> None:
        node_var = np.array(self.node_var, dtype=np.float64)
        edge_var = np.array(self.edge_var, dtype=np.float64)
        edge_mean = np.array(self.edge_mean, dtype=np.float64)
        mom = np.array(self.mean_of_means, dtype=np.float64)
        if node_var.ndim != 1 or node_var.size == 0:
            raise DimensionError("node_var must be a nonempty 1-d vector")
        if edge_var.shape != edge_mean.shape or edge_var.ndim != 1:
            raise DimensionError("edge_var and edge_mean must be 1-d and aligned")
        if mom.shape != node_var.shape:
            raise DimensionError("mean_of_means must align with node_var")
        if not (np.all(np.isfinite(node_var)) and np.all(np.isfinite(edge_var))
                and np.all(np.isfinite(edge_mean)) and np.all(np.isfinite(mom))):
            raise ValueError("prior parameters must be finite")
        if np.any(node_var <= 0) or np.any(edge_var <= 0):
            raise ValueError("variances must be positive (flooring handles zeros)")
        if not (np.isfinite(self.stationary_var) and self.stationary_var > 0):
            raise ValueError("stationary_var must be positive and finite")
        for name, a in (("node_var", node_var), ("edge_var", edge_var),
                        ("edge_mean", edge_mean), ("mean_of_means", mom)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "stationary_var", float(self.stationary_var))

    @property
    def d(self) -> int:
        return self.node_var.size


def _floored(values: np.ndarray) -> np.ndarray:
    pos = values[values > 0]
    scale = float(np.median(pos)) if pos.size else 0.0
    floor = _FLOOR_REL * max(1.0, scale)
    return np.maximum(values, floor)


def prior_from_mean_maps(mean_maps: np.ndarray,
                         graph: NeighborhoodGraph) -> PriorParams:
    """Prior parameters from an (N, d) matrix of per-sample average maps.

    Node variances are taken across samples at each site; edge variances
    across samples of the difference between the edge's endpoints.  Both
    fields are floored away from zero, and the stationary value is the
    mean of the floored edge variances.
    """
    mean_maps = np.asarray(mean_maps, dtype=np.float64)
    if mean_maps.ndim != 2 or mean_maps.shape[0] < 2:
        raise DimensionError("need at least two rows of mean maps")
    if mean_maps.shape[1] != graph.node_count:
        raise DimensionError("mean map width must equal the node count")
    if graph.edge_count == 0:
        raise ValueError("graph has no edges")
    node_var = _floored(mean_maps.var(axis=0))
    j, k = graph.edges[:, 0], graph.edges[:, 1]
    diffs = mean_maps[:, j] - mean_maps[:, k]
    edge_mean = diffs.mean(axis=0)
    edge_var = _floored(diffs.var(axis=0))
    return PriorParams(
        node_var=node_var,
        edge_var=edge_var,
        edge_mean=edge_mean,
        stationary_var=float(edge_var.mean()),
        mean_of_means=mean_maps.mean(axis=0),
    )


def estimate_prior_params(kind: str, dataset: Dataset, graph: NeighborhoodGraph,
                          folds: int = 5, n_bootstrap: int = 100, seed=0,
                          use_cv: bool = True, eta: float = 1.0) -> PriorParams:
    """Estimate the smoothing prior from per-sample bootstrap-average maps.

    With ``use_cv`` each sample's average map comes from the ensemble of
    the fold where it was held out, so no sample is ever scored by a
    model that saw it.  Without it, one ensemble trained on the full set
    scores everybody; cheaper, mildly optimistic.
    """
    if dataset.d != graph.node_count:
        raise DimensionError("dataset dimension and node count differ")
    mean_maps = np.empty((dataset.n, dataset.d))
    if use_cv:
        if dataset.n < folds:
            raise ValueError("fewer samples than folds")
        fold = stratified_folds(dataset.labels(), folds,
                                derive_seed(seed, _STREAM_FOLDS))
        for f in range(folds):
            train_idx = np.flatnonzero(fold != f)
            held_out = np.flatnonzero(fold == f)
            ensemble = BootstrapEnsemble(
                kind, dataset.subset(train_idx), n_bootstrap,
                derive_seed(seed, _STREAM_FOLD_ENSEMBLE, f), eta,
            )
            for i in held_out:
                mean_maps[i] = ensemble.mean_map(dataset.samples[i])
    else:
        ensemble = BootstrapEnsemble(
            kind, dataset, n_bootstrap,
            derive_seed(seed, _STREAM_FULL_ENSEMBLE), eta,
        )
        for i in range(dataset.n):
            mean_maps[i] = ensemble.mean_map(dataset.samples[i])
    return prior_from_mean_maps(mean_maps, graph)


def stationary_variance(prior: PriorParams, graph: NeighborhoodGraph) -> float:
    """Mean of the per-edge variances over the graph's edges."""
    if graph.edge_count == 0:
        raise ValueError("graph has no edges")
    if prior.edge_var.size != graph.edge_count:
        raise DimensionError("edge_var does not align with the graph")
    return float(prior.edge_var.mean())


def save_prior_params(prior: PriorParams, graph: NeighborhoodGraph,
                      prefix, metadata=None) -> None:
    """Write prior parameters next to their graph.

    Produces ``<prefix>_node_var.csv`` and ``<prefix>_mean_of_means.csv``
    (single-column maps), ``<prefix>_edges.csv`` with rows
    ``j,k,edge_var,edge_mean`` aligned with the graph edge list, and
    ``<prefix>_meta.json`` holding ``stationary_var`` plus any metadata
    the caller supplies (classifier kind, replicate count, folds, seed).
    """
    prefix = str(prefix)
    save_map_csv(prior.node_var, prefix + "_node_var.csv")
    save_map_csv(prior.mean_of_means, prefix + "_mean_of_means.csv")
    edge_lines = ["j,k,edge_var,edge_mean"]
    edge_lines.extend(
        f"{j},{k},{float(v)!r},{float(m)!r}"
        for (j, k), v, m in zip(graph.edges, prior.edge_var, prior.edge_mean)
    )
    atomic_write_text(prefix + "_edges.csv", "\n".join(edge_lines) + "\n")
    meta = {"stationary_var": prior.stationary_var}
    if metadata:
        meta.update(metadata)
    atomic_write_text(prefix + "_meta.json", json.dumps(meta, indent=2) + "\n")


def load_prior_params(prefix):
    """Read back :func:`save_prior_params` output; returns (prior, metadata)."""
    prefix = str(prefix)
    node_var = load_map_csv(prefix + "_node_var.csv")
    mean_of_means = load_map_csv(prefix + "_mean_of_means.csv")
    edge_var, edge_mean = [], []
    with open(prefix + "_edges.csv", "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "j,k,edge_var,edge_mean":
            raise ValueError(f"unexpected edge file header {header!r}")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            _, _, v, m = line.split(",")
            edge_var.append(float(v))
            edge_mean.append(float(m))
    with open(prefix + "_meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    prior = PriorParams(
        node_var=node_var,
        edge_var=np.array(edge_var),
        edge_mean=np.array(edge_mean),
        stationary_var=float(meta["stationary_var"]),
        mean_of_means=mean_of_means,
    )
    return prior, meta
