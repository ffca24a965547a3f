"""MAP reconstruction of effect maps under a graph smoothing prior.

The reconstruction ``rho*`` minimizes a quadratic objective with three
parts: a data-fit term ``(rho_j - obs_j)^2 / sigma_j^2`` weighted by the
per-site noise variance, a ridge term ``rho_j^2 / node_var_j`` pulling
each site toward zero, and a coupling term ``lam * (rho_j - rho_k)^2 /
edge_var_jk`` on every graph edge.  Setting the gradient to zero gives a
sparse symmetric positive-definite linear system, assembled here in its
symmetrized form (row j divided by ``sigma_j^2``):

    A_jj  = 1/sigma_j^2 + 1/node_var_j + lam * sum_k 1/edge_var_jk
    A_jk  = -lam / edge_var_jk          for edges (j, k)
    rhs_j = obs_j / sigma_j^2

Sites with exactly zero noise variance are fully trusted: they are
pinned to their observed value and eliminated from the system, with
their coupling contributions moved to the right-hand side.  The system
is solved by Jacobi-preconditioned conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .classifiers import raw_effect_map, train_model
from .core import Dataset, DimensionError, EffectMap, NeighborhoodGraph, Sample
from .estimation import (
    BootstrapEnsemble,
    NoiseEstimate,
    PriorParams,
    derive_seed,
    estimate_noise_and_mean,
    estimate_prior_params,
    noise_from_replicate_maps,
)

__all__ = [
    "SolverError",
    "RsmConfig",
    "MapSystem",
    "PAIRWISE_MODES",
    "assemble_system",
    "solve_map",
    "reconstruct_for_sample",
    "PreparedReconstruction",
    "prepare_reconstruction",
    "reconstruct_prepared",
]

PAIRWISE_MODES = ("nonstationary", "stationary", "none")

OBSERVATION_CHOICES = ("raw", "bootstrap_mean")

# noise variances below this fraction of the largest one are floored
_SIGMA2_FLOOR_REL = 1e-12


class SolverError(RuntimeError):
    """No solver produced a solution meeting the residual contract."""


@dataclass(frozen=True)
class RsmConfig:
    """Knobs of the reconstruct-and-threshold pipeline.

    ``lam`` trades the coupling term against data fit and ridge;
    ``l_fpr`` is the false-positive-rate budget used for thresholding;
    ``observation`` selects what the data-fit term sees: the raw map of
    a single model trained on the full training set ("raw", default) or
    the bootstrap-average map ("bootstrap_mean").
    """

    lam: float = 1.0
    l_fpr: float = 0.01
    n_bootstrap: int = 100
    folds: int = 5
    pairwise_mode: str = "nonstationary"
    observation: str = "raw"
    prior_cv: bool = True
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 < self.l_fpr < 1.0:
            raise ValueError("l_fpr must lie in (0, 1)")
        if self.n_bootstrap < 2:
            raise ValueError("n_bootstrap must be >= 2")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.pairwise_mode not in PAIRWISE_MODES:
            raise ValueError(f"pairwise_mode must be one of {PAIRWISE_MODES}")
        if self.observation not in OBSERVATION_CHOICES:
            raise ValueError(f"observation must be one of {OBSERVATION_CHOICES}")


@dataclass(frozen=True)
class MapSystem:
    """Reduced SPD system plus the bookkeeping to undo the reduction."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    free_idx: np.ndarray
    pinned_idx: np.ndarray
    pinned_values: np.ndarray
    d: int


def assemble_system(observed: EffectMap, noise: NoiseEstimate,
                    prior: PriorParams, lam: float, graph: NeighborhoodGraph,
                    pairwise_mode: str = "nonstationary") -> MapSystem:
    """Build the symmetrized MAP system for one observed map.

    ``pairwise_mode`` picks the per-edge variances ("nonstationary"),
    substitutes the pooled stationary value for all of them
    ("stationary"), or drops the coupling term entirely ("none").
    """
    d = graph.node_count
    if not (observed.d == noise.d == prior.d == d):
        raise DimensionError("observed, noise, prior, and graph sizes differ")
    if pairwise_mode not in PAIRWISE_MODES:
        raise ValueError(f"pairwise_mode must be one of {PAIRWISE_MODES}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if prior.edge_var.size != graph.edge_count:
        raise DimensionError("prior edge_var does not align with the graph")

    obs = observed.values
    sigma2 = noise.sigma2
    pinned = sigma2 == 0.0
    free = ~pinned
    sigma2_eff = sigma2.copy()
    if np.any(free):
        floor = _SIGMA2_FLOOR_REL * float(sigma2.max())
        sigma2_eff[free] = np.maximum(sigma2[free], floor)

    diag = np.zeros(d)
    rhs = np.zeros(d)
    diag[free] = 1.0 / sigma2_eff[free] + 1.0 / prior.node_var[free]
    rhs[free] = obs[free] / sigma2_eff[free]

    rows, cols, vals = [], [], []
    use_pairwise = pairwise_mode != "none" and lam > 0 and graph.edge_count > 0
    if use_pairwise:
        j, k = graph.edges[:, 0], graph.edges[:, 1]
        if pairwise_mode == "stationary":
            edge_w = np.full(graph.edge_count, lam / prior.stationary_var)
        else:
            edge_w = lam / prior.edge_var
        # every edge strengthens both endpoint diagonals, even when one
        # endpoint is pinned: the pinned value still constrains its
        # neighbor through the coupling
        np.add.at(diag, j, edge_w)
        np.add.at(diag, k, edge_w)
        both_free = free[j] & free[k]
        rows.extend((j[both_free], k[both_free]))
        cols.extend((k[both_free], j[both_free]))
        vals.extend((-edge_w[both_free], -edge_w[both_free]))
        j_free = free[j] & pinned[k]
        np.add.at(rhs, j[j_free], edge_w[j_free] * obs[k[j_free]])
        k_free = free[k] & pinned[j]
        np.add.at(rhs, k[k_free], edge_w[k_free] * obs[j[k_free]])

    free_idx = np.flatnonzero(free)
    pinned_idx = np.flatnonzero(pinned)
    new_index = np.full(d, -1, dtype=np.int64)
    new_index[free_idx] = np.arange(free_idx.size)

    nf = free_idx.size
    if nf:
        all_rows = [new_index[free_idx]]
        all_cols = [new_index[free_idx]]
        all_vals = [diag[free_idx]]
        for r, c, v in zip(rows, cols, vals):
            all_rows.append(new_index[r])
            all_cols.append(new_index[c])
            all_vals.append(v)
        A = sparse.coo_matrix(
            (np.concatenate(all_vals),
             (np.concatenate(all_rows), np.concatenate(all_cols))),
            shape=(nf, nf),
        ).tocsr()
    else:
        A = sparse.csr_matrix((0, 0))
    return MapSystem(
        matrix=A,
        rhs=rhs[free_idx],
        free_idx=free_idx,
        pinned_idx=pinned_idx,
        pinned_values=obs[pinned_idx].copy(),
        d=d,
    )


def _jacobi_pcg(A: sparse.csr_matrix, rhs: np.ndarray, rtol: float,
                max_iter: int) -> np.ndarray:
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    target = rtol * rhs_norm
    for _ in range(max_iter):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if float(np.linalg.norm(r)) <= target:
            return x
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    residual = float(np.linalg.norm(A @ x - rhs))
    raise SolverError(
        f"no convergence within {max_iter} iterations; "
        f"final residual {residual:.3e} (target {target:.3e})"
    )


# residual bound a fallback direct solve must still meet
_CONTRACT_RTOL = 1e-8


def _direct_solve(A: sparse.csr_matrix, rhs: np.ndarray,
                  target: float) -> np.ndarray:
    lu = sparse.linalg.splu(A.tocsc())
    x = lu.solve(rhs)
    # iterative refinement: coupling weights spanning many orders of
    # magnitude leave a first factorization solve short of the contract
    for _ in range(5):
        r = rhs - A @ x
        if float(np.linalg.norm(r)) <= target:
            break
        x += lu.solve(r)
    return x


def solve_map(system: MapSystem, rtol: float = 1e-10,
              max_iter: int | None = None,
              direct_fallback: bool = True) -> EffectMap:
    """Solve the reduced system and re-insert pinned values.

    Conjugate gradients with Jacobi preconditioning is tried first,
    targeting ``||A x - rhs|| <= rtol * ||rhs||`` on the free sites.  If
    the iteration cap (default ten times the site count) is hit, a
    sparse direct factorization takes over; near-degenerate priors can
    make the system too ill-conditioned for any iterative method.
    Raises :class:`SolverError` when the fallback is disabled, or when
    even the direct solve misses the 1e-8 relative-residual contract.
    Pinned sites carry their observed values unchanged.
    """
    values = np.empty(system.d)
    values[system.pinned_idx] = system.pinned_values
    if system.free_idx.size:
        A, rhs = system.matrix, system.rhs
        cap = max_iter if max_iter is not None else max(100, 10 * system.d)
        try:
            x = _jacobi_pcg(A, rhs, rtol, cap)
        except SolverError:
            if not direct_fallback:
                raise
            bound = max(rtol, _CONTRACT_RTOL) * float(np.linalg.norm(rhs))
            x = _direct_solve(A, rhs, bound)
            residual = float(np.linalg.norm(A @ x - rhs))
            if residual > bound:
                raise SolverError(
                    f"direct fallback residual {residual:.3e} exceeds "
                    f"{bound:.3e}"
                )
        values[system.free_idx] = x
    return EffectMap(values, role="reconstructed")


@dataclass(frozen=True)
class PreparedReconstruction:
    """Everything one training set provides for reconstructing test maps.

    Holds the estimated prior, plus per-test-sample noise estimates and
    raw single-model observation maps, so many (lam, pairwise_mode)
    settings can be solved without repeating the bootstrap work.
    """

    prior: PriorParams
    noises: tuple
    observations: tuple


# sub-stream tags for the prior ensembles vs the noise ensemble
_STREAM_PREP_PRIOR = 301
_STREAM_PREP_NOISE = 302


def prepare_reconstruction(classifier_kind: str, train: Dataset,
                           graph: NeighborhoodGraph, test_samples,
                           n_bootstrap: int = 100, folds: int = 5, seed=0,
                           eta: float = 1.0,
                           prior_cv: bool = True) -> PreparedReconstruction:
    """Run the per-training-set estimation stages once for many samples."""
    prior = estimate_prior_params(
        classifier_kind, train, graph, folds=folds, n_bootstrap=n_bootstrap,
        seed=derive_seed(seed, _STREAM_PREP_PRIOR), use_cv=prior_cv, eta=eta,
    )
    ensemble = BootstrapEnsemble(
        classifier_kind, train, n_bootstrap,
        derive_seed(seed, _STREAM_PREP_NOISE), eta,
    )
    model = train_model(classifier_kind, train, eta)
    noises = tuple(
        noise_from_replicate_maps(ensemble.replicate_maps(s))
        for s in test_samples
    )
    observations = tuple(raw_effect_map(model, s) for s in test_samples)
    return PreparedReconstruction(prior, noises, observations)


def reconstruct_prepared(prep: PreparedReconstruction, index: int,
                         lam: float, pairwise_mode: str,
                         observation: str,
                         graph: NeighborhoodGraph) -> EffectMap:
    """Solve one prepared test sample under one (lam, mode) setting."""
    noise = prep.noises[index]
    if observation == "raw":
        observed = prep.observations[index]
    elif observation == "bootstrap_mean":
        observed = noise.mean_map
    else:
        raise ValueError(f"observation must be one of {OBSERVATION_CHOICES}")
    system = assemble_system(observed, noise, prep.prior, lam, graph,
                             pairwise_mode)
    return solve_map(system)


def reconstruct_for_sample(classifier_kind: str, dataset: Dataset,
                           prior: PriorParams, config: RsmConfig,
                           graph: NeighborhoodGraph,
                           test_sample: Sample) -> EffectMap:
    """Full per-sample reconstruction from a training set and a prior.

    Trains the bootstrap ensemble for the noise estimate, picks the
    observation per ``config.observation``, assembles, and solves.  The
    caller must keep ``test_sample`` out of ``dataset`` and must have
    estimated ``prior`` with the same classifier kind and graph.
    """
    noise = estimate_noise_and_mean(
        classifier_kind, dataset, test_sample,
        n_bootstrap=config.n_bootstrap, seed=config.seed, eta=config.eta,
    )
    if config.observation == "raw":
        model = train_model(classifier_kind, dataset, config.eta)
        observed = raw_effect_map(model, test_sample)
    else:
        observed = noise.mean_map
    system = assemble_system(observed, noise, prior, config.lam, graph,
                             config.pairwise_mode)
    return solve_map(system)
