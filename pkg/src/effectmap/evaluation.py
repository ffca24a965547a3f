"""Metrics and the cross-validated benchmark harness.

The harness scores every combination of method, coupling weight,
pairwise mode, FPR budget, and effect size under repeated stratified
cross-validation on synthetic data.  Thresholds are always fit on the
training portion of a fold (by an inner control-reconstruction CV) and
applied to held-out samples, so reported FPR is honest.  Work units are
independent (effect size, shuffle, fold, classifier) jobs; the report
assembly is a fixed-order serial merge, which keeps the output
byte-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .baseline import fit_normative, outlier_score_map
from .classifiers import CLASSIFIER_KINDS, stratified_folds
from .core import (
    Dataset,
    DimensionError,
    Sample,
    atomic_write_text,
    build_grid_graph,
)
from .estimation import derive_seed
from .reconstruct import (
    OBSERVATION_CHOICES,
    PAIRWISE_MODES,
    RsmConfig,
    prepare_reconstruction,
    reconstruct_prepared,
)
from .synthdata import SynthConfig, generate_control_image, generate_dataset
from .thresholding import compute_threshold, cv_threshold, threshold_map

__all__ = [
    "METHODS",
    "dsc",
    "fpr",
    "occurrence_map",
    "pearson_corr",
    "group_t_stat",
    "ExperimentConfig",
    "ExperimentReport",
    "config_hash",
    "run_experiment",
    "save_report",
    "AuxMarkerResult",
    "aux_marker_study",
]

METHODS = ("rsm", "wbs", "nbs", "outlier")

LONG_COLUMNS = ("classifier", "method", "lam", "pairwise_mode", "l_fpr",
                "effect_size", "shuffle", "fold", "n_cases", "n_controls",
                "mean_dsc", "mean_fpr")
SUMMARY_COLUMNS = ("classifier", "method", "lam", "pairwise_mode", "l_fpr",
                   "effect_size", "n_cases", "n_controls",
                   "mean_dsc", "mean_fpr")

# seed stream tags of the harness; estimation and thresholding use
# their own tags on seeds already derived from these
_STREAM_SHUFFLE = 402
_STREAM_INNER_FOLDS = 403
_STREAM_INNER_PREP = 404
_STREAM_OUTER_PREP = 405
_STREAM_AUX = 406


def _detections(q) -> np.ndarray:
    return np.asarray(getattr(q, "detections", q)).astype(bool)


def dsc(q, truth) -> float:
    """Dice overlap of two binary maps; two empty maps agree perfectly."""
    a, b = _detections(q), _detections(truth)
    if a.shape != b.shape:
        raise DimensionError("binary maps differ in length")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / (na + nb)


def fpr(q) -> float:
    """Fraction of detections; the false-positive rate on a control."""
    a = _detections(q)
    return float(a.sum()) / a.size


def occurrence_map(maps, node_count: int | None = None) -> np.ndarray:
    """Per-site count of detections across a collection of binary maps."""
    if len(maps) == 0:
        if node_count is None:
            raise ValueError("empty collection needs an explicit node_count")
        return np.zeros(node_count, dtype=np.int64)
    stack = np.stack([_detections(m) for m in maps])
    if node_count is not None and stack.shape[1] != node_count:
        raise DimensionError("maps do not match node_count")
    return stack.sum(axis=0).astype(np.int64)


def pearson_corr(x, y) -> float:
    """Sample Pearson correlation; needs 3 points and spread in both."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("x and y must be vectors of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0.0:
        raise ValueError("zero variance in x or y")
    return float(np.sum(dx * dy) / denom)


def group_t_stat(values_case, values_control) -> float:
    """Welch two-sample t-statistic, case group minus control group."""
    a = np.asarray(values_case, dtype=np.float64)
    b = np.asarray(values_control, dtype=np.float64)
    if a.size < 3 or b.size < 3:
        raise ValueError("need at least 3 points per group")
    se2 = a.var(ddof=1) / a.size + b.var(ddof=1) / b.size
    if se2 == 0.0:
        raise ValueError("zero variance in both groups")
    return float((a.mean() - b.mean()) / np.sqrt(se2))


# ---------------------------------------------------------------------------
# experiment harness

@dataclass(frozen=True)
class ExperimentConfig:
    """Axes and settings of one benchmark run.

    The report covers the full cartesian product of methods, coupling
    weights, pairwise modes, FPR budgets, and effect sizes; methods that
    ignore an axis repeat their metrics along it so the row count stays
    the plain product.
    """

    width: int = 50
    height: int = 50
    sigma_n: float = 50.0
    smooth_sigma: float = 2.5
    n_controls: int = 40
    n_cases: int = 40
    effect_sizes: tuple = (1.0, 1.4, 2.0)
    classifiers: tuple = ("ewgmm",)
    methods: tuple = METHODS
    lambdas: tuple = (1.0,)
    pairwise_modes: tuple = ("nonstationary",)
    l_fprs: tuple = (0.01,)
    n_bootstrap: int = 20
    shuffles: int = 2
    folds: int = 5
    observation: str = "raw"
    prior_cv: bool = True
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("effect_sizes", "classifiers", "methods", "lambdas",
                     "pairwise_modes", "l_fprs"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if not value:
                raise ValueError(f"{name} must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for c in self.classifiers:
            if c not in CLASSIFIER_KINDS:
                raise ValueError(f"unknown classifier {c!r}")
        for mode in self.pairwise_modes:
            if mode not in PAIRWISE_MODES:
                raise ValueError(f"unknown pairwise mode {mode!r}")
        if self.observation not in OBSERVATION_CHOICES:
            raise ValueError(f"observation must be one of {OBSERVATION_CHOICES}")
        if any(l <= 0 or l >= 1 for l in self.l_fprs):
            raise ValueError("l_fprs must lie in (0, 1)")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("lambdas must be >= 0")
        if self.shuffles < 1:
            raise ValueError("shuffles must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        # every fold must hold samples of both labels
        if self.n_controls < self.folds or self.n_cases < self.folds:
            raise ValueError("need at least `folds` controls and cases")
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an int")


@dataclass(frozen=True)
class ExperimentReport:
    """Long per-fold rows, their product summary, and run metadata."""

    long_rows: tuple
    summary_rows: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for row in self.long_rows + self.summary_rows:
            if not 0.0 <= row["mean_dsc"] <= 1.0:
                raise ValueError("mean_dsc outside [0, 1]")
            if not 0.0 <= row["mean_fpr"] <= 1.0:
                raise ValueError("mean_fpr outside [0, 1]")


def config_hash(config: ExperimentConfig) -> str:
    """Digest of the canonical JSON form of a config."""
    payload = json.dumps(asdict(config), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _continuous_maps(method, setting, prep_out, normative, samples, graph,
                     observation):
    lam, mode = setting
    if method == "rsm":
        return [reconstruct_prepared(prep_out, i, lam, mode, observation,
                                     graph)
                for i in range(len(samples))]
    if method == "wbs":
        return [n.mean_map for n in prep_out.noises]
    if method == "nbs":
        return list(prep_out.observations)
    return [outlier_score_map(normative, s) for s in samples]


def _run_unit(config: ExperimentConfig, e_idx: int, shuffle: int, fold: int,
              kind: str):
    """All rows of one (effect size, shuffle, fold, classifier) cell."""
    effect_size = config.effect_sizes[e_idx]
    synth = SynthConfig(
        width=config.width, height=config.height, sigma_n=config.sigma_n,
        smooth_sigma=config.smooth_sigma, effect_size=effect_size,
        n_controls=config.n_controls, n_cases=config.n_cases,
        seed=config.seed,
    )
    dataset, truths = generate_dataset(synth)
    graph = build_grid_graph(config.width, config.height)
    y = dataset.labels()
    assign = stratified_folds(
        y, config.folds, derive_seed(config.seed, _STREAM_SHUFFLE, e_idx,
                                     shuffle))
    train = dataset.subset(np.flatnonzero(assign != fold))
    test_idx = np.flatnonzero(assign == fold)
    test_samples = [dataset.samples[i] for i in test_idx]
    needs_prep = any(m in config.methods for m in ("rsm", "wbs", "nbs"))
    settings = [(lam, mode) for lam in config.lambdas
                for mode in config.pairwise_modes]

    # thresholds come from control reconstructions inside the training
    # portion, fold by fold, pooled per method and setting
    y_tr = train.labels()
    inner = stratified_folds(
        y_tr, config.folds, derive_seed(config.seed, _STREAM_INNER_FOLDS,
                                        e_idx, shuffle, fold))
    pools = {("rsm",) + s: [] for s in settings} if "rsm" in config.methods \
        else {}
    for m in ("wbs", "nbs", "outlier"):
        if m in config.methods:
            pools[(m,)] = []
    for g in range(config.folds):
        inner_train = train.subset(np.flatnonzero(inner != g))
        ctrl_idx = np.flatnonzero((inner == g) & (y_tr == 0))
        ctrl_samples = [train.samples[i] for i in ctrl_idx]
        if not ctrl_samples:
            continue
        if needs_prep:
            prep = prepare_reconstruction(
                kind, inner_train, graph, ctrl_samples,
                n_bootstrap=config.n_bootstrap, folds=config.folds,
                seed=derive_seed(config.seed, _STREAM_INNER_PREP, e_idx,
                                 shuffle, fold, g),
                eta=config.eta, prior_cv=config.prior_cv,
            )
            for i in range(len(ctrl_samples)):
                if "rsm" in config.methods:
                    for s in settings:
                        pools[("rsm",) + s].append(reconstruct_prepared(
                            prep, i, s[0], s[1], config.observation, graph))
                if "wbs" in config.methods:
                    pools[("wbs",)].append(prep.noises[i].mean_map)
                if "nbs" in config.methods:
                    pools[("nbs",)].append(prep.observations[i])
        if "outlier" in config.methods:
            normative = fit_normative(inner_train)
            pools[("outlier",)].extend(
                outlier_score_map(normative, s) for s in ctrl_samples)
    taus = {key: {l: compute_threshold(pool, l).tau for l in config.l_fprs}
            for key, pool in pools.items()}

    prep_out = None
    if needs_prep:
        prep_out = prepare_reconstruction(
            kind, train, graph, test_samples,
            n_bootstrap=config.n_bootstrap, folds=config.folds,
            seed=derive_seed(config.seed, _STREAM_OUTER_PREP, e_idx, shuffle,
                             fold),
            eta=config.eta, prior_cv=config.prior_cv,
        )
    normative = fit_normative(train) if "outlier" in config.methods else None

    is_case = y[test_idx] == 1
    n_cases = int(is_case.sum())
    n_controls = int(test_idx.size - n_cases)
    rows = []
    for method in config.methods:
        metric_cache = {}
        for lam, mode in settings:
            key = ("rsm", lam, mode) if method == "rsm" else (method,)
            cache_key = key if method == "rsm" else method
            if cache_key not in metric_cache:
                maps = _continuous_maps(method, (lam, mode), prep_out,
                                        normative, test_samples, graph,
                                        config.observation)
                per_l = {}
                for l in config.l_fprs:
                    binary = [threshold_map(m, taus[key][l]) for m in maps]
                    ds_vals = [dsc(binary[i], truths[test_idx[i]])
                               for i in range(len(binary)) if is_case[i]]
                    fp_vals = [fpr(binary[i])
                               for i in range(len(binary)) if not is_case[i]]
                    per_l[l] = (float(np.mean(ds_vals)),
                                float(np.mean(fp_vals)))
                metric_cache[cache_key] = per_l
            per_l = metric_cache[cache_key]
            for l in config.l_fprs:
                mean_dsc, mean_fpr = per_l[l]
                rows.append({
                    "classifier": kind, "method": method, "lam": lam,
                    "pairwise_mode": mode, "l_fpr": l,
                    "effect_size": effect_size, "shuffle": shuffle,
                    "fold": fold, "n_cases": n_cases,
                    "n_controls": n_controls, "mean_dsc": mean_dsc,
                    "mean_fpr": mean_fpr,
                })
    return rows


def _summarize(config: ExperimentConfig, long_rows) -> tuple:
    acc = {}
    for row in long_rows:
        key = (row["classifier"], row["method"], row["lam"],
               row["pairwise_mode"], row["l_fpr"], row["effect_size"])
        slot = acc.setdefault(key, [0.0, 0, 0.0, 0])
        slot[0] += row["mean_dsc"] * row["n_cases"]
        slot[1] += row["n_cases"]
        slot[2] += row["mean_fpr"] * row["n_controls"]
        slot[3] += row["n_controls"]
    rows = []
    for kind in config.classifiers:
        for method in config.methods:
            for lam in config.lambdas:
                for mode in config.pairwise_modes:
                    for l in config.l_fprs:
                        for e in config.effect_sizes:
                            s = acc[(kind, method, lam, mode, l, e)]
                            rows.append({
                                "classifier": kind, "method": method,
                                "lam": lam, "pairwise_mode": mode,
                                "l_fpr": l, "effect_size": e,
                                "n_cases": s[1], "n_controls": s[3],
                                "mean_dsc": s[0] / s[1],
                                "mean_fpr": s[2] / s[3],
                            })
    return tuple(rows)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Score the full config product under repeated cross-validation.

    ``jobs`` bounds the worker processes; every worker count produces
    the identical report because each (effect size, shuffle, fold,
    classifier) cell is computed independently and merged in a fixed
    order.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    units = [(e_idx, shuffle, fold, kind)
             for kind in config.classifiers
             for e_idx in range(len(config.effect_sizes))
             for shuffle in range(config.shuffles)
             for fold in range(config.folds)]
    if jobs == 1:
        results = [_run_unit(config, *u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_unit, config, *u) for u in units]
            results = [f.result() for f in futures]
    long_rows = tuple(row for unit_rows in results for row in unit_rows)
    return ExperimentReport(
        long_rows=long_rows,
        summary_rows=_summarize(config, long_rows),
        metadata={"config_hash": config_hash(config), "seed": config.seed},
    )


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _rows_to_csv(rows, columns, metadata) -> str:
    lines = [f"# config_hash={metadata.get('config_hash', '')}",
             f"# seed={metadata.get('seed', '')}",
             ",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def save_report(report: ExperimentReport, out_dir: str) -> dict:
    """Write the long and summary CSVs; returns their paths.

    Files carry the config hash and master seed as comment lines and are
    written atomically, so a rerun either fully replaces them or leaves
    them untouched.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "long": os.path.join(out_dir, "report_long.csv"),
        "summary": os.path.join(out_dir, "report_summary.csv"),
    }
    atomic_write_text(paths["long"],
                      _rows_to_csv(report.long_rows, LONG_COLUMNS,
                                   report.metadata))
    atomic_write_text(paths["summary"],
                      _rows_to_csv(report.summary_rows, SUMMARY_COLUMNS,
                                   report.metadata))
    return paths


# ---------------------------------------------------------------------------
# auxiliary-marker correlation study

@dataclass(frozen=True)
class AuxMarkerResult:
    """Per-subject detection counts against a size-derived marker."""

    true_sizes: np.ndarray
    detected_counts: np.ndarray
    noisy_marker: np.ndarray
    control_counts: np.ndarray
    r_true: float
    r_noisy: float
    t_stat: float


def aux_marker_study(classifier_kind: str = "ewgmm", n_pairs: int = 14,
                     side_range: tuple = (6, 16), width: int = 26,
                     height: int = 26, effect_size: float = 2.0,
                     sigma_n: float = 50.0, smooth_sigma: float = 2.5,
                     lam: float = 1.0, l_fpr: float = 0.05,
                     n_bootstrap: int = 12, folds: int = 2,
                     marker_noise: float = 4.0,
                     seed: int = 0) -> AuxMarkerResult:
    """Correlate detected-site counts with a synthetic severity marker.

    Cases carry a centered square effect whose side varies per subject;
    the marker is the true affected-site count, optionally blurred with
    seeded Gaussian noise.  Each subject is reconstructed and
    thresholded by models fit on the folds that exclude it, then the
    per-case detection counts are correlated against both markers and
    compared between groups.
    """
    if n_pairs < 2 * folds:
        raise ValueError("need at least 2 * folds case/control pairs")
    lo, hi = side_range
    if not 1 <= lo <= hi <= min(width, height):
        raise ValueError("side_range must fit inside the image")
    rng = np.random.default_rng(derive_seed(seed, _STREAM_AUX))
    sides = rng.integers(lo, hi + 1, size=n_pairs)
    synth = SynthConfig(width=width, height=height, sigma_n=sigma_n,
                        smooth_sigma=smooth_sigma, effect_size=effect_size,
                        n_controls=1, n_cases=0, seed=seed)

    samples, sizes = [], []
    for i in range(n_pairs):
        samples.append(generate_control_image(synth, (seed, 2 * i)))
        sizes.append(0)
    for i in range(n_pairs):
        base = generate_control_image(synth, (seed, 2 * i + 1))
        side = int(sides[i])
        r0 = (height - side) // 2
        c0 = (width - side) // 2
        mask = np.zeros((height, width), dtype=bool)
        mask[r0:r0 + side, c0:c0 + side] = True
        values = base.measurements.copy()
        values[mask.ravel()] += effect_size * sigma_n
        samples.append(Sample(values, 1))
        sizes.append(int(mask.sum()))
    dataset = Dataset(tuple(samples))
    graph = build_grid_graph(width, height)

    config = RsmConfig(lam=lam, l_fpr=l_fpr, n_bootstrap=n_bootstrap,
                       folds=folds, seed=seed)
    y = dataset.labels()
    assign = stratified_folds(y, folds,
                              derive_seed(seed, _STREAM_SHUFFLE, 0, 0))
    counts = np.zeros(2 * n_pairs, dtype=np.int64)
    for f in range(folds):
        train = dataset.subset(np.flatnonzero(assign != f))
        held_idx = np.flatnonzero(assign == f)
        held = [dataset.samples[i] for i in held_idx]
        tau = cv_threshold(classifier_kind, train, graph, config).tau
        prep = prepare_reconstruction(
            classifier_kind, train, graph, held,
            n_bootstrap=n_bootstrap, folds=folds,
            seed=derive_seed(seed, _STREAM_OUTER_PREP, 0, 0, f), eta=config.eta,
        )
        for i, idx in enumerate(held_idx):
            rec = reconstruct_prepared(prep, i, lam, config.pairwise_mode,
                                       config.observation, graph)
            counts[idx] = int(threshold_map(rec, tau).detections.sum())

    sizes = np.asarray(sizes, dtype=np.float64)
    case = y == 1
    true_sizes = sizes[case]
    case_counts = counts[case].astype(np.float64)
    noisy = true_sizes + rng.normal(0.0, marker_noise, true_sizes.size)
    return AuxMarkerResult(
        true_sizes=true_sizes,
        detected_counts=counts[case],
        noisy_marker=noisy,
        control_counts=counts[~case],
        r_true=pearson_corr(case_counts, true_sizes),
        r_noisy=pearson_corr(case_counts, noisy),
        t_stat=group_t_stat(case_counts, counts[~case].astype(np.float64)),
    )
