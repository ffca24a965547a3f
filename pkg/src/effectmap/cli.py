"""Command-line pipeline: generate, train, reconstruct, threshold, score.

Subcommands
-----------
synth-gen    write a synthetic benchmark bundle (dataset, graph, truth masks)
train        fit a classifier from a dataset CSV, optionally with the
             smoothing prior for later reconstruction
reconstruct  solve denoised effect maps for test samples against a
             trained prior
threshold    pool reconstructed control maps into an FPR-budget threshold
evaluate     run the cross-validated benchmark and write report CSVs
occurrence   count per-site detections across subject maps

Conventions shared by every subcommand: settings come from an optional
flat JSON config file (scalar values or flat lists) with command-line
flags taking precedence; every output embeds the hash of its effective
settings and the master seed (as '#' header comments or JSON fields);
all files are written atomically via a temp-file rename, so a rerun
either fully replaces an output or leaves it untouched.

Exit codes: 0 on success, 1 on a usage error (bad flags; the synopsis
goes to standard error), 2 on a runtime error (missing files, malformed
inputs, failed computations).

The environment variable ``EFFECTMAP_OUT_DIR`` substitutes for a
missing ``--out`` on the directory-writing subcommands (synth-gen and
evaluate); an explicit ``--out`` always wins.  No other setting can be
overridden from the environment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .classifiers import (
    CLASSIFIER_KINDS,
    raw_effect_map,
    save_model_json,
    train_model,
    tune_regularization,
)
from .core import (
    BinaryEffectMap,
    DimensionError,
    EffectMap,
    ParseError,
    atomic_write_text,
    build_grid_graph,
    load_dataset_csv,
    load_graph_edgelist,
    save_dataset_csv,
    save_graph_edgelist,
    save_map_csv,
)
from .estimation import (
    BootstrapEnsemble,
    estimate_prior_params,
    load_prior_params,
    noise_from_replicate_maps,
    save_prior_params,
)
from .evaluation import (
    METHODS,
    ExperimentConfig,
    config_hash,
    occurrence_map,
    run_experiment,
    save_report,
)
from .reconstruct import (
    OBSERVATION_CHOICES,
    PAIRWISE_MODES,
    RsmConfig,
    assemble_system,
    solve_map,
)
from .synthdata import SynthConfig, generate_dataset
from .thresholding import compute_threshold, threshold_map

__all__ = ["main", "build_parser", "CliError"]

_OUT_DIR_ENV = "EFFECTMAP_OUT_DIR"

_SCALARS = (str, int, float, bool, type(None))


class CliError(RuntimeError):
    """A pipeline step could not run with the given inputs."""


class _UsageError(Exception):
    """Raised by the parser instead of exiting, so main() can return 1."""


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors raise instead of calling sys.exit."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing


def _settings_hash(settings: dict) -> str:
    """Digest of the canonical JSON form of the effective settings."""
    payload = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _require_file(path) -> None:
    if not os.path.isfile(path):
        raise CliError(f"missing input file: {path}")


def _read_json_config(path) -> dict:
    _require_file(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a flat JSON object")
    for key, value in data.items():
        flat = isinstance(value, _SCALARS) or (
            isinstance(value, list)
            and all(isinstance(v, _SCALARS) for v in value)
        )
        if not flat:
            raise CliError(
                f"{path}: config key {key!r} must be a scalar or a flat list"
            )
    return data


def _merge_settings(args, keys) -> dict:
    """Config-file values under ``keys``, with explicit flags on top."""
    merged = {}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in _read_json_config(config_path).items():
            if key not in keys:
                raise CliError(f"{config_path}: unknown config key {key!r}")
            merged[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if isinstance(merged.get("prior_cv"), str):
        merged["prior_cv"] = merged["prior_cv"] == "true"
    return merged


def _resolve_out_dir(args) -> str:
    out = getattr(args, "out", None) or os.environ.get(_OUT_DIR_ENV)
    if not out:
        raise CliError(
            f"no output directory: pass --out or set {_OUT_DIR_ENV}"
        )
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_matrix_csv(path, matrix, comments=()) -> None:
    """One comma-separated row per map; '#' comments lead the file."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionError("matrix output must be 2-d")
    lines = [f"# {comment}" for comment in comments]
    if np.issubdtype(matrix.dtype, np.floating):
        lines.extend(",".join(repr(float(v)) for v in row) for row in matrix)
    else:
        lines.extend(",".join(str(int(v)) for v in row) for row in matrix)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_matrix_csv(path) -> np.ndarray:
    """Read a map-per-row CSV back as a float64 matrix."""
    _require_file(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if rows and len(row) != len(rows[0]):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(rows[0])} fields, "
                    f"got {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands


_SYNTH_KEYS = ("width", "height", "sigma_n", "smooth_sigma", "effect_size",
               "n_controls", "n_cases", "seed")


def _cmd_synth_gen(args) -> int:
    out_dir = _resolve_out_dir(args)
    config = SynthConfig(**_merge_settings(args, _SYNTH_KEYS))
    dataset, truths = generate_dataset(config)
    graph = build_grid_graph(config.width, config.height)
    digest = _settings_hash(asdict(config))
    comments = (f"config_hash={digest}", f"seed={config.seed}")
    save_dataset_csv(dataset, os.path.join(out_dir, "dataset.csv"), comments)
    save_graph_edgelist(graph, os.path.join(out_dir, "graph.txt"), comments)
    truth_matrix = np.stack([t.detections for t in truths])
    _write_matrix_csv(os.path.join(out_dir, "truths.csv"), truth_matrix,
                      comments)
    _write_json(os.path.join(out_dir, "meta.json"),
                dict(asdict(config), config_hash=digest))
    return 0


_TRAIN_KEYS = ("kind", "eta", "folds", "n_bootstrap", "prior_cv", "seed")


def _cmd_train(args) -> int:
    _require_file(args.data)
    settings = _merge_settings(args, _TRAIN_KEYS)
    kind = settings.get("kind")
    if kind is None:
        raise CliError("no classifier kind: pass --kind or a 'kind' config entry")
    if kind not in CLASSIFIER_KINDS:
        raise CliError(f"kind must be one of {CLASSIFIER_KINDS}, got {kind!r}")
    dataset = load_dataset_csv(args.data)
    folds = int(settings.get("folds", 5))
    n_bootstrap = int(settings.get("n_bootstrap", 100))
    prior_cv = bool(settings.get("prior_cv", True))
    seed = int(settings.get("seed", 0))
    if args.tune:
        eta = tune_regularization(dataset, kind, folds=folds, seed=seed)
    else:
        eta = float(settings.get("eta", 1.0))
    effective = {"kind": kind, "eta": eta, "folds": folds,
                 "n_bootstrap": n_bootstrap, "prior_cv": prior_cv,
                 "seed": seed, "tuned": bool(args.tune)}
    digest = _settings_hash(effective)
    model = train_model(kind, dataset, eta)
    save_model_json(model, args.out)
    sidecar = dict(effective, config_hash=digest)
    _write_json(args.out + ".meta.json", sidecar)
    if args.prior_out:
        if not args.graph:
            raise CliError("--prior-out also needs --graph")
        _require_file(args.graph)
        graph = load_graph_edgelist(args.graph)
        if graph.node_count != dataset.d:
            raise CliError(
                f"graph has {graph.node_count} nodes, dataset has "
                f"{dataset.d} measurements"
            )
        prior = estimate_prior_params(
            kind, dataset, graph, folds=folds, n_bootstrap=n_bootstrap,
            seed=seed, use_cv=prior_cv, eta=eta,
        )
        save_prior_params(prior, graph, args.prior_out, metadata=sidecar)
    return 0


_RECON_KEYS = ("kind", "lam", "l_fpr", "n_bootstrap", "folds",
               "pairwise_mode", "observation", "prior_cv", "eta", "seed")


def _cmd_reconstruct(args) -> int:
    for path in (args.data, args.graph, args.test):
        _require_file(path)
    settings = _merge_settings(args, _RECON_KEYS)
    kind = settings.pop("kind", None)
    train = load_dataset_csv(args.data)
    graph = load_graph_edgelist(args.graph)
    prior, prior_meta = load_prior_params(args.prior)
    test = load_dataset_csv(args.test)
    if kind is None:
        kind = prior_meta.get("kind")
    if kind is None:
        raise CliError(
            "no classifier kind: pass --kind (none stored in the prior metadata)"
        )
    if kind not in CLASSIFIER_KINDS:
        raise CliError(f"kind must be one of {CLASSIFIER_KINDS}, got {kind!r}")
    config = RsmConfig(**settings)
    if not (train.d == graph.node_count == prior.d == test.d):
        raise CliError("dataset, graph, prior, and test dimensions differ")
    ensemble = BootstrapEnsemble(kind, train, config.n_bootstrap,
                                 config.seed, config.eta)
    model = None
    if config.observation == "raw":
        model = train_model(kind, train, config.eta)
    rows = []
    for sample in test.samples:
        noise = noise_from_replicate_maps(ensemble.replicate_maps(sample))
        if model is not None:
            observed = raw_effect_map(model, sample)
        else:
            observed = noise.mean_map
        system = assemble_system(observed, noise, prior, config.lam, graph,
                                 config.pairwise_mode)
        rows.append(solve_map(system).values)
    digest = _settings_hash(dict(asdict(config), kind=kind))
    _write_matrix_csv(args.out, np.stack(rows),
                      (f"config_hash={digest}", f"seed={config.seed}"))
    return 0


_THRESHOLD_KEYS = ("l_fpr", "seed")


def _cmd_threshold(args) -> int:
    settings = _merge_settings(args, _THRESHOLD_KEYS)
    l_fpr = float(settings.get("l_fpr", 0.01))
    seed = int(settings.get("seed", 0))
    maps = []
    for path in args.maps:
        maps.extend(_read_matrix_csv(path))
    result = compute_threshold(maps, l_fpr)
    digest = _settings_hash({"l_fpr": l_fpr, "seed": seed,
                             "n_control_maps": result.n_control_maps})
    _write_json(args.out, {
        "tau": result.tau,
        "l_fpr": result.l_fpr,
        "n_control_maps": result.n_control_maps,
        "config_hash": digest,
        "seed": seed,
    })
    return 0


_EVAL_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def _cmd_evaluate(args) -> int:
    out_dir = _resolve_out_dir(args)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    config = ExperimentConfig(**_merge_settings(args, _EVAL_KEYS))
    report = run_experiment(config, jobs=args.jobs)
    save_report(report, out_dir)
    _write_json(os.path.join(out_dir, "config_used.json"),
                dict(asdict(config), config_hash=config_hash(config)))
    return 0


def _cmd_occurrence(args) -> int:
    rows = []
    for path in args.maps:
        rows.extend(_read_matrix_csv(path))
    tau = args.tau
    if args.tau_file is not None:
        if tau is not None:
            raise CliError("pass --tau or --tau-file, not both")
        _require_file(args.tau_file)
        with open(args.tau_file, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if "tau" not in payload:
            raise CliError(f"{args.tau_file}: no 'tau' field")
        tau = float(payload["tau"])
    if tau is not None:
        binaries = [
            threshold_map(EffectMap(np.asarray(row), role="reconstructed"), tau)
            for row in rows
        ]
    else:
        for row in rows:
            if not np.isin(row, (0.0, 1.0)).all():
                raise CliError(
                    "maps are not binary; pass --tau or --tau-file to binarize"
                )
        binaries = [BinaryEffectMap(np.asarray(row).astype(np.uint8))
                    for row in rows]
    counts = occurrence_map(binaries)
    digest = _settings_hash({"tau": tau, "seed": args.seed,
                             "n_maps": len(binaries)})
    save_map_csv(counts, args.out,
                 header_comments=(f"config_hash={digest}", f"seed={args.seed}"))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flag(sub) -> None:
    sub.add_argument("--config", metavar="JSON",
                     help="flat JSON settings file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="effectmap",
        description="Subject-level effect-map reconstruction pipeline.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                required=True)
    out_dir_required = _OUT_DIR_ENV not in os.environ

    synth = sub.add_parser(
        "synth-gen",
        help="generate a synthetic benchmark bundle",
        description="Write dataset.csv, graph.txt, truths.csv, and "
                    "meta.json for a seeded synthetic benchmark.",
    )
    _add_config_flag(synth)
    synth.add_argument("--out", metavar="DIR", required=out_dir_required,
                       help=f"output directory (or set {_OUT_DIR_ENV})")
    synth.add_argument("--width", type=int)
    synth.add_argument("--height", type=int)
    synth.add_argument("--sigma-n", dest="sigma_n", type=float,
                       help="noise scale of the simulated images")
    synth.add_argument("--smooth-sigma", dest="smooth_sigma", type=float,
                       help="Gaussian smoothing width in pixels")
    synth.add_argument("--effect-size", dest="effect_size", type=float,
                       help="planted offset in multiples of sigma-n")
    synth.add_argument("--n-controls", dest="n_controls", type=int)
    synth.add_argument("--n-cases", dest="n_cases", type=int)
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=_cmd_synth_gen)

    train = sub.add_parser(
        "train",
        help="fit a classifier (and optionally the smoothing prior)",
        description="Train a classifier on a dataset CSV and write it as "
                    "JSON; with --graph/--prior-out also estimate and save "
                    "the smoothing prior for later reconstruction.",
    )
    _add_config_flag(train)
    train.add_argument("--data", required=True, metavar="CSV",
                       help="training dataset CSV")
    train.add_argument("--out", required=True, metavar="JSON",
                       help="model output path")
    train.add_argument("--kind", choices=CLASSIFIER_KINDS)
    train.add_argument("--eta", type=float,
                       help="regularization strength for linear kinds")
    train.add_argument("--tune", action="store_true",
                       help="pick eta by cross-validated accuracy")
    train.add_argument("--folds", type=int)
    train.add_argument("--n-bootstrap", dest="n_bootstrap", type=int,
                       help="bootstrap replicates for the prior estimate")
    train.add_argument("--prior-cv", dest="prior_cv",
                       choices=("true", "false"),
                       help="hold samples out of their own prior ensembles")
    train.add_argument("--seed", type=int)
    train.add_argument("--graph", metavar="TXT",
                       help="graph edge list (needed with --prior-out)")
    train.add_argument("--prior-out", dest="prior_out", metavar="PREFIX",
                       help="also estimate the prior and save it under "
                            "this file prefix")
    train.set_defaults(func=_cmd_train)

    recon = sub.add_parser(
        "reconstruct",
        help="solve denoised effect maps for test samples",
        description="Reconstruct one denoised map per test-CSV row from a "
                    "training dataset, a graph, and saved prior files; "
                    "writes one map per row.",
    )
    _add_config_flag(recon)
    recon.add_argument("--data", required=True, metavar="CSV",
                       help="training dataset CSV")
    recon.add_argument("--graph", required=True, metavar="TXT")
    recon.add_argument("--prior", required=True, metavar="PREFIX",
                       help="file prefix used when the prior was saved")
    recon.add_argument("--test", required=True, metavar="CSV",
                       help="samples to reconstruct, same CSV format")
    recon.add_argument("--out", required=True, metavar="CSV",
                       help="output matrix CSV, one map per row")
    recon.add_argument("--kind", choices=CLASSIFIER_KINDS,
                       help="classifier kind (default: from prior metadata)")
    recon.add_argument("--lam", type=float,
                       help="coupling weight of the smoothing term")
    recon.add_argument("--l-fpr", dest="l_fpr", type=float)
    recon.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)
    recon.add_argument("--folds", type=int)
    recon.add_argument("--pairwise-mode", dest="pairwise_mode",
                       choices=PAIRWISE_MODES)
    recon.add_argument("--observation", choices=OBSERVATION_CHOICES,
                       help="feed the raw single-model map or the "
                            "bootstrap-average map to the solver")
    recon.add_argument("--prior-cv", dest="prior_cv",
                       choices=("true", "false"))
    recon.add_argument("--eta", type=float)
    recon.add_argument("--seed", type=int)
    recon.set_defaults(func=_cmd_reconstruct)

    thresh = sub.add_parser(
        "threshold",
        help="compute the FPR-budget threshold from control maps",
        description="Pool reconstructed control maps (matrix CSVs, one map "
                    "per row) and write the smallest threshold keeping the "
                    "pooled exceedance fraction within the budget.",
    )
    _add_config_flag(thresh)
    thresh.add_argument("--maps", required=True, nargs="+", metavar="CSV",
                        help="control map matrix CSVs to pool")
    thresh.add_argument("--out", required=True, metavar="JSON",
                        help="threshold result file")
    thresh.add_argument("--l-fpr", dest="l_fpr", type=float,
                        help="false-positive-rate budget (default 0.01)")
    thresh.add_argument("--seed", type=int,
                        help="recorded in the output; this step draws no "
                             "random numbers")
    thresh.set_defaults(func=_cmd_threshold)

    evaluate = sub.add_parser(
        "evaluate",
        help="run the cross-validated benchmark and write report CSVs",
        description="Score the configured methods over repeated stratified "
                    "cross-validation on regenerated synthetic data; writes "
                    "report_long.csv, report_summary.csv, and "
                    "config_used.json.",
    )
    _add_config_flag(evaluate)
    evaluate.add_argument("--out", metavar="DIR", required=out_dir_required,
                          help=f"output directory (or set {_OUT_DIR_ENV})")
    evaluate.add_argument("--jobs", type=int, default=1,
                          help="worker processes; any value yields "
                               "identical outputs (default 1)")
    evaluate.add_argument("--width", type=int)
    evaluate.add_argument("--height", type=int)
    evaluate.add_argument("--sigma-n", dest="sigma_n", type=float)
    evaluate.add_argument("--smooth-sigma", dest="smooth_sigma", type=float)
    evaluate.add_argument("--n-controls", dest="n_controls", type=int)
    evaluate.add_argument("--n-cases", dest="n_cases", type=int)
    evaluate.add_argument("--effect-size", dest="effect_sizes", type=float,
                          action="append", metavar="X",
                          help="repeatable; overrides the effect-size axis")
    evaluate.add_argument("--classifier", dest="classifiers",
                          choices=CLASSIFIER_KINDS, action="append",
                          help="repeatable; overrides the classifier axis")
    evaluate.add_argument("--method", dest="methods", choices=METHODS,
                          action="append",
                          help="repeatable; overrides the method axis")
    evaluate.add_argument("--lam", dest="lambdas", type=float,
                          action="append", metavar="X",
                          help="repeatable; overrides the coupling-weight axis")
    evaluate.add_argument("--pairwise-mode", dest="pairwise_modes",
                          choices=PAIRWISE_MODES, action="append",
                          help="repeatable; overrides the pairwise-mode axis")
    evaluate.add_argument("--l-fpr", dest="l_fprs", type=float,
                          action="append", metavar="X",
                          help="repeatable; overrides the FPR-budget axis")
    evaluate.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)
    evaluate.add_argument("--shuffles", type=int)
    evaluate.add_argument("--folds", type=int)
    evaluate.add_argument("--observation", choices=OBSERVATION_CHOICES)
    evaluate.add_argument("--prior-cv", dest="prior_cv",
                          choices=("true", "false"))
    evaluate.add_argument("--eta", type=float)
    evaluate.add_argument("--seed", type=int)
    evaluate.set_defaults(func=_cmd_evaluate)

    occur = sub.add_parser(
        "occurrence",
        help="count per-site detections across subject maps",
        description="Read map matrix CSVs (one map per row), binarize with "
                    "a threshold if the maps are continuous, and write the "
                    "per-site detection counts as one column.",
    )
    occur.add_argument("--maps", required=True, nargs="+", metavar="CSV")
    occur.add_argument("--out", required=True, metavar="CSV")
    occur.add_argument("--tau", type=float,
                       help="binarize at this threshold (strict excess)")
    occur.add_argument("--tau-file", dest="tau_file", metavar="JSON",
                       help="read the threshold from a threshold result file")
    occur.add_argument("--seed", type=int, default=0,
                       help="recorded in the output; this step draws no "
                            "random numbers")
    occur.set_defaults(func=_cmd_occurrence)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return args.func(args)
    except Exception as exc:
        print(f"effectmap: error: {exc}", file=sys.stderr)
        return 2
