import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from effectmap.core import BinaryEffectMap, DimensionError
from effectmap.evaluation import (
    LONG_COLUMNS,
    SUMMARY_COLUMNS,
    AuxMarkerResult,
    ExperimentConfig,
    ExperimentReport,
    aux_marker_study,
    config_hash,
    dsc,
    fpr,
    group_t_stat,
    occurrence_map,
    pearson_corr,
    run_experiment,
    save_report,
)


def bmap(bits):
    return BinaryEffectMap(np.asarray(bits, dtype=np.uint8))


# ---------------------------------------------------------------------------
# metrics

def test_dsc_examples():
    assert dsc(bmap([1, 1, 0]), bmap([1, 1, 0])) == 1.0
    assert dsc(bmap([1, 0, 0]), bmap([0, 1, 1])) == 0.0
    q = bmap([1] * 10 + [0] * 10)
    t = bmap([0] * 5 + [1] * 10 + [0] * 5)
    assert dsc(q, t) == 0.5
    assert dsc(bmap([0, 0]), bmap([0, 0])) == 1.0


def test_dsc_length_mismatch():
    with pytest.raises(DimensionError):
        dsc(bmap([1, 0]), bmap([1, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60),
       st.data())
def test_dsc_symmetric_and_bounded(a_bits, data):
    b_bits = data.draw(st.lists(st.integers(0, 1), min_size=len(a_bits),
                                max_size=len(a_bits)))
    a, b = bmap(a_bits), bmap(b_bits)
    assert dsc(a, b) == dsc(b, a)
    assert 0.0 <= dsc(a, b) <= 1.0


def test_fpr_examples():
    detections = np.zeros(10000, dtype=np.uint8)
    detections[:100] = 1
    assert fpr(BinaryEffectMap(detections)) == 0.01
    assert fpr(bmap([0, 0, 0])) == 0.0
    assert fpr(bmap([1, 1, 1])) == 1.0


def test_occurrence_examples():
    out = occurrence_map([bmap([1, 0]), bmap([1, 1])])
    np.testing.assert_array_equal(out, [2, 1])
    assert out.dtype == np.int64
    np.testing.assert_array_equal(occurrence_map([], node_count=3),
                                  np.zeros(3))
    with pytest.raises(ValueError):
        occurrence_map([])
    with pytest.raises(DimensionError):
        occurrence_map([bmap([1, 0])], node_count=3)


def test_occurrence_bounded_by_map_count():
    rng = np.random.default_rng(0)
    maps = [bmap(rng.integers(0, 2, 30)) for _ in range(7)]
    assert occurrence_map(maps).max() <= 7


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_corr(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson_corr(x, -3 * x + 5) == pytest.approx(-1.0)


def test_pearson_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(3, 40)))
        y = rng.normal(size=x.size) + 0.5 * x
        assert pearson_corr(x, y) == pytest.approx(
            stats.pearsonr(x, y).statistic, rel=1e-12)


def test_pearson_validation():
    with pytest.raises(ValueError):
        pearson_corr([1.0, 2.0], [3.0, 4.0])
    with pytest.raises(ValueError):
        pearson_corr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        pearson_corr([1.0, 2.0, 3.0], [1.0, 2.0])


def test_t_stat_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.normal(1.0, 2.0, int(rng.integers(3, 30)))
        b = rng.normal(0.0, 0.5, int(rng.integers(3, 30)))
        expected = stats.ttest_ind(a, b, equal_var=False).statistic
        assert group_t_stat(a, b) == pytest.approx(expected, rel=1e-12)


def test_t_stat_sign_follows_case_group():
    case = [5.0, 6.0, 7.0, 8.0]
    control = [1.0, 2.0, 3.0]
    assert group_t_stat(case, control) > 0
    assert group_t_stat(control, case) < 0


def test_t_stat_validation():
    with pytest.raises(ValueError):
        group_t_stat([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        group_t_stat([1.0, 1.0, 1.0], [2.0, 2.0, 2.0])


# ---------------------------------------------------------------------------
# experiment harness, desk scale

def small_config(**kw):
    base = dict(width=40, height=40, n_controls=10, n_cases=10,
                effect_sizes=(2.0,), methods=("rsm", "wbs", "nbs", "outlier"),
                lambdas=(1.0,), l_fprs=(0.05,), n_bootstrap=6, shuffles=1,
                folds=2, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_run():
    config = small_config()
    return config, run_experiment(config)


def test_row_counts_follow_config_product(small_run):
    config, report = small_run
    # per classifier: shuffles x folds x methods x lambdas x modes x l_fprs
    assert len(report.long_rows) == 1 * 2 * 4 * 1 * 1 * 1
    assert len(report.summary_rows) == 4 * 1 * 1 * 1 * 1
    for row in report.long_rows:
        assert row["n_cases"] == 5 and row["n_controls"] == 5


def test_report_and_csv_round(small_run, tmp_path):
    config, report = small_run
    paths = save_report(report, str(tmp_path))
    for name, columns, rows in (("long", LONG_COLUMNS, report.long_rows),
                                ("summary", SUMMARY_COLUMNS,
                                 report.summary_rows)):
        lines = open(paths[name]).read().splitlines()
        assert lines[0] == f"# config_hash={config_hash(config)}"
        assert lines[1] == f"# seed={config.seed}"
        assert lines[2] == ",".join(columns)
        assert len(lines) == 3 + len(rows)


def test_rerun_and_parallel_runs_are_identical(small_run, tmp_path):
    config, report = small_run
    again = run_experiment(config)
    parallel = run_experiment(config, jobs=2)
    dirs = [tmp_path / n for n in ("a", "b", "c")]
    for d, rep in zip(dirs, (report, again, parallel)):
        save_report(rep, str(d))
    for name in ("report_long.csv", "report_summary.csv"):
        blobs = [(d / name).read_bytes() for d in dirs]
        assert blobs[0] == blobs[1] == blobs[2]


def test_summary_aggregates_long_rows(small_run):
    config, report = small_run
    row = report.summary_rows[0]
    matching = [r for r in report.long_rows
                if (r["method"], r["lam"], r["l_fpr"]) ==
                   (row["method"], row["lam"], row["l_fpr"])]
    total = sum(r["n_cases"] for r in matching)
    expected = sum(r["mean_dsc"] * r["n_cases"] for r in matching) / total
    assert row["mean_dsc"] == pytest.approx(expected, rel=1e-12)
    assert row["n_cases"] == total


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(methods=("rsm", "typo"))
    with pytest.raises(ValueError):
        small_config(l_fprs=(0.0,))
    with pytest.raises(ValueError):
        small_config(n_controls=1)
    with pytest.raises(ValueError):
        small_config(effect_sizes=())
    with pytest.raises(ValueError):
        run_experiment(small_config(), jobs=0)


def test_config_hash_distinguishes_configs():
    a, b = small_config(), small_config(seed=4)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(small_config())


def test_report_rejects_out_of_range_metrics():
    row = {"mean_dsc": 1.5, "mean_fpr": 0.0}
    with pytest.raises(ValueError):
        ExperimentReport(long_rows=(row,), summary_rows=())


# ---------------------------------------------------------------------------
# auxiliary-marker protocol

@pytest.fixture(scope="module")
def aux_result():
    return aux_marker_study(seed=1)


def test_aux_counts_track_affected_area(aux_result):
    assert isinstance(aux_result, AuxMarkerResult)
    assert aux_result.r_true > 0.3
    assert -1.0 <= aux_result.r_noisy <= 1.0
    assert aux_result.t_stat > 0  # cases detect more sites than controls


def test_aux_deterministic(aux_result):
    again = aux_marker_study(seed=1)
    np.testing.assert_array_equal(aux_result.detected_counts,
                                  again.detected_counts)
    assert aux_result.r_true == again.r_true
    assert aux_result.r_noisy == again.r_noisy


def test_aux_validation():
    with pytest.raises(ValueError):
        aux_marker_study(n_pairs=3, folds=2)
    with pytest.raises(ValueError):
        aux_marker_study(side_range=(10, 200))
