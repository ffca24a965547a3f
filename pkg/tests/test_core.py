import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effectmap.core import (
    BinaryEffectMap,
    Dataset,
    DimensionError,
    EffectMap,
    NeighborhoodGraph,
    ParseError,
    Sample,
    build_grid_graph,
    load_dataset_csv,
    load_graph_edgelist,
    load_map_csv,
    save_dataset_csv,
    save_graph_edgelist,
    save_map_csv,
)

# Values chosen to stress the decimal text format: subnormals, huge
# magnitudes, negative zero, and a repeating binary fraction.
TRICKY_FLOATS = [0.0, -0.0, 1.0 / 3.0, 5e-324, 1e308, -2.5e-17, 123456.789]


def test_grid_graph_edge_counts():
    assert build_grid_graph(1, 1).edge_count == 0
    assert build_grid_graph(2, 2).edge_count == 4
    assert build_grid_graph(100, 100).edge_count == 19800


@given(st.integers(1, 12), st.integers(1, 12))
def test_grid_graph_edge_count_formula(w, h):
    assert build_grid_graph(w, h).edge_count == 2 * w * h - w - h


def test_grid_graph_degrees():
    w, h = 7, 5
    deg = build_grid_graph(w, h).degrees().reshape(h, w)
    assert deg[0, 0] == deg[0, -1] == deg[-1, 0] == deg[-1, -1] == 2
    assert np.all(deg[1:-1, 1:-1] == 4)
    assert np.all(deg[0, 1:-1] == 3) and np.all(deg[1:-1, 0] == 3)


def test_grid_graph_row_major_ids():
    g = build_grid_graph(3, 2)
    # pixel (r=0,c=1) is node 1; its right neighbor (0,2) is node 2
    assert [1, 2] in g.edges.tolist()
    # vertical neighbor of node 0 is node 3 (one full row below)
    assert [0, 3] in g.edges.tolist()


def test_graph_canonical_edge_storage():
    g = NeighborhoodGraph(4, [(3, 1), (0, 2), (1, 0)])
    assert g.edges.tolist() == [[0, 1], [0, 2], [1, 3]]
    assert not g.edges.flags.writeable


@pytest.mark.parametrize(
    "edges",
    [[(0, 0)], [(0, 1), (1, 0)], [(0, 5)], [(-1, 2)]],
)
def test_graph_rejects_invalid_edges(edges):
    with pytest.raises(ValueError):
        NeighborhoodGraph(4, edges)


def test_graph_allows_empty_edge_set():
    g = NeighborhoodGraph(3, [])
    assert g.edge_count == 0
    assert g.degrees().tolist() == [0, 0, 0]


def test_sample_validation():
    s = Sample([1.0, 2.0], 1)
    assert s.d == 2 and s.label == 1
    with pytest.raises(ValueError):
        Sample([1.0, np.nan], 0)
    with pytest.raises(ValueError):
        Sample([1.0], 2)
    with pytest.raises(DimensionError):
        Sample([[1.0, 2.0]], 0)
    with pytest.raises(ValueError):
        s.measurements[0] = 9.0  # read-only


def test_dataset_requires_consistent_d():
    with pytest.raises(DimensionError):
        Dataset((Sample([1.0, 2.0], 0), Sample([1.0], 1)))


def test_dataset_helpers():
    X = np.arange(12, dtype=float).reshape(4, 3)
    y = [0, 1, 0, 1]
    ds = Dataset.from_arrays(X, y)
    assert (ds.n, ds.d) == (4, 3)
    assert ds.label_counts() == (2, 2)
    np.testing.assert_array_equal(ds.measurement_matrix(), X)
    sub = ds.subset([2, 0])
    np.testing.assert_array_equal(sub.measurement_matrix(), X[[2, 0]])
    assert sub.labels().tolist() == [0, 0]


def test_effect_map_roles_and_immutability():
    m = EffectMap([0.5, -1.0], role="reconstructed")
    assert m.d == 2
    with pytest.raises(ValueError):
        EffectMap([1.0], role="bogus")
    with pytest.raises(ValueError):
        EffectMap([np.inf])
    with pytest.raises(ValueError):
        m.values[0] = 0.0


def test_binary_map_validation():
    b = BinaryEffectMap([0, 1, 1])
    assert b.detections.dtype == np.uint8
    with pytest.raises(ValueError):
        BinaryEffectMap([0, 2])


def test_dataset_csv_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    X = rng.standard_normal((3, 4)) * 1e5
    X[0, :4] = TRICKY_FLOATS[:4]
    ds = Dataset.from_arrays(X, [0, 1, 0])
    path = tmp_path / "data.csv"
    save_dataset_csv(ds, path)
    loaded = load_dataset_csv(path)
    assert loaded.labels().tolist() == [0, 1, 0]
    assert loaded.measurement_matrix().tobytes() == ds.measurement_matrix().tobytes()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.floats(allow_nan=False, allow_infinity=False, width=64),
        min_size=1,
        max_size=6,
    )
)
def test_dataset_csv_round_trip_property(tmp_path_factory, row):
    path = tmp_path_factory.mktemp("csv") / "one.csv"
    ds = Dataset((Sample(np.array(row), 1),))
    save_dataset_csv(ds, path)
    loaded = load_dataset_csv(path)
    assert loaded.measurement_matrix().tobytes() == ds.measurement_matrix().tobytes()


def test_dataset_csv_header_and_comments(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("# generated by a test\nlabel,m0,m1\n\n0,1.5,2.5\n1,0.25,-1.0\n")
    ds = load_dataset_csv(path)
    assert ds.n == 2 and ds.d == 2


def test_dataset_csv_short_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,m0,m1,m2\n0,1.0,2.0,3.0\n1,1.0,2.0\n")
    with pytest.raises(ParseError, match=":3:"):
        load_dataset_csv(path)


def test_dataset_csv_bad_values(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,m0\n0,abc\n")
    with pytest.raises(ParseError, match=":2:"):
        load_dataset_csv(path)
    path.write_text("label,m0\n7,1.0\n")
    with pytest.raises(ParseError, match=":2:"):
        load_dataset_csv(path)
    path.write_text("m0,m1\n0,1.0\n")
    with pytest.raises(ParseError):
        load_dataset_csv(path)


def test_edgelist_round_trip(tmp_path):
    g = build_grid_graph(4, 3)
    path = tmp_path / "graph.txt"
    save_graph_edgelist(g, path)
    g2 = load_graph_edgelist(path)
    assert g2.node_count == g.node_count
    np.testing.assert_array_equal(g2.edges, g.edges)


def test_edgelist_small_example(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("nodes=3\n0 1\n1 2\n")
    g = load_graph_edgelist(path)
    assert g.node_count == 3 and g.edge_count == 2


def test_edgelist_errors(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("0 1\n")
    with pytest.raises(ParseError, match="nodes="):
        load_graph_edgelist(path)
    path.write_text("nodes=3\n0 1 2\n")
    with pytest.raises(ParseError, match=":2:"):
        load_graph_edgelist(path)
    path.write_text("nodes=3\n0 0\n")
    with pytest.raises(ParseError):
        load_graph_edgelist(path)


def test_map_csv_round_trip(tmp_path):
    vals = np.array(TRICKY_FLOATS)
    path = tmp_path / "map.csv"
    save_map_csv(EffectMap(vals), path, header_comments=["seed=3", "anything"])
    loaded = load_map_csv(path)
    assert loaded.tobytes() == vals.tobytes()
    # a leading '#' block must be skipped silently
    assert path.read_text().startswith("# seed=3\n# anything\n")


def test_binary_map_csv_round_trip(tmp_path):
    b = BinaryEffectMap([1, 0, 1, 1])
    path = tmp_path / "q.csv"
    save_map_csv(b, path)
    loaded = load_map_csv(path)
    np.testing.assert_array_equal(loaded, [1.0, 0.0, 1.0, 1.0])


def test_map_csv_rejects_garbage(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("1.0\noops\n")
    with pytest.raises(ParseError, match=":2:"):
        load_map_csv(path)
