"""Domain types, grid graph construction, and plain-text file I/O.

Everything downstream works on three kinds of objects: datasets of labeled
measurement vectors, an undirected neighborhood graph over the d measurement
sites, and per-site maps (real-valued or binary).  All types are immutable
after construction and safe to share read-only across worker processes.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParseError",
    "DimensionError",
    "Sample",
    "Dataset",
    "NeighborhoodGraph",
    "EffectMap",
    "BinaryEffectMap",
    "build_grid_graph",
    "atomic_write_text",
    "save_dataset_csv",
    "load_dataset_csv",
    "save_graph_edgelist",
    "load_graph_edgelist",
    "save_map_csv",
    "load_map_csv",
]


class ParseError(ValueError):
    """Malformed row in a data file; the message names the offending line."""


class DimensionError(ValueError):
    """Vector lengths or node counts disagree."""


def _frozen(a: np.ndarray) -> np.ndarray:
    # Private copy with the writeable flag cleared, so shared instances
    # cannot be mutated behind each other's backs.
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Sample:
    """One subject: a length-d measurement vector plus a binary label.

    ``label`` is 1 when the condition is present, 0 for controls.
    """

    measurements: np.ndarray
    label: int

    def __post_init__(self) -> None:
        m = np.array(self.measurements, dtype=np.float64)
        if m.ndim != 1 or m.size == 0:
            raise DimensionError("measurements must be a nonempty 1-d vector")
        if not np.all(np.isfinite(m)):
            raise ValueError("measurements must be finite")
        label = int(self.label)
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        m.flags.writeable = False
        object.__setattr__(self, "measurements", m)
        object.__setattr__(self, "label", label)

    @property
    def d(self) -> int:
        return self.measurements.size


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of samples sharing one measurement dimension."""

    samples: tuple

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        if not samples:
            raise ValueError("a dataset needs at least one sample")
        d = samples[0].d
        for i, s in enumerate(samples):
            if s.d != d:
                raise DimensionError(
                    f"sample {i} has {s.d} measurements, expected {d}"
                )
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_arrays(cls, X, y) -> "Dataset":
        """Build a dataset from an (n, d) matrix and a length-n label vector."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2:
            raise DimensionError("X must be 2-d with shape (n_samples, d)")
        if y.shape != (X.shape[0],):
            raise DimensionError("y must hold one label per row of X")
        return cls(tuple(Sample(row, int(lab)) for row, lab in zip(X, y)))

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def d(self) -> int:
        return self.samples[0].d

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def measurement_matrix(self) -> np.ndarray:
        """Stack all measurement vectors into a fresh (n, d) array."""
        return np.stack([s.measurements for s in self.samples])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64).ravel()
        return Dataset(tuple(self.samples[int(i)] for i in idx))

    def label_counts(self) -> tuple:
        """(number of label-0 samples, number of label-1 samples)."""
        y = self.labels()
        return int(np.sum(y == 0)), int(np.sum(y == 1))


@dataclass(frozen=True)
class NeighborhoodGraph:
    """Undirected graph over measurement sites.

    Edges are stored canonically: an (m, 2) int array with each row
    (j, k), j < k, sorted lexicographically.  Construction rejects
    self-loops, duplicate edges, and out-of-range endpoints.
    """

    node_count: int
    edges: np.ndarray

    def __post_init__(self) -> None:
        nc = int(self.node_count)
        if nc < 1:
            raise ValueError("node_count must be >= 1")
        e = np.array(self.edges, dtype=np.int64)
        if e.size == 0:
            e = e.reshape(0, 2)
        if e.ndim != 2 or e.shape[1] != 2:
            raise DimensionError("edges must be an (m, 2) array of node pairs")
        if e.shape[0]:
            if np.any(e < 0) or np.any(e >= nc):
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not allowed")
            e = np.sort(e, axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            dup = (np.diff(e[:, 0]) == 0) & (np.diff(e[:, 1]) == 0)
            if np.any(dup):
                j, k = e[1:][dup][0]
                raise ValueError(f"duplicate edge ({j}, {k})")
        e.flags.writeable = False
        object.__setattr__(self, "node_count", nc)
        object.__setattr__(self, "edges", e)

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg


_MAP_ROLES = ("raw", "bootstrap_mean", "reconstructed")


@dataclass(frozen=True)
class EffectMap:
    """Real-valued per-site map, tagged by where it came from in the pipeline."""

    values: np.ndarray
    role: str = "raw"

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DimensionError("values must be a nonempty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("map values must be finite")
        if self.role not in _MAP_ROLES:
            raise ValueError(f"role must be one of {_MAP_ROLES}, got {self.role!r}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class BinaryEffectMap:
    """Per-site detection flags (1 = effect detected)."""

    detections: np.ndarray

    def __post_init__(self) -> None:
        det = np.asarray(self.detections)
        if det.ndim != 1 or det.size == 0:
            raise DimensionError("detections must be a nonempty 1-d vector")
        if not np.isin(det, (0, 1)).all():
            raise ValueError("detections must contain only 0 and 1")
        det = det.astype(np.uint8)
        det.flags.writeable = False
        object.__setattr__(self, "detections", det)

    @property
    def d(self) -> int:
        return self.detections.size


def build_grid_graph(width: int, height: int) -> NeighborhoodGraph:
    """4-neighborhood graph over a height-by-width pixel grid.

    Node ids are row-major: pixel (row r, column c) gets id r*width + c,
    so a flattened image and a map over this graph line up index for index.
    """
    width, height = int(width), int(height)
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    ids = np.arange(width * height, dtype=np.int64).reshape(height, width)
    horiz = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    vert = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    return NeighborhoodGraph(width * height, np.concatenate([horiz, vert]))


# ---------------------------------------------------------------------------
# File formats.  Floats are written with repr(), the shortest decimal text
# that parses back to the identical IEEE-754 value, so every save/load round
# trip is bitwise exact.  Lines starting with '#' and blank lines are skipped
# by all loaders.  Writers go through a temp file plus rename, so readers
# never observe a half-written file.

def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a same-directory temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_dataset_csv(dataset: Dataset, path, header_comments=()) -> None:
    """Write ``label,m0,m1,...,m{d-1}`` header plus one row per sample.

    Each entry of ``header_comments`` becomes a leading '#' line, which
    :func:`load_dataset_csv` skips.
    """
    lines = [f"# {comment}" for comment in header_comments]
    lines.append("label," + ",".join(f"m{j}" for j in range(dataset.d)))
    for s in dataset.samples:
        row = ",".join(repr(float(v)) for v in s.measurements)
        lines.append(f"{s.label},{row}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset_csv(path) -> Dataset:
    """Parse a dataset CSV written by :func:`save_dataset_csv`.

    Raises
    ------
    ParseError
        On a malformed header or row; the message names the line number.
    """
    samples = []
    header = None
    d = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if header[0] != "label" or len(header) < 2:
                    raise ParseError(
                        f"{path}:{lineno}: expected header 'label,m0,...'"
                    )
                d = len(header) - 1
                continue
            fields = line.split(",")
            if len(fields) != d + 1:
                raise ParseError(
                    f"{path}:{lineno}: expected {d + 1} fields, got {len(fields)}"
                )
            try:
                label = int(fields[0])
                values = np.array(fields[1:], dtype=np.float64)
                samples.append(Sample(values, label))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if header is None:
        raise ParseError(f"{path}: empty file")
    return Dataset(tuple(samples))


def save_graph_edgelist(graph: NeighborhoodGraph, path, header_comments=()) -> None:
    lines = [f"# {comment}" for comment in header_comments]
    lines.append(f"nodes={graph.node_count}")
    lines.extend(f"{j} {k}" for j, k in graph.edges)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_graph_edgelist(path) -> NeighborhoodGraph:
    """Parse a ``nodes=<d>`` header plus whitespace-separated edge pairs."""
    node_count = None
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if node_count is None:
                if not line.startswith("nodes="):
                    raise ParseError(
                        f"{path}:{lineno}: first line must be 'nodes=<d>'"
                    )
                try:
                    node_count = int(line[len("nodes="):])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from exc
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(
                    f"{path}:{lineno}: expected 'j k', got {line!r}"
                )
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if node_count is None:
        raise ParseError(f"{path}: missing 'nodes=<d>' line")
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    try:
        return NeighborhoodGraph(node_count, edges)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_map_csv(effect_map, path, header_comments=()) -> None:
    """Write a map as a single column, one value per line.

    Accepts an :class:`EffectMap`, a :class:`BinaryEffectMap`, or a plain
    1-d array.  Binary maps are written as integer flags.  Each entry of
    ``header_comments`` becomes a leading '#' line.
    """
    values = getattr(effect_map, "values", None)
    if values is None:
        values = getattr(effect_map, "detections", None)
    if values is None:
        values = effect_map
    values = np.asarray(values)
    if values.ndim != 1:
        raise DimensionError("maps must be 1-d")
    lines = [f"# {comment}" for comment in header_comments]
    if np.issubdtype(values.dtype, np.floating):
        lines.extend(repr(float(v)) for v in values)
    else:
        lines.extend(str(int(v)) for v in values)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_map_csv(path) -> np.ndarray:
    """Read a single-column map file back as a float64 vector."""
    vals = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not vals:
        raise ParseError(f"{path}: no values")
    return np.array(vals, dtype=np.float64)
