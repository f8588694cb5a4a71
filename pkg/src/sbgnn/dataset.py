"""Time-series ingestion, connectivity graphs, synthetic cohorts and the dataset directory format.

A subject enters as an ``N x T`` matrix of ROI signals, becomes an ``N x N``
Pearson matrix, and is thresholded into a weighted undirected graph whose
node features are either correlation rows or the raw series.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParseError, ValidationError

FeatureMode = Literal["corr-row", "timeseries"]
FEATURE_MODES = ("corr-row", "timeseries")
DEFAULT_TAU = 0.3
N_COMMUNITIES = 3


def fmt17(x: float) -> str:
    """Shortest form that still carries 17 significant digits (round-trips float64)."""
    return format(float(x), ".17g")


def adjacency_digest(adjacency: np.ndarray) -> str:
    """SHA-256 of the shape and 17-digit decimal text of every entry."""
    a = np.asarray(adjacency, dtype=np.float64)
    h = hashlib.sha256(f"{a.shape[0]}x{a.shape[1]}\n".encode())
    for row in a:
        h.update((",".join(fmt17(v) for v in row) + "\n").encode())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class TimeSeriesMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"time series must be 2-D, got shape {v.shape}")
        n, t = v.shape
        if n < 2:
            raise ValidationError(f"need at least 2 ROIs, got {n}")
        if t < 3:
            raise ValidationError(f"need at least 3 timepoints, got {t}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("time series contains non-finite values")
        for i in range(n):
            if np.all(v[i] == v[i, 0]):
                raise ValidationError(f"constant ROI row {i}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, TimeSeriesMatrix) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class ConnectivityMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"connectivity matrix must be square, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise ValidationError("connectivity matrix is not exactly symmetric")
        if np.any(np.abs(v) > 1.0):
            raise ValidationError("connectivity entries must lie in [-1, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Graph:
    """One labelled sample: weighted symmetric adjacency plus node features."""

    adjacency: np.ndarray
    features: np.ndarray
    label: int = 0
    graph_id: str = ""

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        x = np.array(self.features, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise ValidationError("adjacency is not symmetric")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency has self-loops")
        if x.ndim != 2 or x.shape[0] != a.shape[0]:
            raise ValidationError(
                f"features must be {a.shape[0]} x F, got shape {x.shape}"
            )
        if self.label < 0:
            raise ValidationError(f"negative label {self.label}")
        a.flags.writeable = False
        x.flags.writeable = False
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", int(self.label))

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    @cached_property
    def adjacency_key(self) -> str:
        return adjacency_digest(self.adjacency)

    def __eq__(self, other):
        return (
            isinstance(other, Graph)
            and self.label == other.label
            and self.graph_id == other.graph_id
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=True)
class Dataset:
    graphs: list[Graph]
    class_names: list[str]
    provenance: str = ""
    feature_mode: str = "corr-row"

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError(f"need at least 2 classes, got {len(self.class_names)}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValidationError(f"unknown feature mode {self.feature_mode!r}")
        widths = {g.n_features for g in self.graphs}
        if len(widths) > 1:
            raise ValidationError(f"graphs disagree on feature width: {sorted(widths)}")
        for g in self.graphs:
            if g.label >= self.n_classes:
                raise ValidationError(
                    f"graph {g.graph_id!r} label {g.label} out of range for "
                    f"{self.n_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_features(self) -> int:
        return self.graphs[0].n_features if self.graphs else 0

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 2
    graphs_per_class: int = 10
    n_rois: int = 30
    n_timepoints: int = 128
    rho_in: float = 0.7
    rho_out: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.graphs_per_class < 1:
            raise ValidationError("graphs_per_class must be >= 1")
        if self.n_timepoints < 3:
            raise ValidationError("n_timepoints must be >= 3")
        if self.n_rois < N_COMMUNITIES or self.n_rois % N_COMMUNITIES:
            raise ValidationError(
                f"n_rois must be a positive multiple of {N_COMMUNITIES}, got {self.n_rois}"
            )
        if not 0.0 < self.rho_in < 1.0:
            raise ValidationError(f"rho_in must lie in (0, 1), got {self.rho_in}")
        if not 0.0 <= self.rho_out < self.rho_in:
            raise ValidationError(
                f"rho_out must lie in [0, rho_in), got rho_out={self.rho_out} rho_in={self.rho_in}"
            )
        block = self.n_rois // N_COMMUNITIES
        if self.n_classes > block:
            raise ValidationError(
                f"{self.n_classes} classes need community blocks of at least that "
                f"many nodes; n_rois={self.n_rois} gives {block}"
            )
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


@dataclass
class SyntheticCohort:
    series: dict[str, TimeSeriesMatrix]
    labels: dict[str, int]
    class_names: list[str] = field(default_factory=list)


def parse_timeseries_csv(text: str, source: str = "<string>") -> TimeSeriesMatrix:
    rows = [r for r in csv.reader(text.splitlines()) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{source}: empty time-series file")
    width = len(rows[0])
    values = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(
                f"{source}: ragged row {i}: {len(row)} cells, expected {width}"
            )
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{source}: non-numeric cell {cell!r} at row {i}, col {j}", i, j
                ) from None
    return TimeSeriesMatrix(values)


def load_timeseries(path) -> TimeSeriesMatrix:
    """Read an ``N x T`` headerless CSV (one ROI per row)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path.name} not found")
    return parse_timeseries_csv(path.read_text(), source=path.name)


def save_timeseries(ts: TimeSeriesMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        for row in ts.values:
            fh.write(",".join(fmt17(v) for v in row) + "\n")


def pearson_matrix(ts: TimeSeriesMatrix) -> ConnectivityMatrix:
    x = ts.values
    z = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(norms == 0):
        raise ValidationError(f"zero-variance ROI row {int(np.argmin(norms))}")
    z = z / norms[:, None]
    c = np.triu(z @ z.T, 1)
    c = np.clip(c + c.T, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return ConnectivityMatrix(c)


def threshold_graph(
    c: ConnectivityMatrix,
    tau: float = DEFAULT_TAU,
    features: FeatureMode = "corr-row",
    ts: TimeSeriesMatrix | None = None,
    label: int = 0,
    graph_id: str = "",
) -> Graph:
    """Keep edges with correlation strictly above ``tau``; weights are the correlations."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold tau must lie in (0, 1), got {tau}")
    values = c.values
    adj = values.copy()
    np.fill_diagonal(adj, 0.0)
    adj[adj <= tau] = 0.0
    if features == "corr-row":
        x = values
    elif features == "timeseries":
        if ts is None:
            raise ConfigError("feature mode 'timeseries' needs the time-series matrix")
        if ts.n_rois != c.n:
            raise ValidationError(f"time series has {ts.n_rois} ROIs, graph has {c.n}")
        x = ts.values
    else:
        raise ConfigError(f"unknown feature mode {features!r}")
    return Graph(adj, x, label=label, graph_id=graph_id)


def community_assignment(n_rois: int, class_index: int, n_classes: int) -> np.ndarray:
    """Community id of every node for one class.

    The base layout is three contiguous blocks of ``B = n_rois // 3`` nodes.
    Class ``c`` reads that layout cyclically shifted by ``c * max(1, B // n_classes)``
    positions. Shifts are taken modulo ``B`` so distinct classes get distinct
    partitions (a shift by a whole block would only relabel communities).
    """
    block = n_rois // N_COMMUNITIES
    shift = class_index * max(1, block // n_classes)
    base = np.arange(n_rois) // block
    return base[(np.arange(n_rois) + shift) % n_rois]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCohort:
    """Sample a labelled cohort from a three-community factor model.

    Per subject, with unit-variance standard normals ``z_glob``, ``z_k`` (k=0..2)
    and ``eps_i``::

        f_k   = sqrt(r) * z_glob + sqrt(1 - r) * z_k,   r = rho_out / rho_in
        x_i   = sqrt(rho_in) * f_{g(i)} + sqrt(1 - rho_in) * eps_i

    so ``corr(x_i, x_j)`` is ``rho_in`` inside a community and ``rho_out``
    across communities. Draw order per subject is ``z_glob``, ``z_0..z_2``,
    ``eps`` from one PCG64 stream seeded with ``spec.seed``.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, t = spec.n_rois, spec.n_timepoints
    r = spec.rho_out / spec.rho_in
    series: dict[str, TimeSeriesMatrix] = {}
    labels: dict[str, int] = {}
    k = 0
    for c in range(spec.n_classes):
        groups = community_assignment(n, c, spec.n_classes)
        for _ in range(spec.graphs_per_class):
            z_glob = rng.standard_normal(t)
            z_comm = rng.standard_normal((N_COMMUNITIES, t))
            eps = rng.standard_normal((n, t))
            factors = math.sqrt(r) * z_glob + math.sqrt(1.0 - r) * z_comm
            x = math.sqrt(spec.rho_in) * factors[groups] + math.sqrt(1.0 - spec.rho_in) * eps
            sid = f"{k:05d}"
            series[sid] = TimeSeriesMatrix(x)
            labels[sid] = c
            k += 1
    names = [f"class_{c}" for c in range(spec.n_classes)]
    return SyntheticCohort(series, labels, names)


def split_dataset(
    d, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle into train/val/test index lists of sizes floor, floor, remainder."""
    n = d if isinstance(d, int) else len(d)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative values summing to 1, got {ratios}")
    if n < 5:
        raise ValidationError(f"dataset too small to split: {n} samples (need >= 5)")
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    order = [int(i) for i in perm]
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def _write_matrix(path: Path, m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        for row in m:
            fh.write(",".join(fmt17(v) for v in row) + "\n")


def _write_edges(path: Path, adj: np.ndarray) -> None:
    ii, jj = np.nonzero(np.triu(adj, 1))
    with open(path, "w", newline="") as fh:
        for i, j in zip(ii, jj):
            fh.write(f"{i},{j},{fmt17(adj[i, j])}\n")


def save_dataset(d: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, g in enumerate(d.graphs):
        gid = g.graph_id or f"g{k}"
        adj_name, x_name = f"{gid}_adj.csv", f"{gid}_x.csv"
        _write_edges(directory / adj_name, g.adjacency)
        _write_matrix(directory / x_name, g.features)
        entries.append({"id": gid, "label": g.label, "adj": adj_name, "x": x_name})
    manifest = {
        "classes": list(d.class_names),
        "feature_mode": d.feature_mode,
        "provenance": d.provenance,
        "graphs": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def _read_edges(path: Path, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.float64)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path.name}: line {lineno} must be 'i,j,w'")
            try:
                i, j, w = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise ParseError(f"{path.name}: bad edge line {lineno}: {row}", lineno, 0) from None
            if not (0 <= i < j < n):
                raise FormatError(f"{path.name}: line {lineno} needs 0 <= i < j < {n}")
            adj[i, j] = adj[j, i] = w
    return adj


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest.json not found in {directory}")
    manifest = json.loads(manifest_path.read_text())
    try:
        classes = list(manifest["classes"])
        mode = manifest["feature_mode"]
        entries = manifest["graphs"]
    except KeyError as exc:
        raise FormatError(f"manifest.json missing field {exc.args[0]!r}") from None
    graphs = []
    for e in entries:
        label = int(e["label"])
        if not 0 <= label < len(classes):
            raise ValidationError(
                f"graph {e['id']!r}: label {label} out of range 0..{len(classes) - 1}"
            )
        for key in ("x", "adj"):
            if not (directory / e[key]).is_file():
                raise FileNotFoundError(f"{e[key]} not found")
        x_path = directory / e["x"]
        x = np.loadtxt(x_path, delimiter=",", dtype=np.float64, ndmin=2)
        adj = _read_edges(directory / e["adj"], x.shape[0])
        graphs.append(Graph(adj, x, label=label, graph_id=str(e["id"])))
    return Dataset(graphs, classes, provenance=manifest.get("provenance", ""), feature_mode=mode)


def build_dataset(
    series: dict[str, TimeSeriesMatrix],
    labels: dict[str, int],
    class_names: Sequence[str],
    tau: float = DEFAULT_TAU,
    features: FeatureMode = "corr-row",
    provenance: str = "",
) -> Dataset:
    """Pearson + threshold for every subject, in sorted subject-id order."""
    graphs = [
        threshold_graph(pearson_matrix(series[sid]), tau, features, series[sid], labels[sid], sid)
        for sid in sorted(series)
    ]
    return Dataset(graphs, list(class_names), provenance=provenance, feature_mode=features)
