"""Graphs, dataset readers/writers, splits, homophily and perturbations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class GraphFormatError(ValueError):
    """Malformed dataset file; the message names the file and line."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Node-classification graph with directed, deduplicated, self-looped edges.

    Edges are kept sorted by ``(dst, src)`` so the incoming edges of every
    node form one contiguous segment.  Arrays are read-only.
    """

    features: np.ndarray
    labels: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    class_count: int
    name: str = "graph"
    _indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be [n, d], got shape {feats.shape}")
        n = feats.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"{labels.shape[0]} labels for {n} nodes")
        if n and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        if src.shape != dst.shape or src.ndim != 1:
            raise ValueError("src and dst must be 1-D arrays of equal length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise ValueError("edge endpoint outside [0, n)")
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        if src.size > 1:
            dup = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
            if dup.any():
                raise ValueError("duplicate edges")
        loops = np.zeros(n, dtype=np.int64)
        np.add.at(loops, src[src == dst], 1)
        if (loops != 1).any():
            raise ValueError("every node needs exactly one self-loop")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "src", _frozen(src))
        object.__setattr__(self, "dst", _frozen(dst))
        object.__setattr__(self, "_indptr", _frozen(indptr))

    @classmethod
    def from_edges(
        cls,
        features: np.ndarray,
        labels: np.ndarray,
        edges: Iterable[tuple[int, int]] | np.ndarray,
        class_count: int | None = None,
        name: str = "graph",
        symmetrize: bool = True,
    ) -> "Graph":
        """Build a graph from raw pairs: symmetrize, drop duplicates, add self-loops."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = features.shape[0]
        pairs = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        pairs = pairs.reshape(-1, 2)
        if symmetrize:
            pairs = np.concatenate([pairs, pairs[:, ::-1]])
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        loops = np.repeat(np.arange(n, dtype=np.int64)[:, None], 2, axis=1)
        pairs = np.unique(np.concatenate([pairs, loops]), axis=0)
        if class_count is None:
            class_count = int(labels.max()) + 1 if n else 0
        return cls(features, labels, pairs[:, 0], pairs[:, 1], int(class_count), name)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def indptr(self) -> np.ndarray:
        """CSR offsets: incoming edges of node ``i`` are ``indptr[i]:indptr[i+1]``."""
        return self._indptr

    def in_degree(self) -> np.ndarray:
        return np.diff(self._indptr)

    def self_loop_index(self) -> np.ndarray:
        """Edge id of each node's self-loop."""
        loops = np.flatnonzero(self.src == self.dst)
        out = np.empty(self.n, dtype=np.int64)
        out[self.dst[loops]] = loops
        return out

    def undirected_edges(self) -> np.ndarray:
        """Non-loop edges as unique ``(u, v)`` pairs with ``u < v``."""
        keep = self.src < self.dst
        return np.stack([self.src[keep], self.dst[keep]], axis=1)

    def replace(self, **changes) -> "Graph":
        fields = dict(
            features=self.features,
            labels=self.labels,
            src=self.src,
            dst=self.dst,
            class_count=self.class_count,
            name=self.name,
        )
        fields.update(changes)
        return Graph(**fields)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )

    def permute(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        return Graph(
            self.features[inv], self.labels[inv], perm[self.src], perm[self.dst],
            self.class_count, self.name,
        )


# --------------------------------------------------------------------------
# readers and writers
# --------------------------------------------------------------------------


def _read_lines(path: Path) -> list[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        return [(i, line.rstrip("\n").rstrip("\r")) for i, line in enumerate(fh, 1) if line.strip()]


def _is_header(line: str) -> bool:
    first = line.split("\t", 1)[0].split(",", 1)[0].strip()
    try:
        int(first)
    except ValueError:
        return True
    return False


def load_webkb_text(node_file, edge_file, name: str | None = None, class_count: int | None = None) -> Graph:
    """Read ``id<TAB>f1,...,fk<TAB>label`` node lines and ``src<TAB>dst`` edge lines.

    A leading header line (as in the geom-gcn release of WebKB) is skipped.
    """
    node_file, edge_file = Path(node_file), Path(edge_file)
    ids: dict[int, int] = {}
    rows, labels = [], []
    width = None
    for k, (lineno, line) in enumerate(_read_lines(node_file)):
        if k == 0 and _is_header(line):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"{node_file}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            node_id = int(parts[0])
        except ValueError:
            raise GraphFormatError(f"{node_file}:{lineno}: bad node id {parts[0]!r}") from None
        try:
            feats = [float(v) for v in parts[1].split(",")]
        except ValueError:
            raise GraphFormatError(f"{node_file}:{lineno}: unparsable feature value") from None
        try:
            label = int(parts[2])
        except ValueError:
            raise GraphFormatError(f"{node_file}:{lineno}: unparsable label {parts[2]!r}") from None
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise GraphFormatError(f"{node_file}:{lineno}: ragged feature row ({len(feats)} values, expected {width})")
        if node_id in ids:
            raise GraphFormatError(f"{node_file}:{lineno}: duplicate node id {node_id}")
        ids[node_id] = len(rows)
        rows.append(feats)
        labels.append(label)

    pairs = []
    for k, (lineno, line) in enumerate(_read_lines(edge_file)):
        if k == 0 and _is_header(line):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"{edge_file}:{lineno}: expected 'src<TAB>dst'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{edge_file}:{lineno}: non-integer node id") from None
        for v in (a, b):
            if v not in ids:
                raise GraphFormatError(f"{edge_file}:{lineno}: unknown node id {v}")
        pairs.append((ids[a], ids[b]))

    features = np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)
    return Graph.from_edges(
        features, np.array(labels, dtype=np.int64), np.array(pairs, dtype=np.int64).reshape(-1, 2),
        class_count=class_count, name=name or node_file.parent.name,
    )


def save_webkb_text(g: Graph, node_file, edge_file) -> None:
    with open(node_file, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(g.n):
            feats = ",".join(repr(float(v)) for v in g.features[i])
            fh.write(f"{i}\t{feats}\t{int(g.labels[i])}\n")
    _write_pairs(g, edge_file, "\t")


def _write_pairs(g: Graph, path, sep: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in g.undirected_edges():
            fh.write(f"{u}{sep}{v}\n")


def load_edgelist_csv(features_csv, labels_csv, edges_csv, name: str | None = None, class_count: int | None = None) -> Graph:
    """Read headerless CSVs: one feature row per node, one label per row, ``src,dst`` edges."""
    features_csv, labels_csv, edges_csv = Path(features_csv), Path(labels_csv), Path(edges_csv)
    rows, width = [], None
    for lineno, line in _read_lines(features_csv):
        try:
            feats = [float(v) for v in line.split(",")]
        except ValueError:
            raise GraphFormatError(f"{features_csv}:{lineno}: unparsable feature value") from None
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise GraphFormatError(f"{features_csv}:{lineno}: ragged feature row ({len(feats)} values, expected {width})")
        rows.append(feats)
    labels = []
    for lineno, line in _read_lines(labels_csv):
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise GraphFormatError(f"{labels_csv}:{lineno}: unparsable label {line.strip()!r}") from None
    if len(labels) != len(rows):
        raise GraphFormatError(f"{labels_csv}: {len(labels)} labels for {len(rows)} feature rows")
    n = len(rows)
    pairs = []
    for lineno, line in _read_lines(edges_csv):
        parts = line.split(",")
        if len(parts) != 2:
            raise GraphFormatError(f"{edges_csv}:{lineno}: expected 'src,dst'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{edges_csv}:{lineno}: non-integer node id") from None
        if not (0 <= a < n and 0 <= b < n):
            raise GraphFormatError(f"{edges_csv}:{lineno}: unknown node id {a if not 0 <= a < n else b}")
        pairs.append((a, b))
    features = np.array(rows, dtype=np.float64).reshape(n, width or 0)
    return Graph.from_edges(
        features, np.array(labels, dtype=np.int64), np.array(pairs, dtype=np.int64).reshape(-1, 2),
        class_count=class_count, name=name or features_csv.parent.name,
    )


def save_edgelist_csv(g: Graph, features_csv, labels_csv, edges_csv) -> None:
    with open(features_csv, "w", encoding="utf-8", newline="\n") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(labels_csv, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{int(y)}\n" for y in g.labels)
    _write_pairs(g, edges_csv, ",")


def load_manifest(path) -> Graph:
    """Load a dataset described by a JSON manifest.

    ``{"name": ..., "format": "webkb"|"csv", "paths": {...}, "class_count": int}``;
    relative paths resolve against the manifest's directory.  ``webkb`` needs
    ``paths.nodes`` and ``paths.edges``; ``csv`` needs ``paths.features``,
    ``paths.labels`` and ``paths.edges``.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    try:
        fmt, paths = spec["format"], spec["paths"]
    except KeyError as exc:
        raise GraphFormatError(f"{path}: manifest is missing {exc.args[0]!r}") from None
    base = path.parent
    resolve = lambda key: base / paths[key]  # noqa: E731
    name = spec.get("name", base.name)
    class_count = spec.get("class_count")
    if fmt == "webkb":
        return load_webkb_text(resolve("nodes"), resolve("edges"), name=name, class_count=class_count)
    if fmt == "csv":
        return load_edgelist_csv(resolve("features"), resolve("labels"), resolve("edges"), name=name, class_count=class_count)
    raise GraphFormatError(f"{path}: unknown dataset format {fmt!r}")


# --------------------------------------------------------------------------
# statistics and splits
# --------------------------------------------------------------------------


def node_homophily(g: Graph) -> float:
    """Mean over nodes of the fraction of (non-self) neighbors sharing the node's label."""
    keep = g.src != g.dst
    if not keep.any():
        raise ValueError("no non-trivial edges")
    src, dst = g.src[keep], g.dst[keep]
    same = (g.labels[src] == g.labels[dst]).astype(np.float64)
    deg = np.bincount(dst, minlength=g.n)
    hits = np.bincount(dst, weights=same, minlength=g.n)
    has = deg > 0
    return float(np.mean(hits[has] / deg[has]))


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def masks(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = []
        for idx in (self.train, self.val, self.test):
            m = np.zeros(n, dtype=bool)
            m[idx] = True
            out.append(m)
        return tuple(out)


def random_split(g: Graph | int, ratios=(0.48, 0.32, 0.20), seed: int = 0) -> Split:
    """Uniform shuffle of node ids sliced into train/val/test by ``ratios``."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three values summing to 1, got {ratios}")
    n = g if isinstance(g, int) else g.n
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return Split(
        np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]), seed,
    )


# --------------------------------------------------------------------------
# perturbations
# --------------------------------------------------------------------------


def perturb_features(g: Graph, fraction: float, seed: int) -> Graph:
    """Resample the whole feature vector of ``ceil(fraction*n)`` random nodes from Bernoulli(0.5)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    k = math.ceil(fraction * g.n)
    if k == 0:
        return g
    rng = np.random.default_rng([seed, 1])
    nodes = rng.choice(g.n, size=k, replace=False)
    feats = np.array(g.features, copy=True)
    feats[nodes] = rng.integers(0, 2, size=(k, g.feature_dim)).astype(np.float64)
    return g.replace(features=feats)


def perturb_edges(g: Graph, fraction: float, seed: int, count: int | None = None) -> Graph:
    """Add ``ceil(fraction * #undirected edges)`` (or ``count``) uniformly drawn new undirected edges."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    existing = g.undirected_edges()
    k = math.ceil(fraction * len(existing)) if count is None else int(count)
    capacity = g.n * (g.n - 1) // 2
    if len(existing) >= capacity:
        raise ValueError("graph is already complete")
    if k == 0:
        return g
    if k > capacity - len(existing):
        raise ValueError(f"cannot add {k} edges: only {capacity - len(existing)} non-edges left")
    rng = np.random.default_rng([seed, 2])
    taken = set(map(tuple, existing.tolist()))
    added: list[tuple[int, int]] = []
    while len(added) < k:
        u, v = (int(x) for x in rng.integers(0, g.n, size=2))
        if u == v:
            continue
        pair = (u, v) if u < v else (v, u)
        if pair in taken:
            continue
        taken.add(pair)
        added.append(pair)
    pairs = np.concatenate([existing, np.array(added, dtype=np.int64)])
    return Graph.from_edges(g.features, g.labels, pairs, g.class_count, g.name)


# --------------------------------------------------------------------------
# synthetic planted-partition graphs
# --------------------------------------------------------------------------


def synthetic_planted(
    blocks: int = 4,
    nodes_per_block: int = 40,
    p_informative: float = 0.1,
    p_noise: float = 0.02,
    feature_dim: int = 16,
    seed: int = 0,
    signal: float = 1.0,
    noise_std: float = 1.0,
) -> tuple[Graph, set[tuple[int, int]]]:
    """Stochastic block graph whose blocks are the classes.

    Each block draws a signal vector; node features are that vector plus
    isotropic Gaussian noise.  Within-block pairs are linked with
    probability ``p_informative`` and between-block pairs with ``p_noise``.
    Returns the graph and the set of directed informative ``(src, dst)``
    edges (same block, self-loops excluded).
    """
    if blocks < 1 or nodes_per_block < 1:
        raise ValueError("need at least one block with at least one node")
    if not p_informative > p_noise:
        raise ValueError("p_informative must exceed p_noise")
    if not (0.0 <= p_noise and p_informative <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng([seed, 3])
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    centers = rng.normal(0.0, 1.0, size=(blocks, feature_dim))
    centers *= signal / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12) * math.sqrt(feature_dim)
    features = centers[labels] + rng.normal(0.0, noise_std, size=(n, feature_dim))

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_informative, p_noise)
    keep = rng.random(iu.size) < prob
    pairs = np.stack([iu[keep], ju[keep]], axis=1)
    g = Graph.from_edges(features, labels, pairs, class_count=blocks, name="planted")
    informative = {
        (int(s), int(d)) for s, d in zip(g.src, g.dst) if s != d and labels[s] == labels[d]
    }
    return g, informative
