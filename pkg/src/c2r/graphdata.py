"""Graph containers, the Spurious-Motif generator and JSON-lines dataset files."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .diffcore import Rng


class ParameterError(ValueError):
    pass


class GraphValidationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class MotifKind(IntEnum):
    CYCLE = 0
    HOUSE = 1
    CRANE = 2


class BaseKind(IntEnum):
    TREE = 0
    LADDER = 1
    WHEEL = 2


@dataclass(eq=False)
class Graph:
    n_nodes: int
    edges: np.ndarray  # (|E|, 2) int
    node_features: np.ndarray  # (|V|, d_in)
    label: int
    rationale_mask: np.ndarray | None = None
    env_hint: int | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_features.ndim == 1:
            self.node_features = self.node_features.reshape(self.n_nodes, -1)
        if self.rationale_mask is not None:
            self.rationale_mask = np.asarray(self.rationale_mask, dtype=bool)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_nodes)

    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def validate(self) -> None:
        n = self.n_nodes
        e = self.edges
        if n < 1:
            raise GraphValidationError("graph has no nodes")
        if self.node_features.shape[0] != n:
            raise GraphValidationError(
                f"feature rows {self.node_features.shape[0]} != n_nodes {n}")
        if len(e) and (e.min() < 0 or e.max() >= n):
            raise GraphValidationError("edge endpoint out of range")
        seen = set()
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for u, v in e.tolist():
            if u == v:
                raise GraphValidationError(f"self-loop edge {[u, v]}")
            key = (u, v) if u < v else (v, u)
            if key in seen:
                raise GraphValidationError(f"duplicate undirected edge {list(key)}")
            seen.add(key)
            nbrs[u].append(v)
            nbrs[v].append(u)
        reached = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in nbrs[u]:
                    if v not in reached:
                        reached.add(v)
                        nxt.append(v)
            frontier = nxt
        if len(reached) != n:
            raise GraphValidationError(f"graph is not connected ({n - len(reached)} nodes unreachable)")
        if self.rationale_mask is not None and self.rationale_mask.shape != (n,):
            raise GraphValidationError("rationale_mask length != n_nodes")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        masks_equal = (
            (self.rationale_mask is None and other.rationale_mask is None)
            or (self.rationale_mask is not None and other.rationale_mask is not None
                and np.array_equal(self.rationale_mask, other.rationale_mask)))
        return (self.n_nodes == other.n_nodes and self.label == other.label
                and self.env_hint == other.env_hint and masks_equal
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.node_features, other.node_features))

    def to_json(self) -> dict:
        return {
            "n_nodes": int(self.n_nodes),
            "edges": self.edges.tolist(),
            "features": self.node_features.tolist(),
            "label": int(self.label),
            "rationale_mask": None if self.rationale_mask is None
            else [int(b) for b in self.rationale_mask],
            "env_hint": None if self.env_hint is None else int(self.env_hint),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        n = int(obj["n_nodes"])
        feats = np.asarray(obj["features"], dtype=np.float64).reshape(n, -1)
        mask = obj.get("rationale_mask")
        return cls(n_nodes=n, edges=np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2),
                   node_features=feats, label=int(obj["label"]),
                   rationale_mask=None if mask is None else np.asarray(mask, dtype=bool),
                   env_hint=obj.get("env_hint"))


@dataclass
class Dataset:
    graphs: list[Graph]
    split: str = "train"
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> Iterator[Graph]:
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def env_hints(self) -> np.ndarray:
        return np.array([-1 if g.env_hint is None else g.env_hint for g in self.graphs])


# ------------------------------------------------------------------ fragments

def build_motif(kind: MotifKind | int) -> tuple[int, list[tuple[int, int]]]:
    """Canonical motif fragment as ``(n_nodes, edges)``."""
    kind = MotifKind(kind)
    square = [(0, 1), (1, 2), (2, 3), (3, 0)]
    if kind is MotifKind.CYCLE:
        return 6, [(i, (i + 1) % 6) for i in range(6)]
    if kind is MotifKind.HOUSE:
        return 5, square + [(2, 4), (3, 4)]
    return 8, square + [(2, 4), (4, 5), (3, 6), (6, 7)]


def build_base(kind: BaseKind | int, size: int,
               rng: np.random.Generator) -> tuple[int, list[tuple[int, int]]]:
    kind = BaseKind(kind)
    if size < 4:
        raise ParameterError(f"base size must be >= 4, got {size}")
    if kind is BaseKind.TREE:
        child = np.arange(1, size)
        parent = np.floor(rng.random(size - 1) * child).astype(np.int64)
        return size, list(zip(parent.tolist(), child.tolist()))
    if kind is BaseKind.LADDER:
        k = math.ceil(size / 2)
        rails = [(i, i + 1) for i in range(k - 1)] + [(k + i, k + i + 1) for i in range(k - 1)]
        rungs = [(i, k + i) for i in range(k)]
        return 2 * k, rails + rungs
    rim = size - 1
    return size, [(0, i) for i in range(1, size)] + [(1 + i, 1 + (i + 1) % rim) for i in range(rim)]


# ------------------------------------------------------------------ generator

def _sample_base_kind(rng: np.random.Generator, motif: int, bias: float) -> int:
    if rng.random() < bias:
        return motif
    others = [b for b in range(3) if b != motif]
    return others[int(rng.integers(2))]


def make_spurious_motif_graph(rng: np.random.Generator, bias: float, d_in: int = 4,
                              base_size_range: tuple[int, int] = (15, 35)) -> Graph:
    motif = int(rng.integers(3))
    base = _sample_base_kind(rng, motif, bias)
    size = int(rng.integers(base_size_range[0], base_size_range[1] + 1))
    nb, base_edges = build_base(base, size, rng)
    nm, motif_edges = build_motif(motif)
    n = nb + nm
    edges = list(base_edges) + [(nb + a, nb + b) for a, b in motif_edges]
    edges.append((nb + int(rng.integers(nm)), int(rng.integers(nb))))
    # relabel so node index carries no information about motif membership
    perm = rng.permutation(n)
    edges_arr = perm[np.asarray(edges, dtype=np.int64)]
    mask = np.zeros(n, dtype=bool)
    mask[perm[nb:]] = True
    feats = rng.uniform(-1.0, 1.0, size=(n, d_in))
    return Graph(n_nodes=n, edges=edges_arr, node_features=feats, label=motif,
                 rationale_mask=mask, env_hint=base)


def gen_spurious_motif(n_graphs: int, bias: float, d_in: int = 4,
                       base_size_range: tuple[int, int] = (15, 35), seed: int = 0,
                       split: str = "train") -> Dataset:
    """Generate ``n_graphs`` motif+base graphs with ``P(base == motif) = bias``.

    Graph ``i`` draws from its own child stream ``(seed, i)``, so the result
    does not depend on generation order.
    """
    if not (1.0 / 3.0 - 1e-12 <= bias < 1.0):
        raise ParameterError(f"bias must lie in [1/3, 1), got {bias}")
    if n_graphs < 1:
        raise ParameterError(f"n_graphs must be >= 1, got {n_graphs}")
    lo, hi = base_size_range
    if lo < 4 or hi < lo:
        raise ParameterError(f"invalid base_size_range {base_size_range}")
    root = Rng(seed)
    graphs = []
    for i in range(n_graphs):
        g = make_spurious_motif_graph(root.child("data-gen", i), bias, d_in, (lo, hi))
        g.validate()
        graphs.append(g)
    spec = {"n_graphs": n_graphs, "bias": bias, "d_in": d_in,
            "base_size_range": [lo, hi], "seed": seed}
    return Dataset(graphs=graphs, split=split, spec=spec)


# ------------------------------------------------------------------------ I/O

def dataset_lines(dataset: Dataset) -> Iterator[str]:
    for g in dataset.graphs:
        yield json.dumps(g.to_json(), separators=(",", ":"))


def write_dataset(dataset: Dataset, path) -> str:
    """Write one JSON object per graph; returns the sha256 of the file."""
    path = Path(path)
    h = hashlib.sha256()
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset_lines(dataset):
            data = line + "\n"
            h.update(data.encode("utf-8"))
            fh.write(data)
    return h.hexdigest()


def read_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                g = Graph.from_json(obj)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(lineno, f"malformed graph record: {exc}") from None
            try:
                g.validate()
            except GraphValidationError as exc:
                raise DatasetFormatError(lineno, str(exc)) from None
            graphs.append(g)
    return Dataset(graphs=graphs, split=split or path.stem)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------- batching

@dataclass
class GraphBatch:
    """Disjoint union of graphs; node rows grouped by ``segment_ids``."""

    x: np.ndarray
    adj: sp.csr_matrix
    segment_ids: np.ndarray
    n_graphs: int
    labels: np.ndarray
    rationale_mask: np.ndarray | None
    env_hint: np.ndarray
    sizes: np.ndarray
    _gcn_adj: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def gcn_adj(self) -> sp.csr_matrix:
        """``D^-1/2 (A + I) D^-1/2`` of the union graph."""
        if self._gcn_adj is None:
            a = self.adj + sp.identity(self.n_nodes, format="csr")
            deg = np.asarray(a.sum(axis=1)).reshape(-1)
            d = sp.diags(1.0 / np.sqrt(deg))
            self._gcn_adj = (d @ a @ d).tocsr()
        return self._gcn_adj


def collate(graphs: Sequence[Graph]) -> GraphBatch:
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    n = int(sizes.sum())
    edge_blocks = [g.edges + off for g, off in zip(graphs, offsets) if len(g.edges)]
    e = np.concatenate(edge_blocks) if edge_blocks else np.zeros((0, 2), dtype=np.int64)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    has_mask = all(g.rationale_mask is not None for g in graphs)
    return GraphBatch(
        x=np.concatenate([g.node_features for g in graphs], axis=0),
        adj=adj,
        segment_ids=np.repeat(np.arange(len(graphs)), sizes),
        n_graphs=len(graphs),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        rationale_mask=np.concatenate([g.rationale_mask for g in graphs]) if has_mask else None,
        env_hint=np.array([-1 if g.env_hint is None else g.env_hint for g in graphs]),
        sizes=sizes,
    )
