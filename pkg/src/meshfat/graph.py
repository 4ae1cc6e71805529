"""Mesh-to-graph conversion, batching, coordinate scaling and dataset manifests."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .schema import validate
from .surface.mesh import TriangleMesh
from .volume import SubjectLabels

SEX_TAGS = ("F", "M")


@dataclass(eq=False)
class RegressionGraph:
    """Registered vertex coordinates, undirected mesh edges and the (VAT, ASAT) target."""

    x: np.ndarray
    edges: np.ndarray
    y: np.ndarray
    subject_id: str = ""
    sex_tag: str = "F"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ValueError("x must be a non-empty N x d matrix")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= len(self.x):
                raise ValueError("edge index out of range")
            if (e[:, 0] == e[:, 1]).any():
                raise ValueError("self-loops are not allowed")
            keys = np.minimum(e[:, 0], e[:, 1]) * len(self.x) + np.maximum(e[:, 0], e[:, 1])
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate undirected edge")
        self.edges = e
        self.y = np.asarray(self.y, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(self.y)) or (self.y < 0).any():
            raise ValueError("targets must be finite and non-negative")
        if self.sex_tag not in SEX_TAGS:
            raise ValueError(f"sex_tag must be one of {SEX_TAGS}")

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RegressionGraph):
            return NotImplemented
        return (np.array_equal(self.x, other.x) and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.y, other.y) and self.subject_id == other.subject_id
                and self.sex_tag == other.sex_tag)

    def with_x(self, x) -> "RegressionGraph":
        return RegressionGraph(x, self.edges, self.y, self.subject_id, self.sex_tag)


def mesh_to_graph(m: TriangleMesh, labels: SubjectLabels) -> RegressionGraph:
    if m.n_vertices == 0 or m.n_faces == 0:
        raise ValueError("cannot build a graph from an empty mesh")
    return RegressionGraph(m.vertices.copy(), m.edges(), (labels.vat_mm3, labels.asat_mm3),
                           labels.subject_id, labels.sex_tag)


def mean_operator(edges: np.ndarray, n: int) -> sp.csr_matrix:
    """``D^-1 (A + I)``: row v averages v and its neighbours."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    op = sp.csr_matrix((1.0 / deg[rows], (rows, cols)), shape=(n, n))
    op.sort_indices()
    return op


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of graphs; node order is graph by graph."""

    x: np.ndarray
    edges: np.ndarray
    graph_id: np.ndarray
    y: np.ndarray
    subject_ids: list = field(default_factory=list)
    sex_tags: list = field(default_factory=list)
    _op: sp.csr_matrix | None = field(default=None, repr=False)
    _op_t: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_graphs(self) -> int:
        return self.y.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each graph's nodes, plus the total node count."""
        counts = np.bincount(self.graph_id, minlength=self.n_graphs)
        return np.concatenate([[0], np.cumsum(counts)])

    @property
    def mean_op(self) -> sp.csr_matrix:
        if self._op is None:
            self._op = mean_operator(self.edges, len(self.x))
        return self._op

    @property
    def mean_op_t(self) -> sp.csr_matrix:
        if self._op_t is None:
            self._op_t = self.mean_op.T.tocsr()
            self._op_t.sort_indices()
        return self._op_t

    def with_x(self, x) -> "GraphBatch":
        out = GraphBatch(np.asarray(x, dtype=np.float64), self.edges, self.graph_id, self.y,
                         self.subject_ids, self.sex_tags)
        out._op, out._op_t = self._op, self._op_t
        return out


def batch(graphs: Sequence[RegressionGraph]) -> GraphBatch:
    if len(graphs) == 0:
        raise ValueError("cannot batch an empty list of graphs")
    sizes = np.array([g.n_nodes for g in graphs])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edges = np.concatenate([g.edges + s for g, s in zip(graphs, starts)])
    return GraphBatch(
        x=np.concatenate([g.x for g in graphs]),
        edges=edges,
        graph_id=np.repeat(np.arange(len(graphs)), sizes),
        y=np.stack([g.y for g in graphs]),
        subject_ids=[g.subject_id for g in graphs],
        sex_tags=[g.sex_tag for g in graphs],
    )


def unbatch(b: GraphBatch) -> list[RegressionGraph]:
    off = b.offsets
    out = []
    edge_graph = b.graph_id[b.edges[:, 0]] if len(b.edges) else np.zeros(0, dtype=np.int64)
    for i in range(b.n_graphs):
        e = b.edges[edge_graph == i] - off[i]
        out.append(RegressionGraph(b.x[off[i]:off[i + 1]], e, b.y[i],
                                   b.subject_ids[i], b.sex_tags[i]))
    return out


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["subject_id", "mesh_path", "vat_mm3", "asat_mm3", "sex_tag",
                     "height", "weight", "age", "decimation"],
        "properties": {
            "subject_id": {"type": "string", "minLength": 1},
            "mesh_path": {"type": "string"},
            "vat_mm3": {"type": "number", "minimum": 0},
            "asat_mm3": {"type": "number", "minimum": 0},
            "sex_tag": {"enum": list(SEX_TAGS)},
            "height": {"type": "number"},
            "weight": {"type": "number"},
            "age": {"type": "number"},
            "decimation": {"type": ["integer", "null"]},
        },
        "additionalProperties": False,
    },
}


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    mesh_path: str
    vat_mm3: float
    asat_mm3: float
    sex_tag: str
    height: float
    weight: float
    age: float
    decimation: int | None

    @classmethod
    def from_labels(cls, labels: SubjectLabels, mesh_path, decimation=None) -> "ManifestEntry":
        return cls(mesh_path=str(mesh_path), decimation=decimation, **labels.to_dict())

    def labels(self) -> SubjectLabels:
        return SubjectLabels(self.subject_id, self.vat_mm3, self.asat_mm3, self.sex_tag,
                             self.height, self.weight, self.age)


def write_manifest(path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = [asdict(e) for e in entries]
    validate(data, MANIFEST_SCHEMA, "manifest")
    path.write_text(json.dumps(data, indent=1))
    return path


def read_manifest(path) -> list[ManifestEntry]:
    data = json.loads(Path(path).read_text())
    validate(data, MANIFEST_SCHEMA, str(path))
    return [ManifestEntry(**d) for d in data]
