"""Core domain types: part graph, poses, relation types, weights, and the
full model score."""
import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    CycleError,
    DisconnectedError,
    GraphError,
    IndexRangeError,
    InvalidTypeError,
    ModeMismatchError,
    OutOfBoundsError,
)

#: Floor on quadratic deformation weights required by the distance transform.
EPSILON = 1e-4

MODEL_FORMAT = "idpr-model"
MODEL_VERSION = 1


class Mode(str, enum.Enum):
    """Which terms of the score are active."""
    FULL = "full"
    UNARY_ONLY = "unary_only"
    NO_IDPRS = "no_idprs"


def _frozen_array(values, dtype=np.float64, shape=None):
    arr = np.array(values, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def validate_graph(graph):
    """Raise a :class:`GraphError` subclass unless ``graph`` is a spanning tree.

    Works on anything with ``num_parts``, ``edges`` and ``root`` attributes.
    """
    k = graph.num_parts
    if k < 1:
        raise GraphError("a graph needs at least one part")
    if not 0 <= graph.root < k:
        raise IndexRangeError(f"root {graph.root} outside [0, {k})")
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    seen = set()
    for i, j in graph.edges:
        if not (0 <= i < k and 0 <= j < k):
            raise IndexRangeError(f"edge ({i}, {j}) has an endpoint outside [0, {k})")
        if i == j:
            raise CycleError(f"self-loop on part {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise CycleError(f"duplicate edge {key}")
        seen.add(key)
        ri, rj = find(i), find(j)
        if ri == rj:
            raise CycleError(f"edge ({i}, {j}) closes a cycle")
        parent[ri] = rj
    roots = {find(i) for i in range(k)}
    if len(roots) > 1:
        raise DisconnectedError(f"graph has {len(roots)} connected components")
    for a, b in getattr(graph, "left_right_pairs", ()):
        if not (0 <= a < k and 0 <= b < k):
            raise IndexRangeError(f"left/right pair ({a}, {b}) out of range")


@dataclass(frozen=True)
class PartGraph:
    """Tree of ``num_parts`` parts.

    Undirected edge ``e = (i, j)`` yields the directed edges ``(i, j)`` and
    ``(j, i)``; both directions carry their own relation types and weights.
    """
    num_parts: int
    edges: tuple
    root: int = 0
    part_names: tuple = ()
    left_right_pairs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "num_parts", int(self.num_parts))
        object.__setattr__(self, "root", int(self.root))
        object.__setattr__(self, "edges",
                           tuple((int(i), int(j)) for i, j in self.edges))
        names = tuple(self.part_names) or tuple(f"p{i}" for i in range(self.num_parts))
        if len(names) != self.num_parts:
            raise GraphError("part_names must have one entry per part")
        object.__setattr__(self, "part_names", names)
        object.__setattr__(self, "left_right_pairs",
                           tuple((int(a), int(b)) for a, b in self.left_right_pairs))
        validate_graph(self)

    @cached_property
    def directed_edges(self):
        out = []
        for i, j in self.edges:
            out.append((i, j))
            out.append((j, i))
        return tuple(out)

    def neighbors(self, i):
        return self._adjacency[i]

    @cached_property
    def _adjacency(self):
        adj = [[] for _ in range(self.num_parts)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def parents(self):
        """Parent of every part when the tree hangs from ``root`` (root: -1)."""
        par = [-1] * self.num_parts
        placed = {self.root}
        for node in self.topological_order:
            for nb in self._adjacency[node]:
                if nb not in placed:
                    placed.add(nb)
                    par[nb] = node
        return tuple(par)

    @cached_property
    def topological_order(self):
        """Breadth-first order from the root; parents precede children."""
        order = [self.root]
        visited = {self.root}
        for node in order:
            for nb in self._adjacency[node]:
                if nb not in visited:
                    visited.add(nb)
                    order.append(nb)
        return tuple(order)

    def children(self, i):
        return tuple(j for j in self._adjacency[i] if self.parents[j] == i)

    def to_dict(self):
        return {
            "num_parts": self.num_parts,
            "edges": [list(e) for e in self.edges],
            "root": self.root,
            "part_names": list(self.part_names),
            "left_right_pairs": [list(p) for p in self.left_right_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["num_parts"], d["edges"], d.get("root", 0),
                   d.get("part_names", ()), d.get("left_right_pairs", ()))


@dataclass(frozen=True)
class Pose:
    """``K`` part locations in pixels, stored as an ``(K, 2)`` array of (x, y)."""
    locations: np.ndarray

    def __post_init__(self):
        loc = _frozen_array(self.locations)
        if loc.ndim != 2 or loc.shape[1] != 2:
            raise ValueError("pose locations must have shape (K, 2)")
        if not np.all(np.isfinite(loc)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "locations", loc)

    def __len__(self):
        return len(self.locations)

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.locations, other.locations)

    def __hash__(self):
        return hash(self.locations.tobytes())

    def grid_index(self, i):
        """Floor-snapped integer (x, y) of part ``i``."""
        x, y = np.floor(self.locations[i]).astype(np.int64)
        return int(x), int(y)


@dataclass(frozen=True)
class RelationModel:
    """Mean offsets ``r_ij^t`` for every directed edge, keyed by ``(i, j)``."""
    mean_offsets: dict

    def __post_init__(self):
        offs = {}
        for key, val in self.mean_offsets.items():
            arr = _frozen_array(val)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
                raise ValueError(f"mean offsets for {key} must have shape (T, 2), T >= 1")
            offs[(int(key[0]), int(key[1]))] = arr
        object.__setattr__(self, "mean_offsets", offs)

    def type_count(self, i, j):
        return len(self.mean_offsets[(i, j)])

    def offset(self, i, j, t):
        return self.mean_offsets[(i, j)][t]

    def check(self, graph):
        for i, j in graph.directed_edges:
            if (i, j) not in self.mean_offsets:
                raise GraphError(f"relation model lacks directed edge ({i}, {j})")
        extra = set(self.mean_offsets) - set(graph.directed_edges)
        if extra:
            raise GraphError(f"relation model has edges not in graph: {sorted(extra)}")

    @classmethod
    def uniform(cls, graph, num_types, offsets=None):
        """Relation model with ``num_types`` types per direction (zero offsets
        unless ``offsets`` maps directed edges to arrays)."""
        offsets = offsets or {}
        return cls({e: offsets.get(e, np.zeros((num_types, 2)))
                    for e in graph.directed_edges})


class TypeAssignment(dict):
    """Mapping from directed edge ``(i, j)`` to its relation type index."""

    def check(self, graph, relations):
        if set(self) != set(graph.directed_edges):
            raise InvalidTypeError("type assignment must cover exactly the directed edges")
        for (i, j), t in self.items():
            if not 0 <= t < relations.type_count(i, j):
                raise InvalidTypeError(
                    f"type {t} invalid for edge ({i}, {j}) with "
                    f"{relations.type_count(i, j)} types")

    @classmethod
    def zeros(cls, graph):
        return cls({e: 0 for e in graph.directed_edges})

    def key(self):
        return tuple(sorted(self.items()))


@dataclass(frozen=True)
class Weights:
    """Weight parameters of the score.

    ``deform[(i, j)]`` is a ``(T_ij, 4)`` array of coefficients for
    ``[dx, dx**2, dy, dy**2]``; ``prior[(i, j)]`` holds one scalar per type and
    is only present in ``Mode.NO_IDPRS``.
    """
    unary: np.ndarray
    idpr: dict
    deform: dict
    bias: float = 0.0
    mode: Mode = Mode.FULL
    prior: dict = None

    def __post_init__(self):
        object.__setattr__(self, "unary", _frozen_array(self.unary))
        object.__setattr__(self, "idpr", {tuple(k): float(v) for k, v in self.idpr.items()})
        object.__setattr__(self, "deform", {tuple(k): _frozen_array(v).reshape(-1, 4)
                                            for k, v in self.deform.items()})
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.prior is not None:
            object.__setattr__(self, "prior", {tuple(k): _frozen_array(v).reshape(-1)
                                               for k, v in self.prior.items()})
        if (self.prior is not None) != (self.mode is Mode.NO_IDPRS):
            raise ModeMismatchError("prior biases are present iff mode is no_idprs")

    @classmethod
    def default(cls, graph, relations, mode=Mode.FULL, unary=1.0, idpr=1.0,
                quad=-0.01, bias=0.0):
        """Hand-set weights: constant unary/IDPR weights, isotropic quadratic."""
        deform = {e: np.tile([0.0, quad, 0.0, quad], (relations.type_count(*e), 1))
                  for e in graph.directed_edges}
        prior = None
        if Mode(mode) is Mode.NO_IDPRS:
            prior = {e: np.zeros(relations.type_count(*e)) for e in graph.directed_edges}
        return cls(np.full(graph.num_parts, unary),
                   {e: idpr for e in graph.directed_edges},
                   deform, bias, mode, prior)

    def concavity_violations(self, eps=EPSILON):
        """Directed edges/types whose quadratic coefficients exceed ``-eps``."""
        bad = []
        for e, w in self.deform.items():
            for t in np.nonzero((w[:, 1] > -eps) | (w[:, 3] > -eps))[0]:
                bad.append((e, int(t)))
        return bad

    def with_mode(self, mode, prior=None):
        mode = Mode(mode)
        if mode is Mode.NO_IDPRS and prior is None:
            prior = {e: np.zeros(len(w)) for e, w in self.deform.items()}
        return Weights(self.unary, self.idpr, self.deform, self.bias, mode,
                       prior if mode is Mode.NO_IDPRS else None)

    def to_dict(self):
        return {
            "mode": self.mode.value,
            "unary": self.unary.tolist(),
            "idpr": {_edge_key(e): v for e, v in self.idpr.items()},
            "deform": {_edge_key(e): w.tolist() for e, w in self.deform.items()},
            "bias": self.bias,
            "prior": None if self.prior is None else
            {_edge_key(e): b.tolist() for e, b in self.prior.items()},
        }

    @classmethod
    def from_dict(cls, d):
        prior = d.get("prior")
        return cls(d["unary"],
                   {_parse_edge_key(k): v for k, v in d["idpr"].items()},
                   {_parse_edge_key(k): v for k, v in d["deform"].items()},
                   d.get("bias", 0.0), d.get("mode", "full"),
                   None if prior is None else
                   {_parse_edge_key(k): v for k, v in prior.items()})


def deformation_features(delta):
    """Quadratic deformation features ``[dx, dx**2, dy, dy**2]``."""
    dx, dy = float(delta[0]), float(delta[1])
    return np.array([dx, dx * dx, dy, dy * dy])


def _lookup(grid, x, y):
    h, w = grid.shape
    if not (0 <= x < w and 0 <= y < h):
        raise OutOfBoundsError(f"location ({x}, {y}) outside {w}x{h} grid")
    return float(grid[y, x])


def full_score(pose, types, maps, weights, graph, relations):
    """Model score of a configuration: unary terms, pairwise terms, and bias.

    Map values are read at floor-snapped pose locations.  The active terms
    follow ``weights.mode``.
    """
    if len(pose) != graph.num_parts:
        raise ValueError("pose length does not match the graph")
    cells = [pose.grid_index(i) for i in range(graph.num_parts)]
    score = weights.bias
    for i, (x, y) in enumerate(cells):
        score += weights.unary[i] * _lookup(maps.appearance[i], x, y)
    if weights.mode is Mode.UNARY_ONLY:
        return score
    if weights.mode is Mode.NO_IDPRS and weights.prior is None:
        raise ModeMismatchError("no_idprs scoring requires prior biases")
    locs = pose.locations
    for i, j in graph.directed_edges:
        t = types[(i, j)]
        if not 0 <= t < relations.type_count(i, j):
            raise InvalidTypeError(f"type {t} invalid for edge ({i}, {j})")
        psi = deformation_features(locs[j] - locs[i] - relations.offset(i, j, t))
        score += float(np.dot(weights.deform[(i, j)][t], psi))
        if weights.mode is Mode.NO_IDPRS:
            score += weights.prior[(i, j)][t]
        else:
            x, y = cells[i]
            score += weights.idpr[(i, j)] * _lookup(maps.idpr[(i, j)][t], x, y)
    return score


def _edge_key(e):
    return f"{e[0]}-{e[1]}"


def _parse_edge_key(s):
    a, b = s.split("-")
    return int(a), int(b)


def relations_to_dict(relations):
    return {_edge_key(e): r.tolist() for e, r in relations.mean_offsets.items()}


def relations_from_dict(d):
    return RelationModel({_parse_edge_key(k): v for k, v in d.items()})


@dataclass(frozen=True)
class Model:
    """Graph, relation types and weights, plus evidence settings."""
    graph: PartGraph
    relations: RelationModel
    weights: Weights
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "graph": self.graph.to_dict(),
            "relations": relations_to_dict(self.relations),
            "weights": self.weights.to_dict(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise ValueError("not an idpr model document")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        graph = PartGraph.from_dict(d["graph"])
        relations = relations_from_dict(d["relations"])
        relations.check(graph)
        return cls(graph, relations, Weights.from_dict(d["weights"]), d.get("extra", {}))


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_model(path):
    return Model.from_dict(json.loads(Path(path).read_text()))
