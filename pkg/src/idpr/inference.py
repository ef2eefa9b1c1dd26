"""Exact maximization of the model score over part locations and relation
types by dynamic programming on the tree, with distance-transform messages."""
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConcavityError, EmptyMaskError, InstanceTooLargeError, ModeMismatchError
from .gdt import QuadCost, gdt_2d_unchecked
from .model import Mode, Pose, TypeAssignment, full_score

#: Score added outside a location mask.
MASK_PENALTY = -1e30


@dataclass(frozen=True)
class RootMask:
    """Inclusive pixel window ``x0 <= x <= x1, y0 <= y <= y1`` for one part.

    ``part=None`` designates the graph root.
    """
    x0: int
    y0: int
    x1: int
    y1: int
    part: int = None

    @classmethod
    def from_box(cls, box, part=None):
        x0, y0, x1, y1 = (int(np.floor(v)) for v in box)
        return cls(x0, y0, x1, y1, part)

    def grid(self, width, height):
        """Additive penalty grid: 0 inside the window, ``MASK_PENALTY`` outside."""
        x0, x1 = max(self.x0, 0), min(self.x1, width - 1)
        y0, y1 = max(self.y0, 0), min(self.y1, height - 1)
        if x0 > x1 or y0 > y1:
            raise EmptyMaskError(f"mask {self} does not intersect the {width}x{height} grid")
        out = np.full((height, width), MASK_PENALTY)
        out[y0:y1 + 1, x0:x1 + 1] = 0.0
        return out

    def contains(self, x, y):
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class InferenceResult:
    pose: Pose
    types: TypeAssignment
    score: float
    per_part_scores: tuple = None


@dataclass(frozen=True)
class EdgeQuadratic:
    """Pairwise deformation score of an edge as a per-axis polynomial
    ``a*D**2 + b*D + c`` in ``D = l_k - l_i``."""
    a: tuple
    b: tuple
    c: tuple

    def __call__(self, delta):
        return sum(self.a[n] * delta[n] ** 2 + self.b[n] * delta[n] + self.c[n]
                   for n in range(2))

    def cost(self):
        """The same quadratic as a :class:`QuadCost` in ``d = l_i - l_k``."""
        return QuadCost(self.a, (-self.b[0], -self.b[1]))

    @property
    def constant(self):
        return self.c[0] + self.c[1]


def combined_quadratic(weights, relations, i, k, t_ik, t_ki):
    """Sum of the forward and reverse deformation terms of edge ``(i, k)``.

    The forward term is ``<w_ik^t, psi(D - r_ik)>`` and the reverse term is
    ``<w_ki^t, psi(-D - r_ki)>`` with ``D = l_k - l_i``.
    """
    fw = weights.deform[(i, k)][t_ik]
    rv = weights.deform[(k, i)][t_ki]
    r_f = relations.offset(i, k, t_ik)
    r_r = relations.offset(k, i, t_ki)
    a, b, c = [], [], []
    for axis in range(2):
        lin_f, quad_f = fw[2 * axis], fw[2 * axis + 1]
        lin_r, quad_r = rv[2 * axis], rv[2 * axis + 1]
        rf, rr = r_f[axis], r_r[axis]
        a.append(quad_f + quad_r)
        b.append(lin_f - 2.0 * quad_f * rf - lin_r + 2.0 * quad_r * rr)
        c.append(quad_f * rf * rf - lin_f * rf + quad_r * rr * rr - lin_r * rr)
    if max(a) >= 0:
        raise ConcavityError(f"edge ({i}, {k}) types ({t_ik}, {t_ki}) has a "
                             f"non-concave combined quadratic {a}")
    return EdgeQuadratic(tuple(a), tuple(b), tuple(c))


def _resolve_mode(weights, mode):
    mode = weights.mode if mode is None else Mode(mode)
    if mode is Mode.NO_IDPRS and weights.prior is None:
        raise ModeMismatchError("no_idprs inference requires prior biases in the weights")
    if mode is not weights.mode:
        weights = weights.with_mode(mode, weights.prior)
    return weights, mode


def _relation_term(weights, maps, mode, i, j, t):
    """Image-dependent (or prior) pairwise term of directed edge ``(i, j)``,
    evaluated at the location of part ``i``."""
    if mode is Mode.NO_IDPRS:
        return float(weights.prior[(i, j)][t])
    return weights.idpr[(i, j)] * maps.idpr[(i, j)][t].astype(np.float64)


def _unaries(maps, weights, graph, mask, penalties):
    out = [weights.unary[i] * maps.appearance[i].astype(np.float64)
           for i in range(graph.num_parts)]
    if penalties is not None:
        out = [u + p for u, p in zip(out, penalties)]
    if mask is not None:
        part = graph.root if mask.part is None else mask.part
        out[part] = out[part] + mask.grid(maps.width, maps.height)
    return out


def _message(parent, child, subtree, maps, weights, relations, mode):
    """Best child contribution for every parent location, with backpointers."""
    t_pc = relations.type_count(parent, child)
    t_cp = relations.type_count(child, parent)
    width = maps.width
    best = np.full(subtree.shape, -np.inf)
    best_pair = np.zeros(subtree.shape, dtype=np.int64)
    best_loc = np.zeros(subtree.shape, dtype=np.int64)
    child_terms = [subtree + _relation_term(weights, maps, mode, child, parent, t)
                   for t in range(t_cp)]
    for a in range(t_pc):
        parent_term = _relation_term(weights, maps, mode, parent, child, a)
        for b in range(t_cp):
            quad = combined_quadratic(weights, relations, parent, child, a, b)
            cost = quad.cost()
            cost.validate()
            vals, qx, qy = gdt_2d_unchecked(child_terms[b], cost)
            cand = vals + quad.constant + parent_term
            better = cand > best
            best = np.where(better, cand, best)
            best_pair[better] = a * t_cp + b
            best_loc[better] = (qy * width + qx)[better]
    return best, best_pair, best_loc


def infer(maps, weights, relations, graph, mask=None, mode=None, penalties=None):
    """Highest-scoring configuration ``(pose, types)`` under ``mode``
    (defaults to ``weights.mode``).

    ``penalties`` optionally adds one grid per part to the unary terms during
    the search (e.g. to exclude regions); the reported score never includes it.

    Ties resolve to the smallest flat location index (``y * W + x``) and then
    the smallest type index.
    """
    weights, mode = _resolve_mode(weights, mode)
    unary = _unaries(maps, weights, graph, mask, penalties)
    k = graph.num_parts
    width = maps.width
    locs = np.zeros((k, 2))
    types = TypeAssignment.zeros(graph)

    if mode is Mode.UNARY_ONLY or k == 1:
        for i in range(k):
            flat = int(np.argmax(unary[i]))
            locs[i] = (flat % width, flat // width)
    else:
        subtree = [None] * k
        back = {}
        for i in reversed(graph.topological_order):
            s = unary[i].copy()
            for c in graph.children(i):
                msg, pair, loc = _message(i, c, subtree[c], maps, weights, relations, mode)
                s += msg
                back[c] = (pair, loc)
                subtree[c] = None
            subtree[i] = s
        flat = int(np.argmax(subtree[graph.root]))
        locs[graph.root] = (flat % width, flat // width)
        for i in graph.topological_order:
            x, y = int(locs[i, 0]), int(locs[i, 1])
            for c in graph.children(i):
                pair, loc = back[c]
                t_cp = relations.type_count(c, i)
                types[(i, c)], types[(c, i)] = divmod(int(pair[y, x]), t_cp)
                child_flat = int(loc[y, x])
                locs[c] = (child_flat % width, child_flat // width)

    pose = Pose(locs)
    score = full_score(pose, types, maps, weights, graph, relations)
    per_part = tuple(float(weights.unary[i] * maps.appearance[i][int(locs[i, 1]), int(locs[i, 0])])
                     for i in range(k))
    return InferenceResult(pose, types, score, per_part)


def brute_force_infer(maps, weights, relations, graph, mask=None, mode=None, limit=10 ** 8):
    """Exhaustive maximization scored through :func:`full_score`.

    Only for tiny instances: raises :class:`InstanceTooLargeError` when the
    number of configurations exceeds ``limit``.
    """
    weights, mode = _resolve_mode(weights, mode)
    k = graph.num_parts
    h, w = maps.height, maps.width
    edges = graph.directed_edges
    type_ranges = [range(relations.type_count(*e)) for e in edges]
    if mode is Mode.UNARY_ONLY:
        type_ranges = [range(1) for _ in edges]
    n_types = int(np.prod([len(r) for r in type_ranges], dtype=np.float64))
    total = float(h * w) ** k * n_types
    if total > limit:
        raise InstanceTooLargeError(f"{total:.3g} configurations exceed the limit {limit:.3g}")
    masked = None
    if mask is not None:
        mask.grid(w, h)
        masked = graph.root if mask.part is None else mask.part
    best = None
    for flats in itertools.product(range(h * w), repeat=k):
        if masked is not None and not mask.contains(flats[masked] % w, flats[masked] // w):
            continue
        pose = Pose([(f % w, f // w) for f in flats])
        for combo in itertools.product(*type_ranges):
            types = TypeAssignment(zip(edges, combo))
            score = full_score(pose, types, maps, weights, graph, relations)
            if best is None or score > best[0]:
                best = (score, pose, types)
    score, pose, types = best
    return InferenceResult(pose, types, score)
