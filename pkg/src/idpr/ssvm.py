"""Weight learning: sparse joint feature vectors, negative mining, and a
projected subgradient solver for the binary hinge objective

    0.5 * <w, w> + C * sum_n max(0, 1 - y_n <w, phi_n>)
"""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, LabelError, OutOfBoundsError
from .inference import MASK_PENALTY, infer
from .model import EPSILON, Mode, Pose, TypeAssignment, Weights, deformation_features

log = logging.getLogger(__name__)


class WeightLayout:
    """Ordering of the weight slots that are free parameters in a mode.

    Slot names: ``("unary", i)``, ``("idpr", i, j)``, ``("prior", i, j, t)``,
    ``("deform", i, j, t, c)`` with ``c`` in 0..3, and ``("bias",)``.
    """

    def __init__(self, graph, relations, mode=Mode.FULL):
        self.graph = graph
        self.relations = relations
        self.mode = Mode(mode)
        slots = [("unary", i) for i in range(graph.num_parts)]
        if self.mode is not Mode.UNARY_ONLY:
            for i, j in graph.directed_edges:
                if self.mode is Mode.FULL:
                    slots.append(("idpr", i, j))
                else:
                    slots.extend(("prior", i, j, t)
                                 for t in range(relations.type_count(i, j)))
            for i, j in graph.directed_edges:
                for t in range(relations.type_count(i, j)):
                    slots.extend(("deform", i, j, t, c) for c in range(4))
        slots.append(("bias",))
        self.slots = tuple(slots)
        self.index = {s: n for n, s in enumerate(slots)}
        self.quad_mask = np.array([s[0] == "deform" and s[4] in (1, 3) for s in slots])
        self.evidence_mask = np.array([s[0] in ("unary", "idpr") for s in slots])

    def __len__(self):
        return len(self.slots)

    def to_vector(self, weights):
        vec = np.empty(len(self.slots))
        for n, s in enumerate(self.slots):
            kind = s[0]
            if kind == "unary":
                vec[n] = weights.unary[s[1]]
            elif kind == "idpr":
                vec[n] = weights.idpr[(s[1], s[2])]
            elif kind == "prior":
                vec[n] = weights.prior[(s[1], s[2])][s[3]]
            elif kind == "deform":
                vec[n] = weights.deform[(s[1], s[2])][s[3], s[4]]
            else:
                vec[n] = weights.bias
        return vec

    def from_vector(self, vec):
        """Weights for this mode; slots absent from the layout take defaults
        (zero IDPR weights, ``[0, -eps, 0, -eps]`` deformations)."""
        g, rel = self.graph, self.relations
        unary = np.zeros(g.num_parts)
        idpr = {e: 0.0 for e in g.directed_edges}
        deform = {e: np.tile([0.0, -EPSILON, 0.0, -EPSILON], (rel.type_count(*e), 1))
                  for e in g.directed_edges}
        prior = None
        if self.mode is Mode.NO_IDPRS:
            prior = {e: np.zeros(rel.type_count(*e)) for e in g.directed_edges}
        bias = 0.0
        for n, s in enumerate(self.slots):
            kind, v = s[0], float(vec[n])
            if kind == "unary":
                unary[s[1]] = v
            elif kind == "idpr":
                idpr[(s[1], s[2])] = v
            elif kind == "prior":
                prior[(s[1], s[2])][s[3]] = v
            elif kind == "deform":
                deform[(s[1], s[2])][s[3], s[4]] = v
            else:
                bias = v
        return Weights(unary, idpr, deform, bias, self.mode, prior)


@dataclass(frozen=True)
class FeatureVector:
    """Sparse joint feature vector: ``values[n]`` sits at slot ``indices[n]``."""
    layout: WeightLayout
    indices: np.ndarray
    values: np.ndarray

    def dense(self):
        out = np.zeros(len(self.layout))
        np.add.at(out, self.indices, self.values)
        return out

    def as_dict(self):
        return {self.layout.slots[i]: float(v) for i, v in zip(self.indices, self.values)}

    def dot(self, weights):
        vec = weights if isinstance(weights, np.ndarray) else self.layout.to_vector(weights)
        return float(np.dot(vec[self.indices], self.values))


@dataclass(frozen=True)
class TrainingExample:
    features: FeatureVector
    y: int
    pose: Pose = None
    types: TypeAssignment = None

    def __post_init__(self):
        if self.y not in (1, -1):
            raise LabelError("training labels must be +1 or -1")


def build_feature_vector(maps, pose, types, graph, relations, mode=Mode.FULL, layout=None):
    """Feature vector whose dot product with any weights of ``mode`` equals
    :func:`full_score` of ``(pose, types)``."""
    layout = layout or WeightLayout(graph, relations, mode)
    mode = layout.mode
    idx, val = [], []
    cells = [pose.grid_index(i) for i in range(graph.num_parts)]
    for i, (x, y) in enumerate(cells):
        grid = maps.appearance[i]
        if not (0 <= x < grid.shape[1] and 0 <= y < grid.shape[0]):
            raise OutOfBoundsError(f"part {i} at ({x}, {y}) is off the map grid")
        idx.append(layout.index[("unary", i)])
        val.append(float(grid[y, x]))
    if mode is not Mode.UNARY_ONLY:
        locs = pose.locations
        for i, j in graph.directed_edges:
            t = types[(i, j)]
            if mode is Mode.FULL:
                x, y = cells[i]
                idx.append(layout.index[("idpr", i, j)])
                val.append(float(maps.idpr[(i, j)][t][y, x]))
            else:
                idx.append(layout.index[("prior", i, j, t)])
                val.append(1.0)
            psi = deformation_features(locs[j] - locs[i] - relations.offset(i, j, t))
            for c in range(4):
                idx.append(layout.index[("deform", i, j, t, c)])
                val.append(psi[c])
    idx.append(layout.index[("bias",)])
    val.append(1.0)
    return FeatureVector(layout, np.array(idx, dtype=np.int64), np.array(val))


def objective(weights, examples, C):
    """Exact value of the regularized hinge objective."""
    if not examples:
        vec = np.asarray(weights, dtype=np.float64)
        return 0.5 * float(vec @ vec)
    layout = examples[0].features.layout
    vec = weights if isinstance(weights, np.ndarray) else layout.to_vector(weights)
    x = np.stack([ex.features.dense() for ex in examples])
    y = np.array([ex.y for ex in examples], dtype=np.float64)
    return _objective(np.asarray(vec, dtype=np.float64), x, y, C)


def _objective(w, x, y, C):
    margins = y * (x @ w)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


@dataclass
class SsvmConfig:
    """Solver settings.  ``eta0`` may be a sequence of initial steps; each is
    run in turn from the same start and the best iterate over all runs wins."""
    C: float = 1.0
    epochs: int = 1000
    batch_size: int = 0          # 0: full batch
    eta0: object = (0.9, 0.5, 0.3, 0.2)
    decay: float = 0.1           # step eta_t = eta0 / (1 + decay * t)
    epsilon: float = EPSILON
    seed: int = 0
    nonnegative_evidence: bool = False   # keep unary and IDPR weights >= 0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if any(e <= 0 for e in self.steps):
            raise ValueError("initial steps must be positive")

    @property
    def steps(self):
        return (float(self.eta0),) if np.isscalar(self.eta0) else tuple(map(float, self.eta0))


@dataclass
class SolverResult:
    w: np.ndarray
    objective: float
    history: list        # (epoch, objective of iterate, best objective so far)


def subgradient_descent(x, y, config, quad_mask=None, w0=None, nonneg_mask=None):
    """Projected stochastic subgradient descent on the hinge objective.

    Rows of ``x`` are dense feature vectors, ``y`` holds +1/-1.  After every
    step the slots flagged in ``quad_mask`` are projected to ``<= -epsilon``
    and those flagged in ``nonneg_mask`` to ``>= 0``.
    The best iterate by objective (checked once per epoch, across all initial
    steps) is returned; ``history`` numbers epochs consecutively across runs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, dim = x.shape
    if n == 0:
        raise DatasetError("no training examples")
    if np.all(y == y[0]):
        raise DatasetError("training needs both positive and negative examples")
    quad_mask = np.zeros(dim, dtype=bool) if quad_mask is None else np.asarray(quad_mask)
    nonneg_mask = np.zeros(dim, dtype=bool) if nonneg_mask is None else np.asarray(nonneg_mask)
    C = config.C
    start = np.zeros(dim) if w0 is None else np.array(w0, dtype=np.float64)
    start[quad_mask] = np.minimum(start[quad_mask], -config.epsilon)
    start[nonneg_mask] = np.maximum(start[nonneg_mask], 0.0)
    batch = n if config.batch_size <= 0 else min(config.batch_size, n)
    best_w, best_obj = start.copy(), _objective(start, x, y, C)
    history = [(0, best_obj, best_obj)]
    epoch = 0
    for eta0 in config.steps:
        rng = np.random.default_rng(config.seed)
        w = start.copy()
        step = 0
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch):
                rows = order[s:s + batch]
                viol = y[rows] * (x[rows] @ w) < 1.0
                grad = w - C * (n / len(rows)) * (y[rows][viol] @ x[rows][viol])
                w = w - eta0 / (1.0 + config.decay * step) * grad
                w[quad_mask] = np.minimum(w[quad_mask], -config.epsilon)
                w[nonneg_mask] = np.maximum(w[nonneg_mask], 0.0)
                step += 1
            epoch += 1
            obj = _objective(w, x, y, C)
            if obj < best_obj:
                best_obj, best_w = obj, w.copy()
            history.append((epoch, obj, best_obj))
    return SolverResult(best_w, best_obj, history)


def train_weights(examples, config, layout=None, return_result=False):
    """Learn weights from labelled feature vectors.

    Returns :class:`Weights` in the layout's mode (or ``(weights, result)``
    with ``return_result=True``).
    """
    if not examples:
        raise DatasetError("no training examples")
    layout = layout or examples[0].features.layout
    x = np.stack([ex.features.dense() for ex in examples])
    y = np.array([ex.y for ex in examples], dtype=np.float64)
    nonneg = layout.evidence_mask if config.nonnegative_evidence else None
    result = subgradient_descent(x, y, config, layout.quad_mask, nonneg_mask=nonneg)
    weights = layout.from_vector(result.w)
    return (weights, result) if return_result else weights


def limb_scale(pose, graph):
    """Per part: the longest incident limb of ``pose``."""
    out = np.zeros(graph.num_parts)
    for i, j in graph.edges:
        length = float(np.linalg.norm(pose.locations[i] - pose.locations[j]))
        out[i] = max(out[i], length)
        out[j] = max(out[j], length)
    return out


def all_parts_wrong(pose, gt, graph, fraction=0.5):
    """True iff every part is more than ``fraction`` of its longest incident
    limb away from the annotation."""
    scale = limb_scale(gt, graph)
    err = np.linalg.norm(pose.locations - gt.locations, axis=1)
    return bool(np.all(err > fraction * scale))


def rederive_types(pose, gt_types, graph, relations):
    """Nearest-center types of ``pose``, moved off the ground-truth type when
    an edge has more than one type."""
    types = TypeAssignment()
    for i, j in graph.directed_edges:
        centers = relations.mean_offsets[(i, j)]
        d = pose.locations[j] - pose.locations[i]
        dist = ((centers - d) ** 2).sum(axis=1)
        order = np.argsort(dist, kind="stable")
        t = int(order[0])
        if gt_types is not None and t == gt_types[(i, j)] and len(order) > 1:
            t = int(order[1])
        types[(i, j)] = t
    return types


def perturb_pose(gt, graph, width, height, rng, fraction=0.5, max_tries=200):
    """Random on-grid pose with every part farther than ``fraction`` of its
    longest incident limb from ``gt``; ``None`` if none was found."""
    scale = limb_scale(gt, graph)
    locs = np.empty((graph.num_parts, 2))
    for i in range(graph.num_parts):
        for _ in range(max_tries):
            cand = np.array([rng.integers(width), rng.integers(height)], dtype=np.float64)
            if np.linalg.norm(cand - gt.locations[i]) > fraction * scale[i]:
                locs[i] = cand
                break
        else:
            return None
    return Pose(locs)


def exclusion_mask(gt, graph, width, height, fraction=0.5):
    """Per-part penalty grids forbidding locations near the annotation."""
    scale = limb_scale(gt, graph)
    yy, xx = np.mgrid[0:height, 0:width]
    out = []
    for i in range(graph.num_parts):
        gx, gy = gt.locations[i]
        near = np.hypot(xx - np.floor(gx), yy - np.floor(gy)) <= fraction * scale[i]
        out.append(np.where(near, MASK_PENALTY, 0.0))
    return out


def mine_negative_examples(positives, negative_maps, weights, graph, relations, count,
                           seed=0, hard_fraction=0.5, layout=None):
    """Negative examples (``y = -1``) for the current weights.

    ``positives`` is a list of ``(maps, pose, types)``; ``negative_maps`` a
    list of score-map stacks of images without people.  Half of the examples
    (rounded up) come from the best configuration on negative images, cycling
    through them; the rest come from positive images with every part moved
    more than half a limb length away from its annotation: either the best
    such configuration under the current weights (``hard_fraction``) or a
    random one, with types re-derived from the displaced geometry.
    """
    if count > 0 and not negative_maps:
        raise DatasetError("negative mining needs at least one negative image")
    layout = layout or WeightLayout(graph, relations, weights.mode)
    mode = layout.mode
    rng = np.random.default_rng(seed)
    out = []
    n_neg = (count + 1) // 2 if positives else count
    order = rng.permutation(len(negative_maps))
    for n in range(n_neg):
        maps = negative_maps[order[n % len(order)]]
        res = infer(maps, weights, relations, graph, mode=mode)
        out.append(TrainingExample(
            build_feature_vector(maps, res.pose, res.types, graph, relations, mode, layout),
            -1, res.pose, res.types))
    attempts = 0
    while len(out) < count and positives and attempts < 20 * count:
        attempts += 1
        maps, gt, gt_types = positives[int(rng.integers(len(positives)))]
        if rng.random() < hard_fraction:
            pen = exclusion_mask(gt, graph, maps.width, maps.height)
            res = infer(maps, weights, relations, graph, mode=mode, penalties=pen)
            pose, types = res.pose, res.types
        else:
            pose = perturb_pose(gt, graph, maps.width, maps.height, rng)
            if pose is None:
                continue
            types = rederive_types(pose, gt_types, graph, relations)
        if not all_parts_wrong(pose, gt, graph):
            continue
        out.append(TrainingExample(
            build_feature_vector(maps, pose, types, graph, relations, mode, layout),
            -1, pose, types))
    return out


def positive_examples(positives, graph, relations, mode, layout=None):
    layout = layout or WeightLayout(graph, relations, mode)
    return [TrainingExample(build_feature_vector(m, p, t, graph, relations, mode, layout),
                            1, p, t) for m, p, t in positives]
