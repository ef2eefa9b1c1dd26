"""Label space over parts and relation-type tuples, marginalization of the
patch distribution into appearance and IDPR log-probabilities, and the dense
score-map stack with its binary file format."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChannelTableError,
    IndexRangeError,
    InvalidTypeError,
    LabelError,
    TruncatedPayloadError,
    VersionMismatchError,
)

#: Log-probabilities are clamped from below at this value.
LOG_FLOOR = -30.0

MAGIC = b"IDPR"
FILE_VERSION = 1
_NONE = 0xFFFFFFFF


@dataclass(frozen=True)
class PatchLabel:
    """Classifier target: ``c = 0`` is background, ``c = i + 1`` is part ``i``.

    ``relation_types`` lists one type per neighbor of the part, in the sorted
    neighbor order of the graph; it is empty for background.
    """
    c: int
    relation_types: tuple = ()

    @classmethod
    def background(cls):
        return cls(0, ())

    @classmethod
    def for_part(cls, part, relation_types):
        return cls(part + 1, tuple(int(t) for t in relation_types))

    @property
    def part(self):
        return self.c - 1


class SpaceIndex:
    """Bijection between labels and flat classifier output indices.

    Flat index 0 is background; part ``i`` owns a contiguous block of
    ``prod_j T_ij`` indices laid out in row-major order over its neighbors.
    """

    def __init__(self, graph, relations):
        relations.check(graph)
        self.num_parts = graph.num_parts
        self.neighbors = tuple(graph.neighbors(i) for i in range(graph.num_parts))
        self.shapes = tuple(tuple(relations.type_count(i, j) for j in nbrs)
                            for i, nbrs in enumerate(self.neighbors))
        self.sizes = tuple(int(np.prod(s, dtype=np.int64)) for s in self.shapes)
        offsets = [1]
        for size in self.sizes[:-1]:
            offsets.append(offsets[-1] + size)
        self.offsets = tuple(offsets)
        self.flat_size = 1 + sum(self.sizes)

    def __repr__(self):
        return f"SpaceIndex(parts={self.num_parts}, flat_size={self.flat_size})"

    def block(self, i):
        return slice(self.offsets[i], self.offsets[i] + self.sizes[i])

    def slot(self, i, j):
        """Position of neighbor ``j`` within part ``i``'s type tuple."""
        try:
            return self.neighbors[i].index(j)
        except ValueError:
            raise InvalidTypeError(f"({i}, {j}) is not a directed edge") from None

    def encode(self, label):
        if label.c == 0:
            if label.relation_types:
                raise LabelError("background labels carry no relation types")
            return 0
        i = label.part
        if not 0 <= i < self.num_parts:
            raise LabelError(f"part label {label.c} out of range")
        shape = self.shapes[i]
        if len(label.relation_types) != len(shape):
            raise LabelError(f"part {i} needs {len(shape)} relation types")
        flat = 0
        for t, n in zip(label.relation_types, shape):
            if not 0 <= t < n:
                raise LabelError(f"type {t} out of range for part {i}")
            flat = flat * n + t
        return self.offsets[i] + flat

    def decode(self, n):
        if not 0 <= n < self.flat_size:
            raise LabelError(f"flat index {n} out of range")
        if n == 0:
            return PatchLabel.background()
        i = int(np.searchsorted(self.offsets, n, side="right")) - 1
        rem = n - self.offsets[i]
        types = []
        for size in reversed(self.shapes[i]):
            types.append(rem % size)
            rem //= size
        return PatchLabel.for_part(i, reversed(types))

    def label_for(self, part, types):
        """Label of a patch centered on ``part`` given a pose's type assignment."""
        return PatchLabel.for_part(part, [types[(part, j)] for j in self.neighbors[part]])


def _log_clamped(p):
    with np.errstate(divide="ignore"):
        out = np.log(p)
    return np.maximum(np.nan_to_num(out, nan=LOG_FLOOR, neginf=LOG_FLOOR), LOG_FLOOR)


def _check_part(space, i):
    if not 0 <= i < space.num_parts:
        raise IndexRangeError(f"part {i} out of range")


def marginal_appearance(dist, space, i):
    """``log p(c = part i)``, clamped at :data:`LOG_FLOOR`."""
    _check_part(space, i)
    dist = np.asarray(dist, dtype=np.float64)
    return float(_log_clamped(dist[space.block(i)].sum()))


def marginal_idpr(dist, space, i, j, t):
    """``log p(m_ij = t | c = part i)``, clamped; the floor if ``p(c = i) = 0``."""
    _check_part(space, i)
    s = space.slot(i, j)
    shape = space.shapes[i]
    if not 0 <= t < shape[s]:
        raise InvalidTypeError(f"type {t} invalid for edge ({i}, {j})")
    block = np.asarray(dist, dtype=np.float64)[space.block(i)].reshape(shape)
    total = block.sum()
    if total <= 0:
        return LOG_FLOOR
    mass = np.take(block, t, axis=s).sum()
    return float(_log_clamped(mass / total))


def marginalize(dists, space):
    """Batched marginals of ``dists`` with shape ``(N, flat_size)``.

    Returns ``(appearance, idpr)``: an ``(K, N)`` array and a dict mapping each
    directed edge to a ``(T, N)`` array, all clamped log-probabilities.
    """
    dists = np.asarray(dists, dtype=np.float64)
    n = dists.shape[0]
    appearance = np.empty((space.num_parts, n))
    idpr = {}
    for i in range(space.num_parts):
        shape = space.shapes[i]
        block = dists[:, space.block(i)].reshape((n,) + shape)
        total = block.reshape(n, -1).sum(axis=1)
        appearance[i] = _log_clamped(total)
        safe = np.where(total > 0, total, 1.0)
        for s, j in enumerate(space.neighbors[i]):
            axes = tuple(a + 1 for a in range(len(shape)) if a != s)
            cond = block.sum(axis=axes).T / safe
            logs = _log_clamped(cond)
            logs[:, total <= 0] = LOG_FLOOR
            idpr[(i, j)] = logs
    return appearance, idpr


@dataclass(frozen=True)
class ScoreMapStack:
    """Dense per-location log-probability grids, indexed ``[..., y, x]``.

    ``appearance`` has shape ``(K, H, W)``; ``idpr[(i, j)]`` has shape
    ``(T_ij, H, W)``.  Values are stored as float32.
    """
    appearance: np.ndarray
    idpr: dict
    stride: int = 1

    def __post_init__(self):
        app = np.array(self.appearance, dtype="<f4", copy=True)
        if app.ndim != 3:
            raise ValueError("appearance maps must have shape (K, H, W)")
        idpr = {}
        for key, val in self.idpr.items():
            arr = np.array(val, dtype="<f4", copy=True)
            if arr.ndim != 3 or arr.shape[1:] != app.shape[1:] or arr.shape[0] < 1:
                raise ValueError(f"IDPR maps for {key} must have shape (T, H, W)")
            arr.flags.writeable = False
            idpr[(int(key[0]), int(key[1]))] = arr
        for arr in (app, *idpr.values()):
            if not np.all(np.isfinite(arr)):
                raise ValueError("score maps must be finite")
        if int(self.stride) < 1:
            raise ValueError("stride must be >= 1")
        app.flags.writeable = False
        object.__setattr__(self, "appearance", app)
        object.__setattr__(self, "idpr", idpr)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def width(self):
        return self.appearance.shape[2]

    @property
    def height(self):
        return self.appearance.shape[1]

    @property
    def num_parts(self):
        return self.appearance.shape[0]

    def type_count(self, i, j):
        return self.idpr[(i, j)].shape[0]

    def channels(self):
        """Channel directory ``(part, neighbor, type)`` in file order."""
        out = [(i, _NONE, _NONE) for i in range(self.num_parts)]
        for (i, j), arr in self.idpr.items():
            out.extend((i, j, t) for t in range(arr.shape[0]))
        return out

    def planes(self):
        yield from self.appearance
        for arr in self.idpr.values():
            yield from arr

    def identical(self, other):
        """Bit-level equality of every plane and of the channel layout."""
        return (self.stride == other.stride
                and self.channels() == other.channels()
                and all(a.tobytes() == b.tobytes()
                        for a, b in zip(self.planes(), other.planes())))

    def check(self, graph, relations):
        if self.num_parts != graph.num_parts:
            raise ChannelTableError("appearance map count does not match the graph")
        for e in graph.directed_edges:
            if e not in self.idpr:
                raise ChannelTableError(f"missing IDPR maps for edge {e}")
            if self.type_count(*e) != relations.type_count(*e):
                raise ChannelTableError(f"IDPR map count for edge {e} != T_ij")


def save_score_maps(stack, path):
    """Write ``stack`` in the little-endian ``IDPR`` container format."""
    channels = stack.channels()
    parts = [MAGIC, struct.pack("<5I", FILE_VERSION, stack.width, stack.height,
                                stack.stride, len(channels))]
    parts.append(np.asarray(channels, dtype="<u4").tobytes())
    for plane in stack.planes():
        parts.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_score_maps(path):
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an IDPR score-map file")
    if len(data) < 24:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, w, h, stride, count = struct.unpack_from("<5I", data, 4)
    if version != FILE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FILE_VERSION}")
    if w < 1 or h < 1 or stride < 1 or count < 1:
        raise ChannelTableError(f"{path}: invalid dimensions {w}x{h}, stride {stride}, "
                                f"{count} channels")
    dir_end = 24 + 12 * count
    need = dir_end + 4 * w * h * count
    if len(data) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(data)}")
    if len(data) > need:
        raise ChannelTableError(f"{path}: {len(data) - need} trailing bytes after planes")
    table = np.frombuffer(data, dtype="<u4", count=3 * count, offset=24).reshape(count, 3)
    planes = np.frombuffer(data, dtype="<f4", count=w * h * count,
                           offset=dir_end).reshape(count, h, w)
    appearance, idpr = [], {}
    for n, (a, b, t) in enumerate(table.tolist()):
        if b == _NONE and t == _NONE:
            if idpr or a != len(appearance):
                raise ChannelTableError(f"{path}: appearance channel {n} out of order")
            appearance.append(planes[n])
            continue
        if b == _NONE or t == _NONE:
            raise ChannelTableError(f"{path}: malformed channel entry {n}")
        chans = idpr.setdefault((a, b), [])
        if t != len(chans):
            raise ChannelTableError(f"{path}: IDPR types for edge ({a}, {b}) not contiguous")
        chans.append(planes[n])
    if not appearance:
        raise ChannelTableError(f"{path}: no appearance channels")
    k = len(appearance)
    for a, b in idpr:
        if not (a < k and b < k) or (b, a) not in idpr:
            raise ChannelTableError(f"{path}: edge ({a}, {b}) inconsistent with {k} parts")
    return ScoreMapStack(np.stack(appearance), {e: np.stack(v) for e, v in idpr.items()},
                         stride)
