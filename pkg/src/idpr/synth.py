"""Synthetic stick figures with planted angular modes per limb."""
from dataclasses import dataclass, field

import numpy as np

from .data import AnnotatedImage
from .errors import IDPRError
from .model import PartGraph, Pose


class SynthesisError(IDPRError, ValueError):
    pass


@dataclass
class Skeleton:
    """Figure layout: a part graph plus, for every edge (parent, child) as
    seen from the root, a limb length and the planted limb angles (degrees,
    image coordinates with y pointing down)."""
    graph: PartGraph
    lengths: dict
    modes: dict

    def to_dict(self):
        return {"graph": self.graph.to_dict(),
                "lengths": {f"{a}-{b}": v for (a, b), v in self.lengths.items()},
                "modes": {f"{a}-{b}": list(v) for (a, b), v in self.modes.items()}}

    @classmethod
    def from_dict(cls, d):
        def key(s):
            a, b = s.split("-")
            return int(a), int(b)
        return cls(PartGraph.from_dict(d["graph"]),
                   {key(k): float(v) for k, v in d["lengths"].items()},
                   {key(k): [float(a) for a in v] for k, v in d["modes"].items()})

    def limbs(self):
        """``(parent, child)`` pairs in breadth-first order from the root."""
        g = self.graph
        return [(g.parents[c], c) for c in g.topological_order[1:]]


def stick_skeleton(arm=7.0, head=5.0):
    """Four-part figure: head, neck (root), left and right hands."""
    graph = PartGraph(4, [(1, 0), (1, 2), (1, 3)], root=1,
                      part_names=("head", "neck", "lhand", "rhand"),
                      left_right_pairs=[(2, 3)])
    lengths = {(1, 0): head, (1, 2): arm, (1, 3): arm}
    modes = {(1, 0): [-120.0, -90.0, -60.0],
             (1, 2): [135.0, 180.0, 225.0],
             (1, 3): [45.0, 0.0, -45.0]}
    return Skeleton(graph, lengths, modes)


def chain_skeleton(num_parts, length, modes):
    """Path-shaped figure with the same planted modes on every limb."""
    graph = PartGraph(num_parts, [(i, i + 1) for i in range(num_parts - 1)], root=0)
    return Skeleton(graph, {(i, i + 1): float(length) for i in range(num_parts - 1)},
                    {(i, i + 1): list(modes) for i in range(num_parts - 1)})


@dataclass
class SynthConfig:
    num_images: int = 100
    num_negatives: int = 20
    width: int = 24
    height: int = 24
    skeleton: Skeleton = field(default_factory=stick_skeleton)
    angle_jitter_deg: float = 6.0
    limb_width: float = 1.2
    limb_intensity: float = 0.85
    background: float = 0.2
    texture_jitter: float = 0.08
    noise_level: float = 0.08
    num_distractors: int = 2
    distractor_length: float = 6.0
    margin: float = 1.0
    seed: int = 0
    id_prefix: str = "synth"

    def __post_init__(self):
        if isinstance(self.skeleton, dict):
            self.skeleton = Skeleton.from_dict(self.skeleton)


def _instance_rng(seed, n, stream):
    return np.random.default_rng(np.random.SeedSequence([seed, stream, n]))


def _draw_segment(canvas, p, q, width, value):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = q - p
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / denom, 0.0, 1.0)
    dist = np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))
    # one-pixel linear falloff at the stroke boundary
    cover = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    canvas[:] = canvas * (1.0 - cover) + value * cover


def _background(cfg, rng):
    h, w = cfg.height, cfg.width
    img = np.full((h, w), cfg.background)
    for _ in range(cfg.num_distractors):
        p = rng.uniform([0, 0], [w - 1, h - 1])
        th = rng.uniform(0, 2 * np.pi)
        q = p + cfg.distractor_length * np.array([np.cos(th), np.sin(th)])
        value = cfg.limb_intensity + cfg.texture_jitter * rng.uniform(-1, 1)
        _draw_segment(img, p, q, cfg.limb_width, value)
    return img


def _finish(img, cfg, rng):
    if cfg.noise_level > 0:
        img = img + rng.normal(0.0, cfg.noise_level, img.shape)
    return np.clip(img, 0.0, 1.0)


def _figure(cfg, rng):
    sk = cfg.skeleton
    g = sk.graph
    rel = np.zeros((g.num_parts, 2))
    modes = {}
    for parent, child in sk.limbs():
        key = (parent, child) if (parent, child) in sk.lengths else (child, parent)
        m = int(rng.integers(len(sk.modes[key])))
        modes[f"{parent}-{child}"] = m
        th = np.deg2rad(sk.modes[key][m] + cfg.angle_jitter_deg * rng.uniform(-1, 1))
        rel[child] = rel[parent] + sk.lengths[key] * np.array([np.cos(th), np.sin(th)])
    lo = cfg.margin - rel.min(axis=0)
    hi = np.array([cfg.width - 1, cfg.height - 1]) - cfg.margin - rel.max(axis=0)
    lo, hi = np.ceil(lo), np.floor(hi)
    if np.any(lo > hi):
        span = rel.max(axis=0) - rel.min(axis=0)
        raise SynthesisError(
            f"figure spans {span[0]:.1f}x{span[1]:.1f} px which does not fit a "
            f"{cfg.width}x{cfg.height} grid with margin {cfg.margin}")
    root = np.array([rng.integers(lo[0], hi[0] + 1), rng.integers(lo[1], hi[1] + 1)],
                    dtype=np.float64)
    return root + rel, modes


def synth_stickfigures(cfg):
    """Render ``cfg.num_images`` positives and ``cfg.num_negatives`` negatives.

    Each limb's angle is one of its planted modes plus uniform jitter; the
    chosen mode per limb is recorded in ``meta["modes"]``.  Output is a pure
    function of the config.
    """
    sk = cfg.skeleton
    positives, negatives = [], []
    for n in range(cfg.num_images):
        rng = _instance_rng(cfg.seed, n, 0)
        joints, modes = _figure(cfg, rng)
        img = _background(cfg, rng)
        for parent, child in sk.limbs():
            value = cfg.limb_intensity + cfg.texture_jitter * rng.uniform(-1, 1)
            _draw_segment(img, joints[parent], joints[child], cfg.limb_width, value)
        img = _finish(img, cfg, rng)
        positives.append(AnnotatedImage(img, Pose(joints), None, f"{cfg.id_prefix}_pos{n:05d}",
                                        {"modes": modes}))
    for n in range(cfg.num_negatives):
        rng = _instance_rng(cfg.seed, n, 1)
        img = _finish(_background(cfg, rng), cfg, rng)
        negatives.append(AnnotatedImage(img, None, None, f"{cfg.id_prefix}_neg{n:05d}"))
    return positives, negatives
