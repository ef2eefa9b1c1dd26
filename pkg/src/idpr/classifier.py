"""Probabilistic patch classifier producing ``p(c, m | patch)`` over the label
space, and sliding-window computation of score maps from it.

The classifier is a small feedforward network (ReLU hidden layers, softmax
output) over raw-pixel and/or gradient-orientation-histogram patch features,
trained with minibatch SGD on the softmax cross-entropy.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError, LabelError
from .evidence import PatchLabel, ScoreMapStack, marginalize

log = logging.getLogger(__name__)


def extract_patch(image, center, side):
    """``side x side`` patch centered at ``center = (x, y)`` with edge replication.

    The center pixel sits at row/column ``side // 2`` of the patch.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    x, y = (int(np.floor(c)) for c in center)
    rows = np.clip(np.arange(side) + y - side // 2, 0, h - 1)
    cols = np.clip(np.arange(side) + x - side // 2, 0, w - 1)
    return image[np.ix_(rows, cols)]


def _orientation_histograms(patches, cells, bins):
    if patches.shape[1] < 2:
        # a single pixel has no gradient
        return np.zeros((len(patches), cells * cells * bins))
    gy, gx = np.gradient(patches.astype(np.float64), axis=(1, 2))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    b = np.minimum((ang / np.pi * bins).astype(np.int64), bins - 1)
    n, side, _ = patches.shape
    edges = np.linspace(0, side, cells + 1).astype(np.int64)
    feats = np.zeros((n, cells, cells, bins))
    onehot = np.eye(bins)[b] * mag[..., None]
    for cy in range(cells):
        for cx in range(cells):
            block = onehot[:, edges[cy]:edges[cy + 1], edges[cx]:edges[cx + 1]]
            feats[:, cy, cx] = block.sum(axis=(1, 2))
    return feats.reshape(n, -1)


def featurize(patches, kind="raw+grad", cells=3, bins=8):
    """Feature matrix ``(N, F)`` for a stack of square patches ``(N, s, s)``."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None]
    parts = []
    if "raw" in kind.split("+"):
        parts.append(patches.reshape(len(patches), -1))
    if "grad" in kind.split("+"):
        parts.append(_orientation_histograms(patches, cells, bins))
    if not parts:
        raise ValueError(f"unknown feature kind {kind!r}")
    return np.concatenate(parts, axis=1)


@dataclass
class ClassifierConfig:
    hidden: tuple = (128,)
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    features: str = "raw+grad"
    grad_cells: int = 3
    grad_bins: int = 8
    val_fraction: float = 0.1


@dataclass
class PatchClassifier:
    """Softmax network over patch features; ``params`` alternates weights/biases."""
    params: list
    input_patch_side: int
    feature_config: dict
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    history: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.params[-1].shape[0]

    def features(self, patches):
        cfg = self.feature_config
        x = featurize(patches, cfg["kind"], cfg["cells"], cfg["bins"])
        return (x - self.feature_mean) / self.feature_scale

    def logits(self, x):
        h = x
        n_layers = len(self.params) // 2
        for layer in range(n_layers):
            h = h @ self.params[2 * layer] + self.params[2 * layer + 1]
            if layer < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, patches):
        return _softmax(self.logits(self.features(patches)))

    def save(self, path):
        arrays = {f"param_{n}": p for n, p in enumerate(self.params)}
        np.savez(path, feature_mean=self.feature_mean, feature_scale=self.feature_scale,
                 input_patch_side=self.input_patch_side,
                 feature_kind=self.feature_config["kind"],
                 feature_cells=self.feature_config["cells"],
                 feature_bins=self.feature_config["bins"], **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            n = sum(1 for k in z.files if k.startswith("param_"))
            return cls([z[f"param_{i}"] for i in range(n)], int(z["input_patch_side"]),
                       {"kind": str(z["feature_kind"]), "cells": int(z["feature_cells"]),
                        "bins": int(z["feature_bins"])},
                       z["feature_mean"], z["feature_scale"])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(clf, x, y):
    if len(y) == 0:
        return float("nan")
    z = clf.logits(x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def init_classifier(space, side, config, seed=0, sample_features=None):
    """Untrained classifier: random hidden layers, zero output layer (uniform)."""
    cfg = {"kind": config.features, "cells": config.grad_cells, "bins": config.grad_bins}
    rng = np.random.default_rng(seed)
    if sample_features is None:
        dim = featurize(np.zeros((1, side, side)), cfg["kind"], cfg["cells"], cfg["bins"]).shape[1]
        mean, scale = np.zeros(dim), np.ones(dim)
    else:
        dim = sample_features.shape[1]
        mean = sample_features.mean(axis=0)
        scale = sample_features.std(axis=0)
        scale = np.where(scale > 1e-8, scale, 1.0)
    params = []
    fan_in = dim
    for width in config.hidden:
        params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width)))
        params.append(np.zeros(width))
        fan_in = width
    params.append(np.zeros((fan_in, space.flat_size)))
    params.append(np.zeros(space.flat_size))
    return PatchClassifier(params, side, cfg, mean, scale)


def _gradients(clf, x, y):
    n_layers = len(clf.params) // 2
    acts = [x]
    h = x
    for layer in range(n_layers):
        h = h @ clf.params[2 * layer] + clf.params[2 * layer + 1]
        if layer < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    delta = _softmax(acts[-1])
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    grads = [None] * len(clf.params)
    for layer in reversed(range(n_layers)):
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer:
            delta = (delta @ clf.params[2 * layer].T) * (acts[layer] > 0)
    return grads


def train_patch_classifier(patches, space, config=None, seed=0, validation=None):
    """Fit a classifier on ``[(patch, PatchLabel), ...]``.

    ``validation`` is an optional held-out list of the same form; without it a
    ``config.val_fraction`` split of the data is held out.  The returned
    classifier is the epoch with the lowest training loss; ``history`` records
    ``(epoch, train_loss, held_out_loss)`` with epoch 0 the initial state.
    """
    config = config or ClassifierConfig()
    if not patches:
        raise DatasetError("cannot train a classifier on an empty dataset")
    side = np.asarray(patches[0][0]).shape[0]
    imgs = np.stack([np.asarray(p, dtype=np.float64) for p, _ in patches])
    if imgs.shape[1:] != (side, side):
        raise DatasetError("all patches must be square and of equal size")
    labels = np.array([space.encode(lab) for _, lab in patches], dtype=np.int64)
    missing = np.setdiff1d(np.arange(space.flat_size), labels)
    if missing.size:
        log.warning("%d of %d classes have no training examples", missing.size,
                    space.flat_size)
    rng = np.random.default_rng(seed)
    if validation:
        v_imgs = np.stack([np.asarray(p, dtype=np.float64) for p, _ in validation])
        v_labels = np.array([space.encode(lab) for _, lab in validation], dtype=np.int64)
        t_imgs, t_labels = imgs, labels
    else:
        order = rng.permutation(len(imgs))
        n_val = int(round(config.val_fraction * len(imgs))) if len(imgs) >= 10 else 0
        v_idx, t_idx = order[:n_val], order[n_val:]
        t_imgs, t_labels = imgs[t_idx], labels[t_idx]
        v_imgs, v_labels = imgs[v_idx], labels[v_idx]

    cfg = {"kind": config.features, "cells": config.grad_cells, "bins": config.grad_bins}
    raw_train = featurize(t_imgs, cfg["kind"], cfg["cells"], cfg["bins"])
    clf = init_classifier(space, side, config, seed, raw_train)
    x_train = (raw_train - clf.feature_mean) / clf.feature_scale
    x_val = clf.features(v_imgs) if len(v_imgs) else np.zeros((0, x_train.shape[1]))

    def losses():
        return _cross_entropy(clf, x_train, t_labels), _cross_entropy(clf, x_val, v_labels)

    history = [(0, *losses())]
    best_loss, best_params = history[0][1], [p.copy() for p in clf.params]
    velocity = [np.zeros_like(p) for p in clf.params]
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = _gradients(clf, x_train[batch], t_labels[batch])
            for k, (p, g) in enumerate(zip(clf.params, grads)):
                if k % 2 == 0:
                    g = g + config.weight_decay * p
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * g
                p += velocity[k]
        history.append((epoch, *losses()))
        if history[-1][1] < best_loss:
            best_loss, best_params = history[-1][1], [p.copy() for p in clf.params]
    clf.params = best_params
    clf.history = history
    return clf


def predict_distribution(classifier, patch):
    """Probability vector over the label space for a single patch."""
    patch = np.asarray(patch, dtype=np.float64)
    side = classifier.input_patch_side
    if patch.shape != (side, side):
        raise LabelError(f"patch shape {patch.shape} != ({side}, {side})")
    return classifier.predict_proba(patch[None])[0]


def _lattice_lookup(n, stride):
    """Nearest lattice index for every pixel on an axis of length ``n``."""
    count = (n - 1) // stride + 1
    return np.minimum((np.arange(n) + (stride - 1) // 2) // stride, count - 1)


def compute_score_maps(image, classifier, graph, space, stride=1, chunk=4096):
    """Dense appearance and IDPR maps from a sliding-window classifier pass."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("score maps are computed on single-channel images")
    side = classifier.input_patch_side
    h, w = image.shape
    if h < side or w < side:
        raise DatasetError(f"image {w}x{h} is smaller than one {side}x{side} patch")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    padded = np.pad(image, side, mode="edge")
    windows = sliding_window_view(padded, (side, side))
    ys = np.arange(0, h, stride)
    xs = np.arange(0, w, stride)
    off = side - side // 2
    patches = windows[np.ix_(ys + off, xs + off)].reshape(-1, side, side)
    dists = np.concatenate([classifier.predict_proba(patches[s:s + chunk])
                            for s in range(0, len(patches), chunk)])
    appearance, idpr = marginalize(dists, space)
    iy = _lattice_lookup(h, stride)[:, None]
    ix = _lattice_lookup(w, stride)[None, :]

    def dense(rows):
        return rows.reshape(len(rows), len(ys), len(xs))[:, iy, ix]

    return ScoreMapStack(dense(appearance),
                         {e: dense(idpr[e]) for e in graph.directed_edges}, stride)


def config_dict(config):
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    return d


def labeled_patches(items, type_assignments, graph, space, side, background_per_image=4,
                    negatives=(), min_distance=2.0, seed=0, background_per_negative=None):
    """Training patches for the classifier.

    Every annotated part yields a patch labelled with the part and the types
    of its relations to its neighbors.  Background patches are drawn at
    uniformly random locations of the ``negatives`` (``K`` per image unless
    ``background_per_negative`` says otherwise) and, ``background_per_image``
    per annotated image, at locations at least ``min_distance`` from every
    joint.
    """
    rng = np.random.default_rng(seed)
    per_negative = graph.num_parts if background_per_negative is None else background_per_negative
    out = []
    for item, types in zip(items, type_assignments):
        loc = item.pose.locations
        for i in range(graph.num_parts):
            out.append((extract_patch(item.image, loc[i], side), space.label_for(i, types)))
        if not background_per_image:
            continue
        h, w = item.image.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        cells = np.column_stack([xx.ravel(), yy.ravel()])
        d = np.min(np.linalg.norm(cells[:, None, :] - np.floor(loc)[None], axis=2), axis=1)
        free = cells[d >= min_distance]
        if len(free):
            pick = rng.choice(len(free), size=min(background_per_image, len(free)), replace=False)
            out.extend((extract_patch(item.image, free[n], side), PatchLabel.background())
                       for n in pick)
    for item in negatives:
        h, w = item.image.shape[:2]
        for _ in range(per_negative):
            c = (int(rng.integers(w)), int(rng.integers(h)))
            out.append((extract_patch(item.image, c, side), PatchLabel.background()))
    return out
