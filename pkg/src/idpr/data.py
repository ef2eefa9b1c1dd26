"""Annotated image datasets: JSONL ingestion, augmentation by rotation and
mirroring, and midway-part expansion of a skeleton."""
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError
from .model import PartGraph, Pose

log = logging.getLogger(__name__)


@dataclass
class AnnotatedImage:
    """Grayscale image in ``[0, 1]`` indexed ``[y, x]``, with an optional pose."""
    image: np.ndarray
    pose: Pose = None
    torso_box: tuple = None
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _in_bounds(pose, width, height):
    loc = pose.locations
    return bool(np.all((loc[:, 0] >= 0) & (loc[:, 0] < width)
                       & (loc[:, 1] >= 0) & (loc[:, 1] < height)))


def load_dataset(path, num_parts=None):
    """Parse a JSONL annotation file.

    Each line holds ``id``, ``image_path`` (relative to the file), ``joints``
    (list of ``[x, y]`` or null) and optionally ``torso_box``.  Malformed
    records raise :class:`DatasetError` naming the line; records whose joints
    leave the image are skipped with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: annotation file not found")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from None
        for key in ("id", "image_path", "joints"):
            if key not in rec:
                raise DatasetError(f"{where}: record is missing field {key!r}")
        joints = rec["joints"]
        pose = None
        if joints is not None:
            if num_parts is not None and len(joints) != num_parts:
                raise DatasetError(f"{where}: record {rec['id']!r} has {len(joints)} joints, "
                                   f"expected {num_parts}")
            try:
                pose = Pose(np.asarray(joints, dtype=np.float64))
            except ValueError as exc:
                raise DatasetError(f"{where}: record {rec['id']!r}: {exc}") from None
        img_path = path.parent / rec["image_path"]
        try:
            image = read_image(img_path)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"{where}: cannot read image {img_path} ({exc})") from None
        box = rec.get("torso_box")
        item = AnnotatedImage(image, pose, tuple(box) if box is not None else None,
                              str(rec["id"]), rec.get("meta", {}))
        if pose is not None and not _in_bounds(pose, item.width, item.height):
            log.warning("%s: joints of %r fall outside the image; record skipped",
                        where, item.id)
            continue
        out.append(item)
    return out


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(items, path, image_dir="images"):
    """Write images as PNG under ``image_dir`` (relative to ``path``) and the
    JSONL index, the index last and atomically."""
    path = Path(path)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in items:
        rel = f"{image_dir}/{item.id}.png"
        write_image(path.parent / rel, item.image)
        rec = {"id": item.id, "image_path": rel,
               "joints": None if item.pose is None else item.pose.locations.tolist()}
        if item.torso_box is not None:
            rec["torso_box"] = [float(v) for v in item.torso_box]
        if item.meta:
            rec["meta"] = item.meta
        lines.append(json.dumps(rec))
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def rotate_points(points, angle_deg, width, height):
    """Rotate ``(N, 2)`` points about the image center by ``angle_deg``
    (``(1, 0)`` maps to ``(0, 1)`` at 90 degrees)."""
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    rel = np.asarray(points, dtype=np.float64) - center
    return np.column_stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]]) + center


def rotate_image(image, angle_deg):
    """Bilinear rotation about the center on an edge-replicated canvas."""
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src = rotate_points(np.column_stack([xx.ravel(), yy.ravel()]), -angle_deg, w, h)
    coords = np.vstack([src[:, 1], src[:, 0]])
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest").reshape(h, w)


def flip_item(item, graph):
    w = item.width
    image = item.image[:, ::-1].copy()
    pose = None
    if item.pose is not None:
        loc = item.pose.locations.copy()
        loc[:, 0] = (w - 1) - loc[:, 0]
        perm = np.arange(graph.num_parts)
        for a, b in graph.left_right_pairs:
            perm[a], perm[b] = b, a
        pose = Pose(loc[perm])
    box = None
    if item.torso_box is not None:
        x0, y0, x1, y1 = item.torso_box
        box = ((w - 1) - x1, y0, (w - 1) - x0, y1)
    return AnnotatedImage(image, pose, box, item.id + "_f", dict(item.meta))


def _rotate_item(item, angle):
    if angle == 0:
        return AnnotatedImage(item.image.copy(), item.pose, item.torso_box, item.id,
                              dict(item.meta))
    h, w = item.image.shape
    pose = None
    if item.pose is not None:
        pose = Pose(rotate_points(item.pose.locations, angle, w, h))
    box = None
    if item.torso_box is not None:
        x0, y0, x1, y1 = item.torso_box
        corners = rotate_points([(x0, y0), (x1, y0), (x0, y1), (x1, y1)], angle, w, h)
        box = (*corners.min(axis=0), *corners.max(axis=0))
    return AnnotatedImage(rotate_image(item.image, angle), pose, box,
                          f"{item.id}_r{angle:g}", dict(item.meta))


def augment(images, rotation_step_deg=10.0, flip=True, graph=None):
    """Rotated copies through 360 degrees, plus mirrored copies if ``flip``.

    Returns the augmented list; copies whose joints leave the image are
    dropped and the count is logged.
    """
    if flip and graph is None:
        raise ValueError("flipping needs the part graph for left/right swaps")
    n_rot = 360.0 / rotation_step_deg
    if abs(n_rot - round(n_rot)) > 1e-9:
        log.warning("rotation step %g does not divide 360", rotation_step_deg)
    angles = [rotation_step_deg * n for n in range(int(np.ceil(n_rot - 1e-9)))]
    out, dropped = [], 0
    for item in images:
        for angle in angles:
            rot = _rotate_item(item, angle)
            copies = [rot, flip_item(rot, graph)] if flip else [rot]
            for c in copies:
                if c.pose is not None and not _in_bounds(c.pose, c.width, c.height):
                    dropped += 1
                    continue
                out.append(c)
    if dropped:
        log.warning("augmentation dropped %d copies with joints off the image", dropped)
    return out


def expand_graph(base_graph):
    """Graph with a midway part on every edge (``2K - 1`` parts)."""
    k = base_graph.num_parts
    names = list(base_graph.part_names)
    edges = []
    mid_of = {}
    for e, (i, j) in enumerate(base_graph.edges):
        m = k + e
        mid_of[(i, j)] = mid_of[(j, i)] = m
        names.append(f"mid_{base_graph.part_names[i]}_{base_graph.part_names[j]}")
        edges.extend([(i, m), (m, j)])
    mirror = {a: b for a, b in base_graph.left_right_pairs}
    mirror.update({b: a for a, b in base_graph.left_right_pairs})
    pairs = list(base_graph.left_right_pairs)
    for (i, j) in base_graph.edges:
        mi, mj = mirror.get(i, i), mirror.get(j, j)
        partner = mid_of.get((mi, mj))
        m = mid_of[(i, j)]
        if partner is not None and partner > m:
            pairs.append((m, partner))
    return PartGraph(2 * k - 1, edges, base_graph.root, names, pairs)


def add_midway_parts(pose, base_graph):
    """Expanded ``(pose, graph)``: each base edge ``(i, j)`` gains a part at
    ``(l_i + l_j) / 2`` and is replaced by ``(i, mid), (mid, j)``."""
    graph = expand_graph(base_graph)
    if pose is None:
        return None, graph
    loc = pose.locations
    mids = [(loc[i] + loc[j]) / 2.0 for i, j in base_graph.edges]
    return Pose(np.vstack([loc, np.array(mids).reshape(-1, 2)])), graph
