"""Pose metrics: strict PCP, Buffy PCP and PDJ, plus aggregate tables."""
import csv
import io
import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimbSpec:
    name: str
    p: int
    q: int
    category: str = ""

    def __post_init__(self):
        if self.p == self.q:
            raise ValueError(f"limb {self.name!r} needs two distinct endpoints")
        if self.p < 0 or self.q < 0:
            raise ValueError(f"limb {self.name!r} has a negative endpoint index")


@dataclass(frozen=True)
class PcpResult:
    correct: dict        # limb name -> bool, invalid limbs omitted
    mean: float


def _locs(pose):
    return np.asarray(getattr(pose, "locations", pose), dtype=np.float64)


def _pcp(pred, gt, limbs, rule):
    pred, gt = _locs(pred), _locs(gt)
    correct = {}
    for limb in limbs:
        length = float(np.linalg.norm(gt[limb.p] - gt[limb.q]))
        if length == 0.0:
            log.warning("limb %s has zero ground-truth length; excluded", limb.name)
            continue
        ep = float(np.linalg.norm(pred[limb.p] - gt[limb.p]))
        eq = float(np.linalg.norm(pred[limb.q] - gt[limb.q]))
        correct[limb.name] = rule(ep, eq, 0.5 * length)
    mean = float(np.mean(list(correct.values()))) if correct else float("nan")
    return PcpResult(correct, mean)


def strict_pcp(pred, gt, limbs):
    """A limb is correct iff both endpoints are within half its length."""
    return _pcp(pred, gt, limbs, lambda ep, eq, thr: ep <= thr and eq <= thr)


def buffy_pcp(pred, gt, limbs):
    """A limb is correct iff the mean endpoint error is within half its length."""
    return _pcp(pred, gt, limbs, lambda ep, eq, thr: (ep + eq) / 2.0 <= thr)


@dataclass(frozen=True)
class PdjCurve:
    thresholds: np.ndarray
    rates: dict          # joint name -> array of detection rates per threshold

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        names = list(self.rates)
        writer.writerow(["threshold"] + names)
        for n, t in enumerate(self.thresholds):
            writer.writerow([f"{t:g}"] + [f"{self.rates[k][n]:.6f}" for k in names])
        return buf.getvalue()


def pdj(preds, gts, joints, thresholds, scale_pair, joint_names=None):
    """Fraction of joints within ``tau * |gt[left_shoulder] - gt[right_hip]|``.

    ``joints`` may be a list of indices or a mapping from group name to a list
    of indices; each group's rate pools its joints.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    if isinstance(joints, dict):
        groups = {k: list(v) for k, v in joints.items()}
    else:
        names = joint_names or [str(j) for j in joints]
        groups = {name: [j] for name, j in zip(names, joints)}
    hits = {k: np.zeros(len(thresholds)) for k in groups}
    counts = {k: 0 for k in groups}
    a, b = scale_pair
    for pred, gt in zip(preds, gts):
        pred, gt = _locs(pred), _locs(gt)
        scale = float(np.linalg.norm(gt[a] - gt[b]))
        if scale == 0.0:
            log.warning("zero torso scale; instance excluded from PDJ")
            continue
        for name, members in groups.items():
            for j in members:
                err = float(np.linalg.norm(pred[j] - gt[j]))
                hits[name] += err <= thresholds * scale
                counts[name] += 1
    rates = {k: hits[k] / counts[k] if counts[k] else np.full(len(thresholds), np.nan)
             for k in groups}
    return PdjCurve(thresholds, rates)


def aggregate_report(results, limbs, title=""):
    """Per-category percentages from a list of per-image :class:`PcpResult`.

    A category's value is the mean of its member limbs' rates; ``Mean`` is the
    mean over all limbs.  Returns a dict with ``columns``, ``values`` (percent),
    ``text`` and ``json`` renderings.
    """
    per_limb = {}
    for limb in limbs:
        vals = [r.correct[limb.name] for r in results if limb.name in r.correct]
        per_limb[limb.name] = float(np.mean(vals)) if vals else float("nan")
    categories = []
    for limb in limbs:
        cat = limb.category or limb.name
        if cat not in categories:
            categories.append(cat)
    values = {}
    for cat in categories:
        members = [per_limb[l.name] for l in limbs if (l.category or l.name) == cat]
        values[cat] = 100.0 * float(np.nanmean(members))
    values["Mean"] = 100.0 * float(np.nanmean(list(per_limb.values())))
    cols = list(values)
    width = max(8, *(len(c) + 2 for c in cols))
    header = ("Method".ljust(12) if title else "") + "".join(c.rjust(width) for c in cols)
    row = (title.ljust(12) if title else "") + "".join(f"{values[c]:.1f}".rjust(width)
                                                       for c in cols)
    return {
        "columns": cols,
        "values": values,
        "per_limb": {k: 100.0 * v for k, v in per_limb.items()},
        "images": len(results),
        "text": header + "\n" + row + "\n",
        "json": json.dumps({"columns": cols, "values": values}),
    }
