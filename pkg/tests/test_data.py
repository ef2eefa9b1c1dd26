import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idpr.data import (AnnotatedImage, add_midway_parts, augment, expand_graph, flip_item,
                       load_dataset, rotate_points, save_dataset)
from idpr.errors import DatasetError
from idpr.model import PartGraph, Pose, validate_graph
from idpr.synth import (SynthConfig, SynthesisError, Skeleton, chain_skeleton, stick_skeleton,
                        synth_stickfigures)
from instances import random_tree


def _write(path, records, images=True):
    if images:
        from idpr.data import write_image
        (path.parent / "img").mkdir(exist_ok=True)
        for r in records:
            write_image(path.parent / r["image_path"], np.full((6, 8), 0.5))
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_load_two_records(tmp_path):
    recs = [{"id": f"a{n}", "image_path": f"img/a{n}.png", "joints": [[1, 1], [2, 3]]}
            for n in range(2)]
    _write(tmp_path / "d.jsonl", recs)
    items = load_dataset(tmp_path / "d.jsonl", num_parts=2)
    assert [it.id for it in items] == ["a0", "a1"]
    assert items[0].image.shape == (6, 8)


def test_joint_count_mismatch_names_record(tmp_path):
    recs = [{"id": "bad", "image_path": "img/bad.png", "joints": [[1, 1]]}]
    _write(tmp_path / "d.jsonl", recs)
    with pytest.raises(DatasetError, match="bad.*d.jsonl:1|d.jsonl:1.*bad"):
        load_dataset(tmp_path / "d.jsonl", num_parts=2)


def test_load_errors(tmp_path):
    p = tmp_path / "d.jsonl"
    _write(p, [{"id": "x", "joints": None}], images=False)
    with pytest.raises(DatasetError, match="image_path"):
        load_dataset(p)
    _write(p, [{"id": "x", "image_path": "missing.png", "joints": None}], images=False)
    with pytest.raises(DatasetError, match="cannot read image"):
        load_dataset(p)
    p.write_text("{not json\n")
    with pytest.raises(DatasetError, match=":1"):
        load_dataset(p)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")


def test_out_of_bounds_record_skipped(tmp_path, caplog):
    recs = [{"id": "in", "image_path": "img/in.png", "joints": [[1, 1]]},
            {"id": "out", "image_path": "img/out.png", "joints": [[9, 1]]}]
    _write(tmp_path / "d.jsonl", recs)
    assert [it.id for it in load_dataset(tmp_path / "d.jsonl")] == ["in"]
    assert "out" in caplog.text


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    items = [AnnotatedImage(np.round(rng.uniform(size=(5, 7)) * 255) / 255, Pose([[1.5, 2], [3, 4]]),
                            (0, 0, 4, 3), "p0", {"modes": {"0-1": 2}}),
             AnnotatedImage(np.round(rng.uniform(size=(5, 7)) * 255) / 255, None, None, "n0")]
    save_dataset(items, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    for a, b in zip(items, back):
        assert a.id == b.id and a.torso_box == b.torso_box and a.meta == b.meta
        assert a.pose == b.pose
        np.testing.assert_allclose(a.image, b.image, atol=1e-12)
    save_dataset(back, tmp_path / "e.jsonl")
    assert (tmp_path / "d.jsonl").read_text() == (tmp_path / "e.jsonl").read_text()


def test_rotation_arithmetic():
    # the center of a 3x3 image is (1, 1)
    np.testing.assert_allclose(rotate_points([[2, 1]], 90, 3, 3), [[1, 2]], atol=1e-12)


def test_step_90_without_flip():
    item = AnnotatedImage(np.zeros((9, 9)), Pose([[5, 4]]), None, "a")
    out = augment([item], 90, flip=False)
    assert len(out) == 4
    np.testing.assert_allclose(out[1].pose.locations, [[4, 5]], atol=1e-12)


def test_flip_of_symmetric_pose_swaps_pairs():
    graph = PartGraph(3, [(0, 1), (0, 2)], left_right_pairs=[(1, 2)])
    item = AnnotatedImage(np.zeros((5, 7)), Pose([[3, 1], [1, 3], [5, 3]]), None, "s")
    flipped = flip_item(item, graph)
    np.testing.assert_array_equal(flipped.pose.locations, item.pose.locations)
    item2 = AnnotatedImage(np.zeros((5, 7)), Pose([[3, 1], [1, 3], [6, 2]]), None, "t")
    np.testing.assert_array_equal(flip_item(item2, graph).pose.locations, [[3, 1], [0, 2], [5, 3]])


def test_rotation_fills_36_angular_bins():
    item = AnnotatedImage(np.zeros((41, 41)), Pose([[20, 20], [26, 20]]), None, "r")
    out = augment([item], 10, flip=False)
    assert len(out) == 36
    d = np.array([o.pose.locations[1] - o.pose.locations[0] for o in out])
    angles = np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 360
    counts = np.bincount(((angles + 5) % 360 // 10).astype(int), minlength=36)
    assert np.all(counts == 1)


def test_augment_counts_and_drops(caplog):
    graph = stick_skeleton().graph
    pos, _ = synth_stickfigures(SynthConfig(num_images=2, num_negatives=0, seed=1))
    assert len(augment(pos, 90, flip=True, graph=graph)) <= 16
    edge = AnnotatedImage(np.zeros((9, 9)), Pose([[0, 0]]), None, "corner")
    out = augment([edge], 45, flip=False)
    assert len(out) < 8 and "dropped" in caplog.text


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 360))
def test_rotation_preserves_limb_lengths(seed, angle):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 30, size=(5, 2))
    rot = rotate_points(pts, angle, 31, 31)
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(rot[i] - rot[j]) == pytest.approx(
                np.linalg.norm(pts[i] - pts[j]), abs=1e-6)


def test_midway_single_edge():
    pose, graph = add_midway_parts(Pose([[0, 0], [10, 0]]), PartGraph(2, [(0, 1)]))
    np.testing.assert_array_equal(pose.locations[2], [5, 0])
    assert graph.num_parts == 3 and len(graph.edges) == 2


@given(st.integers(1, 15), st.integers(0, 2 ** 32 - 1))
def test_midway_structure(k, seed):
    base = random_tree(k, np.random.default_rng(seed))
    _, graph = add_midway_parts(None, base)
    assert graph.num_parts == 2 * k - 1 and len(graph.edges) == 2 * k - 2
    validate_graph(graph)


def full_body_14():
    # r ankle, r knee, r hip, l hip, l knee, l ankle, r wrist, r elbow,
    # r shoulder, l shoulder, l elbow, l wrist, neck, head
    edges = [(0, 1), (1, 2), (3, 4), (4, 5), (6, 7), (7, 8), (9, 10), (10, 11),
             (12, 13), (12, 8), (12, 9), (8, 2), (9, 3)]
    return PartGraph(14, edges, root=12,
                     left_right_pairs=[(0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9)])


def test_midway_on_fourteen_joint_body():
    graph = expand_graph(full_body_14())
    assert graph.num_parts == 27
    # mirrored limbs give mirrored midway parts
    assert len(graph.left_right_pairs) == 6 + 6


def test_synth_is_deterministic():
    cfg = SynthConfig(num_images=5, num_negatives=3, seed=7)
    a, b = synth_stickfigures(cfg), synth_stickfigures(cfg)
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        assert x.image.tobytes() == y.image.tobytes() and x.pose == y.pose
    c = synth_stickfigures(SynthConfig(num_images=5, num_negatives=3, seed=8))
    assert a[0][0].image.tobytes() != c[0][0].image.tobytes()


def test_synth_single_mode_without_noise_is_translation_only():
    sk = stick_skeleton()
    sk = Skeleton(sk.graph, sk.lengths, {e: [m[1]] for e, m in sk.modes.items()})
    cfg = SynthConfig(num_images=12, num_negatives=0, skeleton=sk, angle_jitter_deg=0, noise_level=0,
                      texture_jitter=0, num_distractors=0, seed=2)
    pos, _ = synth_stickfigures(cfg)
    rel = [p.pose.locations - p.pose.locations[sk.graph.root] for p in pos]
    for r in rel[1:]:
        np.testing.assert_allclose(r, rel[0], atol=1e-12)
    # with integer root positions, the pixels are shifted copies
    a, b = pos[0], pos[1]
    dx, dy = (b.pose.locations[1] - a.pose.locations[1]).astype(int)
    h, w = a.image.shape
    ys, xs = slice(max(0, -dy), min(h, h - dy)), slice(max(0, -dx), min(w, w - dx))
    yt, xt = slice(ys.start + dy, ys.stop + dy), slice(xs.start + dx, xs.stop + dx)
    np.testing.assert_allclose(b.image[yt, xt], a.image[ys, xs], atol=1e-12)


@given(st.integers(0, 10 ** 6))
def test_synth_joints_in_bounds(seed):
    pos, neg = synth_stickfigures(SynthConfig(num_images=3, num_negatives=1, seed=seed))
    for p in pos:
        loc = p.pose.locations
        assert np.all(loc >= 0) and np.all(loc[:, 0] < p.width) and np.all(loc[:, 1] < p.height)
        assert set(p.meta["modes"]) == {"1-0", "1-2", "1-3"}
    assert neg[0].pose is None


def test_synth_off_grid_figure_is_rejected():
    with pytest.raises(SynthesisError, match="does not fit"):
        synth_stickfigures(SynthConfig(num_images=1, width=8, height=8))


def test_skeleton_round_trip():
    sk = chain_skeleton(3, 4.0, [0, 90])
    back = Skeleton.from_dict(json.loads(json.dumps(sk.to_dict())))
    assert back.graph == sk.graph and back.lengths == sk.lengths and back.modes == sk.modes
