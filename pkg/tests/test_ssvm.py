import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idpr.errors import DatasetError, LabelError
from idpr.evidence import ScoreMapStack
from idpr.model import EPSILON, Mode, PartGraph, Pose, RelationModel, TypeAssignment, Weights, full_score
from idpr.ssvm import (SsvmConfig, TrainingExample, WeightLayout, all_parts_wrong,
                       build_feature_vector, mine_negative_examples, objective,
                       perturb_pose, positive_examples, subgradient_descent, train_weights)
from instances import random_maps, random_relations, random_tree, random_weights
from oracles import oracle_objective, oracle_objective_grid

seeds = st.integers(0, 2 ** 32 - 1)


def _random_config(rng, graph, relations, w=6, h=5):
    pose = Pose(np.column_stack([rng.integers(0, w, graph.num_parts),
                                 rng.integers(0, h, graph.num_parts)]))
    types = TypeAssignment({e: int(rng.integers(relations.type_count(*e)))
                            for e in graph.directed_edges})
    return pose, types


def test_single_part_has_unary_and_bias_slots():
    graph = PartGraph(1, [])
    app = np.zeros((1, 3, 3))
    app[0, 2, 1] = -1.25
    fv = build_feature_vector(ScoreMapStack(app, {}), Pose([[1, 2]]), TypeAssignment(), graph,
                              RelationModel({}))
    assert fv.as_dict() == {("unary", 0): -1.25, ("bias",): 1.0}


def test_zero_maps_zero_residuals_leave_only_bias():
    graph = PartGraph(2, [(0, 1)])
    relations = RelationModel({(0, 1): [[2.0, 1.0]], (1, 0): [[-2.0, -1.0]]})
    maps = ScoreMapStack(np.zeros((2, 4, 4)), {e: np.zeros((1, 4, 4)) for e in graph.directed_edges})
    fv = build_feature_vector(maps, Pose([[0, 0], [2, 1]]), TypeAssignment.zeros(graph), graph,
                              relations)
    nonzero = {k: v for k, v in fv.as_dict().items() if v != 0}
    assert nonzero == {("bias",): 1.0}


@pytest.mark.parametrize("mode", list(Mode))
@given(seed=seeds)
def test_feature_identity(mode, seed):
    rng = np.random.default_rng(seed)
    graph = random_tree(int(rng.integers(1, 5)), rng)
    relations = random_relations(graph, rng)
    maps = random_maps(graph, relations, 6, 5, rng)
    pose, types = _random_config(rng, graph, relations)
    fv = build_feature_vector(maps, pose, types, graph, relations, mode)
    for _ in range(5):
        w = random_weights(graph, relations, rng, mode, quad_max=1.0)
        assert fv.dot(w) == pytest.approx(full_score(pose, types, maps, w, graph, relations),
                                          abs=1e-9)


def test_layout_round_trip(rng):
    graph = random_tree(4, rng)
    relations = random_relations(graph, rng)
    for mode in Mode:
        layout = WeightLayout(graph, relations, mode)
        vec = rng.normal(size=len(layout))
        np.testing.assert_array_equal(layout.to_vector(layout.from_vector(vec)), vec)


def test_objective_examples(rng):
    graph = PartGraph(1, [])
    layout = WeightLayout(graph, RelationModel({}))
    from idpr.ssvm import FeatureVector
    exs = [TrainingExample(FeatureVector(layout, np.array([0, 1]), np.array([v, 1.0])), y)
           for v, y in [(2.0, 1), (-2.0, -1), (3.0, 1)]]
    assert objective(np.zeros(2), exs, 0.7) == pytest.approx(0.7 * 3)
    assert objective(np.array([1.0, 0.0]), exs, 5.0) == pytest.approx(0.5)
    for _ in range(20):
        w = rng.normal(size=2)
        x = [ex.features.dense() for ex in exs]
        assert objective(w, exs, 1.3) == pytest.approx(
            oracle_objective(w, x, [1, -1, 1], 1.3), abs=1e-12)


def test_labels_must_be_signed():
    graph = PartGraph(1, [])
    fv = build_feature_vector(ScoreMapStack(np.zeros((1, 2, 2)), {}), Pose([[0, 0]]),
                              TypeAssignment(), graph, RelationModel({}))
    with pytest.raises(LabelError):
        TrainingExample(fv, 0)


TOY_X = np.array([[1.0], [-1.0]])
TOY_Y = np.array([1.0, -1.0])


@pytest.mark.parametrize("C", [1.0, 2.0, 10.0, 100.0])
def test_one_dimensional_toy(C):
    res = subgradient_descent(TOY_X, TOY_Y, SsvmConfig(C=C, epochs=300))
    w = res.w[0]
    assert 0.9 <= w <= 1.1
    assert np.maximum(0, 1 - TOY_Y * (TOY_X[:, 0] * w)).sum() <= 1e-9


@pytest.mark.parametrize("scale", [0.5, 2.0, 4.0])
def test_feature_scaling_rescales_solution(scale):
    res = subgradient_descent(TOY_X * scale, TOY_Y, SsvmConfig(C=10.0 / scale, epochs=300))
    assert res.w[0] > 0
    assert res.w[0] * scale == pytest.approx(1.0, abs=0.1)


def test_small_C_drives_weights_to_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 5))
    y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
    y[:2] = [1, -1]
    quad = np.array([False, True, False, True, False])
    res = subgradient_descent(x, y, SsvmConfig(C=1e-6, epochs=200), quad_mask=quad)
    np.testing.assert_allclose(res.w[~quad], 0, atol=1e-4)
    np.testing.assert_allclose(res.w[quad], -EPSILON, atol=1e-9)


@given(seeds)
def test_objective_close_to_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    x = rng.normal(size=(n, 2))
    y = np.where(x @ rng.normal(size=2) + 0.3 * rng.normal(size=n) > 0, 1.0, -1.0)
    y[0], y[1] = 1.0, -1.0
    res = subgradient_descent(x, y, SsvmConfig(C=1.0, epochs=400))
    ref, _ = oracle_objective_grid(x, y, 1.0, lo=-4, hi=4, steps=401)
    assert res.objective <= ref * 1.05 + 1e-9


@given(seeds)
def test_best_iterate_history_non_increasing(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 4))
    y = np.where(rng.random(12) < 0.5, 1.0, -1.0)
    y[:2] = [1, -1]
    res = subgradient_descent(x, y, SsvmConfig(C=2.0, epochs=30, batch_size=4, seed=seed))
    best = [h[2] for h in res.history]
    assert np.all(np.diff(best) <= 0)
    assert res.objective == best[-1] == min(h[1] for h in res.history)


def test_training_errors():
    with pytest.raises(DatasetError):
        subgradient_descent(TOY_X, np.array([1.0, 1.0]), SsvmConfig())
    with pytest.raises(DatasetError):
        train_weights([], SsvmConfig())
    with pytest.raises(ValueError):
        SsvmConfig(C=0)


def _two_part_problem(rng, n=6, side=8):
    graph = PartGraph(2, [(0, 1)])
    relations = RelationModel({(0, 1): [[3.0, 0.0], [0.0, 3.0]], (1, 0): [[-3.0, 0.0], [0.0, -3.0]]})
    positives = []
    for _ in range(n):
        x0, y0 = rng.integers(0, 4, size=2)
        t = int(rng.integers(2))
        pose = Pose([[x0, y0], [x0 + 3 * (1 - t), y0 + 3 * t]])
        app = rng.uniform(-3, -1, size=(2, side, side))
        for i in range(2):
            app[i][int(pose.locations[i, 1]), int(pose.locations[i, 0])] = 0.0
        maps = random_maps(graph, relations, side, side, rng)
        maps = ScoreMapStack(app, maps.idpr)
        positives.append((maps, pose, TypeAssignment({(0, 1): t, (1, 0): t})))
    negatives = [random_maps(graph, relations, side, side, rng) for _ in range(3)]
    return graph, relations, positives, negatives


@pytest.mark.parametrize("mode", list(Mode))
def test_train_weights_projection_and_fit(mode):
    rng = np.random.default_rng(4)
    graph, relations, positives, negatives = _two_part_problem(rng)
    w0 = Weights.default(graph, relations, mode, quad=-0.05)
    layout = WeightLayout(graph, relations, mode)
    pos = positive_examples(positives, graph, relations, mode, layout)
    neg = mine_negative_examples(positives, negatives, w0, graph, relations, 8, layout=layout)
    cfg = SsvmConfig(C=1.0, epochs=200, nonnegative_evidence=True)
    weights, res = train_weights(pos + neg, cfg, return_result=True)
    assert weights.mode is mode
    assert weights.concavity_violations() == []
    assert np.all(weights.unary >= 0)
    assert res.objective <= objective(np.zeros(len(layout)), pos + neg, 1.0)
    assert res.objective == pytest.approx(objective(weights, pos + neg, 1.0))


def test_mined_negatives_do_not_overlap_positives():
    rng = np.random.default_rng(5)
    graph, relations, positives, negatives = _two_part_problem(rng, n=8)
    w = Weights.default(graph, relations, quad=-0.05)
    mined = mine_negative_examples(positives, negatives, w, graph, relations, 30, seed=2)
    assert len(mined) == 30 and all(ex.y == -1 for ex in mined)
    pos_keys = {(p.locations.tobytes(), t.key()) for _, p, t in positives}
    assert not any((ex.pose.locations.tobytes(), ex.types.key()) in pos_keys for ex in mined)
    for ex in mined[15:]:
        # perturbed positives are wrong in every part for some positive
        assert any(all_parts_wrong(ex.pose, p, graph) for _, p, _ in positives)


def test_flat_negative_maps_give_a_maximal_pose():
    graph = PartGraph(2, [(0, 1)])
    relations = RelationModel.uniform(graph, 1)
    flat = ScoreMapStack(np.zeros((2, 5, 5)), {e: np.zeros((1, 5, 5)) for e in graph.directed_edges})
    w = Weights.default(graph, relations, quad=-0.05)
    (ex,) = mine_negative_examples([], [flat], w, graph, relations, 1)
    assert ex.y == -1
    assert ex.features.dot(w) == pytest.approx(0.0)


def test_large_translation_is_a_valid_negative():
    graph = PartGraph(3, [(0, 1), (1, 2)])
    gt = Pose([[2, 2], [6, 2], [6, 6]])
    moved = Pose(gt.locations + [30, 30])
    assert all_parts_wrong(moved, gt, graph)
    assert not all_parts_wrong(Pose(gt.locations + [1, 0]), gt, graph)


def test_perturbed_pose_is_far_from_annotation(rng):
    graph = PartGraph(3, [(0, 1), (1, 2)])
    gt = Pose([[5, 5], [10, 5], [10, 10]])
    for _ in range(20):
        p = perturb_pose(gt, graph, 20, 20, rng)
        assert all_parts_wrong(p, gt, graph)


def test_mining_needs_negative_images():
    graph = PartGraph(1, [])
    with pytest.raises(DatasetError):
        mine_negative_examples([], [], Weights([1.0], {}, {}), graph, RelationModel({}), 3)
