import warnings

import numpy as np
import pytest

from idpr import _accel
from idpr.bench import RATIO_WINDOWS, format_bench, random_instance, run_bench, time_gdt
from idpr.inference import infer


def test_small_bench_structure():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = run_bench(types=(1, 2), sides=(8, 12), parts=(2, 3), repeats=1)
    assert len(result["rows"]) == 8
    assert all(r["seconds"] > 0 for r in result["rows"])
    assert {r["L"] for r in result["rows"]} == {64, 144}
    # the scaling ratios are only defined on the standard grid
    assert result["ratios"] == {} and result["checks"] == {}
    assert [b["side"] for b in result["backends"]] == [8, 12]
    text = format_bench(result)
    assert "numpy gdt_2d" in text and len(text.splitlines()) >= 12


def test_ratio_outside_window_warns(monkeypatch):
    monkeypatch.setattr("idpr.bench.time_inference",
                        lambda side, k, t, repeats, seed: float(t) ** 4)
    monkeypatch.setattr("idpr.bench.time_gdt", lambda *a: 1.0)
    with pytest.warns(RuntimeWarning, match="T scaling"):
        result = run_bench(types=(2, 4), sides=(64,), parts=(8,), repeats=1)
    assert result["ratios"]["T"] == pytest.approx(16.0)
    assert result["checks"]["T"] is False
    assert "WARN" in format_bench(result)
    assert set(RATIO_WINDOWS) == {"T", "L", "K"}


def test_random_instance_is_seeded():
    a = random_instance(6, 3, 2, seed=5)
    b = random_instance(6, 3, 2, seed=5)
    assert infer(*a).score == infer(*b).score
    assert np.array_equal(a[0].appearance, b[0].appearance)


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba unavailable")
def test_backends_agree_on_bench_instance():
    maps, weights, relations, graph = random_instance(10, 4, 3, seed=2)
    with _accel.use_backend("numpy"):
        slow = infer(maps, weights, relations, graph)
    with _accel.use_backend("numba"):
        fast = infer(maps, weights, relations, graph)
    assert fast.score == pytest.approx(slow.score, abs=1e-9)
    assert np.array_equal(fast.pose.locations, slow.pose.locations)
    assert fast.types == slow.types


@pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba unavailable")
def test_gdt_timing_both_backends():
    assert time_gdt(16, "numpy", repeats=1) > 0
    assert time_gdt(16, "numba", repeats=1) > 0
