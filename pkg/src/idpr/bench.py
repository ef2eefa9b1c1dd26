"""Inference timing across type counts, grid sizes and part counts, and a
comparison of the compiled and pure-numpy distance-transform kernels."""
import time
import warnings

import numpy as np

from . import _accel
from .evidence import ScoreMapStack
from .gdt import QuadCost, gdt_2d
from .inference import infer
from .model import Mode, PartGraph, RelationModel, Weights

#: Acceptance windows for the scaling ratios (T doubled, side doubled, K doubled).
RATIO_WINDOWS = {"T": (3.0, 6.0), "L": (3.0, 8.0), "K": (1.7, 3.0)}


def path_graph(k):
    return PartGraph(k, [(i, i + 1) for i in range(k - 1)], root=0)


def random_instance(side, k, t, seed=0):
    """Path graph, random maps and offsets, default concave weights."""
    rng = np.random.default_rng(seed)
    graph = path_graph(k)
    offsets = {e: rng.uniform(-4, 4, size=(t, 2)) for e in graph.directed_edges}
    relations = RelationModel(offsets)
    maps = ScoreMapStack(rng.uniform(-5, 0, size=(k, side, side)),
                         {e: rng.uniform(-3, 0, size=(t, side, side))
                          for e in graph.directed_edges})
    weights = Weights.default(graph, relations, Mode.FULL, quad=-0.05)
    return maps, weights, relations, graph


def time_inference(side, k, t, repeats=3, seed=0):
    """Best-of-``repeats`` wall time of one :func:`infer` call."""
    maps, weights, relations, graph = random_instance(side, k, t, seed)
    infer(maps, weights, relations, graph)      # warm-up (JIT compilation)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        infer(maps, weights, relations, graph)
        best = min(best, time.perf_counter() - t0)
    return best


def time_gdt(side, backend, repeats=3, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(side, side))
    cost = QuadCost((-0.1, -0.2), (0.3, -0.1), (1.5, -2.0))
    with _accel.use_backend(backend):
        gdt_2d(f, cost)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            gdt_2d(f, cost)
            best = min(best, time.perf_counter() - t0)
    return best


def run_bench(types=(2, 4, 8), sides=(32, 64, 128), parts=(4, 8), repeats=5, seed=0):
    """Timing table plus the three scaling ratios.

    Returns ``{"rows": [...], "ratios": {...}, "checks": {...}, "backends": [...]}``.
    """
    rows = []
    times = {}
    for k in parts:
        for side in sides:
            for t in types:
                sec = time_inference(side, k, t, repeats, seed)
                times[(t, side, k)] = sec
                rows.append({"T": t, "L": side * side, "K": k, "seconds": sec})
    ratios = {}
    if (4, 64, 8) in times and (2, 64, 8) in times:
        ratios["T"] = times[(4, 64, 8)] / times[(2, 64, 8)]
    if (4, 128, 8) in times and (4, 64, 8) in times:
        ratios["L"] = times[(4, 128, 8)] / times[(4, 64, 8)]
    if (4, 64, 8) in times and (4, 64, 4) in times:
        ratios["K"] = times[(4, 64, 8)] / times[(4, 64, 4)]
    checks = {}
    for name, r in ratios.items():
        lo, hi = RATIO_WINDOWS[name]
        checks[name] = bool(lo <= r <= hi)
        if not checks[name]:
            warnings.warn(f"{name} scaling ratio {r:.2f} outside [{lo}, {hi}]", RuntimeWarning)
    backends = []
    for side in sides:
        row = {"side": side, "numpy": time_gdt(side, "numpy", repeats, seed)}
        if _accel.HAS_NUMBA:
            row["numba"] = time_gdt(side, "numba", repeats, seed)
        backends.append(row)
    return {"rows": rows, "ratios": ratios, "checks": checks, "backends": backends}


def format_bench(result):
    lines = [f"{'T':>3} {'L':>7} {'K':>3} {'seconds':>10}"]
    for r in result["rows"]:
        lines.append(f"{r['T']:>3} {r['L']:>7} {r['K']:>3} {r['seconds']:>10.4f}")
    lines.append("")
    for name, r in result["ratios"].items():
        lo, hi = RATIO_WINDOWS[name]
        flag = "ok" if result["checks"][name] else "WARN"
        lines.append(f"ratio {name} doubled: {r:.2f} (window [{lo}, {hi}]) {flag}")
    lines.append("")
    lines.append(f"{'side':>5} {'numpy gdt_2d':>14} {'numba gdt_2d':>14}")
    for b in result["backends"]:
        nb = f"{b['numba']:.5f}" if "numba" in b else "n/a"
        lines.append(f"{b['side']:>5} {b['numpy']:>14.5f} {nb:>14}")
    return "\n".join(lines) + "\n"
