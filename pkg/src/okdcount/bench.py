"""Micro-benchmark comparing the compiled and numpy kernel backends."""

from __future__ import annotations

import time

import numpy as np

from ._kernels import THREADS
from ._kernels import _numpy as numpy_impl

try:
    from ._kernels import _core as compiled_impl
except ImportError:
    compiled_impl = None


def _cases(size: int):
    rng = np.random.default_rng(0)
    mk = rng.standard_normal
    return [
        {
            "name": f"conv3x3 8x16x{size}x{size}->32",
            "kind": "conv",
            "x": mk((8, 16, size, size)),
            "w": mk((32, 16, 3, 3)),
            "dilation": 1,
        },
        {
            "name": f"conv3x3-d2 8x64x{size // 4}x{size // 4}->64",
            "kind": "conv",
            "x": mk((8, 64, size // 4, size // 4)),
            "w": mk((64, 64, 3, 3)),
            "dilation": 2,
        },
        {
            "name": f"maxpool2 8x32x{size}x{size}",
            "kind": "maxpool",
            "x": mk((8, 32, size, size)),
        },
        {
            "name": f"adaptive8 8x64x{size // 4}x{size // 4}",
            "kind": "adaptive",
            "x": mk((8, 64, size // 4, size // 4)),
        },
    ]


def _best_of(fn, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _run_case(impl, case, reps):
    x = case["x"]
    if case["kind"] == "conv":
        w, d = case["w"], case["dilation"]
        b = np.zeros(w.shape[0])
        pad = d * (w.shape[2] - 1) // 2
        out = impl.conv2d_forward(x, w, b, d, pad, THREADS)
        g = np.ones_like(out)
        macs = out.shape[0] * out.shape[2] * out.shape[3] * w.size
        fwd = _best_of(lambda: impl.conv2d_forward(x, w, b, d, pad, THREADS), reps)
        bwd_in = _best_of(
            lambda: impl.conv2d_backward_input(g, w, d, pad, x.shape[2], x.shape[3], THREADS), reps
        )
        bwd_w = _best_of(
            lambda: impl.conv2d_backward_weight(g, x, w.shape[2], w.shape[3], d, pad, THREADS), reps
        )
        return {
            "forward_s": fwd,
            "backward_input_s": bwd_in,
            "backward_weight_s": bwd_w,
            "forward_gmacs": macs / fwd / 1e9,
        }
    if case["kind"] == "maxpool":
        out, idx = impl.maxpool2d_forward(x, 2, 2, THREADS)
        g = np.ones_like(out)
        fwd = _best_of(lambda: impl.maxpool2d_forward(x, 2, 2, THREADS), reps)
        bwd = _best_of(
            lambda: impl.maxpool2d_backward(g, idx, 2, 2, x.shape[2], x.shape[3], THREADS), reps
        )
        return {"forward_s": fwd, "backward_s": bwd}
    out = impl.adaptive_avg_pool_forward(x, 8, 8, THREADS)
    g = np.ones_like(out)
    fwd = _best_of(lambda: impl.adaptive_avg_pool_forward(x, 8, 8, THREADS), reps)
    bwd = _best_of(lambda: impl.adaptive_avg_pool_backward(g, x.shape[2], x.shape[3], THREADS), reps)
    return {"forward_s": fwd, "backward_s": bwd}


def run(size: int = 64, reps: int = 3) -> dict:
    """Time every kernel on both backends; speedup is numpy_time / compiled_time."""
    backends = {"numpy": numpy_impl}
    if compiled_impl is not None:
        backends["compiled"] = compiled_impl
    cases = _cases(size)
    report = {
        "threads": THREADS,
        "compiled_available": compiled_impl is not None,
        "cases": [],
    }
    for case in cases:
        row = {"name": case["name"], "backends": {}}
        for bname, impl in backends.items():
            row["backends"][bname] = _run_case(impl, case, reps)
        if compiled_impl is not None:
            f_np = row["backends"]["numpy"]["forward_s"]
            f_cy = row["backends"]["compiled"]["forward_s"]
            row["forward_speedup"] = f_np / f_cy
        report["cases"].append(row)
    return report


def format_table(report: dict) -> str:
    lines = [
        f"kernel backends (threads={report['threads']}, compiled={report['compiled_available']})",
        f"{'case':<34} {'numpy fwd':>12} {'compiled fwd':>14} {'speedup':>9}",
    ]
    for row in report["cases"]:
        np_t = row["backends"]["numpy"]["forward_s"]
        if "compiled" in row["backends"]:
            cy_t = row["backends"]["compiled"]["forward_s"]
            lines.append(
                f"{row['name']:<34} {np_t * 1e3:>10.2f}ms {cy_t * 1e3:>12.2f}ms {row['forward_speedup']:>8.2f}x"
            )
        else:
            lines.append(f"{row['name']:<34} {np_t * 1e3:>10.2f}ms {'n/a':>14} {'n/a':>9}")
    return "\n".join(lines)
