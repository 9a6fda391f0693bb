"""Wall-time scaling of the optimization- and sampling-based texture pipelines.

Only ratios are meaningful: absolute seconds depend on the hardware.
"""
from __future__ import annotations

import math

from dataclasses import dataclass

from .backbone import Backbone
from .optimize import OptimizeConfig, texture_optimize
from .sample import SamplerConfig, guided_sample
from .synthetic import blobs


@dataclass
class BenchRow:
    mode: str
    iterations: int
    seconds: float


def _run(backbone, example, mode, n, seed, steps):
    if mode == "optimize":
        cfg = OptimizeConfig(iterations=n, lr=0.05, content_weight=0.0, init="noise", seed=seed)
        return texture_optimize(backbone, example, cfg).wall_time
    cfg = SamplerConfig(steps=steps, cfg_scale=1.0, inner_steps=n, lr=0.05, seed=seed)
    return guided_sample(backbone, example, cfg).wall_time


def bench(backbone: Backbone, iterations, mode: str = "optimize", example=None, seed: int = 0,
          steps: int = 50, repeats: int = 1) -> list[BenchRow]:
    """Time each iteration count in turn after one excluded warm-up run.

    ``iterations`` are optimization iterations in ``optimize`` mode and inner
    guidance steps per DDIM step in ``sample`` mode. With ``repeats > 1`` the
    minimum over repeats is reported; repeats are interleaved across counts.
    """
    if mode not in ("optimize", "sample"):
        raise ValueError(f"unknown bench mode {mode!r}")
    iterations = list(iterations)
    if not iterations:
        return []
    if example is None:
        example = blobs(16 * backbone.factor, 16 * backbone.factor)
    _run(backbone, example, mode, 2 if mode == "optimize" else 1, seed, min(steps, 2))
    # round-robin so slow spells on a shared machine hit every count alike
    best = [math.inf] * len(iterations)
    for _ in range(repeats):
        for i, n in enumerate(iterations):
            best[i] = min(best[i], _run(backbone, example, mode, n, seed, steps))
    return [BenchRow(mode, n, s) for n, s in zip(iterations, best)]


def scaling_ok(rows: list[BenchRow], tolerance: float = 0.25) -> bool:
    """Optimize: time ratios within ``tolerance`` of iteration ratios. Sample: strictly increasing."""
    if len(rows) < 2:
        return True
    if rows[0].mode == "optimize":
        base = rows[0]
        for row in rows[1:]:
            expected = row.iterations / base.iterations
            if abs(row.seconds / base.seconds - expected) > tolerance * expected:
                return False
        return True
    ordered = sorted(rows, key=lambda r: r.iterations)
    return all(b.seconds > a.seconds for a, b in zip(ordered, ordered[1:]))


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'mode':<9} {'iterations':>10} {'seconds':>9} {'ratio':>6}"]
    base = rows[0].seconds if rows else 1.0
    for r in rows:
        lines.append(f"{r.mode:<9} {r.iterations:>10d} {r.seconds:>9.3f} {r.seconds / base:>6.2f}")
    return "\n".join(lines)

