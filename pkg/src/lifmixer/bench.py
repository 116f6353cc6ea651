"""Wall-clock timing of the hot kernels."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .lif import Direction, LifConfig, LifParams, available_backends, lif_backward, lif_forward
from .model import LifModule

OPS = ("lif_forward", "lif_backward", "dwconv3x3", "lif_module")


@dataclass
class Timing:
    op: str
    backend: str
    groups: int | None
    shape: tuple
    times: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.times, 95, method="nearest")) if len(self.times) > 1 else self.times[0]

    @property
    def elems_per_sec(self) -> float:
        return float(np.prod(self.shape)) / self.median if self.median > 0 else float("inf")


def _make_runner(op: str, shape, groups: int, backend: str, rng):
    x = rng.normal(0.25, 1.0, size=shape).astype(np.float32)
    cfg = LifConfig(Direction.VERTICAL, groups)
    if op == "lif_forward":
        return lambda: lif_forward(x, LifParams(), cfg, backend=backend)
    if op == "lif_backward":
        _, saved = lif_forward(x, LifParams(), cfg, backend=backend)
        d = rng.normal(size=shape).astype(np.float32)
        return lambda: lif_backward(d, saved, backend=backend)
    if op == "dwconv3x3":
        p = L.init_dwconv(rng, shape[1])
        return lambda: L.dwconv3x3(x, p)
    if op == "lif_module":
        module = LifModule(shape[1], groups, rng)
        return lambda: module.forward(x)
    raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")


def time_op(op: str, shape, groups: int = 4, repeats: int = 10, warmup: int = 1,
            backend: str = "native", seed: int = 0) -> Timing:
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    if backend not in available_backends():
        raise ValueError(f"backend {backend!r} unavailable; have {available_backends()}")
    rng = np.random.default_rng(seed)
    run = _make_runner(op, tuple(shape), groups, backend, rng)
    for _ in range(warmup):
        run()
    times = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    uses_groups = op != "dwconv3x3"
    return Timing(op, backend if op.startswith("lif") else "numpy", groups if uses_groups else None,
                  tuple(shape), times)


def format_table(rows: list[Timing]) -> str:
    lines = [f"{'op':<13} {'backend':<8} {'g':>4} {'median_ms':>10} {'p95_ms':>10} {'Melem/s':>9}"]
    for t in rows:
        g = "-" if t.groups is None else str(t.groups)
        lines.append(f"{t.op:<13} {t.backend:<8} {g:>4} {t.median * 1e3:>10.3f} {t.p95 * 1e3:>10.3f} "
                     f"{t.elems_per_sec / 1e6:>9.1f}")
    return "\n".join(lines)
