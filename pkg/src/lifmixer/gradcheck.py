"""Finite-difference checks of every handwritten backward pass (float64)."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import layers as L
from .lif import (
    DEFAULT_MARGIN,
    Direction,
    GradcheckReport,
    LifConfig,
    LifParams,
    lif_backward,
    lif_forward,
    lif_forward_backward_check,
    relative_error,
)
from .model import LIF, LifModule, MlpModule, Module
from .train import cross_entropy_ls

__all__ = [
    "numeric_grad",
    "check_arrays",
    "LAYER_CHECKS",
    "lif_cases",
    "run_suite",
]

STEP = 1e-6
TOL = 1e-5
MODULE_TOL = 1e-4


def numeric_grad(loss: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every element of ``arr`` (perturbed in place)."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        lp = loss()
        flat[i] = keep - step
        lm = loss()
        flat[i] = keep
        flat_out[i] = (lp - lm) / (2 * step)
    return out


def _worst_index(a, f):
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    if a.ndim == 0:
        return ()
    return tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(a - f)), a.shape))


def check_arrays(name: str, arrays: dict[str, np.ndarray], forward: Callable[[], np.ndarray],
                 backward: Callable[[np.ndarray], dict[str, np.ndarray]], rng: np.random.Generator,
                 tol: float = TOL, fault: bool = False, step: float = STEP) -> GradcheckReport:
    """Compare ``backward(w)`` against central differences of ``sum(w * forward())``.

    ``arrays`` are the inputs/parameters ``forward`` closes over; they are
    perturbed in place. ``fault`` scales the analytic gradients by 1.01 as a
    negative control.
    """
    out = forward()
    w = rng.normal(size=np.shape(out))

    def loss():
        return float(np.sum(w * forward()))

    analytic = backward(w)
    report = GradcheckReport(name=name, tolerance=tol)
    worst = []
    for key, arr in arrays.items():
        a = np.asarray(analytic[key], dtype=np.float64) * (1.01 if fault else 1.0)
        f = numeric_grad(loss, arr, step)
        err = relative_error(a, f)
        report.errors[key] = err
        if err >= tol:
            worst.append(f"{key} worst at index {_worst_index(a, f)}")
    report.detail = "; ".join(worst)
    return report


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    for name, p in module.named_params():
        if name.endswith(("tau", "v_th")):
            continue
        if name.endswith("gamma"):
            p.value[...] = 1.0 + 0.1 * rng.normal(size=p.value.shape)
        else:
            fan = p.value.shape[1] if p.value.ndim == 2 else 9 if p.value.ndim == 3 else 1
            p.value[...] = scale * rng.normal(size=p.value.shape) / np.sqrt(fan)


def _check_channel_mlp(rng, fault=False):
    x = rng.normal(size=(2, 5, 3, 4))
    p = L.LinearParams(rng.normal(size=(6, 5)), rng.normal(size=6))

    def bwd(w):
        dx, dw, db = L.channel_mlp_backward(w, x, p)
        return {"x": dx, "weight": dw, "bias": db}

    return check_arrays("channel_mlp", {"x": x, "weight": p.weight, "bias": p.bias},
                        lambda: L.channel_mlp(x, p), bwd, rng, fault=fault)


def _check_dwconv(rng, fault=False):
    x = rng.normal(size=(2, 3, 5, 4))
    p = L.DwConvParams(rng.normal(size=(3, 3, 3)), rng.normal(size=3))

    def bwd(w):
        dx, dk, db = L.dwconv3x3_backward(w, x, p)
        return {"x": dx, "kernel": dk, "bias": db}

    return check_arrays("dwconv3x3", {"x": x, "kernel": p.kernel, "bias": p.bias},
                        lambda: L.dwconv3x3(x, p), bwd, rng, fault=fault)


def _check_group_norm(rng, fault=False, num_groups=2):
    x = rng.normal(size=(2, 6, 3, 3)) * 2.0 + 0.5
    p = L.GroupNormParams(num_groups, 1.0 + 0.3 * rng.normal(size=6), rng.normal(size=6))

    def bwd(w):
        dx, dg, db = L.group_norm_backward(w, x, p)
        return {"x": dx, "gamma": dg, "beta": db}

    return check_arrays(f"group_norm(groups={num_groups})", {"x": x, "gamma": p.gamma, "beta": p.beta},
                        lambda: L.group_norm(x, p), bwd, rng, fault=fault)


def _check_gelu(rng, fault=False):
    x = rng.normal(size=(2, 3, 4, 4)) * 2.0
    x[np.abs(x) < DEFAULT_MARGIN] = DEFAULT_MARGIN * 2
    return check_arrays("gelu", {"x": x}, lambda: L.gelu(x),
                        lambda w: {"x": L.gelu_backward(w, x)}, rng, fault=fault)


def _check_patch_embed(rng, fault=False):
    img = rng.normal(size=(2, 3, 8, 8))
    p = L.LinearParams(rng.normal(size=(5, 48)) / 7.0, rng.normal(size=5))

    def bwd(w):
        dimg, dw, db = L.patch_embed_backward(w, img, p, 4)
        return {"img": dimg, "weight": dw, "bias": db}

    return check_arrays("patch_embed", {"img": img, "weight": p.weight, "bias": p.bias},
                        lambda: L.patch_embed(img, p, 4), bwd, rng, fault=fault)


def _check_patch_merge(rng, fault=False):
    x = rng.normal(size=(2, 3, 4, 6))
    p = L.LinearParams(rng.normal(size=(6, 12)), rng.normal(size=6))

    def bwd(w):
        dx, dw, db = L.patch_merge_backward(w, x, p)
        return {"x": dx, "weight": dw, "bias": db}

    return check_arrays("patch_merge", {"x": x, "weight": p.weight, "bias": p.bias},
                        lambda: L.patch_merge(x, p), bwd, rng, fault=fault)


def _check_dropout(rng, fault=False, per_sample=False):
    x = rng.normal(size=(3, 2, 4, 4))
    make = L.drop_path_mask if per_sample else L.dropout_mask
    mask = make(x.shape, 0.3, np.random.default_rng(5), np.float64)
    return check_arrays("drop_path" if per_sample else "dropout", {"x": x}, lambda: x * mask,
                        lambda w: {"x": w * mask}, rng, fault=fault)


def _lif_margin_ok(module: Module, margin: float) -> bool:
    for m in module.modules():
        if isinstance(m, LIF):
            s = m.saved
            if s.u.size and np.min(np.abs(s.u - s.v_th)) < margin:
                return False
    return True


def _check_module(name, build, shape, rng, tol, fault=False, margin=DEFAULT_MARGIN):
    for _ in range(50):
        module = build(rng)
        _randomize(module, rng)
        x = rng.normal(size=shape)
        module.forward(x)
        if _lif_margin_ok(module, margin * 10):
            break
    else:
        raise RuntimeError(f"{name}: could not draw an input away from the LIF threshold")
    arrays = {"x": x}
    lifs = [(n, p) for n, p in module.named_params() if n.endswith(("tau", "v_th"))]
    arrays.update(lifs)

    def fwd():
        return module.forward(x)

    def bwd(w):
        module.zero_grad()
        module.forward(x)
        out = {"x": module.backward(w)}
        out.update({n: p.grad.copy() for n, p in lifs})
        return out

    arrays = {k: (v.value if hasattr(v, "value") else v) for k, v in arrays.items()}
    return check_arrays(name, arrays, fwd, bwd, rng, tol=tol, fault=fault)


def _check_lif_module(rng, fault=False):
    return _check_module(
        "lif_module", lambda r: LifModule(4, 4, r, dtype=np.float64), (1, 4, 8, 8), rng, MODULE_TOL, fault
    )


def _check_mlp_block(rng, fault=False):
    return _check_module(
        "mlp_block", lambda r: MlpModule(3, 12, r, dtype=np.float64), (1, 3, 4, 4), rng, TOL, fault
    )


def _check_cross_entropy(rng, fault=False):
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)

    def fwd():
        return np.array(cross_entropy_ls(logits, labels, 0.1)[0])

    def bwd(w):
        return {"logits": float(w) * cross_entropy_ls(logits, labels, 0.1)[1]}

    return check_arrays("cross_entropy_ls", {"logits": logits}, fwd, bwd, rng, tol=1e-6, fault=fault)


LAYER_CHECKS: dict[str, Callable] = {
    "channel_mlp": _check_channel_mlp,
    "dwconv3x3": _check_dwconv,
    "group_norm": _check_group_norm,
    "group_norm_g1": lambda rng, fault=False: _check_group_norm(rng, fault, num_groups=1),
    "gelu": _check_gelu,
    "patch_embed": _check_patch_embed,
    "patch_merge": _check_patch_merge,
    "dropout": _check_dropout,
    "drop_path": lambda rng, fault=False: _check_dropout(rng, fault, per_sample=True),
    "lif_module": _check_lif_module,
    "mlp_block": _check_mlp_block,
    "cross_entropy_ls": _check_cross_entropy,
}


def lif_cases(count: int, seed: int, groups: Iterable[int] = (1, 2, 3, 4, 7, 64),
              directions: Iterable[str] = ("vertical", "horizontal"),
              shapes: Iterable[tuple] | None = None):
    """Deterministic list of ``(shape, LifConfig, seed)`` triples."""
    rng = np.random.default_rng(seed)
    groups, directions = list(groups), list(directions)
    shapes = list(shapes) if shapes else None
    cases = []
    for k in range(count):
        if shapes:
            shape = tuple(shapes[k % len(shapes)])
        else:
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 10)),
                     int(rng.integers(1, 10)))
        cfg = LifConfig(Direction(directions[k % len(directions)]), int(groups[(k // len(directions)) % len(groups)]))
        cases.append((shape, cfg, int(rng.integers(0, 2**31))))
    return cases


def _clamp_identity(rng) -> GradcheckReport:
    x = rng.normal(size=(2, 3, 5, 6))
    r, _ = lif_forward(x, LifParams(), LifConfig(Direction.VERTICAL, 1))
    err = float(np.max(np.abs(r - np.maximum(x, LifParams().v_th))))
    return GradcheckReport("lif_clamp_identity g=1", {"max_abs_diff": err}, tolerance=1e-300)


def run_suite(seed: int = 0, cases: int = 24, groups=(1, 2, 3, 4, 7, 64),
              directions=("vertical", "horizontal"), shapes=None,
              fault: str | None = None, layers: bool = True) -> list[GradcheckReport]:
    """All LIF cases plus every layer check. ``fault`` names one op whose
    analytic gradient is corrupted (negative control)."""
    reports = []

    def broken_backward(d, saved):
        g = lif_backward(d, saved)
        g.d_input = g.d_input * 1.01
        g.d_tau *= 1.01
        return g

    for shape, cfg, case_seed in lif_cases(cases, seed, groups, directions, shapes):
        reports.append(lif_forward_backward_check(
            shape, cfg, case_seed, backward=broken_backward if fault == "lif_backward" else None))
    if 1 in set(groups):
        reports.append(_clamp_identity(np.random.default_rng(seed)))
    if layers:
        for name, check in LAYER_CHECKS.items():
            reports.append(check(np.random.default_rng([seed, len(reports)]), fault=(fault == name)))
    return reports
