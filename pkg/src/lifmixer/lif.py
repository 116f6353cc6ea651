"""Full-precision group LIF token mixing.

Along the chained axis (H for vertical, W for horizontal) positions are split
into consecutive blocks of ``groups`` entries. Each block, at every fixed
(batch, channel, cross-axis) coordinate, is one chain stepped by position::

    u_1 = y_1
    o_t = u_t > v_th
    r_t = max(u_t, v_th)
    u_{t+1} = tau * u_t * (1 - o_t) + y_{t+1}

The output ``r`` keeps the membrane value where the neuron fires and clamps
to the threshold elsewhere; the sub-threshold part is carried (leaked by
``tau``) into the next position. The reset potential is 0, which is what the
``(1 - o_t)`` factor encodes.

The hot loops live in a compiled extension (``_lif_native``). When it is not
built, or ``LIFMIXER_BACKEND=python`` is set, the numpy kernels in
``_lif_python`` are used instead. Both produce bit-identical forward outputs.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np

from . import _lif_python
from .tensor import H, W, check_tensor4

try:
    from . import _lif_native
except ImportError:  # extension not compiled
    _lif_native = None

__all__ = [
    "BACKEND",
    "Direction",
    "LifParams",
    "LifConfig",
    "LifSaved",
    "LifGrads",
    "GradcheckReport",
    "available_backends",
    "set_num_threads",
    "lif_forward",
    "lif_backward",
    "lif_oracle_scalar",
    "lif_classical_binary",
    "lif_forward_backward_check",
    "relative_error",
]

DEFAULT_TAU = 0.25
DEFAULT_VTH = 0.25
DEFAULT_GROUPS = 4
DEFAULT_MARGIN = 1e-3


def _select_backend() -> str:
    wanted = os.environ.get("LIFMIXER_BACKEND", "auto").lower()
    if wanted == "python" or _lif_native is None:
        return "python"
    return "native"


BACKEND = _select_backend()


def available_backends() -> list[str]:
    return ["native", "python"] if _lif_native is not None else ["python"]


def _kernels(backend: str | None):
    backend = backend or BACKEND
    if backend == "native":
        if _lif_native is None:
            raise RuntimeError("native LIF backend requested but the extension is not built")
        return _lif_native
    if backend == "python":
        return _lif_python
    raise ValueError(f"unknown backend {backend!r}; expected 'native' or 'python'")


def set_num_threads(n: int) -> None:
    if _lif_native is not None:
        _lif_native.set_num_threads(int(n))


class Direction(str, enum.Enum):
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"

    @property
    def axis(self) -> int:
        return H if self is Direction.VERTICAL else W


@dataclass
class LifParams:
    tau: float = DEFAULT_TAU
    v_th: float = DEFAULT_VTH
    learn_tau: bool = True
    learn_vth: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.tau) and np.isfinite(self.v_th)):
            raise ValueError(f"tau and v_th must be finite, got {self.tau}, {self.v_th}")


@dataclass(frozen=True)
class LifConfig:
    direction: Direction = Direction.VERTICAL
    groups: int = DEFAULT_GROUPS

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if int(self.groups) != self.groups or self.groups < 1:
            raise ValueError(f"groups must be a positive integer, got {self.groups}")


@dataclass
class LifSaved:
    u: np.ndarray
    o: np.ndarray  # uint8 fire mask, same shape as u
    config: LifConfig
    tau: float
    v_th: float


@dataclass
class LifGrads:
    d_input: np.ndarray
    d_tau: float
    d_vth: float


def _as_chains(x: np.ndarray, direction: Direction) -> np.ndarray:
    n, c, h, w = x.shape
    if direction is Direction.VERTICAL:
        return x.reshape(n * c, h, w)
    return x.reshape(n * c * h, w, 1)


def lif_forward(x: np.ndarray, params: LifParams, cfg: LifConfig,
                backend: str | None = None) -> tuple[np.ndarray, LifSaved]:
    check_tensor4(x)
    finite = np.isfinite(x)
    if not finite.all():
        idx = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise ValueError(f"non-finite input element {x[idx]} at index {idx}")
    x = np.ascontiguousarray(x)
    r = np.empty_like(x)
    u = np.empty_like(x)
    o = np.empty(x.shape, dtype=np.uint8)
    if x.size:
        _kernels(backend).forward(
            _as_chains(x, cfg.direction), float(params.tau), float(params.v_th), int(cfg.groups),
            _as_chains(r, cfg.direction), _as_chains(u, cfg.direction), _as_chains(o, cfg.direction),
        )
    return r, LifSaved(u=u, o=o, config=cfg, tau=float(params.tau), v_th=float(params.v_th))


def lif_backward(d_r: np.ndarray, saved: LifSaved, backend: str | None = None) -> LifGrads:
    check_tensor4(d_r, "d_r")
    if d_r.shape != saved.u.shape:
        raise ValueError(f"d_r shape {d_r.shape} does not match forward shape {saved.u.shape}")
    d_r = np.ascontiguousarray(d_r, dtype=saved.u.dtype)
    dx = np.empty_like(d_r)
    cfg = saved.config
    chains = _as_chains(d_r, cfg.direction)
    part_tau = np.zeros(chains.shape[0], dtype=np.float64)
    part_vth = np.zeros(chains.shape[0], dtype=np.float64)
    if d_r.size:
        _kernels(backend).backward(
            chains, _as_chains(saved.u, cfg.direction), _as_chains(saved.o, cfg.direction),
            saved.tau, int(cfg.groups), _as_chains(dx, cfg.direction), part_tau, part_vth,
        )
    # sequential sum keeps the combination order fixed
    d_tau = 0.0
    for v in part_tau.tolist():
        d_tau += v
    d_vth = 0.0
    for v in part_vth.tolist():
        d_vth += v
    return LifGrads(d_input=dx, d_tau=d_tau, d_vth=d_vth)


def lif_oracle_scalar(chain, tau: float, v_th: float):
    """Single-chain reference loop; returns ``(r, u, o)`` lists.

    Arithmetic runs in the chain's own dtype when it is an ndarray (so a
    float32 chain is stepped in float32), otherwise in Python floats.
    """
    cast = chain.dtype.type if isinstance(chain, np.ndarray) else float
    values = [cast(v) for v in chain]
    if not values:
        raise ValueError("chain must contain at least one element")
    tau = cast(tau)
    v_th = cast(v_th)
    r, u, o = [], [], []
    for t, y in enumerate(values):
        if t == 0:
            cur = y
        else:
            cur = tau * u[-1] * (1 - o[-1]) + y
        fired = 1 if cur > v_th else 0
        u.append(cur)
        o.append(fired)
        r.append(max(cur, v_th))
    return r, u, o


def lif_classical_binary(chain, tau: float, v_th: float) -> list[int]:
    """Binary spike train of the classical iterative LIF (same membrane trace)."""
    _, _, o = lif_oracle_scalar(chain, tau, v_th)
    return o


def relative_error(analytic, numeric) -> float:
    """``max|a - f| / max(|a|, |f|)`` over all components; 0 when both vanish."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    f = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    diff = float(np.max(np.abs(a - f))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a))) if a.size else 0.0,
                float(np.max(np.abs(f))) if f.size else 0.0)
    if diff == 0.0:
        return 0.0
    return diff / scale


@dataclass
class GradcheckReport:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5
    detail: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        parts = " ".join(f"{k}={v:.3e}" for k, v in self.errors.items())
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {parts}{extra}"


def _min_margin(saved: LifSaved) -> float:
    if saved.u.size == 0:
        return np.inf
    return float(np.min(np.abs(saved.u - saved.v_th)))


def lif_forward_backward_check(shape, cfg: LifConfig, seed: int, *,
                               params: LifParams | None = None,
                               x: np.ndarray | None = None,
                               weights: np.ndarray | str | None = None,
                               margin: float = DEFAULT_MARGIN,
                               step: float = 1e-6,
                               max_resamples: int = 200,
                               tolerance: float = 1e-5,
                               backend: str | None = None,
                               backward=None) -> GradcheckReport:
    """Compare ``lif_backward`` with central differences of ``sum(w * r)``.

    Runs in float64. Inputs are redrawn until every membrane value along the
    forward trace sits at least ``margin`` away from the threshold, so the
    fire mask stays fixed under the finite-difference perturbation.
    ``weights="zero"`` uses an all-zero upstream gradient. ``backward`` lets a
    caller substitute a (deliberately broken) backward for negative controls.
    """
    params = params or LifParams()
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    backward = backward or (lambda d, s: lif_backward(d, s, backend=backend))

    def fwd(inp, tau, vth):
        return lif_forward(inp, LifParams(tau, vth), cfg, backend=backend)

    if x is None:
        for _ in range(max_resamples):
            cand = rng.normal(loc=params.v_th, scale=1.0, size=shape)
            _, saved = fwd(cand, params.tau, params.v_th)
            if _min_margin(saved) >= margin:
                x = cand
                break
        else:
            raise RuntimeError(
                f"no input of shape {shape} with threshold margin {margin} found after "
                f"{max_resamples} draws (seed {seed}); use a smaller shape or margin"
            )
    else:
        x = np.asarray(x, dtype=np.float64)
        _, saved = fwd(x, params.tau, params.v_th)
        if _min_margin(saved) < margin:
            raise RuntimeError(f"supplied input violates the threshold margin {margin}")
    x = np.ascontiguousarray(x, dtype=np.float64)

    if isinstance(weights, str) and weights == "zero":
        w = np.zeros(shape)
    elif weights is None:
        w = rng.normal(size=shape)
    else:
        w = np.asarray(weights, dtype=np.float64)

    def loss(inp, tau, vth):
        r, _ = fwd(inp, tau, vth)
        return float(np.sum(w * r))

    _, saved = fwd(x, params.tau, params.v_th)
    grads = backward(w, saved)

    num_dx = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_num = num_dx.reshape(-1)
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + step
        lp = loss(x, params.tau, params.v_th)
        flat_x[i] = keep - step
        lm = loss(x, params.tau, params.v_th)
        flat_x[i] = keep
        flat_num[i] = (lp - lm) / (2 * step)
    num_tau = (loss(x, params.tau + step, params.v_th) - loss(x, params.tau - step, params.v_th)) / (2 * step)
    num_vth = (loss(x, params.tau, params.v_th + step) - loss(x, params.tau, params.v_th - step)) / (2 * step)

    errors = {
        "d_input": relative_error(grads.d_input, num_dx),
        "d_tau": relative_error(grads.d_tau, num_tau),
        "d_vth": relative_error(grads.d_vth, num_vth),
    }
    name = f"lif_backward shape={shape} g={cfg.groups} dir={cfg.direction.value} seed={seed}"
    detail = ""
    if errors["d_input"] >= tolerance:
        worst = np.unravel_index(np.argmax(np.abs(grads.d_input - num_dx)), shape)
        detail = f"d_input worst at index {tuple(int(i) for i in worst)}"
    return GradcheckReport(name=name, errors=errors, tolerance=tolerance, detail=detail)
