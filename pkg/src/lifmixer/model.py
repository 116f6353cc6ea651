"""SNN-MLP backbone assembled from the layer kernels, plus analytic counters.

Modules keep the inputs they need for the backward pass on ``self`` (one
forward, then one backward). Parameter gradients accumulate into
``Param.grad`` until ``zero_grad``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import layers as L
from .lif import DEFAULT_GROUPS, DEFAULT_TAU, DEFAULT_VTH, Direction, LifConfig, LifParams, lif_backward, lif_forward
from .tensor import check_tensor4

__all__ = [
    "ModelConfig",
    "VARIANTS",
    "variant",
    "REFERENCE_TARGETS",
    "Param",
    "Module",
    "Linear",
    "DwConv3x3",
    "GroupNorm",
    "Gelu",
    "Dropout",
    "DropPath",
    "LIF",
    "LifModule",
    "MlpModule",
    "Block",
    "SNNMLP",
    "count_params",
    "count_flops",
    "count_module_params",
]


@dataclass
class ModelConfig:
    patch: int = 4
    embed_dim: int = 96
    depths: tuple[int, int, int, int] = (2, 2, 6, 2)
    groups: int = DEFAULT_GROUPS
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    drop_path: float = 0.0
    norm_groups: int = 1
    dropout: float = 0.0
    tau: float = DEFAULT_TAU
    v_th: float = DEFAULT_VTH
    in_chans: int = 3

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ValueError(f"depths must be four positive integers, got {self.depths}")
        if self.groups < 1 or self.patch < 1 or self.embed_dim < 1 or self.num_classes < 1:
            raise ValueError("patch, embed_dim, groups and num_classes must be positive")
        for s in range(4):
            if self.width(s) % self.norm_groups:
                raise ValueError(f"stage width {self.width(s)} not divisible by norm_groups {self.norm_groups}")

    def width(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def hidden(self, stage: int) -> int:
        return int(self.mlp_ratio * self.width(stage))

    @property
    def downsample(self) -> int:
        return self.patch * 2 ** 3

    def to_kv(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(d) for d in v) if isinstance(v, (tuple, list)) else repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in kv.items():
            if k not in known:
                raise KeyError(f"unknown model config key {k!r}")
            default = getattr(cls(), k)
            if isinstance(default, tuple):
                kwargs[k] = tuple(int(s) for s in str(v).split(","))
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = int(v)
        return cls(**kwargs)


VARIANTS = {
    "tiny": ModelConfig(embed_dim=96, depths=(2, 2, 6, 2), drop_path=0.1),
    "small": ModelConfig(embed_dim=96, depths=(2, 2, 18, 2), drop_path=0.2),
    "base": ModelConfig(embed_dim=128, depths=(2, 2, 18, 2), drop_path=0.3),
    "toy": ModelConfig(embed_dim=32, depths=(1, 1, 2, 1), num_classes=10),
}


def variant(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(VARIANTS[name], **overrides)


# (params, FLOPs at 224x224) reported for each variant
REFERENCE_TARGETS = {
    "tiny": (28e6, 4.4e9),
    "small": (50e6, 8.5e9),
    "base": (88e6, 15.2e9),
}


class Param:
    __slots__ = ("value", "grad", "decay")

    def __init__(self, value: np.ndarray, decay: bool = True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay


class Module:
    training = False

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, v in vars(self).items():
            if isinstance(v, Param):
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    """1x1 projection over channels of an NCHW tensor."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        p = L.init_linear(rng, c_in, c_out, dtype)
        self.weight = Param(p.weight)
        self.bias = Param(p.bias, decay=False)

    @property
    def p(self) -> L.LinearParams:
        return L.LinearParams(self.weight.value, self.bias.value)

    def forward(self, x):
        self.x = x
        return L.channel_mlp(x, self.p)

    def backward(self, d):
        dx, dw, db = L.channel_mlp_backward(d, self.x, self.p)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class DwConv3x3(Module):
    def __init__(self, channels, rng, dtype=np.float32):
        p = L.init_dwconv(rng, channels, dtype)
        self.kernel = Param(p.kernel)
        self.bias = Param(p.bias, decay=False)

    @property
    def p(self) -> L.DwConvParams:
        return L.DwConvParams(self.kernel.value, self.bias.value)

    def forward(self, x):
        self.x = x
        return L.dwconv3x3(x, self.p)

    def backward(self, d):
        dx, dk, db = L.dwconv3x3_backward(d, self.x, self.p)
        self.kernel.grad += dk
        self.bias.grad += db
        return dx


class GroupNorm(Module):
    def __init__(self, channels, num_groups=1, dtype=np.float32, eps=1e-5):
        p = L.init_group_norm(channels, num_groups, dtype, eps)
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = Param(p.gamma, decay=False)
        self.beta = Param(p.beta, decay=False)

    @property
    def p(self) -> L.GroupNormParams:
        return L.GroupNormParams(self.num_groups, self.gamma.value, self.beta.value, self.eps)

    def forward(self, x):
        self.x = x
        return L.group_norm(x, self.p)

    def backward(self, d):
        dx, dg, db = L.group_norm_backward(d, self.x, self.p)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Gelu(Module):
    def forward(self, x):
        self.x = x
        return L.gelu(x)

    def backward(self, d):
        return L.gelu_backward(d, self.x)


class _Stochastic(Module):
    rng: np.random.Generator | None = None

    def __init__(self, rate: float):
        L._check_rate(rate)
        self.rate = rate
        self.mask = None

    def _make_mask(self, shape, dtype):
        raise NotImplementedError

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self.mask = None
            return x
        if self.rng is None:
            raise RuntimeError("stochastic layer used in training mode without an rng")
        self.mask = self._make_mask(x.shape, x.dtype)
        return x * self.mask

    def backward(self, d):
        return d if self.mask is None else d * self.mask


class Dropout(_Stochastic):
    def _make_mask(self, shape, dtype):
        return L.dropout_mask(shape, self.rate, self.rng, dtype)


class DropPath(_Stochastic):
    def _make_mask(self, shape, dtype):
        return L.drop_path_mask(shape, self.rate, self.rng, dtype)


class LIF(Module):
    """Group LIF along one axis with learnable scalar tau and threshold."""

    def __init__(self, direction, groups, tau=DEFAULT_TAU, v_th=DEFAULT_VTH, dtype=np.float32):
        self.cfg = LifConfig(Direction(direction), groups)
        self.tau = Param(np.array([tau], dtype=dtype), decay=False)
        self.v_th = Param(np.array([v_th], dtype=dtype), decay=False)

    @property
    def lif_params(self) -> LifParams:
        return LifParams(float(self.tau.value[0]), float(self.v_th.value[0]))

    def forward(self, x):
        r, self.saved = lif_forward(x, self.lif_params, self.cfg)
        return r

    def backward(self, d):
        g = lif_backward(d, self.saved)
        self.tau.grad += g.d_tau
        self.v_th.grad += g.d_vth
        return g.d_input


class LifModule(Module):
    """proj -> norm -> gelu -> dwconv -> norm -> gelu, then vertical and
    horizontal LIF branches (LIF -> proj -> gelu) summed, normed, projected."""

    def __init__(self, channels, groups, rng, norm_groups=1, tau=DEFAULT_TAU, v_th=DEFAULT_VTH,
                 dtype=np.float32):
        c = channels
        self.proj1 = Linear(c, c, rng, dtype)
        self.norm1 = GroupNorm(c, norm_groups, dtype)
        self.act1 = Gelu()
        self.dwconv = DwConv3x3(c, rng, dtype)
        self.norm2 = GroupNorm(c, norm_groups, dtype)
        self.act2 = Gelu()
        self.vlif = LIF(Direction.VERTICAL, groups, tau, v_th, dtype)
        self.proj_v = Linear(c, c, rng, dtype)
        self.act_v = Gelu()
        self.hlif = LIF(Direction.HORIZONTAL, groups, tau, v_th, dtype)
        self.proj_h = Linear(c, c, rng, dtype)
        self.act_h = Gelu()
        self.norm3 = GroupNorm(c, norm_groups, dtype)
        self.proj_out = Linear(c, c, rng, dtype)

    def forward(self, x, capture=None, prefix=""):
        h1 = self.act1.forward(self.norm1.forward(self.proj1.forward(x)))
        h2 = self.act2.forward(self.norm2.forward(self.dwconv.forward(h1)))
        rv = self.vlif.forward(h2)
        rh = self.hlif.forward(h2)
        xv = self.act_v.forward(self.proj_v.forward(rv))
        xh = self.act_h.forward(self.proj_h.forward(rh))
        out = self.proj_out.forward(self.norm3.forward(xv + xh))
        if capture is not None:
            capture[prefix + "lif_in"] = h2
            capture[prefix + "lif_out"] = rv
            capture[prefix + "vlif_out"] = rv
            capture[prefix + "hlif_out"] = rh
            capture[prefix + "lif_module_out"] = out
        return out

    def backward(self, d):
        d = self.norm3.backward(self.proj_out.backward(d))
        dv = self.vlif.backward(self.proj_v.backward(self.act_v.backward(d)))
        dh = self.hlif.backward(self.proj_h.backward(self.act_h.backward(d)))
        d = self.dwconv.backward(self.norm2.backward(self.act2.backward(dv + dh)))
        return self.proj1.backward(self.norm1.backward(self.act1.backward(d)))


class MlpModule(Module):
    """fc1 -> gelu -> dropout -> gelu -> fc2."""

    def __init__(self, channels, hidden, rng, drop=0.0, dtype=np.float32):
        self.fc1 = Linear(channels, hidden, rng, dtype)
        self.act1 = Gelu()
        self.drop = Dropout(drop)
        self.act2 = Gelu()
        self.fc2 = Linear(hidden, channels, rng, dtype)

    def forward(self, x, capture=None, prefix=""):
        out = self.fc2.forward(self.act2.forward(self.drop.forward(self.act1.forward(self.fc1.forward(x)))))
        if capture is not None:
            capture[prefix + "mlp_out"] = out
        return out

    def backward(self, d):
        d = self.act2.backward(self.fc2.backward(d))
        return self.fc1.backward(self.act1.backward(self.drop.backward(d)))


class Block(Module):
    def __init__(self, channels, hidden, groups, rng, drop_path=0.0, drop=0.0, norm_groups=1,
                 tau=DEFAULT_TAU, v_th=DEFAULT_VTH, dtype=np.float32):
        self.lif = LifModule(channels, groups, rng, norm_groups, tau, v_th, dtype)
        self.mlp = MlpModule(channels, hidden, rng, drop, dtype)
        self.drop_path1 = DropPath(drop_path)
        self.drop_path2 = DropPath(drop_path)

    def forward(self, x, capture=None, prefix=""):
        x = x + self.drop_path1.forward(self.lif.forward(x, capture, prefix))
        x = x + self.drop_path2.forward(self.mlp.forward(x, capture, prefix))
        if capture is not None:
            capture[prefix + "out"] = x
        return x

    def backward(self, d):
        d = d + self.mlp.backward(self.drop_path2.backward(d))
        return d + self.lif.backward(self.drop_path1.backward(d))


class SNNMLP(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        p = cfg.patch
        self.patch_embed = Linear(cfg.in_chans * p * p, cfg.embed_dim, rng, dtype)
        rates = np.linspace(0.0, cfg.drop_path, sum(cfg.depths)).tolist()
        self.stages: list[Module] = []
        self.merges: list[Module] = []
        k = 0
        for s, depth in enumerate(cfg.depths):
            stage = _Stage()
            for _ in range(depth):
                stage.blocks.append(Block(cfg.width(s), cfg.hidden(s), cfg.groups, rng, rates[k],
                                          cfg.dropout, cfg.norm_groups, cfg.tau, cfg.v_th, dtype))
                k += 1
            self.stages.append(stage)
            if s < 3:
                self.merges.append(Linear(4 * cfg.width(s), cfg.width(s + 1), rng, dtype))
        self.norm = GroupNorm(cfg.width(3), cfg.norm_groups, dtype)
        self.head = Linear(cfg.width(3), cfg.num_classes, rng, dtype)

    def stochastic_layers(self) -> list[_Stochastic]:
        return [m for m in self.modules() if isinstance(m, _Stochastic)]

    def seed_rngs(self, seed: int, step: int) -> None:
        """Independent stream per (seed, layer index, step)."""
        for layer_id, m in enumerate(self.stochastic_layers()):
            m.rng = np.random.default_rng([seed, layer_id, step])

    def lif_units(self) -> list[LIF]:
        return [m for m in self.modules() if isinstance(m, LIF)]

    def feature_names(self) -> list[str]:
        names = ["patch_embed"]
        per_block = ["lif_in", "lif_out", "vlif_out", "hlif_out", "lif_module_out", "mlp_out", "out"]
        for s, depth in enumerate(self.cfg.depths):
            for b in range(depth):
                names += [f"stage{s}.block{b}.{n}" for n in per_block]
            if s < 3:
                names.append(f"merge{s}")
        return names + ["norm", "pool", "logits"]

    def forward(self, img: np.ndarray, capture: dict | None = None) -> np.ndarray:
        check_tensor4(img, "img")
        n, c, h, w = img.shape
        ds = self.cfg.downsample
        if c != self.cfg.in_chans or h % ds or w % ds:
            raise ValueError(
                f"input {img.shape} incompatible: need {self.cfg.in_chans} channels and "
                f"spatial extents divisible by {ds}"
            )
        img = img.astype(self.dtype, copy=False)
        self.img_shape = img.shape
        x = self.patch_embed.forward(L.patchify(img, self.cfg.patch))
        if capture is not None:
            capture["patch_embed"] = x
        for s, stage in enumerate(self.stages):
            expect = (n, self.cfg.width(s), h // self.cfg.patch // 2 ** s, w // self.cfg.patch // 2 ** s)
            for b, block in enumerate(stage.blocks):
                assert x.shape == expect, f"stage {s} block {b}: got {x.shape}, expected {expect}"
                x = block.forward(x, capture, f"stage{s}.block{b}.")
            if s < 3:
                x = self.merges[s].forward(L.merge_gather(x))
                if capture is not None:
                    capture[f"merge{s}"] = x
        x = self.norm.forward(x)
        self.pool_hw = x.shape[2] * x.shape[3]
        pooled = x.mean(axis=(2, 3), keepdims=True)
        logits = self.head.forward(pooled)
        if capture is not None:
            capture["norm"] = x
            capture["pool"] = pooled
            capture["logits"] = logits
        return logits.reshape(n, self.cfg.num_classes)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        n = dlogits.shape[0]
        d = self.head.backward(dlogits.reshape(n, -1, 1, 1).astype(self.dtype, copy=False))
        fh, fw = self.norm.x.shape[2:]
        d = np.broadcast_to(d / self.pool_hw, (n, d.shape[1], fh, fw)).astype(self.dtype)
        d = self.norm.backward(d)
        for s in range(3, -1, -1):
            if s < 3:
                d = L.merge_scatter(self.merges[s].backward(d))
            for block in reversed(self.stages[s].blocks):
                d = block.backward(d)
        return L.unpatchify(self.patch_embed.backward(d), self.cfg.in_chans, self.cfg.patch)


class _Stage(Module):
    def __init__(self):
        self.blocks: list[Module] = []


def count_module_params(module: Module) -> int:
    return sum(p.value.size for p in module.params())


def count_params(cfg: ModelConfig) -> int:
    """Learnable scalars of ``SNNMLP(cfg)``, computed from the config alone."""
    total = cfg.in_chans * cfg.patch ** 2 * cfg.embed_dim + cfg.embed_dim
    for s, depth in enumerate(cfg.depths):
        c, hid = cfg.width(s), cfg.hidden(s)
        lif_module = 4 * (c * c + c) + (9 * c + c) + 3 * 2 * c + 2 * 2
        mlp_module = (c * hid + hid) + (hid * c + c)
        total += depth * (lif_module + mlp_module)
        if s < 3:
            total += 4 * c * cfg.width(s + 1) + cfg.width(s + 1)
    c = cfg.width(3)
    total += 2 * c + c * cfg.num_classes + cfg.num_classes
    return total


# per-element costs for the non-MAC work, in FLOP units
NORM_COST = 2
ACT_COST = 1
ADD_COST = 1
LIF_COST = 3


def linear_flops(c_in: int, c_out: int, pixels: int) -> int:
    """MACs of a 1x1 projection (bias excluded)."""
    return c_in * c_out * pixels


def count_flops(cfg: ModelConfig, input_hw=(224, 224)) -> int:
    """Analytic forward cost with one multiply-accumulate counted as one FLOP.

    Projections cost C_in*C_out per output pixel (bias excluded), the
    depthwise conv 9 per element, each LIF step three scalar ops (multiply,
    add, compare), norms ``NORM_COST`` and activations/residual adds one per
    element.
    """
    h, w = input_hw
    if h % cfg.downsample or w % cfg.downsample:
        raise ValueError(f"input {h}x{w} not divisible by {cfg.downsample}")
    h, w = h // cfg.patch, w // cfg.patch
    total = linear_flops(cfg.in_chans * cfg.patch ** 2, cfg.embed_dim, h * w)
    for s, depth in enumerate(cfg.depths):
        c, hid, px = cfg.width(s), cfg.hidden(s), h * w
        e = c * px
        lif_module = (
            4 * c * c * px            # proj1, proj_v, proj_h, proj_out
            + 9 * e                   # dwconv
            + 3 * NORM_COST * e       # norm1..3
            + 4 * ACT_COST * e        # gelus
            + 2 * LIF_COST * e        # vertical and horizontal LIF
            + ADD_COST * e            # branch sum
        )
        mlp_module = 2 * c * hid * px + 2 * ACT_COST * hid * px
        total += depth * (lif_module + mlp_module + 2 * ADD_COST * e)
        if s < 3:
            h, w = h // 2, w // 2
            total += linear_flops(4 * c, cfg.width(s + 1), h * w)
    c = cfg.width(3)
    total += NORM_COST * c * h * w + c * h * w + linear_flops(c, cfg.num_classes, 1)
    return total
