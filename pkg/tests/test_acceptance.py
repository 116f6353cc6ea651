"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import time

import numpy as np
import pytest

from lifmixer import lif
from lifmixer.checkpoint import load_checkpoint
from lifmixer.gradcheck import LAYER_CHECKS, run_suite
from lifmixer.lif import Direction, LifConfig, LifParams, lif_forward, relative_error
from lifmixer.model import REFERENCE_TARGETS, SNNMLP, ModelConfig, count_flops, count_params, variant
from lifmixer.train import TrainConfig, evaluate, load_train_state, synth_dataset, train_loop
from lif_helpers import oracle_tensor


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


def test_criterion_1_parameter_budget(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("tiny", "small", "base"):
        got, want = count_params(variant(name)), REFERENCE_TARGETS[name][0]
        dev = (got - want) / want
        ok &= abs(dev) <= 0.05
        parts.append(f"{name} {got / 1e6:.2f}M vs {want / 1e6:.0f}M ({dev:+.2%})")
    dt = time.perf_counter() - t0
    report(1, ok and dt < 1.0, "; ".join(parts) + f"; {dt * 1e3:.1f} ms")


def test_criterion_2_flop_budget(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("tiny", "small", "base"):
        got, want = count_flops(variant(name), (224, 224)), REFERENCE_TARGETS[name][1]
        dev = (got - want) / want
        ok &= abs(dev) <= 0.10
        parts.append(f"{name} {got / 1e9:.3f}G vs {want / 1e9:.1f}G ({dev:+.2%})")
    dt = time.perf_counter() - t0
    report(2, ok and dt < 1.0, "; ".join(parts) + f"; {dt * 1e3:.1f} ms")


def test_criterion_3_gradient_correctness(report):
    t0 = time.perf_counter()
    reports = run_suite(seed=0, cases=24)
    dt = time.perf_counter() - t0
    lif_reports = [r for r in reports if r.name.startswith("lif_backward")]
    covered = {r.name.split("(")[0].split(" ")[0] for r in reports}
    layers_ok = {"channel_mlp", "dwconv3x3", "group_norm", "gelu", "patch_embed", "patch_merge", "dropout",
                 "drop_path", "lif_module", "mlp_block", "cross_entropy_ls"} <= covered
    worst = max(r.max_error for r in reports if "clamp" not in r.name)
    failed = [r.name for r in reports if not r.passed]
    ok = not failed and len(lif_reports) >= 20 and layers_ok and dt < 120
    report(3, ok, f"{len(lif_reports)} LIF cases + {len(LAYER_CHECKS)} layer checks, "
                  f"worst rel err {worst:.2e}, failed={failed}, {dt:.1f} s")


def test_criterion_4_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    groups = (1, 2, 4, 7, 56)
    worst32, mismatches64, cases = 0.0, 0, 0
    for k in range(100):
        if k < 2:
            shape = (4, 16, 56, 56)
        else:
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 17)), int(rng.integers(1, 57)),
                     int(rng.integers(1, 57)))
        cfg = LifConfig(Direction.VERTICAL if k % 2 == 0 else Direction.HORIZONTAL, groups[k % len(groups)])
        p = LifParams(0.25, 0.25)
        dtype = np.float32 if (k // 2) % 2 == 0 else np.float64
        x = rng.normal(0.25, 1.0, size=shape).astype(dtype)
        ro, oo = oracle_tensor(x, p.tau, p.v_th, cfg)
        for backend in lif.available_backends():
            r, saved = lif_forward(x, p, cfg, backend=backend)
            if dtype == np.float32:
                worst32 = max(worst32, relative_error(r, ro))
            elif not (np.array_equal(r, ro) and np.array_equal(saved.o, oo)):
                mismatches64 += 1
        cases += 1
    dt = time.perf_counter() - t0
    ok = worst32 <= 1e-6 and mismatches64 == 0 and dt < 60
    report(4, ok, f"{cases} tensors x backends {lif.available_backends()}, f32 worst rel err {worst32:.2e}, "
                  f"f64 inexact cases {mismatches64}, {dt:.1f} s")


def _random_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 13)), int(rng.integers(1, 13)))
    cfg = LifConfig(Direction.VERTICAL if rng.random() < 0.5 else Direction.HORIZONTAL, int(rng.integers(1, 8)))
    p = LifParams(float(rng.uniform(0, 1)), float(rng.uniform(-1, 1)))
    x = rng.normal(p.v_th, 1.0, size=shape)
    return x, p, cfg


def _floor(rng):
    x, p, cfg = _random_case(rng)
    r, saved = lif_forward(x, p, cfg)
    return r.min() >= p.v_th and np.array_equal(saved.o, (saved.u > p.v_th).astype(np.uint8))


def _fire_reset(rng):
    x, p, cfg = _random_case(rng)
    x = p.v_th + np.abs(x - p.v_th) + 1e-9
    r, _ = lif_forward(x, p, cfg)
    return np.array_equal(r, x)


def _clamp(rng):
    x, p, cfg = _random_case(rng)
    r, _ = lif_forward(x, p, LifConfig(cfg.direction, 1))
    return np.array_equal(r, np.maximum(x, p.v_th))


def _global(rng):
    x, p, cfg = _random_case(rng)
    extent = x.shape[cfg.direction.axis]
    r_big, _ = lif_forward(x, p, LifConfig(cfg.direction, extent + int(rng.integers(0, 5))))
    r_ref, _ = oracle_tensor(x, p.tau, p.v_th, LifConfig(cfg.direction, extent))
    return np.array_equal(r_big, r_ref)


def _blocks(rng):
    x, p, cfg = _random_case(rng)
    axis, g = cfg.direction.axis, cfg.groups
    nb = x.shape[axis] // g
    if nb < 2:  # need two full blocks; pad the axis
        pad = [(0, 0)] * 4
        pad[axis] = (0, 2 * g - x.shape[axis])
        x = np.pad(x, pad, constant_values=p.v_th + 0.5)
        nb = 2
    full = nb * g
    r, _ = lif_forward(x, p, cfg)
    perm = rng.permutation(nb)
    idx = np.concatenate([np.arange(b * g, (b + 1) * g) for b in perm] + [np.arange(full, x.shape[axis])])
    r_perm, _ = lif_forward(np.take(x, idx, axis=axis), p, cfg)
    ok = np.array_equal(r_perm, np.take(r, idx, axis=axis))
    k = int(rng.integers(0, nb))
    y = x.copy()
    sl = [slice(None)] * 4
    sl[axis] = slice(k * g, (k + 1) * g)
    y[tuple(sl)] += rng.normal(size=y[tuple(sl)].shape)
    r2, _ = lif_forward(y, p, cfg)
    outside = np.ones(x.shape[axis], bool)
    outside[k * g:(k + 1) * g] = False
    return ok and np.array_equal(np.compress(outside, r, axis=axis), np.compress(outside, r2, axis=axis))


def _cross_axis(rng):
    x, p, cfg = _random_case(rng)
    other = 3 if cfg.direction is Direction.VERTICAL else 2
    j = int(rng.integers(0, x.shape[other]))
    n, c = int(rng.integers(0, x.shape[0])), int(rng.integers(0, x.shape[1]))
    y = x.copy()
    line = [n, c, slice(None), slice(None)]
    line[other] = j
    y[tuple(line)] += rng.normal(size=y[tuple(line)].shape)
    r1, _ = lif_forward(x, p, cfg)
    r2, _ = lif_forward(y, p, cfg)
    changed = np.argwhere(r1 != r2)
    return all(int(i[0]) == n and int(i[1]) == c and int(i[other]) == j for i in changed)


PROPERTIES = {
    "floor bound": _floor,
    "fire-reset identity": _fire_reset,
    "g=1 clamp": _clamp,
    "g>=extent is global LIF": _global,
    "block independence": _blocks,
    "cross-axis independence": _cross_axis,
}


def test_criterion_5_algebraic_invariants(report):
    t0 = time.perf_counter()
    n = 1000
    failures = {}
    for i, (name, prop) in enumerate(PROPERTIES.items()):
        rng = np.random.default_rng([5, i])
        failures[name] = sum(not prop(rng) for _ in range(n))
    dt = time.perf_counter() - t0
    ok = not any(failures.values()) and dt < 60
    report(5, ok, f"{n} cases x {len(PROPERTIES)} properties, failures {failures}, {dt:.1f} s")


@pytest.mark.slow
def test_criterion_6_end_to_end_learning(report, tmp_path):
    t0 = time.perf_counter()
    cfg = ModelConfig(embed_dim=32, depths=(1, 1, 2, 1), groups=4, num_classes=3)
    data = synth_dataset(3, 300, seed=1)
    tcfg = TrainConfig(epochs=30, seed=0)
    init = [(u.tau.value[0], u.v_th.value[0]) for u in SNNMLP(cfg, seed=tcfg.seed).lif_units()]
    res = train_loop(cfg, data, tcfg)
    best = max(h.acc for h in res.history)
    first95 = next((h.epoch for h in res.history if h.acc >= 0.95), None)
    moved = max(max(abs(u.tau.value[0] - t), abs(u.v_th.value[0] - v))
                for u, (t, v) in zip(res.model.lif_units(), init))
    held_out = evaluate(res.model, synth_dataset(3, 300, seed=2), tcfg)

    batch = data.subset(np.arange(16))
    overfit = train_loop(cfg, batch, TrainConfig(epochs=200, batch_size=16, weight_decay=0.0, smoothing=0.0,
                                                 warmup_epochs=0, seed=0))
    first_small = next((h.step for h in overfit.history if h.loss < 0.01), None)
    dt = time.perf_counter() - t0
    ok = first95 is not None and first_small is not None and moved > 1e-3 and dt < 600
    report(6, ok, f"train acc >=95% at epoch {first95} (best {best:.3f}), held-out {held_out:.3f}; "
                  f"single-batch loss <0.01 at step {first_small}; max tau/v_th shift {moved:.3e}; {dt:.0f} s")


def test_criterion_7_determinism(report, tmp_path):
    t0 = time.perf_counter()
    cfg = ModelConfig(embed_dim=32, depths=(1, 1, 2, 1), num_classes=3, drop_path=0.1, dropout=0.1)
    data = synth_dataset(3, 120, seed=1)
    tcfg = TrainConfig(epochs=3, seed=11, hflip=True)
    lif.set_num_threads(1)
    for name in ("a", "b"):
        train_loop(cfg, data, tcfg, metrics_path=tmp_path / f"{name}.csv", checkpoint_path=tmp_path / f"{name}.ckpt")
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    model, *_ = load_train_state(tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    exact = all(ck.tensors[n].tobytes() == p.value.tobytes() and ck.tensors[n].dtype == p.value.dtype
                for n, p in model.named_params())
    ck_b = load_checkpoint(tmp_path / "b.ckpt")
    same_ckpt = all(ck.tensors[k].tobytes() == ck_b.tensors[k].tobytes() for k in ck.tensors)
    dt = time.perf_counter() - t0
    report(7, same_csv and exact and same_ckpt and dt < 300,
           f"identical CSVs {same_csv}, identical checkpoints {same_ckpt}, "
           f"load round-trip bit-exact {exact} ({len(ck.tensors)} tensors), {dt:.0f} s")


def test_criterion_8_desk_scale_scope(report):
    p, c, m = LifParams(), LifConfig(), ModelConfig()
    ok = (p.tau, p.v_th, c.groups, m.tau, m.v_th, m.groups) == (0.25, 0.25, 4, 0.25, 0.25, 4)
    report(8, ok, "ImageNet top-1, COCO AP, ADE20K mIoU and ablation deltas need full-scale training "
                  "and are not reproduced here; default tau=v_th=0.25, g=4 verified")
