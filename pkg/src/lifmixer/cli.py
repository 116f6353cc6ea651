"""``lifmixer`` command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import lif
from .bench import OPS, format_table, time_op
from .config import MODEL_KEYS, ConfigError, RunConfig, load_config_file

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("lifmixer")


class UsageError(Exception):
    pass


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(s) for s in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected e.g. 2x3x8x8") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape {text!r} must have four positive extents")
    return dims


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s]


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _apply_threads(n: int | None):
    if not n:
        return None
    lif.set_num_threads(n)
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _run_config(args, **flags) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags.update(seed=args.seed, threads=args.threads, dtype=args.dtype)
    return RunConfig.build(file_values, flags)


# -- subcommands -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import LAYER_CHECKS, run_suite

    rc = _run_config(args)
    if args.inject_fault and args.inject_fault not in set(LAYER_CHECKS) | {"lif_backward"}:
        raise UsageError(f"unknown op {args.inject_fault!r} for --inject-fault")
    directions = args.directions or ["vertical", "horizontal"]
    for d in directions:
        if d not in ("vertical", "horizontal"):
            raise UsageError(f"unknown direction {d!r}")
    reports = run_suite(
        seed=rc.seed, cases=args.cases, groups=args.groups or (1, 2, 3, 4, 7, 64),
        directions=directions, shapes=args.shapes, fault=args.inject_fault,
    )
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    worst = max(r.max_error for r in reports if "clamp" not in r.name)
    print(f"max relative error {worst:.3e} over {len(reports)} checks (tolerance 1e-05)")
    if failed:
        print("FAILED: " + ", ".join(r.name for r in failed))
        return EXIT_FAIL
    print("ALL PASS")
    return EXIT_OK


def cmd_count(args) -> int:
    from .model import REFERENCE_TARGETS, count_flops, count_params

    rc = _run_config(args, variant=args.variant)
    cfg = rc.model_config()
    name = rc.get("variant")
    custom = bool(rc.explicit & ({"patch", "embed_dim", "depths", "groups", "mlp_ratio", "num_classes", "in_chans"}))
    hw = (args.input_size, args.input_size)
    params = count_params(cfg)
    flops = count_flops(cfg, hw)
    print(f"config: patch={cfg.patch} embed_dim={cfg.embed_dim} depths={list(cfg.depths)} "
          f"groups={cfg.groups} mlp_ratio={cfg.mlp_ratio} num_classes={cfg.num_classes}")
    print(f"params {params} ({params / 1e6:.2f}M)")
    print(f"flops@{hw[0]}x{hw[1]} {flops} ({flops / 1e9:.2f}G)")
    if name in REFERENCE_TARGETS and not custom and hw == (224, 224):
        tp, tf = REFERENCE_TARGETS[name]
        dp, df = (params - tp) / tp, (flops - tf) / tf
        ok = abs(dp) <= 0.05 and abs(df) <= 0.10
        print(f"reference {name}: params {tp / 1e6:.0f}M (deviation {dp:+.2%}, gate 5%), "
              f"flops {tf / 1e9:.1f}G (deviation {df:+.2%}, gate 10%) -> {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def _dataset(rc: RunConfig, split: str):
    from .train import load_cifar10, synth_dataset

    kind = rc.get("dataset")
    if kind == "synth":
        n = rc.int("synth_n") if split == "train" else rc.int("eval_n")
        seed = rc.int("synth_seed") if split == "train" else rc.int("eval_seed")
        return synth_dataset(rc.int("synth_classes"), n, seed, size=rc.int("synth_size"))
    if kind == "cifar10":
        path = rc.get("data_path")
        if not path:
            raise UsageError("dataset=cifar10 needs data_path")
        return load_cifar10(path, split)
    raise UsageError(f"unknown dataset {kind!r}; expected synth or cifar10")


def cmd_train(args) -> int:
    from .train import evaluate, train_loop
    from .train import CIFAR_MEAN, CIFAR_STD

    rc = _run_config(args, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     dataset=args.dataset, data_path=args.data_path, metrics=args.metrics,
                     checkpoint=args.checkpoint, resume=args.resume, variant=args.variant)
    data = _dataset(rc, "train")
    cfg = rc.model_config(num_classes=data.num_classes)
    tcfg = rc.train_config()
    if rc.get("dataset") == "cifar10":
        from dataclasses import replace
        overrides = {k: v for k, v in (("norm_mean", CIFAR_MEAN), ("norm_std", CIFAR_STD), ("hflip", True))
                     if k not in rc.explicit}
        tcfg = replace(tcfg, **overrides)
    dtype = np.float64 if rc.dtype == "f64" else np.float32
    result = train_loop(cfg, data, tcfg, metrics_path=rc.get("metrics"), checkpoint_path=rc.get("checkpoint"),
                        resume=rc.get("resume"), dtype=dtype)
    for rec in result.history:
        print(f"epoch {rec.epoch:3d} step {rec.step:6d} loss {rec.loss:.4f} acc {rec.acc:.4f} lr {rec.lr:.2e}")
    acc = evaluate(result.model, data, tcfg)
    print(f"final train top1 {acc:.4f}")
    print(f"metrics -> {rc.get('metrics')}; checkpoint -> {rc.get('checkpoint')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_train_state

    rc = _run_config(args, checkpoint=args.checkpoint, dataset=args.dataset, data_path=args.data_path)
    ckpt_path = rc.get("checkpoint")
    if not Path(ckpt_path).exists():
        raise FileNotFoundError(f"{ckpt_path}: checkpoint not found")
    data = _dataset(rc, "test")
    # an explicit model config is checked against the checkpoint shapes
    cfg = rc.model_config(num_classes=data.num_classes) if rc.explicit & MODEL_KEYS else None
    try:
        model, tcfg, _, epoch = load_train_state(ckpt_path, cfg)
    except ValueError as e:
        raise UsageError(f"checkpoint does not match the model config: {e}") from e
    if data.num_classes != model.cfg.num_classes:
        raise UsageError(f"dataset has {data.num_classes} classes, checkpoint model {model.cfg.num_classes}")
    acc = evaluate(model, data, tcfg)
    print(f"checkpoint {ckpt_path} (epoch {epoch}) on {rc.get('dataset')} ({len(data)} images)")
    print(f"top1 {acc:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    backends = lif.available_backends() if args.backend == "all" else [
        lif.BACKEND if args.backend == "auto" else args.backend]
    groups = args.groups or [2, 4, 7, args.shape[2]]
    rows = []
    for g in groups if args.op != "dwconv3x3" else [groups[0]]:
        for be in backends if args.op.startswith("lif") else [lif.BACKEND]:
            try:
                rows.append(time_op(args.op, args.shape, g, args.repeats, args.warmup, be, args.seed or 0))
            except ValueError as e:
                raise UsageError(str(e)) from e
    print(f"shape {'x'.join(map(str, args.shape))}, repeats {args.repeats}, warmup {args.warmup}")
    print(format_table(rows))
    return EXIT_OK


def cmd_export_features(args) -> int:
    from .tensor import load_tensor, save_tensor
    from .train import load_train_state, normalize

    model, tcfg, _, _ = load_train_state(args.checkpoint)
    names = model.feature_names()
    if args.layer not in names:
        raise UsageError(f"unknown layer {args.layer!r}; valid names:\n  " + "\n  ".join(names))
    path = Path(args.image)
    if not path.exists():
        raise FileNotFoundError(f"{path}: image not found")
    img = np.load(path) if path.suffix == ".npy" else load_tensor(path)
    if img.ndim == 3:
        img = img[None]
    img = normalize(img.astype(np.float32), tcfg.norm_mean, tcfg.norm_std)
    capture = {}
    model.eval()
    model.forward(img, capture=capture)
    feat = np.ascontiguousarray(capture[args.layer], dtype=model.dtype)
    save_tensor(args.out, feat)
    print(f"{args.layer} shape {feat.shape} -> {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (fallback: LIFMIXER_THREADS)")
    common.add_argument("--dtype", choices=["f32", "f64"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lifmixer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    g.add_argument("--shapes", type=lambda s: [_shape(x) for x in s.split(",")], help="e.g. 2x3x8x8,1x4x7x7")
    g.add_argument("--groups", type=_int_list, help="comma-separated group sizes")
    g.add_argument("--directions", type=_str_list, help="vertical,horizontal")
    g.add_argument("--cases", type=int, default=24, help="number of LIF cases (default 24)")
    g.add_argument("--inject-fault", metavar="OP", help="corrupt one op's backward (negative control)")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("count", parents=[common], help="analytic parameter and FLOP counts")
    c.add_argument("variant", nargs="?", help="tiny, small, base or toy (default: from config)")
    c.add_argument("--input-size", type=int, default=224)
    c.set_defaults(func=cmd_count)

    t = sub.add_parser("train", parents=[common], help="train on synth or CIFAR-10 data")
    t.add_argument("--variant")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--dataset", choices=["synth", "cifar10"])
    t.add_argument("--data-path")
    t.add_argument("--metrics", metavar="PATH", help="CSV output (epoch,step,loss,acc,lr)")
    t.add_argument("--checkpoint", metavar="PATH")
    t.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--dataset", choices=["synth", "cifar10"])
    e.add_argument("--data-path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="time the hot kernels")
    b.add_argument("--op", choices=OPS, default="lif_forward")
    b.add_argument("--shape", type=_shape, default=(8, 96, 56, 56))
    b.add_argument("--groups", type=_int_list, help="default: 2,4,7,<H>")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--backend", choices=["auto", "native", "python", "all"], default="auto")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export-features", parents=[common], help="dump an intermediate activation (LIFT format)")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True, help="LIFT tensor or .npy, (1,3,H,W) or (3,H,W), values in [0,1]")
    x.add_argument("--layer", required=True, help="e.g. stage0.block0.lif_out")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # one pool size for the whole run: flag, then config file, then LIFMIXER_THREADS
        limiter = _apply_threads(_run_config(args).threads())
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError) as e:
        print(f"lifmixer: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"lifmixer: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"lifmixer: {e}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as e:  # malformed input data or arguments
        print(f"lifmixer: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
