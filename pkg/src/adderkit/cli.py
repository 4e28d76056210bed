"""Command-line entry point: ``adderkit <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

USAGE_ERROR, RUNTIME_ERROR = 2, 1
NECKS = ("fpn", "pafpn", "pafpn_shortcut", "rpafpn")
CONFIG_DIR = Path(__file__).resolve().parent / "data" / "configs"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _threads_arg(p):
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="BLAS/OpenMP thread cap (fallback: ADDERKIT_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adderkit", description=__doc__.splitlines()[0])
    _threads_arg(parser)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gradcheck", help="finite-difference check of one layer's backward")
    _threads_arg(g)
    g.add_argument("--config", help="key=value layer config (default: bundled adder layer)")
    g.add_argument("--layer", choices=("adder", "conv", "bn", "relu"))
    g.add_argument("--rule", choices=("sign", "hardtanh"))
    g.add_argument("--rel-tol", type=float, default=1e-3)
    g.add_argument("--seed", type=int)
    g.add_argument("--csv", help="write the report CSV here instead of stdout")

    e = sub.add_parser("energy", help="op counts and energy of a model spec")
    _threads_arg(e)
    e.add_argument("--spec", required=True, help="spec file, or the name of a bundled spec")
    e.add_argument("--precision", default="fp32", choices=("fp32", "int8"))
    e.add_argument("--convert", help="comma list of components to turn into adder layers, or 'all'")
    e.add_argument("--force-first", action="store_true", help="let --convert touch the first layer")
    e.add_argument("--csv", help="write per-layer CSV here")

    t = sub.add_parser("train", help="run a toy training experiment")
    _threads_arg(t)
    t.add_argument("--task", required=True, choices=("classify", "detect"))
    t.add_argument("--arch", default="adder", choices=("adder", "conv"))
    t.add_argument("--neck", choices=NECKS, help="detect only (default rpafpn)")
    t.add_argument("--bn-policy", choices=("frozen", "unfrozen"), help="classify only (default unfrozen)")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, help="override the number of SGD steps")
    t.add_argument("--config", help="key=value optimizer overrides (base_lr, momentum, ...)")
    t.add_argument("--checkpoint", help="pretrained checkpoint to start from")
    t.add_argument("--csv", help="write the per-step TrainRecord CSV here")

    s = sub.add_parser("sparsity", help="post-ReLU zero fraction of a toy classifier's last block")
    _threads_arg(s)
    s.add_argument("--arch", default="adder", choices=("adder", "conv"))
    s.add_argument("--checkpoint", help="classifier checkpoint (default: bundled for --arch)")
    s.add_argument("--input", help="tensor file (N,3,16,16); default: samples drawn with --seed")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=64)

    x = sub.add_parser("export-graph", help="print a neck's fusion graph")
    _threads_arg(x)
    x.add_argument("--neck", required=True, choices=NECKS)
    x.add_argument("--levels", type=int, default=3)
    x.add_argument("--width", type=int, default=256)
    x.add_argument("--in-channels", help="comma list, one per level (default: width)")
    x.add_argument("--extra-levels", type=int, default=0)
    x.add_argument("--filter", default="adder", choices=("adder", "conv"))
    x.add_argument("--out", help="write here instead of stdout")
    return parser


def parse_args(argv):
    args = build_parser().parse_args(argv)
    _validate(args)
    return args


def _validate(args):
    if args.command == "train":
        if args.task == "classify" and args.neck:
            raise UsageError("train: --neck applies to --task detect only")
        if args.task == "detect" and args.bn_policy:
            raise UsageError("train: --bn-policy applies to --task classify only")
        if args.batch_size is not None and args.batch_size < 2:
            raise UsageError("train: --batch-size must be >= 2")
        if args.steps is not None and args.steps < 1:
            raise UsageError("train: --steps must be >= 1")
    if args.command == "export-graph" and not 2 <= args.levels <= 8:
        raise UsageError("export-graph: --levels must be in [2, 8]")
    if args.command == "sparsity" and args.samples < 1:
        raise UsageError("sparsity: --samples must be >= 1")
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("ADDERKIT_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"ADDERKIT_THREADS must be an integer, got {env!r}") from None
    if threads is not None and threads < 1:
        raise UsageError("--threads must be >= 1")
    args.threads = threads


def _emit(text: str, path=None):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gradcheck(args) -> int:
    from .gradients import (
        GradMode, adder_backward_input, adder_backward_weight, bn_backward, conv_backward, gradcheck,
        kink_free_inputs, l2_companion_forward, relu_backward,
    )
    from .layers import BatchNormState, FilterBank, adder_forward, batchnorm_forward, conv_forward
    from .tensor import ConvGeometry
    from .trainer.record import parse_config

    cfg = parse_config(Path(args.config or CONFIG_DIR / "adder_layer.cfg").read_text())
    layer = args.layer or cfg.get("layer", "adder")
    rule = args.rule or cfg.get("rule", "sign")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n, ci, co = int(cfg.get("batch", 2)), int(cfg.get("c_in", 3)), int(cfg.get("c_out", 4))
    size, k = int(cfg.get("size", 6)), int(cfg.get("kernel", 3))
    geom = ConvGeometry((k, k), int(cfg.get("stride", 1)), int(cfg.get("padding", k // 2)))
    rng = np.random.default_rng(seed)
    rows = []
    if layer == "adder":
        x, w = kink_free_inputs(rng, (n, ci, size, size), (co, ci, k, k))
        bank = lambda w: FilterBank(w, "adder", geom)  # noqa: E731
        mode = GradMode(rule)
        if rule == "sign":
            r = gradcheck(lambda x, w: adder_forward(x, bank(w)), {"x": x, "w": w},
                          lambda gy, x, w: {"x": adder_backward_input(x, bank(w), gy, mode)},
                          rel_tol=args.rel_tol, seed=seed)
            rows.append(("adder", r))
        r = gradcheck(lambda x, w: l2_companion_forward(x, bank(w)), {"x": x, "w": w},
                      lambda gy, x, w: {"w": adder_backward_weight(x, bank(w), gy)},
                      rel_tol=args.rel_tol, seed=seed)
        rows.append(("adder_l2_companion", r))
    elif layer == "conv":
        x = rng.normal(size=(n, ci, size, size))
        w = rng.normal(size=(co, ci, k, k))
        bank = lambda w: FilterBank(w, "conv", geom)  # noqa: E731
        r = gradcheck(lambda x, w: conv_forward(x, bank(w)), {"x": x, "w": w},
                      lambda gy, x, w: dict(zip(("x", "w"), conv_backward(x, bank(w), gy)[:2])),
                      rel_tol=args.rel_tol, seed=seed)
        rows.append(("conv", r))
    elif layer == "bn":
        x = rng.normal(1.0, 2.0, size=(n, ci, size, size))
        gamma, beta = rng.uniform(0.5, 1.5, ci), rng.normal(size=ci)

        def state(gamma, beta):
            return BatchNormState(gamma, beta, np.zeros(ci), np.ones(ci))

        r = gradcheck(lambda x, gamma, beta: batchnorm_forward(x, state(gamma, beta), True),
                      {"x": x, "gamma": gamma, "beta": beta},
                      lambda gy, x, gamma, beta: dict(zip(("x", "gamma", "beta"), bn_backward(x, state(gamma, beta), gy, True))),
                      rel_tol=args.rel_tol, seed=seed)
        rows.append(("bn", r))
    else:
        x = rng.normal(size=(n, ci, size, size))
        x = np.where(np.abs(x) < 0.01, 0.5, x)
        r = gradcheck(lambda x: np.maximum(x, 0), {"x": x}, lambda gy, x: {"x": relu_backward(x, gy)},
                      rel_tol=args.rel_tol, seed=seed)
        rows.append(("relu", r))
    text = "layer,parameter,max_rel_err,pass\n" + "".join(r.to_csv(name).split("\n", 1)[1] for name, r in rows)
    ok = all(r.passed for _, r in rows)
    if args.csv:
        _emit(text, args.csv)
    else:
        sys.stdout.write(text)
    worst = max(r.max_rel_err for _, r in rows)
    sys.stdout.write(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e} tolerance={args.rel_tol:g}\n")
    return 0 if ok else 1


def _resolve_spec(name):
    from .golden import specs_dir
    from .profiler import load_model_spec

    path = Path(name)
    if path.exists():
        return load_model_spec(path)
    slug = path.name[:-5] if path.name.endswith(".spec") else path.name
    bundled = specs_dir() / f"{slug}.spec"
    if bundled.exists():
        return load_model_spec(bundled)
    known = ", ".join(sorted(p.stem for p in specs_dir().glob("*.spec")))
    raise FileNotFoundError(f"no spec file {name!r} and no bundled spec {slug!r} (bundled: {known})")


def cmd_energy(args) -> int:
    from .profiler import ENERGY_MODELS, convert_to_adder, energy_report

    spec = _resolve_spec(args.spec)
    if args.convert:
        spec = convert_to_adder(spec, [c.strip() for c in args.convert.split(",") if c.strip()], args.force_first)
    report = energy_report(spec, ENERGY_MODELS[args.precision])
    if args.csv:
        _emit(report.csv(), args.csv)
    sys.stdout.write(report.table())
    return 0


def _optim_overrides(args, cfg):
    from dataclasses import replace

    from .trainer.record import parse_config

    if args.config:
        over = parse_config(Path(args.config).read_text())
        unknown = set(over) - set(cfg.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer keys in {args.config}: {sorted(unknown)}")
        cfg = replace(cfg, **over)
    if args.steps:
        cfg = replace(cfg, total_steps=args.steps)
    return cfg


def cmd_train(args) -> int:
    if args.task == "classify":
        from .trainer import classify

        cfg = _optim_overrides(args, classify.finetune_config())
        rec = classify.train_toy_classifier(
            args.arch, args.bn_policy or "unfrozen", args.batch_size or 32, cfg, args.seed, args.checkpoint
        )
        lines = [
            f"task=classify arch={args.arch} bn_policy={args.bn_policy or 'unfrozen'} seed={args.seed} steps={cfg.total_steps}",
            f"initial_loss={rec.loss[0]:.6f}",
            f"final_loss={rec.final_loss():.6f}",
            f"last_block_sparsity={rec.metrics['last_block_sparsity']:.4f}",
            f"bn_mean_total_variation={rec.bn_mean_total_variation():.6f}",
        ]
    else:
        from .trainer import detect

        cfg = _optim_overrides(args, detect.detector_config())
        res = detect.train_toy_detector(
            args.neck or "rpafpn", args.arch, cfg, args.seed, args.batch_size or 16, backbone_checkpoint=args.checkpoint
        )
        rec = res.record
        lines = [
            f"task=detect arch={args.arch} neck={args.neck or 'rpafpn'} seed={args.seed} steps={cfg.total_steps}",
            f"initial_loss={rec.loss[0]:.6f}",
            f"final_loss={rec.final_loss():.6f}",
            f"f1={res.f1:.4f} tp={res.tp} fp={res.fp} fn={res.fn}",
        ]
    if args.csv:
        _emit(rec.to_csv(), args.csv)
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_sparsity(args) -> int:
    from .layers import sparsity
    from .tensor import load_tensor
    from .trainer import classify
    from .trainer.data import ClusterTask

    model = classify.load_pretrained(args.arch, args.checkpoint)
    if args.input:
        x = load_tensor(args.input)
    else:
        x, _ = ClusterTask.make(classify.TASK_A_SEED).sample(args.samples, np.random.default_rng(args.seed))
    h = x
    for layer in model.layers[:4]:
        h = layer.forward(h, training=False)
    sys.stdout.write(f"sparsity={sparsity(h):.4f} layer=block3.relu arch={args.arch} samples={len(x)}\n")
    return 0


def cmd_export_graph(args) -> int:
    from .necks import build_neck

    if args.in_channels:
        try:
            chans = [int(c) for c in args.in_channels.split(",")]
        except ValueError:
            raise UsageError("export-graph: --in-channels must be a comma list of integers") from None
    else:
        chans = [args.width] * args.levels
    g = build_neck(args.neck, args.levels, chans, args.width, args.filter, args.extra_levels, rng=0)
    _emit(g.to_text(), args.out)
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "energy": cmd_energy,
    "train": cmd_train,
    "sparsity": cmd_sparsity,
    "export-graph": cmd_export_graph,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return USAGE_ERROR
    except Exception as exc:
        sys.stderr.write(f"adderkit {args.command}: {type(exc).__name__}: {exc}\n")
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
