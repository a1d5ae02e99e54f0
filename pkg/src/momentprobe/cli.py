"""Command-line surface.

Subcommands: synth, train, train-mpplus, ablate, eval. Exit codes are a
stable contract: 0 success, 1 usage or configuration error, 2 data
error. MP_THREADS caps kernel-internal (BLAS) parallelism and must be
honored before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import os
import sys


def _cap_threads() -> None:
    cap = os.environ.get("MP_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; route through the usage path (1)
        from .errors import UsageError
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="momentprobe",
                     description="Train and compare probing heads on frozen features.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic feature file",
                           parents=[], add_help=True)
    synth.add_argument("--regime", required=True,
                       choices=["mean-sep", "cov-sep", "mixed"])
    synth.add_argument("--classes", type=int, default=2)
    synth.add_argument("--tokens", type=int, default=32)
    synth.add_argument("--dim", type=int, default=8)
    synth.add_argument("--per-class", type=int, default=500)
    synth.add_argument("--delta", type=float, default=4.0)
    synth.add_argument("--rho", type=float, default=0.8)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output .mpft path")

    def add_train_flags(p, mpplus: bool):
        p.add_argument("--features", required=True, help="input .mpft path")
        p.add_argument("--out", default="", help="output directory (default: run-<hash>)")
        p.add_argument("--dhat", type=int, default=8)
        p.add_argument("--heads", type=int, default=2)
        p.add_argument("--dhat-gcp", type=int, default=0)
        p.add_argument("--mode", choices=["auto", "cls", "gap"], default="auto")
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--lr", type=float, default=1e-2)
        p.add_argument("--wd", type=float, default=0.05)
        p.add_argument("--warmup-frac", type=float, default=0.1)
        p.add_argument("--lr-min", type=float, default=1e-6)
        p.add_argument("--batch-ref", type=int, default=0,
                       help="reference batch for the linear lr scaling rule (0 = off)")
        p.add_argument("--val-fraction", type=float, default=0.8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-figures", action="store_true")
        if mpplus:
            p.add_argument("--dh", type=int, default=16)
            p.add_argument("--layers", type=int, default=4)
            p.add_argument("--attn-heads", type=int, default=4)
            p.add_argument("--ffn-expansion", type=int, default=4)
            p.add_argument("--backbone-seed", type=int, default=0)
            p.add_argument("--no-psrp", action="store_true",
                           help="train the head only over the plain frozen backbone")

    train = sub.add_parser("train", help="train one probing head")
    train.add_argument("--head", required=True,
                       choices=["lp-cls", "lp-gap", "lp-cls+gap", "gcp", "bcnn",
                                "isqrt", "mhc3", "mp", "mp+cls-gcp"])
    train.add_argument("--isqrt-iters", type=int, default=5)
    add_train_flags(train, mpplus=False)

    mpplus = sub.add_parser("train-mpplus",
                            help="jointly train recalibration and the fused head")
    add_train_flags(mpplus, mpplus=True)

    ablate = sub.add_parser("ablate", help="run an ablation suite")
    ablate.add_argument("--suite", required=True, choices=["probing", "dhat", "dh"])
    add_train_flags(ablate, mpplus=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a feature file")
    ev.add_argument("--model", required=True, help="checkpoint .mpck path")
    ev.add_argument("--features", required=True, help="input .mpft path")
    return parser


def _config_from_args(args, head: str):
    from .train import RunConfig
    return RunConfig(
        head=head, d_hat=args.dhat, h=args.heads, d_hat_gcp=args.dhat_gcp,
        d_h=getattr(args, "dh", 16), mode=args.mode, epochs=args.epochs,
        batch=args.batch, lr=args.lr, weight_decay=args.wd,
        warmup_frac=args.warmup_frac, lr_min=args.lr_min,
        batch_ref=args.batch_ref, val_fraction=args.val_fraction,
        seed=args.seed, isqrt_iters=getattr(args, "isqrt_iters", 5),
        features=args.features,
        backbone_layers=getattr(args, "layers", 4),
        backbone_heads=getattr(args, "attn_heads", 4),
        backbone_ffn=getattr(args, "ffn_expansion", 4),
        backbone_seed=getattr(args, "backbone_seed", 0),
        psrp=not getattr(args, "no_psrp", False))


def _out_dir(args, config, summary):
    from pathlib import Path
    out = args.out or f"run-{config.config_hash(summary)[:12]}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(args) -> int:
    from .data import SynthSpec, synth_generate, write_feature_file
    spec = SynthSpec(classes=args.classes, tokens=args.tokens, dim=args.dim,
                     regime=args.regime.replace("-", "_"),
                     per_class=args.per_class, seed=args.seed,
                     delta=args.delta, rho=args.rho)
    ds = synth_generate(spec)
    write_feature_file(args.out, ds)
    hdr = ds.header
    print(f"wrote {args.out}: {hdr.sample_count} samples, "
          f"{hdr.tokens_per_sample} tokens x {hdr.feature_dim} dims, "
          f"cls={int(hdr.has_cls)}, {hdr.class_count} classes")
    return 0


def _finish_run(args, config, ds, report, params) -> int:
    from .train import data_summary, save_checkpoint
    out = _out_dir(args, config, data_summary(ds))
    report.write(out / "report.tsv")
    save_checkpoint(out / "model.mpck", config, data_summary(ds), params)
    if not args.no_figures:
        from .viz import plot_training_curves
        plot_training_curves(report, out / "curves.png")
    for epoch, loss, acc, wall in report.epochs:
        print(f"epoch {epoch:3d}  loss {loss:.4f}  val_acc {acc:.4f}  ({wall:.2f}s)")
    print(f"final val accuracy {report.final_val_accuracy:.4f}  "
          f"trainable params {report.param_counts['trainable_total']}")
    print(f"report: {out / 'report.tsv'}")
    return 0


def cmd_train(args) -> int:
    from .data import read_feature_file
    from .train import train_probe_run
    config = _config_from_args(args, head=args.head)
    ds = read_feature_file(args.features)
    report, head = train_probe_run(config, ds)
    return _finish_run(args, config, ds, report, head.params)


def cmd_train_mpplus(args) -> int:
    from .data import read_feature_file
    from .train import train_mpplus_run
    config = _config_from_args(args, head="mp+")
    ds = read_feature_file(args.features)
    report, art = train_mpplus_run(config, ds)
    print(f"psrp params {report.param_counts['psrp']}  "
          f"head params {report.param_counts['head']}")
    return _finish_run(args, config, ds, report, art.params)


def cmd_ablate(args) -> int:
    from .ablate import run_suite
    from .data import read_feature_file
    from .train import data_summary
    config = _config_from_args(args, head="mp")
    ds = read_feature_file(args.features)
    table = run_suite(args.suite, config, ds)
    out = _out_dir(args, config, data_summary(ds))
    tsv = out / f"ablation-{args.suite}.tsv"
    tsv.write_text(table.to_tsv())
    if not args.no_figures:
        from .viz import plot_ablation
        plot_ablation(table, out / f"ablation-{args.suite}.png")
    print(table.to_aligned(), end="")
    print(f"table: {tsv}")
    return 0


def cmd_eval(args) -> int:
    from .data import read_feature_file
    from .errors import ConfigError
    from .train import (data_summary, evaluate, load_checkpoint,
                        restore_mpplus, restore_probe_head)
    meta_config, meta_data, _stored_hash, stored = load_checkpoint(args.model)
    ds = read_feature_file(args.features)
    summary = data_summary(ds)
    if {k: summary[k] for k in meta_data} != meta_data:
        raise ConfigError(
            f"checkpoint was trained on data {meta_data}, got {summary}")
    if meta_config["head"] == "mp+":
        forward = restore_mpplus(meta_config, meta_data, stored).forward_sample
    else:
        forward = restore_probe_head(meta_config, meta_data, stored).forward
    accuracy, per_class = evaluate(forward, ds)
    print(f"accuracy {accuracy:.6f} on {len(ds)} samples")
    for c in sorted(per_class):
        print(f"class {c}: {per_class[c]:.6f}")
    return 0


def main(argv=None) -> int:
    _cap_threads()
    from .errors import DataError, MomentProbeError, UsageError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"synth": cmd_synth, "train": cmd_train,
                   "train-mpplus": cmd_train_mpplus, "ablate": cmd_ablate,
                   "eval": cmd_eval}[args.command]
        return handler(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MomentProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
