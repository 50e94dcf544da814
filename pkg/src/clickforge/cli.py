"""Command-line entry points: dataset generation, training, NoC/forgetting
evaluation, mIoU curves, and the annotation server."""

from __future__ import annotations

import argparse
import json
import sys

from . import annoserve, evalbench, netcore, raster, trainer
from .adapter import AdaptConfig
from .losses import LossConfig
from .netcore import ModelConfig


def _parse_targets(text):
    return tuple(float(t) / 100.0 for t in text.split(","))


def _adapt_config(args) -> AdaptConfig:
    return AdaptConfig(mode=args.mode, lr_adm=args.lr_adm, lr_bsm=args.lr_bsm,
                       steps_per_click=args.steps_per_click,
                       loss=LossConfig(
                           dense_activation_clicks=args.dense_activation_clicks))


def _add_adapt_args(p):
    p.add_argument("--mode", choices=["off", "local", "global"], default="off")
    p.add_argument("--lr-adm", type=float, default=1e-4)
    p.add_argument("--lr-bsm", type=float, default=1e-6)
    p.add_argument("--steps-per-click", type=int, default=3)
    p.add_argument("--dense-activation-clicks", type=int, default=4)
    p.add_argument("--targets", type=_parse_targets, default=(0.85, 0.90),
                   metavar="85,90")
    p.add_argument("--cap", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def cmd_gen_data(args):
    spec = raster.DomainSpec(kind=args.kind, height=args.size, width=args.size,
                             seed=args.seed)
    dataset = raster.generate_dataset(spec, args.count)
    raster.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} {args.kind} pairs to {args.out}")


def cmd_train(args):
    dataset = raster.load_dataset(args.data)
    cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                              lr_bsm=args.lr_bsm, lr_adm=args.lr_adm,
                              optimizer=args.optimizer, seed=args.seed)
    model_config = ModelConfig()

    def log(epoch, mean_loss, seconds):
        print(f"epoch {epoch:3d}  loss {mean_loss:.6f}  {seconds:.1f}s",
              flush=True)

    if args.phase in ("bsm", "both"):
        init = netcore.load_checkpoint(args.init, model_config) if args.init else None
        print("phase 1: training the backbone")
        params = trainer.train_bsm(dataset, cfg, model_config, init=init,
                                   on_epoch=log)
    else:
        if not args.init:
            raise SystemExit("--phase adm needs --init with phase-1 parameters")
        params = netcore.load_checkpoint(args.init, model_config)
    if args.phase in ("adm", "both"):
        print("phase 2: training the refinement head (backbone frozen)")
        params = trainer.train_adm(dataset, params, cfg, model_config,
                                   on_epoch=log)
    netcore.save_checkpoint(params, args.out)
    print(f"saved checkpoint to {args.out}")


def cmd_noc_eval(args):
    params = netcore.load_checkpoint(args.ckpt, ModelConfig())
    dataset = raster.load_dataset(args.data)
    report = evalbench.noc_eval(params, dataset, _adapt_config(args),
                                targets=args.targets, cap=args.cap)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    for key, value in sorted(report.mean_noc.items()):
        print(f"NoC@{key}: {value:.2f}")


def cmd_miou_curve(args):
    params = netcore.load_checkpoint(args.ckpt, ModelConfig())
    dataset = raster.load_dataset(args.data)
    curve = evalbench.miou_curve(params, dataset, _adapt_config(args),
                                 k_max=args.cap)
    evalbench.write_curve_csv(curve, args.out)
    print(f"wrote {len(curve)}-point mIoU curve to {args.out}")


def cmd_forget_eval(args):
    params = netcore.load_checkpoint(args.ckpt, ModelConfig())
    adapt_set = raster.load_dataset(args.adapt)
    eval_set = raster.load_dataset(args.eval)
    report = evalbench.forgetting_protocol(params, adapt_set, eval_set,
                                           _adapt_config(args),
                                           targets=args.targets, cap=args.cap)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    for variant, per_target in sorted(report.decay_percent.items()):
        for key, value in sorted(per_target.items()):
            print(f"decay[{variant}] NoC@{key}: {value:+.2f}%")


def cmd_ablation(args):
    params = netcore.load_checkpoint(args.ckpt, ModelConfig())
    dataset = raster.load_dataset(args.data)
    grid = evalbench.ablation_grid(params, dataset, _adapt_config(args),
                                   targets=args.targets, cap=args.cap)
    if args.out:
        with open(args.out, "w") as f:
            f.write(json.dumps(grid, sort_keys=True) + "\n")
    for cell in evalbench.GRID_CELLS:
        stats = " ".join(f"NoC@{k}={v:.2f}" for k, v in sorted(grid[cell].items()))
        print(f"{cell:22s} {stats}")


def cmd_serve(args):
    cfg = annoserve.load_config(args.config)
    if args.ckpt:
        cfg.checkpoint = args.ckpt
    if args.host:
        cfg.host = args.host
    if args.port:
        cfg.port = args.port
    annoserve.serve(cfg)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="clickforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=list(raster.DOMAIN_KINDS), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-phase offline training")
    p.add_argument("--data", required=True)
    p.add_argument("--phase", choices=["bsm", "adm", "both"], default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--init", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr-bsm", type=float, default=1e-3)
    p.add_argument("--lr-adm", type=float, default=5e-4)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("noc-eval", help="NoC@target evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="")
    _add_adapt_args(p)
    p.set_defaults(func=cmd_noc_eval)

    p = sub.add_parser("miou-curve", help="mean IoU per click count, as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_adapt_args(p)
    p.set_defaults(func=cmd_miou_curve)

    p = sub.add_parser("forget-eval", help="catastrophic-forgetting protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapt", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", default="")
    _add_adapt_args(p)
    p.set_defaults(func=cmd_forget_eval)

    p = sub.add_parser("ablation", help="ADM x Optim ablation grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="")
    _add_adapt_args(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--config", default="")
    p.add_argument("--ckpt", default="")
    p.add_argument("--host", default="")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
