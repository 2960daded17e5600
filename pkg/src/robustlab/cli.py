"""Command-line interface.

Subcommands: gen-data, train, attack, uap, metric {dr|cca|mmd|ll},
experiment run <spec-file>, experiment report <out-dir>.

Dataset arguments accept either a saved archive directory or an inline
generator spec (JSON object with a "generator" key), so every artifact is
reproducible from the command line alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import attacks, data, experiments, metrics, models, training
from .attacks import AttackConfig


def _load_dataset(arg, split="test"):
    """Archive directory path, or inline JSON generator spec."""
    text = arg.strip()
    if text.startswith("{"):
        spec = json.loads(text)
        train, test = experiments.build_datasets(spec)
        return train if split == "train" else test
    return data.load_archive(arg)


# -- gen-data -----------------------------------------------------------------

def _cmd_gen_data(args):
    spec = json.loads(args.spec)
    out = args.out or "out"
    train, test = experiments.build_datasets(spec)
    data.save_archive(train, os.path.join(out, "train"))
    data.save_archive(test, os.path.join(out, "test"))
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


# -- train ----------------------------------------------------------------------

def _cmd_train(args):
    out = args.out or "out"
    train_set = _load_dataset(args.data, split="train")
    cfg = training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_f=args.lr_f,
        lr_g=args.lr_g, momentum=args.momentum, seed=args.seed,
        mode=args.mode,
        attack=(AttackConfig(eps=args.attack_eps, steps=args.attack_steps)
                if args.mode == "adversarial" else None),
        steepness_weight=args.steepness_weight,
        snapshot_every=args.snapshot_every)
    if args.mode in ("standard", "adversarial") and args.init is None:
        mcfg = models.ModelConfig(blocks=args.blocks,
                                  base_width=args.base_width,
                                  input_shape=train_set.image_shape,
                                  num_classes=train_set.num_classes)
        if args.mode == "standard":
            model, log = training.train_standard(train_set, cfg, mcfg,
                                                 out_dir=out)
        else:
            model, log = training.train_adversarial(train_set, cfg,
                                                    model_config=mcfg,
                                                    out_dir=out)
    else:
        if args.init is None:
            raise SystemExit("fine-tuning modes require --init checkpoint")
        pre = models.load_checkpoint(args.init)
        if args.mode in ("partial_finetune", "full_finetune"):
            model, log = training.finetune(pre, train_set, cfg,
                                           out_dir=out)
        elif args.mode == "dm_finetune":
            model, log = training.finetune_dm(pre, train_set, cfg,
                                              out_dir=out)
        elif args.mode == "adversarial":
            model, log = training.train_adversarial(
                train_set, cfg, pretrained=pre,
                finetune_mode=args.finetune_mode, out_dir=out)
        else:
            raise SystemExit(f"unsupported mode {args.mode!r} with --init")
    ckpt = os.path.join(out, "checkpoint")
    models.save_checkpoint(model, ckpt)
    status = "diverged" if log.diverged else "ok"
    print(f"{status}: saved checkpoint to {ckpt} "
          f"({len(log.records)} log records)")
    return 1 if log.diverged else 0


# -- attack ---------------------------------------------------------------------

def _cmd_attack(args):
    model = models.load_checkpoint(args.checkpoint)
    test = _load_dataset(args.data, split=args.split)
    atk = AttackConfig(eps=args.eps, steps=args.steps,
                       step_size=args.step_size, seed=args.seed)
    trip = metrics.robustness_triple(model, test, atk)
    print("aoi,aai,dr,eps,steps,step_size")
    print(f"{trip.aoi:.4f},{trip.aai:.4f},{trip.dr:.2f},"
          f"{atk.eps},{atk.steps},{atk.step_size}")
    return 0


# -- uap ------------------------------------------------------------------------

def _cmd_uap(args):
    model = models.load_checkpoint(args.checkpoint)
    train_set = _load_dataset(args.data, split="train")
    uap = attacks.uap_train(model, train_set, args.target, eps=args.eps,
                            steps=args.steps, seed=args.seed)
    out = args.out or "uap"
    attacks.save_uap(uap, out)
    print(f"saved UAP to {out} "
          f"(success {uap.provenance['success_rate']:.2f}%)")
    return 0


# -- metric ---------------------------------------------------------------------

def _cmd_metric(args):
    if args.metric == "dr":
        print(f"{metrics.decline_ratio(args.aoi, args.aai):.2f}")
        return 0
    if args.metric == "cca":
        m1 = models.load_checkpoint(args.checkpoint)
        m2 = models.load_checkpoint(args.checkpoint_b)
        test = _load_dataset(args.data, split=args.split)
        x = test.images[:args.num_images]
        depth = "all" if args.depth == "all" else int(args.depth)
        val = metrics.cca_similarity(m1.layer_activations(x, depth=depth),
                                     m2.layer_activations(x, depth=depth))
        print(f"{val:.6f}")
        return 0
    if args.metric == "mmd":
        model = models.load_checkpoint(args.checkpoint)
        a = _load_dataset(args.data, split=args.split)
        b = _load_dataset(args.data_b, split=args.split)
        val = metrics.mmd_distance(
            model.embed(a.images[:args.num_images]),
            model.embed(b.images[:args.num_images]),
            metrics.MmdConfig(sigma=args.sigma))
        print(f"{val:.6f}")
        return 0
    if args.metric == "ll":
        model = models.load_checkpoint(args.checkpoint)
        test = _load_dataset(args.data, split=args.split)
        val = metrics.local_lipschitz(model, test.images[:args.num_images],
                                      eps=args.eps, steps=args.steps,
                                      seed=args.seed)
        print(f"{val:.6f}")
        return 0
    raise SystemExit(f"unknown metric {args.metric!r}")


# -- experiment -------------------------------------------------------------------

def _cmd_experiment(args):
    if args.action == "run":
        spec = experiments.ExperimentSpec.from_file(
            args.spec_file, out_dir=args.out, seed=args.seed)
        report = experiments.run_experiment(spec)
        paths = experiments.emit_report(report)
        for p in paths:
            print(f"wrote {p}")
        failed = report.failed_cells()
        for cell in failed:
            print(f"FAILED cell {cell.get('regime')}: {cell.get('error')}",
                  file=sys.stderr)
        print(f"{len(report.completed_cells())} cells ok, "
              f"{len(failed)} failed ({report.wall_clock:.1f}s)")
        return 1 if failed else 0
    if args.action == "report":
        report = experiments.load_report(args.spec_file)
        for p in experiments.emit_report(report):
            print(f"wrote {p}")
        return 1 if report.failed_cells() else 0
    raise SystemExit(f"unknown experiment action {args.action!r}")


# -- parser -----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="robustlab",
        description="Desk-scale laboratory for robustness transfer in "
                    "pre-training and fine-tuning.")
    parser.add_argument("--seed", type=int, default=None,
                        help="global seed (default 0)")
    parser.add_argument("--out", default=None,
                        help="output directory (defaults per subcommand)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and archive a dataset")
    p.add_argument("spec", help='JSON generator spec, e.g. '
                   '\'{"generator": "alphabet", "seed": 0}\'')
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True,
                   help="archive dir or inline JSON dataset spec")
    p.add_argument("--mode", default="standard", choices=training.MODES)
    p.add_argument("--init", default=None,
                   help="pre-trained checkpoint for fine-tuning modes")
    p.add_argument("--finetune-mode", default="full_finetune",
                   choices=["partial_finetune", "full_finetune"],
                   help="which parameters adversarial fine-tuning updates")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr-f", type=float, default=0.01)
    p.add_argument("--lr-g", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--attack-eps", type=float, default=0.5)
    p.add_argument("--attack-steps", type=int, default=10)
    p.add_argument("--steepness-weight", type=float, default=500.0)
    p.add_argument("--snapshot-every", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="evaluate AOI/AAI/DR under PGD")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("uap", help="train a targeted universal perturbation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--eps", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=_cmd_uap)

    p = sub.add_parser("metric", help="compute a single metric")
    msub = p.add_subparsers(dest="metric", required=True)

    m = msub.add_parser("dr", help="decline ratio from AOI and AAI")
    m.add_argument("--aoi", type=float, required=True)
    m.add_argument("--aai", type=float, required=True)
    m.set_defaults(func=_cmd_metric)

    m = msub.add_parser("cca", help="CCA similarity between two checkpoints")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--checkpoint-b", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test", choices=["train", "test"])
    m.add_argument("--depth", default="all")
    m.add_argument("--num-images", type=int, default=256)
    m.set_defaults(func=_cmd_metric)

    m = msub.add_parser("mmd", help="MMD between two datasets' embeddings")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--data-b", required=True)
    m.add_argument("--split", default="test", choices=["train", "test"])
    m.add_argument("--sigma", type=float, default=None)
    m.add_argument("--num-images", type=int, default=200)
    m.set_defaults(func=_cmd_metric)

    m = msub.add_parser("ll", help="local Lipschitzness of the feature map")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test", choices=["train", "test"])
    m.add_argument("--eps", type=float, default=0.5)
    m.add_argument("--steps", type=int, default=10)
    m.add_argument("--num-images", type=int, default=128)
    m.set_defaults(func=_cmd_metric)

    p = sub.add_parser("experiment", help="run or re-emit an experiment")
    p.add_argument("action", choices=["run", "report"])
    p.add_argument("spec_file",
                   help="spec JSON file (run) or report directory (report)")
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command != "experiment":
        args.seed = 0  # experiment specs carry their own seed default
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
