"""Command-line entry point: ``homocl <command> [options]``."""

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import clustering, fnsim, lineval, model, pipeline, synthdata


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path (file or directory)")
    p.add_argument("--config", default=None, help="JSON file of option values")


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _distribution(args):
    if args.dist == "uniform":
        return synthdata.uniform(args.classes)
    if args.dist == "skewed":
        return synthdata.skewed(args.classes, args.max_weight)
    return synthdata.make_distribution(args.dist)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise ValueError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def cmd_synth(args):
    _require(args, "out")
    dist = _distribution(args)
    spec = synthdata.SynthesisSpec(
        len(dist), args.size, args.channels, args.n, args.noise, args.shift, args.seed,
        tile_size=args.tile_size, instance_texture=args.instance_texture)
    d = synthdata.generate_dataset(spec, dist, domain_id=args.domain_id)
    synthdata.save_dataset(d, args.out)
    counts = np.bincount(d.class_ids, minlength=len(dist))
    print(f"wrote {len(d)} images of {d.image_shape} over {len(dist)} classes to {args.out}")
    print("class counts: " + " ".join(str(int(c)) for c in counts))
    return 0


def cmd_pretrain(args):
    _require(args, "out")
    over = {"mode": args.mode, "epochs": args.epochs, "batch_size": args.batch_size,
            "lr": args.lr, "temperature": args.temperature, "k": args.k,
            "dataset": args.dataset, "dataset_b": args.dataset_b, "seed": args.seed,
            "recluster_every": args.recluster_every, "warmup_epochs": args.warmup_epochs}
    if args.config:
        cfg = pipeline.load_config(args.config, **over)
    else:
        cfg = pipeline.TrainConfig.from_dict({k: v for k, v in over.items() if v is not None})
    if cfg.dataset is None:
        raise ValueError("pretraining needs --dataset (or 'dataset' in the config)")
    if cfg.mode == "mixed_domain" and cfg.dataset_b is None:
        raise ValueError("mixed_domain mode needs --dataset-b")
    a = synthdata.load_dataset(cfg.dataset)
    cfg.augment = replace(cfg.augment, output_size=a.pixels.shape[1])
    res = pipeline.pretrain(cfg, a, out_dir=args.out, resume_from=args.resume,
                            progress=lambda m: print(json.dumps(m, sort_keys=True), flush=True))
    print(f"finished at step {res.steps}; checkpoints in {args.out}")
    return 0


def cmd_cluster(args):
    _require(args, "checkpoint", "dataset", "k", "out")
    params, _ = model.load_checkpoint(args.checkpoint)
    d = synthdata.load_dataset(args.dataset)
    if args.split != "all":
        d = d.split(args.split)
    a = clustering.cluster_stage(d, params, args.k, seed=args.seed)
    clustering.save_assignment(a, args.out)
    sizes = np.bincount(a.cluster_ids, minlength=args.k)
    print(f"wrote {len(a.image_ids)} assignments to {args.out}; cluster sizes "
          + " ".join(str(int(s)) for s in sizes))
    return 0


def cmd_fnsim(args):
    _require(args, "out")
    if args.sweep:
        grid = _ints(args.grid)
        reports = fnsim.sweep(args.sweep, grid, batch_size=args.batch_size,
                              num_classes=args.classes, n_batches=args.batches, seed=args.seed)
    else:
        if args.mode == "finite_dataset":
            _require(args, "dataset")
            source = synthdata.load_dataset(args.dataset)
            dist = source.distribution
        else:
            dist = source = _distribution(args)
        rep = fnsim.simulate_fn_rate(source, args.batch_size, args.batches, args.mode, args.seed)
        rep.params = {"analytic": fnsim.analytic_fn_rate(dist, args.batch_size)}
        reports = [rep]
    fnsim.write_reports_csv(reports, args.out)
    for r in reports:
        print(f"B={r.batch_size} FN={r.mean_fn_percent:.4f}% +- {r.std_error:.4f} "
              f"(analytic {r.params.get('analytic', float('nan')):.4f}%)")
    return 0


def cmd_lineval(args):
    _require(args, "checkpoint", "dataset", "out")
    params, _ = model.load_checkpoint(args.checkpoint)
    d = synthdata.load_dataset(args.dataset)
    table = lineval.extract_features(params, d)
    if args.features:
        lineval.save_features(table, args.features)
    if args.projection:
        lineval.export_projection_2d(table, args.projection)
    fractions = _floats(args.label_fractions)
    rows = [{"label_fraction": f, "test_accuracy": acc}
            for f, acc in lineval.label_fraction_sweep(table, fractions, seed=args.seed)]
    pipeline.write_csv(rows, args.out)
    for r in rows:
        print(f"labels {r['label_fraction']:.2f}: {r['test_accuracy']:.2f}%")
    return 0


def cmd_ksweep(args):
    _require(args, "out")
    over = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
            "dataset": args.dataset, "seed": args.seed, "warmup_epochs": args.warmup_epochs}
    if args.config:
        cfg = pipeline.load_config(args.config, **over)
    else:
        cfg = pipeline.TrainConfig.from_dict({"mode": "cluster_aware", "k": 1,
                                              **{k: v for k, v in over.items() if v is not None}})
    if cfg.dataset is None:
        raise ValueError("the K sweep needs --dataset (or 'dataset' in the config)")
    d = synthdata.load_dataset(cfg.dataset)
    cfg.augment = replace(cfg.augment, output_size=d.pixels.shape[1])
    rows = pipeline.k_sweep(cfg, _ints(args.ks), d, out_csv=args.out)
    for r in rows:
        print(f"K={r['K']}: {r['status']} {r['msl_like']:.2f}%")
    return 0


def cmd_experiment(args):
    out = args.out or os.path.join("runs", args.name)
    task = pipeline.DeskTask()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            task = pipeline.DeskTask(**json.load(fh))
    seeds = range(args.seed, args.seed + args.seeds)
    written = pipeline.run_experiment(args.name, out, task, seeds, args.batches)
    with open(os.path.join(out, f"{args.name}_summary.txt")) as fh:
        sys.stdout.write(fh.read())
    print("wrote " + ", ".join(written))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="homocl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dist", choices=["uniform", "msl", "hirise", "skewed"], default="uniform")
    p.add_argument("--max-weight", type=float, default=0.35)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--shift", type=int, default=2)
    p.add_argument("--tile-size", type=int, default=0)
    p.add_argument("--instance-texture", type=float, default=0.0)
    p.add_argument("--domain-id", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--dataset-b")
    p.add_argument("--mode", choices=list(pipeline.MODES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--recluster-every", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("cluster", help="k-means on encoder features")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int)
    p.add_argument("--split", default="train", choices=["train", "val", "test", "all"])
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fnsim", help="false-negative rate simulation")
    _common(p)
    p.add_argument("--dist", choices=["uniform", "msl", "hirise", "skewed"], default="uniform")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--max-weight", type=float, default=0.35)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--mode", choices=[m.value for m in fnsim.SimMode], default="iid")
    p.add_argument("--dataset", help="HCL1 file for finite_dataset mode")
    p.add_argument("--sweep", choices=["datasetSize", "batchSize", "classCount"])
    p.add_argument("--grid", default="32,64,128,256,512")
    p.set_defaults(func=cmd_fnsim)

    p = sub.add_parser("lineval", help="linear evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--label-fractions", default="1.0")
    p.add_argument("--features", help="also write the HFEA feature table here")
    p.add_argument("--projection", help="also write a 2-D PCA projection CSV here")
    p.set_defaults(func=cmd_lineval)

    p = sub.add_parser("ksweep", help="cluster-aware pretraining over a grid of K")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--ks", default="1,2,5,20,50")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("experiment", help="run a scripted desk-scale experiment")
    _common(p)
    p.add_argument("name", choices=["fig6", "table3_analog", "fig4_analog", "fig5_analog"])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--batches", type=int, default=1000)
    p.set_defaults(func=cmd_experiment)
    return parser


_OWN_CONFIG = ("pretrain", "ksweep", "experiment")


def _apply_config(parser, args, argv):
    """Fill options not given on the command line from ``--config``."""
    if not args.config or args.command in _OWN_CONFIG:
        return args
    with open(args.config, encoding="utf-8") as fh:
        values = json.load(fh)
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    for key, val in values.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ValueError(f"unknown config key {key!r} for {args.command}")
        if "--" + dest.replace("_", "-") not in given:
            setattr(args, dest, val)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, args, argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (ValueError, OSError, model.DivergenceError) as err:
        print(f"homocl {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
