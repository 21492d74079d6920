"""Command-line interface: synth, train, eval, ablate, inspect-weights."""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .augment import DebiasConfig, debias_weight_table, factor_weights
from .config import ABLATIONS, PRESETS, RunConfig, apply_ablation, preset_config
from .dataio import (
    SyntheticSpec,
    build_spaces,
    generate_synthetic,
    load_dataset,
    parse_manifest,
    read_feasibility,
    save_synthetic,
)
from .evaluation import (
    FeasibilityMask,
    closed_world_eval,
    open_world_eval,
    select_threshold,
)
from .space import Sample, count_frequencies
from .training import history_to_csv, load_checkpoint, save_checkpoint, train

_HYPER_FLAGS = [
    ("--dim", int, "feature dimension d"),
    ("--proj-layers", int, "projector MLP layers"),
    ("--proj-hidden", int, "projector hidden width"),
    ("--fusion-layers", int, "fusion MLP layers"),
    ("--fusion-hidden", int, "fusion hidden width"),
    ("--comp-weight", float, "composition-vs-primitive blend for scores and losses"),
    ("--dis-weight", float, "disentanglement loss weight"),
    ("--rec-weight", float, "reconstruction loss weight"),
    ("--pair-weight", float, "pairwise augmentation loss weight"),
    ("--cart-weight", float, "Cartesian augmentation loss weight"),
    ("--fusion-mix", float, "fusion network vs additive residual blend"),
    ("--score-blend", float, "classification vs pseudo-retrieval score blend"),
    ("--debias-strength", float, "inverse-frequency exponent (0 disables debiasing)"),
    ("--debias-blend", float, "composition-level vs primitive-level debias blend"),
    ("--temperature", float, "softmax temperature"),
    ("--lr", float, "Adam learning rate"),
    ("--epochs", int, "training epochs"),
    ("--batch-size", int, "batch size"),
    ("--seed", int, "seed for init and batching"),
]


def _presets_epilog() -> str:
    keys = ["comp_weight", "dis_weight", "rec_weight", "pair_weight", "cart_weight",
            "fusion_mix", "score_blend", "debias_strength", "debias_blend",
            "temperature", "epochs", "batch_size", "dim", "fusion_layers"]
    lines = ["preset defaults:"]
    header = "  {:<16}".format("key") + "".join(f"{p:>12}" for p in PRESETS)
    lines.append(header)
    for k in keys:
        row = "  {:<16}".format(k)
        for p in PRESETS:
            row += f"{PRESETS[p].get(k, RunConfig.__dataclass_fields__[k].default):>12}"
        lines.append(row)
    return "\n".join(lines)


def _positive_fraction(text: str) -> float:
    v = float(text)
    if not (0.0 < v <= 1.0):
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _add_train_flags(p: argparse.ArgumentParser, require_ablate: bool) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--checkpoint", default="defa-checkpoint.bin",
                   help="output checkpoint path")
    p.add_argument("--log", default=None,
                   help="per-epoch CSV log (default: <checkpoint>.log.csv)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="synthetic",
                   help="hyperparameter preset; explicit flags override it")
    p.add_argument("--ablate", choices=sorted(ABLATIONS), required=require_ablate,
                   default=None, help="zero out one model ingredient")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for evaluation (or env DEFA_THREADS)")
    p.add_argument("--verbose", action="store_true")
    for flag, typ, help_text in _HYPER_FLAGS:
        p.add_argument(flag, type=typ, default=None, help=help_text)


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for flag, _, _ in _HYPER_FLAGS:
        name = flag.lstrip("-").replace("-", "_")
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    overrides["manifest"] = args.manifest
    overrides["embeddings"] = args.embeddings
    overrides["threads"] = _threads(args)
    cfg = preset_config(args.preset, **overrides)
    if args.ablate:
        cfg = apply_ablation(cfg, args.ablate)
    return cfg


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("DEFA_THREADS", "1"))


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_attrs=args.na, n_objs=args.no, d_backbone=args.dbackbone,
        seen_fraction=args.seen_frac, samples_per_pair=args.samples_per_pair,
        tail_exponent=args.tail, noise=args.noise, interaction=args.interaction,
        eval_per_pair=args.eval_per_pair, seed=args.seed)
    result = generate_synthetic(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    emb = os.path.join(args.out_dir, "embeddings.defa")
    man = os.path.join(args.out_dir, "manifest.tsv")
    save_synthetic(result, emb, man)
    counts = sorted(result.train_pair_counts.values())
    n_train = sum(counts)
    print(f"embeddings: {emb}")
    print(f"manifest: {man}")
    print(f"attrs={spec.n_attrs} objs={spec.n_objs} seen_pairs={len(counts)} "
          f"unseen_val={len(result.manifest.unseen_val)} "
          f"unseen_test={len(result.manifest.unseen_test)}")
    print(f"train_samples={n_train} min_pair_count={counts[0]} "
          f"max_pair_count={counts[-1]}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(cfg.manifest, cfg.embeddings)
    result = train(dataset, cfg, verbose=args.verbose)
    save_checkpoint(args.checkpoint, result.model, cfg)
    log_path = args.log or args.checkpoint + ".log.csv"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(history_to_csv(result.history))
    print(f"checkpoint: {args.checkpoint}")
    print(f"log: {log_path}")
    print(f"best_epoch={result.best_epoch} best_val_auc={result.best_auc:.6f}")
    return 0


def cmd_eval(args) -> int:
    threads = _threads(args)
    dataset = load_dataset(args.manifest, args.embeddings)
    split_space = dataset.spaces[args.split]
    samples = dataset.samples[args.split]
    model, cfg = load_checkpoint(args.checkpoint, split_space)
    if args.score_blend is not None:
        cfg = replace(cfg, score_blend=args.score_blend)
    weights = cfg.loss_weights()

    reports = {}
    reports["closed"] = closed_world_eval(model, samples, split_space, weights,
                                          threads=threads)
    if args.world == "open":
        if args.open_all:
            mask = FeasibilityMask(np.zeros((split_space.n_attrs,
                                             split_space.n_objs)), -math.inf)
        elif args.feasibility:
            scores = read_feasibility(args.feasibility, split_space)
            if args.threshold == "auto":
                val_model, _ = load_checkpoint(args.checkpoint, dataset.spaces["val"])
                thr = select_threshold(val_model, dataset.samples["val"],
                                       dataset.spaces["val"], scores, weights,
                                       threads=threads)
            else:
                thr = float(args.threshold)
            mask = FeasibilityMask(scores, thr)
        else:
            print("error: open-world evaluation needs --feasibility FILE or --open-all",
                  file=sys.stderr)
            return 2
        reports["open"] = open_world_eval(model, samples, split_space, mask,
                                          weights, threads=threads)

    for world, report in reports.items():
        print(f"{world}-world {args.split} split ({len(report.curve)} bias points)")
        print(report.summary())
        if args.out_prefix:
            path = f"{args.out_prefix}.{world}.csv"
            with open(path, "w", encoding="utf-8") as f:
                f.write(report.to_csv())
            print(f"wrote {path}")
    return 0


def cmd_inspect_weights(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as f:
        md = parse_manifest(f.read())
    spaces = build_spaces(md)
    space = spaces["train"]
    train_samples = [Sample(i, np.zeros(1), a, o)
                     for i, a, o, sp in md.samples if sp == "train"]
    freq = count_frequencies(train_samples, space)
    cfg = DebiasConfig(args.debias_strength, args.debias_blend)

    def table(names, counts, weights, label):
        print(f"{label} weights (strength={cfg.strength}, blend={cfg.comp_blend})")
        order = np.argsort(counts, kind="stable")
        for i in order:
            print(f"  {names[i]:<24} count={int(counts[i]):<8} weight={weights[i]:.4f}")
        print(f"  mean weight = {float(np.mean(weights)):.4f}")

    table(space.attributes, freq.attr_counts,
          factor_weights(freq.attr_counts, cfg.strength), "attribute")
    table(space.objects, freq.obj_counts,
          factor_weights(freq.obj_counts, cfg.strength), "object")
    comp_names = [space.pair_name(p) for p in space.all_pairs()]
    table(comp_names, freq.comp_counts,
          factor_weights(freq.comp_counts, cfg.strength), "composition")
    blended = debias_weight_table(freq, cfg)
    table(comp_names, freq.comp_counts, blended, "blended composition")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defa",
        description="Debiased feature augmentation for compositional zero-shot "
                    "recognition on precomputed embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--na", type=int, default=8, help="number of attributes")
    p.add_argument("--no", type=int, default=10, help="number of objects")
    p.add_argument("--dbackbone", type=int, default=32, help="backbone feature dim")
    p.add_argument("--seen-frac", type=_positive_fraction, default=0.6)
    p.add_argument("--samples-per-pair", type=int, default=40)
    p.add_argument("--tail", type=float, default=None,
                   help="power-law exponent for long-tailed pair counts")
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--interaction", type=float, default=0.3)
    p.add_argument("--eval-per-pair", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest + embedding file",
                       epilog=_presets_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_train_flags(p, require_ablate=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train a model variant with one "
                                      "ingredient removed",
                       epilog=_presets_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_train_flags(p, require_ablate=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--world", choices=("closed", "open"), default="closed")
    p.add_argument("--feasibility", default=None,
                   help="attr<TAB>obj<TAB>score file for open-world filtering")
    p.add_argument("--open-all", action="store_true",
                   help="open world over the unfiltered Cartesian set")
    p.add_argument("--threshold", default="auto",
                   help="feasibility threshold, or 'auto' to pick on val")
    p.add_argument("--score-blend", type=float, default=None,
                   help="override the checkpoint's score blend")
    p.add_argument("--out-prefix", default=None, help="write CSV reports here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-weights", help="print debias weight tables")
    p.add_argument("--manifest", required=True)
    p.add_argument("--debias-strength", "--rho", type=float, default=0.5,
                   dest="debias_strength")
    p.add_argument("--debias-blend", "--mu", type=float, default=0.9,
                   dest="debias_blend")
    p.set_defaults(func=cmd_inspect_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
