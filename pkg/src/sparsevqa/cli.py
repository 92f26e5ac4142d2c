"""Command-line interface.

Subcommands: gen-data, pretrain, train, prune, search, eval, report.
The report path writes the CSV/JSON exports, a plain-text table, and
matplotlib figures next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthSpec, generate, load_dataset, oracle_accuracies, save_dataset
from .model import build_model
from .pipeline import (ExperimentSpec, make_objective, pretrain_surrogate,
                       recipe_name, run_recipe, stage2_compress, load_run_records)
from .pruning import audit_sparsity
from .report import evaluate, export, render_text_table
from .sparsity import (SparsityConfig, coarse_grid, grid_to_csv,
                       refine_grid, module_sizes_from_registry)


def _add_synth_args(p):
    p.add_argument("--answers", type=int, default=16)
    p.add_argument("--prototypes", type=int, default=24)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=0.8)
    p.add_argument("--train-size", type=int, default=16000)
    p.add_argument("--test-size", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)


def _synth_from_args(args) -> SynthSpec:
    return SynthSpec(answers=args.answers, prototypes=args.prototypes,
                     beta=args.beta, gamma=args.gamma,
                     train_size=args.train_size, test_size=args.test_size,
                     seed=args.seed)


def cmd_gen_data(args):
    spec = _synth_from_args(args)
    train, test = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(train, os.path.join(args.out, "train.jsonl"))
    save_dataset(test, os.path.join(args.out, "test.jsonl"))
    oracle = oracle_accuracies(spec)
    with open(os.path.join(args.out, "oracle.json"), "w") as fh:
        json.dump(oracle.__dict__, fh, indent=1)
    print(f"wrote {len(train)} train / {len(test)} test examples to {args.out}")
    print(f"question-only test accuracy {oracle.question_only_test:.3f}, "
          f"vision ceiling {oracle.vision_ceiling_test:.3f}")
    return 0


def cmd_pretrain(args):
    spec = ExperimentSpec.from_file(args.config)
    unbiased, _ = generate(spec.synth.unbiased(
        spec.optim.batch_size * min(spec.optim.pretrain_steps, 100)))
    reg = build_model(spec.model, args.seed)
    reg, losses = pretrain_surrogate(reg, unbiased, spec.optim.pretrain_steps,
                                     spec.optim, seed=args.seed)
    save_checkpoint(args.out, reg, meta={"stage": "pretrain", "seed": args.seed})
    print(f"pretrained {spec.optim.pretrain_steps} steps; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; wrote {args.out}")
    return 0


def cmd_train(args):
    spec = ExperimentSpec.from_file(args.config)
    if args.output_dir:
        spec.output_dir = args.output_dir
    result = run_recipe(spec)
    print(f"recipe: {result.subnetwork.recipe}")
    for record in (result.full, result.subnetwork):
        for split, aggs in record.aggregates().items():
            print(f"  {record.recipe} [{split}] "
                  f"overall {aggs['overall']['mean']:.4f} "
                  f"+- {aggs['overall']['std']:.4f}")
    if "record" in result.paths:
        print(f"wrote {result.paths['record']}")
    return 0


def cmd_prune(args):
    registry, _, _ = load_checkpoint(args.ckpt)
    config = SparsityConfig(
        overall=args.sparsity,
        scheme=args.scheme,
        s_language=args.s_language, s_visual=args.s_visual,
        s_cross=args.s_cross,
        sizes=module_sizes_from_registry(registry),
    )
    spec = ExperimentSpec.from_file(args.config) if args.config else ExperimentSpec(
        synth=SynthSpec(), sparsity=config)
    train = load_dataset(args.data) if args.data else generate(spec.synth)[0]
    objective = make_objective(args.loss, train, registry.config, spec.optim)
    maskset, audit, registry = stage2_compress(registry, args.method, objective,
                                               config, args.mask_init, train,
                                               spec.optim, seed=args.seed)
    save_checkpoint(args.out, registry, maskset=maskset,
                    meta={"stage": "prune", "method": args.method})
    audit_path = args.out + ".audit.json"
    with open(audit_path, "w") as fh:
        json.dump(audit.to_dict(), fh, indent=1)
    print(f"overall sparsity {audit.overall['sparsity']:.4f} "
          f"(target {audit.overall['target']}); wrote {args.out}")
    return 0


def cmd_search(args):
    spec = ExperimentSpec.from_file(args.config)
    sizes = spec.sparsity.sizes
    if sizes is None:
        sizes = module_sizes_from_registry(build_model(spec.model, 0))
    if args.stage == "coarse":
        configs = coarse_grid(args.sparsity, sizes)
    else:
        region = {}
        for mod in ("language", "visual", "cross"):
            bounds = getattr(args, f"{mod}_range")
            if bounds:
                lo, hi = (float(x) for x in bounds.split(":"))
                region[mod] = (lo, hi)
        configs = refine_grid(region, args.sparsity, sizes, step=args.step)
    if args.limit:
        configs = configs[: args.limit]
    os.makedirs(args.out, exist_ok=True)
    grid_to_csv(configs, os.path.join(args.out, "grid.csv"))
    print(f"{len(configs)} feasible configurations")
    if not args.execute:
        return 0

    rows = []
    for i, config in enumerate(configs):
        raw = json.loads(spec.to_json())
        raw["sparsity"] = config.to_dict()
        raw["output_dir"] = os.path.join(args.out, f"cfg{i:03d}")
        sub = ExperimentSpec.from_json(json.dumps(raw))
        if args.seeds:
            sub.seeds = [int(s) for s in args.seeds.split(",")]
        result = run_recipe(sub)
        agg = result.subnetwork.aggregates()["test"]["overall"]
        rows.append((config, agg["mean"], agg["std"]))
        print(f"cfg{i:03d} L={config.s_language:.2f} R={config.s_visual:.2f} "
              f"X={config.s_cross:.2f} -> {agg['mean']:.4f} +- {agg['std']:.4f}")
    rows.sort(key=lambda r: -r[1])
    with open(os.path.join(args.out, "search_results.csv"), "w") as fh:
        fh.write("s_L,s_R,s_X,mean,std\n")
        for config, mean, std in rows:
            fh.write(f"{config.s_language!r},{config.s_visual!r},"
                     f"{config.s_cross!r},{mean!r},{std!r}\n")
    best = rows[0]
    print(f"best: L={best[0].s_language:.2f} R={best[0].s_visual:.2f} "
          f"X={best[0].s_cross:.2f} at {best[1]:.4f}")
    return 0


def cmd_eval(args):
    registry, maskset, meta = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    masks = None if args.ignore_masks else maskset
    record = evaluate(registry, dataset, masks=masks)
    if masks is not None:
        audit = audit_sparsity(maskset, registry)
        record.sparsity_overall = audit.overall["sparsity"]
    print(json.dumps(record.to_dict(), indent=1))
    return 0


def cmd_report(args):
    records = load_run_records(args.runs)
    if not records:
        print(f"no run records under {args.runs}", file=sys.stderr)
        return 1
    csv_path, json_path = export(records, args.out)
    print(render_text_table(records))
    print(f"\nwrote {csv_path}")
    print(f"wrote {json_path}")
    if not args.no_figures:
        from .figures import render_figures
        for path in render_figures(records, args.out):
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsevqa",
        description="Search sparse and debiased subnetworks of a miniature "
                    "cross-modal transformer on a synthetic changing-priors "
                    "benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _add_synth_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the pre-training surrogate")
    p.add_argument("--config", required=True, help="experiment spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run a full pipeline recipe")
    p.add_argument("--config", required=True, help="experiment spec JSON")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="compress a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("omp", "mask-train"), default="omp")
    p.add_argument("--loss", choices=("bce", "lmh"), default="bce")
    p.add_argument("--mask-init", choices=("magnitude", "random"),
                   default="magnitude")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--scheme", choices=("uniform", "modality-specific",
                                        "matrix-specific"), default="uniform")
    p.add_argument("--s-language", type=float, default=None)
    p.add_argument("--s-visual", type=float, default=None)
    p.add_argument("--s-cross", type=float, default=None)
    p.add_argument("--data", default=None, help="training split (jsonl)")
    p.add_argument("--config", default=None, dest="config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("search", help="sweep modality-specific sparsity")
    p.add_argument("--config", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--stage", choices=("coarse", "refine"), default="coarse")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--language-range", default=None, help="lo:hi")
    p.add_argument("--visual-range", default=None, help="lo:hi")
    p.add_argument("--cross-range", default=None, help="lo:hi")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seeds", default=None, help="comma-separated override")
    p.add_argument("--execute", action="store_true",
                   help="run the pipeline for each configuration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ignore-masks", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="export tables, curves and figures")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
