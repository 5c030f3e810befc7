"""Command-line interface.

Subcommands: train-defense, build-pool, train-optimizer, evaluate, sweep,
report. Config files are JSON; omitted keys fall back to the named defaults
in ``bench.CONFIG_DEFAULTS``. Exit codes: 0 success, 1 config error,
2 runtime error.
"""

import argparse
import json
import os
import sys

from . import bench
from .bench import CONFIG_DEFAULTS, CampaignConfig, ConfigError, EvalReport
from .core import derive_seed
from .defense_zoo import (DefenseRecipe, build_pool, default_recipes,
                          load_dataset, load_pool, pool_diversity_issues,
                          train_defense, DEFAULT_REFERENCE_BUDGET)
from .learned_opt import OptimizerParams, save_optimizer
from .training import BMAConfig, MAMAConfig, train_bma, train_mama, write_training_log


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the CLI contract wants 1 for any
    # configuration problem, so route through ConfigError instead.
    def error(self, message):
        raise ConfigError(message)


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def _cfg(d: dict, key: str):
    return d.get(key, CONFIG_DEFAULTS.get(key))


def cmd_train_defense(args) -> int:
    payload = _read_json(args.recipe)
    recipe = DefenseRecipe.from_dict(payload)
    dataset = load_dataset(recipe.dataset)
    ckpt = train_defense(recipe, dataset)
    base = os.path.join(args.out, recipe.name)
    path = ckpt.save(base)
    print(f"trained {recipe.name}: clean {ckpt.clean_accuracy:.2f}%, "
          f"reference robust {ckpt.robust_accuracy:.2f}%")
    print(f"checkpoint: {path}")
    return 0


def cmd_build_pool(args) -> int:
    if args.pool_config == "default":
        recipes, dataset_name = default_recipes(), "digits"
    else:
        payload = _read_json(args.pool_config)
        recipes = [DefenseRecipe.from_dict(r) for r in payload["recipes"]]
        dataset_name = payload.get("dataset", "digits")
    dataset = load_dataset(dataset_name)
    manifest = os.path.join(args.out, "pool.json")
    classifiers = build_pool(recipes, dataset, args.out, manifest_path=manifest)
    for issue in pool_diversity_issues(classifiers):
        print(f"warning: {issue}", file=sys.stderr)
    print(f"pool of {len(classifiers)} defenses; manifest: {manifest}")
    return 0


def cmd_train_optimizer(args) -> int:
    cfg = _read_json(args.config)
    mode = args.mode or cfg.get("mode")
    if mode not in ("bma", "mama"):
        raise ConfigError("mode must be 'bma' or 'mama'")
    pool = load_pool(cfg["pool_manifest"])
    dataset = load_dataset(cfg.get("dataset", "digits"))
    images, labels = dataset.train.images, dataset.train.labels
    if cfg.get("samples"):
        keep = torch_randperm_head(images.shape[0], int(cfg["samples"]),
                                   derive_seed(int(cfg.get("seed", 0)), "train-subset"))
        images, labels = images[keep], labels[keep]
    budget = bench.parse_budget(dict(cfg.get("budget", {})))
    kind = bench.parse_loss(cfg.get("loss", CONFIG_DEFAULTS["loss"]))
    seed = int(cfg.get("seed", 0))
    iters = budget.iterations
    common = dict(
        step_weights=(float(_cfg(cfg, "step_weight")),) * iters,
        prior_weights=(float(_cfg(cfg, "prior_weight")),) * iters,
        batch_size=int(_cfg(cfg, "batch_size")),
        trainer_learning_rate=float(_cfg(cfg, "trainer_learning_rate")),
        max_iterations=int(_cfg(cfg, "max_iterations")),
        eval_every=int(cfg.get("eval_every", 0)),
        eval_samples=int(cfg.get("eval_samples", 200)),
    )

    if mode == "bma":
        by_name = {f.name: f for f in pool}
        name = cfg.get("defense")
        if name not in by_name:
            raise ConfigError(f"defense {name!r} not found in pool "
                              f"{sorted(by_name)}")
        params0 = OptimizerParams.initialize(derive_seed(seed, "init"))
        params, records = train_bma(params0, by_name[name], (images, labels),
                                    budget, BMAConfig(**common), kind, seed=seed)
    else:
        issues = pool_diversity_issues(pool)
        for issue in issues:
            print(f"warning: {issue}", file=sys.stderr)
        mcfg = MAMAConfig(defense_pool=pool,
                          meta_test_count=int(_cfg(cfg, "meta_test_count")),
                          beta=float(_cfg(cfg, "beta")),
                          gamma=float(_cfg(cfg, "gamma")),
                          mu=float(_cfg(cfg, "mu")), **common)
        params, records = train_mama(mcfg, (images, labels), budget, kind, seed=seed)

    out = cfg.get("output", os.path.join("runs", f"optimizer-{mode}"))
    import hashlib
    cfg_hash = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
    path = save_optimizer(params, out, training_config_hash=cfg_hash,
                          extra_meta={"mode": mode})
    if cfg.get("log"):
        write_training_log(records, cfg["log"])
    last = records[-1] if records else None
    if last is not None:
        print(f"final objective {last.meta_train_objective:.4f} "
              f"after {last.iteration} iterations")
    print(f"optimizer checkpoint: {path}")
    return 0


def torch_randperm_head(n: int, k: int, seed: int):
    import torch
    return torch.randperm(n, generator=torch.Generator().manual_seed(seed))[:k]


def cmd_evaluate(args) -> int:
    cfg = CampaignConfig.from_json_file(args.campaign)
    rep = bench.run_campaign(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = rep.save(os.path.join(cfg.output_dir, "eval.jsonl"))
    table = bench._format_table(rep)
    print(table)
    print(f"report: {path}")
    failed = [c for c in rep.cells if c.error]
    for c in failed:
        print(f"warning: cell ({c.defense}, {c.attack}) failed: {c.error}",
              file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    payload = _read_json(args.config)
    campaign = CampaignConfig.from_dict(payload["campaign"])
    values = payload.get("values")
    if not values:
        raise ConfigError("sweep config needs a 'values' list")
    records = bench.sweep(args.axis, values, campaign,
                          training=payload.get("training"),
                          out_dir=campaign.output_dir)
    print(f"wrote {len(records)} curve records to "
          f"{os.path.join(campaign.output_dir, f'sweep-{args.axis}.jsonl')}")
    return 0


def cmd_report(args) -> int:
    rep = EvalReport.load(args.eval_file)
    paths = bench.report(rep, args.format, args.out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advopt",
                     description="adversarial attacks with learned optimizers: "
                                 "defense zoo, trainers and evaluation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-defense", help="train one defense from a recipe JSON")
    p.add_argument("recipe")
    p.add_argument("--out", default="zoo")
    p.set_defaults(func=cmd_train_defense)

    p = sub.add_parser("build-pool", help="train/load a defense pool and write its manifest")
    p.add_argument("pool_config", help="pool config JSON, or 'default'")
    p.add_argument("--out", default="zoo")
    p.set_defaults(func=cmd_build_pool)

    p = sub.add_parser("train-optimizer", help="train the recurrent attack optimizer")
    p.add_argument("config")
    p.add_argument("--mode", choices=["bma", "mama"], default=None)
    p.set_defaults(func=cmd_train_optimizer)

    p = sub.add_parser("evaluate", help="run an attack campaign")
    p.add_argument("campaign")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="rerun training/evaluation along one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True,
                   choices=["lambda", "iterations", "train-size", "restarts"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="emit report artifacts from an eval file")
    p.add_argument("eval_file")
    p.add_argument("--format", required=True,
                   choices=["table-text", "structured", "plot"])
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
