"""Command-line surface: partition, merge, optimize, resume, select, report.

Exit codes: 0 success, 1 user error (bad arguments, malformed inputs,
failing evaluators), 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback

import numpy as np

from . import driver
from .errors import ConfigError, EvaluationError, InputError, MergeFrontError
from .merge import (
    BlockWeights,
    MergeRecipe,
    block_wise_merge,
    decision_vector_to_weights,
    merge_model_level,
)
from .mobo import ParetoFront, pareto_filter
from .partition import (
    BlockPartition,
    PartitionConfig,
    attach_boundary_blocks,
    compute_layer_diffs,
    optimal_partition,
    partition_to_dict,
)
from .tensormap import infer_layer_index, load_tensor_map, save_tensor_map


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mergefront")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="compute layer diffs and the optimal block split")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--base")
    p.add_argument("--layer-pattern", default="layers.{n}.")
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--variance-weight", type=float, default=1.0)
    p.add_argument("--norm", choices=["l1", "l2"], default="l2")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip rescaling the diff profile to total == L")
    p.add_argument("--tie-break", choices=["smallest-split", "most-balanced"],
                   default="smallest-split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge", help="merge models per a recipe file")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the recipe seed")

    p = sub.add_parser("optimize", help="run the full optimization loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("--state", required=True)

    p = sub.add_parser("select", help="pick solutions from a front by preference")
    p.add_argument("--front", required=True)
    p.add_argument("--divisions", type=int, default=10)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", help="write selection JSON here instead of stdout")

    p = sub.add_parser("report", help="emit plot-feeding CSVs from a run state")
    p.add_argument("--state", required=True)
    p.add_argument("--out-dir", required=True)
    return parser


def _cmd_partition(args) -> int:
    model_a = load_tensor_map(args.model_a)
    model_b = load_tensor_map(args.model_b)
    base = load_tensor_map(args.base) if args.base else None
    index = infer_layer_index(model_a, args.layer_pattern)
    norm_order = 1 if args.norm == "l1" else 2
    profile = compute_layer_diffs([model_a, model_b], base, index, norm_order)
    if not args.no_normalize:
        profile = profile.normalized()
    cfg = PartitionConfig(
        K=args.blocks, lam=args.lam, variance_weight=args.variance_weight,
        tie_break=args.tie_break,
    )
    partition = attach_boundary_blocks(optimal_partition(profile, cfg), index)
    with open(args.out, "w") as fh:
        json.dump(partition_to_dict(profile, cfg, partition), fh, indent=1)
    return 0


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _recipe_partition(recipe: dict, models, base, index):
    spec = recipe.get("partition")
    if spec is None:
        raise ConfigError("block-wise recipe needs a 'partition' section")
    if "blocks" in spec:
        part = BlockPartition(
            blocks=tuple((int(s), int(e)) for s, e in spec["blocks"]),
            cost=float(spec.get("cost", 0.0)),
        )
        return attach_boundary_blocks(part, index)
    cfg = PartitionConfig(
        K=int(spec["K"]),
        lam=float(spec.get("lambda", 1.0)),
        variance_weight=float(spec.get("variance_weight", 1.0)),
        tie_break=spec.get("tie_break", "smallest-split"),
    )
    profile = compute_layer_diffs(models, base, index, int(spec.get("norm_order", 2)))
    if spec.get("normalize", True):
        profile = profile.normalized()
    return attach_boundary_blocks(optimal_partition(profile, cfg), index)


def _cmd_merge(args) -> int:
    with open(args.recipe) as fh:
        recipe = json.load(fh)
    strategy = recipe.get("strategy")
    if not strategy:
        raise ConfigError("recipe is missing 'strategy'")
    model_paths = recipe.get("models", [])
    if not model_paths:
        raise ConfigError("recipe lists no models")
    models = [load_tensor_map(p) for p in model_paths]
    base = load_tensor_map(recipe["base"]) if recipe.get("base") else None
    seed = args.seed if args.seed is not None else int(recipe.get("seed", 0))

    if strategy == "block-wise":
        index = infer_layer_index(models[0], recipe.get("layer_pattern", "layers.{n}."))
        partition = _recipe_partition(recipe, models, base, index)
        if "x" in recipe:
            weights = decision_vector_to_weights(
                np.asarray(recipe["x"], dtype=float), partition.num_weight_columns
            )
        elif "weights" in recipe:
            weights = BlockWeights(
                np.asarray(recipe["weights"], dtype=float),
                mode=recipe.get("mode", "interpolation"),
            )
        else:
            raise ConfigError("block-wise recipe needs 'x' or 'weights'")
        merged = block_wise_merge(models, base, partition, index, weights)
        weight_values = weights.values
    else:
        if base is None:
            raise ConfigError(f"{strategy} merging requires a 'base' model")
        params = recipe.get("params", {})
        merge_recipe = MergeRecipe(
            strategy=strategy,
            alpha=float(recipe.get("alpha", 1.0)),
            seed=seed,
            **{k: float(v) for k, v in params.items()},
        )
        merged = merge_model_level(models, base, merge_recipe)
        weight_values = None

    save_tensor_map(merged, args.out)
    manifest = {
        "recipe": recipe,
        "seed": seed,
        "weights": None if weight_values is None else weight_values.tolist(),
        "inputs": {p: _file_digest(p) for p in model_paths
                   + ([recipe["base"]] if recipe.get("base") else [])},
        "output": {str(args.out): _file_digest(args.out)},
    }
    with open(str(args.out) + ".merge_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return 0


def _cmd_optimize(args) -> int:
    with open(args.config) as fh:
        config_dict = json.load(fh)
    config_dict["out_dir"] = args.out_dir
    if args.seed is not None:
        config_dict["seed"] = args.seed
    config = driver.RunConfig.from_dict(config_dict)
    driver.run(config)
    return 0


def _cmd_resume(args) -> int:
    driver.resume(args.state)
    return 0


def _cmd_select(args) -> int:
    with open(args.front) as fh:
        front_doc = json.load(fh)
    archive = front_doc.get("archive", [])
    if not archive:
        raise ConfigError("front file holds no archive entries")
    Y = np.array([row["objectives"] for row in archive])
    front = pareto_filter(Y)
    prefs = driver.das_dennis(Y.shape[1], args.divisions)
    selection = driver.select_solutions(front, prefs, args.top_k)
    doc = {"divisions": args.divisions, "top_k": args.top_k, **selection.to_dict()}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
    else:
        json.dump(doc, sys.stdout, indent=1)
        sys.stdout.write("\n")
    return 0


def _cmd_report(args) -> int:
    state = driver.RunState.load(args.state)
    driver.write_report(args.out_dir, state)
    return 0


_HANDLERS = {
    "partition": _cmd_partition,
    "merge": _cmd_merge,
    "optimize": _cmd_optimize,
    "resume": _cmd_resume,
    "select": _cmd_select,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except (InputError, EvaluationError, TimeoutError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, EvaluationError) and exc.stderr:
            print(exc.stderr, file=sys.stderr)
        return 1
    except MergeFrontError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


def entry_point():  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
