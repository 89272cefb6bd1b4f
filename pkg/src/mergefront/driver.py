"""End-to-end optimization loop with persisted, resumable run state.

A run partitions the layers once, warm-starts the archive with heuristic
plus Sobol points, then alternates fitting one GP per objective and
evaluating the batch proposed by the acquisition optimizer. State is
written atomically after every evaluation batch; resuming replays the
remaining iterations with the same per-iteration seed chain, reproducing
the uninterrupted trajectory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, EmptyFrontError, ResumeError
from .mobo import (
    AcquisitionBudget,
    ParetoFront,
    draw_base_samples,
    hypervolume,
    nadir_reference,
    optimize_acquisition,
    pareto_filter,
    qehvi,
    sobol,
)
from .objectives import (
    EvaluationContext,
    ObjectiveSpec,
    evaluate,
    external_command_evaluator,
    synthetic_conflicting_evaluator,
    synthetic_objective_specs,
)
from .partition import (
    BlockPartition,
    PartitionConfig,
    attach_boundary_blocks,
    compute_layer_diffs,
    optimal_partition,
    partition_to_dict,
)
from .surrogate import fit_gp
from .tensormap import infer_layer_index, load_tensor_map

SCHEMA_VERSION = 1

STATE_FILENAME = "state.json"


@dataclass
class RunConfig:
    model_a: str
    model_b: str
    specs: list[ObjectiveSpec]
    evaluator: dict
    base: str | None = None
    layer_pattern: str = "layers.{n}."
    blocks: int = 6
    lam: float = 1.0
    variance_weight: float = 1.0
    norm_order: int = 2
    normalize_diffs: bool = True
    tie_break: str = "smallest-split"
    n_initial: int = 8
    iterations: int = 20
    batch_size: int = 4
    seed: int = 0
    out_dir: str = "."
    mc_samples: int = 128
    final_mc_samples: int = 8192
    gp_restarts: int = 8
    gp_max_iter: int = 200
    acquisition: dict = field(default_factory=dict)
    selection_divisions: int = 10
    selection_top_k: int = 3

    def __post_init__(self):
        if self.n_initial < 3:
            raise ConfigError("n_initial must be >= 3 (the three heuristic points)")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.specs = [
            s if isinstance(s, ObjectiveSpec) else ObjectiveSpec.from_dict(s)
            for s in self.specs
        ]
        AcquisitionBudget(**self.acquisition)  # validate keys early

    def to_dict(self) -> dict:
        d = {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "base": self.base,
            "layer_pattern": self.layer_pattern,
            "blocks": self.blocks,
            "lambda": self.lam,
            "variance_weight": self.variance_weight,
            "norm_order": self.norm_order,
            "normalize_diffs": self.normalize_diffs,
            "tie_break": self.tie_break,
            "specs": [s.to_dict() for s in self.specs],
            "evaluator": self.evaluator,
            "n_initial": self.n_initial,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "mc_samples": self.mc_samples,
            "final_mc_samples": self.final_mc_samples,
            "gp_restarts": self.gp_restarts,
            "gp_max_iter": self.gp_max_iter,
            "acquisition": self.acquisition,
            "selection_divisions": self.selection_divisions,
            "selection_top_k": self.selection_top_k,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        specs = [ObjectiveSpec.from_dict(s) for s in d.get("specs", [])]
        evaluator = d.get("evaluator", {})
        if not specs and evaluator.get("type") == "synthetic":
            specs = synthetic_objective_specs(evaluator["anchor_a"], evaluator["anchor_b"])
        return cls(
            model_a=d["model_a"],
            model_b=d["model_b"],
            specs=specs,
            evaluator=evaluator,
            base=d.get("base"),
            layer_pattern=d.get("layer_pattern", "layers.{n}."),
            blocks=d.get("blocks", 6),
            lam=d.get("lambda", d.get("lam", 1.0)),
            variance_weight=d.get("variance_weight", 1.0),
            norm_order=d.get("norm_order", 2),
            normalize_diffs=d.get("normalize_diffs", True),
            tie_break=d.get("tie_break", "smallest-split"),
            n_initial=d.get("n_initial", 8),
            iterations=d.get("iterations", 20),
            batch_size=d.get("batch_size", 4),
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "."),
            mc_samples=d.get("mc_samples", 128),
            final_mc_samples=d.get("final_mc_samples", 8192),
            gp_restarts=d.get("gp_restarts", 8),
            gp_max_iter=d.get("gp_max_iter", 200),
            acquisition=d.get("acquisition", {}),
            selection_divisions=d.get("selection_divisions", 10),
            selection_top_k=d.get("selection_top_k", 3),
        )

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)  # relocating outputs does not invalidate a run
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _derive_seed(root: int, *parts: int) -> int:
    seq = np.random.SeedSequence([int(root), *[int(p) for p in parts]])
    return int(seq.generate_state(1)[0])


def warm_start(n_initial: int, dim: int, seed: int) -> np.ndarray:
    """Heuristic rows (all-0, all-1, all-0.5) padded with Sobol points."""
    if n_initial < 3:
        raise ConfigError("warm start needs room for the three heuristic points")
    heuristics = [np.zeros(dim), np.ones(dim), np.full(dim, 0.5)]
    rows = [h for h in heuristics[:n_initial]]
    if n_initial > 3:
        needed = n_initial - 3
        draw = sobol(2 * needed + 8, dim, seed=seed)
        seen = {tuple(r) for r in rows}
        for point in draw:
            key = tuple(point)
            if key in seen:
                continue
            rows.append(point)
            seen.add(key)
            if len(rows) == n_initial:
                break
        if len(rows) < n_initial:
            raise ConfigError("could not draw enough distinct warm-start points")
    return np.stack(rows)


def das_dennis(n_objectives: int, divisions: int) -> list[np.ndarray]:
    """All simplex lattice vectors with components in {0, 1/H, ..., 1}."""
    if n_objectives < 1:
        raise ConfigError("need at least one objective")
    if divisions < 1:
        raise ConfigError("divisions must be >= 1")
    out = []

    def compose(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + [remaining])
            return
        for v in range(remaining + 1):
            compose(prefix + [v], remaining - v, slots - 1)

    compose([], divisions, n_objectives)
    return [np.array(parts, dtype=float) / divisions for parts in out]


@dataclass
class SelectionResult:
    preference_picks: list[tuple[np.ndarray, int]]
    per_objective_best: list[int]

    def to_dict(self) -> dict:
        return {
            "preference_picks": [
                {"preference": [float(v) for v in pref], "index": int(idx)}
                for pref, idx in self.preference_picks
            ],
            "per_objective_best": [int(i) for i in self.per_objective_best],
        }


def select_solutions(front: ParetoFront, prefs, top_k: int) -> SelectionResult:
    """Pick, per preference, the best-overall member among the most aligned.

    Front vectors are min-max rescaled per objective before cosine
    similarity, so the choice is invariant to positive affine rescaling of
    any objective. Also reports the best member per individual objective.
    """
    if front.size == 0:
        raise EmptyFrontError("cannot select from an empty front")
    if top_k < 1:
        raise DomainError(f"top_k must be >= 1, got {top_k}")
    pts = front.points
    lows = pts.min(axis=0)
    spans = pts.max(axis=0) - lows
    safe_spans = np.where(spans > 0, spans, 1.0)
    rescaled = np.where(spans > 0, (pts - lows) / safe_spans, 0.0)
    norms = np.linalg.norm(rescaled, axis=1)
    overall = rescaled.sum(axis=1)

    picks = []
    for pref in prefs:
        w = np.asarray(pref, dtype=float).ravel()
        if w.size != pts.shape[1]:
            raise DomainError(f"preference has {w.size} entries for {pts.shape[1]} objectives")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("preference vectors must be non-negative and sum to 1")
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(
                norms > 0, rescaled @ w / (norms * np.linalg.norm(w)), -np.inf
            )
        ranked = sorted(
            range(front.size), key=lambda i: (-sims[i], int(front.indices[i]))
        )
        shortlist = ranked[:top_k]
        best = min(shortlist, key=lambda i: (-overall[i], int(front.indices[i])))
        picks.append((w, int(front.indices[best])))

    per_objective = []
    for k in range(pts.shape[1]):
        best = min(range(front.size), key=lambda i: (-pts[i, k], int(front.indices[i])))
        per_objective.append(int(front.indices[best]))
    return SelectionResult(picks, per_objective)


@dataclass
class Observation:
    x: list[float]
    objectives: list[float]
    raw_scores: dict
    iteration: int
    elapsed_s: float

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "objectives": self.objectives,
            "raw_scores": self.raw_scores,
            "iteration": self.iteration,
            "elapsed_s": self.elapsed_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            x=[float(v) for v in d["x"]],
            objectives=[float(v) for v in d["objectives"]],
            raw_scores=dict(d["raw_scores"]),
            iteration=int(d["iteration"]),
            elapsed_s=float(d["elapsed_s"]),
        )


@dataclass
class RunState:
    config: dict
    config_digest: str
    partition: dict
    observations: list[Observation] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    completed_iterations: int = 0
    seed_chain: list[dict] = field(default_factory=list)
    final: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def X(self) -> np.ndarray:
        return np.array([o.x for o in self.observations])

    def Y(self) -> np.ndarray:
        return np.array([o.objectives for o in self.observations])

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "config_digest": self.config_digest,
            "partition": self.partition,
            "completed_iterations": self.completed_iterations,
            "observations": [o.to_dict() for o in self.observations],
            "iterations": self.iterations,
            "seed_chain": self.seed_chain,
            "final": self.final,
            "saved_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunState":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ResumeError(f"unsupported state schema {d.get('schema_version')}")
        return cls(
            config=d["config"],
            config_digest=d["config_digest"],
            partition=d["partition"],
            observations=[Observation.from_dict(o) for o in d["observations"]],
            iterations=list(d["iterations"]),
            completed_iterations=int(d["completed_iterations"]),
            seed_chain=list(d["seed_chain"]),
            final=d.get("final"),
        )

    def save(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(self.to_dict(), fh, indent=1)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "RunState":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _build_context(config: RunConfig):
    """Load models, partition the layers, and wire up the evaluator."""
    model_a = load_tensor_map(config.model_a)
    model_b = load_tensor_map(config.model_b)
    base = load_tensor_map(config.base) if config.base else None
    index = infer_layer_index(model_a, config.layer_pattern)

    part_cfg = PartitionConfig(
        K=config.blocks,
        lam=config.lam,
        variance_weight=config.variance_weight,
        tie_break=config.tie_break,
    )
    profile = compute_layer_diffs([model_a, model_b], base, index, config.norm_order)
    used = profile.normalized() if config.normalize_diffs else profile
    partition = attach_boundary_blocks(optimal_partition(used, part_cfg), index)

    evaluator = _build_evaluator(config.evaluator, partition.num_weight_columns)
    ctx = EvaluationContext(
        models=[model_a, model_b],
        base=base,
        partition=partition,
        index=index,
        specs=config.specs,
        evaluator=evaluator,
    )
    return ctx, used, part_cfg, partition


def _build_evaluator(spec: dict, n_blocks: int):
    kind = spec.get("type")
    if kind == "synthetic":
        a = np.asarray(spec["anchor_a"], dtype=float)
        b = np.asarray(spec["anchor_b"], dtype=float)
        if a.size != n_blocks or b.size != n_blocks:
            raise ConfigError(
                f"synthetic anchors have {a.size} entries, partition yields {n_blocks} blocks"
            )
        benchmarks = tuple(spec.get("benchmarks", ("quad-a", "quad-b")))
        return synthetic_conflicting_evaluator(a, b, benchmarks)
    if kind == "external":
        timeout = float(os.environ.get("MERGEFRONT_EVAL_TIMEOUT", spec.get("timeout", 3600.0)))
        return external_command_evaluator(spec["command"], timeout)
    raise ConfigError(f"unknown evaluator type {kind!r}")


def _evaluate_batch(ctx, X, iteration, state: RunState) -> None:
    for row in X:
        start = time.perf_counter()
        values, raw = evaluate(row, ctx)
        state.observations.append(
            Observation(
                x=[float(v) for v in row],
                objectives=[float(v) for v in values],
                raw_scores=raw,
                iteration=iteration,
                elapsed_s=time.perf_counter() - start,
            )
        )


def _partition_from_state(d: dict) -> BlockPartition:
    return BlockPartition(
        blocks=tuple((int(s), int(e)) for s, e in d["blocks"]),
        cost=float(d["cost"]),
        has_embedding_block=bool(d["embedding_block"]),
        has_head_block=bool(d["head_block"]),
    )


def run(config: RunConfig) -> RunState:
    """Execute the full loop (partition, warm start, T iterations, outputs)."""
    ctx, profile, part_cfg, partition = _build_context(config)
    state = RunState(
        config=config.to_dict(),
        config_digest=config.digest(),
        partition=partition_to_dict(profile, part_cfg, partition),
    )
    state_path = os.path.join(config.out_dir, STATE_FILENAME)
    os.makedirs(config.out_dir, exist_ok=True)

    x0 = warm_start(config.n_initial, ctx.n_blocks, _derive_seed(config.seed, 1))
    _evaluate_batch(ctx, x0, 0, state)
    state.save(state_path)
    return _continue(config, ctx, state, state_path)


def resume(state_path) -> RunState:
    """Continue an interrupted run from its state file."""
    state = RunState.load(state_path)
    config = RunConfig.from_dict(state.config)
    if config.digest() != state.config_digest:
        raise ResumeError("state file digest does not match its embedded configuration")
    ctx, _, _, partition = _build_context(config)
    if partition_dict_blocks(state.partition) != list(partition.blocks):
        raise ResumeError("recomputed partition disagrees with the stored run state")
    ctx.seed_cache(
        [o.x for o in state.observations], [o.raw_scores for o in state.observations]
    )
    return _continue(config, ctx, state, state_path)


def partition_dict_blocks(d: dict) -> list[tuple[int, int]]:
    return [(int(s), int(e)) for s, e in d["blocks"]]


def _continue(config: RunConfig, ctx, state: RunState, state_path) -> RunState:
    n_obj = ctx.n_objectives
    q = config.batch_size
    budget = AcquisitionBudget(**config.acquisition)

    for t in range(state.completed_iterations + 1, config.iterations + 1):
        X, Y = state.X(), state.Y()
        gp_seeds = [_derive_seed(config.seed, 2, t, k) for k in range(n_obj)]
        gps = [
            fit_gp(X, Y[:, k], n_restarts=config.gp_restarts,
                   max_iter=config.gp_max_iter, seed=gp_seeds[k])
            for k in range(n_obj)
        ]
        acq_ref = nadir_reference(Y)
        front = pareto_filter(Y)
        base_seed = _derive_seed(config.seed, 4, t)
        base = draw_base_samples(config.mc_samples, q, n_obj, base_seed)
        acq_seed = _derive_seed(config.seed, 3, t)
        x_new = optimize_acquisition(
            gps, front, acq_ref, q, budget=budget, seed=acq_seed, base=base
        )
        score = qehvi(gps, front, acq_ref, x_new, base)
        rescore_seed = _derive_seed(config.seed, 5, t)
        base_final = draw_base_samples(config.final_mc_samples, q, n_obj, rescore_seed)
        score_final = qehvi(gps, front, acq_ref, x_new, base_final)

        _evaluate_batch(ctx, x_new, t, state)

        Y_after = state.Y()
        post_ref = nadir_reference(Y_after)
        front_after = pareto_filter(Y_after)
        state.iterations.append(
            {
                "iteration": t,
                "gp_hyperparams": [g.hyper.to_dict() for g in gps],
                "gp_mll": [float(g.mll) for g in gps],
                "acq_reference": [float(v) for v in acq_ref],
                "reference": [float(v) for v in post_ref],
                "hv_dynamic": float(hypervolume(front_after, post_ref)),
                "pareto_indices": [int(i) for i in front_after.indices],
                "acquisition_score": float(score),
                "acquisition_score_final": float(score_final),
            }
        )
        state.seed_chain.append(
            {
                "iteration": t,
                "gp_seeds": gp_seeds,
                "acquisition_seed": acq_seed,
                "base_seed": base_seed,
                "rescore_seed": rescore_seed,
            }
        )
        state.completed_iterations = t
        state.save(state_path)

    _finalize(config, state)
    state.save(state_path)
    write_outputs(config.out_dir, state)
    return state


def _finalize(config: RunConfig, state: RunState) -> None:
    """Fixed-reference hypervolume trace plus front and selection summaries."""
    Y = state.Y()
    final_ref = nadir_reference(Y)
    trace = []
    n0, q = config.n_initial, config.batch_size
    for t in range(config.iterations + 1):
        prefix = Y[: n0 + t * q]
        front_t = pareto_filter(prefix)
        trace.append(
            {
                "iteration": t,
                "hypervolume": float(hypervolume(front_t, final_ref)),
                "front_size": int(front_t.size),
            }
        )
    front = pareto_filter(Y)
    prefs = das_dennis(len(config.specs), config.selection_divisions)
    selection = select_solutions(front, prefs, config.selection_top_k)
    state.final = {
        "reference": [float(v) for v in final_ref],
        "pareto_indices": [int(i) for i in front.indices],
        "hv_trace": trace,
        "selection": {
            "divisions": config.selection_divisions,
            "top_k": config.selection_top_k,
            **selection.to_dict(),
        },
    }


def write_outputs(out_dir, state: RunState) -> None:
    """Emit partition.json, front.json, selection.json, and hv_trace.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "partition.json"), "w") as fh:
        json.dump(state.partition, fh, indent=1)

    archive = [
        {
            "index": i,
            "iteration": o.iteration,
            "x": o.x,
            "objectives": o.objectives,
            "raw_scores": o.raw_scores,
        }
        for i, o in enumerate(state.observations)
    ]
    pareto_indices = state.final["pareto_indices"] if state.final else []
    with open(os.path.join(out_dir, "front.json"), "w") as fh:
        json.dump({"archive": archive, "pareto_indices": pareto_indices}, fh, indent=1)

    if state.final:
        with open(os.path.join(out_dir, "selection.json"), "w") as fh:
            json.dump(state.final["selection"], fh, indent=1)
        with open(os.path.join(out_dir, "hv_trace.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "hypervolume", "front_size"])
            for row in state.final["hv_trace"]:
                writer.writerow([row["iteration"], row["hypervolume"], row["front_size"]])


def write_report(out_dir, state: RunState) -> None:
    """Plot-feeding CSVs: hv trace, layer diffs with boundaries, front scatter."""
    os.makedirs(out_dir, exist_ok=True)
    if state.final:
        with open(os.path.join(out_dir, "hv_trace.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "hypervolume", "front_size"])
            for row in state.final["hv_trace"]:
                writer.writerow([row["iteration"], row["hypervolume"], row["front_size"]])

    blocks = partition_dict_blocks(state.partition)
    starts = {s for s, _ in blocks}
    with open(os.path.join(out_dir, "layer_diffs.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "difference", "block_start"])
        for layer, value in enumerate(state.partition["d"]):
            writer.writerow([layer, value, int(layer in starts)])

    pareto = set(state.final["pareto_indices"]) if state.final else set()
    benchmarks = sorted(
        {b for o in state.observations for b in o.raw_scores}
    )
    n_obj = len(state.observations[0].objectives) if state.observations else 0
    with open(os.path.join(out_dir, "front_scatter.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["index", "iteration", "is_pareto"]
            + [f"f{k + 1}" for k in range(n_obj)]
            + benchmarks
        )
        writer.writerow(header)
        for i, o in enumerate(state.observations):
            writer.writerow(
                [i, o.iteration, int(i in pareto)]
                + o.objectives
                + [o.raw_scores.get(b, "") for b in benchmarks]
            )
