"""Decision vectors to normalized objective vectors via pluggable evaluators.

An evaluator is any callable ``(merged: TensorMap, x: ndarray) -> dict``
returning raw benchmark scores. Each objective is normalized against its
expert and base anchor scores: a merged model scoring like the expert on
every benchmark gets the benchmark count, one scoring like the base gets 0.
All objectives are maximized internally.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateError,
    DegenerateSpecError,
    DomainError,
    EvaluationError,
    FormatError,
    InvalidScoreError,
    MissingScoreError,
)
from .merge import block_wise_merge, decision_vector_to_weights
from .partition import BlockPartition
from .tensormap import LayerIndex, TensorMap, save_tensor_map

RawScores = dict[str, float]

CACHE_DECIMALS = 9


@dataclass(frozen=True)
class ObjectiveSpec:
    """One capability: its benchmarks and the expert/base anchor scores."""

    name: str
    benchmarks: tuple[str, ...]
    expert_scores: dict[str, float]
    base_scores: dict[str, float]
    direction: str = "maximize-score"

    def __post_init__(self):
        object.__setattr__(self, "benchmarks", tuple(self.benchmarks))
        if not self.benchmarks:
            raise ConfigError(f"objective {self.name!r} has no benchmarks")
        if self.direction not in ("maximize-score", "minimize-score"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        for b in self.benchmarks:
            if b not in self.expert_scores or b not in self.base_scores:
                raise ConfigError(f"objective {self.name!r} missing anchors for {b!r}")
            if self.expert_scores[b] == self.base_scores[b]:
                raise DegenerateSpecError(
                    f"objective {self.name!r}: expert and base scores coincide on {b!r}"
                )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "direction": self.direction,
            "benchmarks": list(self.benchmarks),
            "expert_scores": {b: self.expert_scores[b] for b in self.benchmarks},
            "base_scores": {b: self.base_scores[b] for b in self.benchmarks},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(
            name=d["name"],
            benchmarks=tuple(d["benchmarks"]),
            expert_scores=dict(d["expert_scores"]),
            base_scores=dict(d["base_scores"]),
            direction=d.get("direction", "maximize-score"),
        )


def normalize_objective(spec: ObjectiveSpec, raw: RawScores) -> float:
    """Sum over benchmarks of (merge - base) / (expert - base).

    The same formula serves score-minimizing capabilities: there the expert
    anchor is the lower score, so the ratio already rewards lower values.
    """
    total = 0.0
    for b in spec.benchmarks:
        if b not in raw:
            raise MissingScoreError(f"no score for benchmark {b!r}")
        expert, base_score = spec.expert_scores[b], spec.base_scores[b]
        if expert == base_score:
            raise DegenerateSpecError(f"expert == base score on {b!r}")
        total += (raw[b] - base_score) / (expert - base_score)
    return total


@dataclass
class EvaluationContext:
    """Everything needed to score a decision vector."""

    models: list[TensorMap]
    base: TensorMap | None
    partition: BlockPartition
    index: LayerIndex
    specs: list[ObjectiveSpec]
    evaluator: callable
    cache: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return self.partition.num_weight_columns

    @property
    def n_objectives(self) -> int:
        return len(self.specs)

    def seed_cache(self, xs, raw_scores) -> None:
        """Preload the cache, e.g. from a resumed run's observations."""
        for x, raw in zip(xs, raw_scores):
            key = tuple(np.round(np.asarray(x, dtype=float), CACHE_DECIMALS))
            values = np.array([normalize_objective(s, raw) for s in self.specs])
            self.cache[key] = (values, dict(raw))


def evaluate(x, ctx: EvaluationContext) -> tuple[np.ndarray, RawScores]:
    """Merge at ``x``, run the evaluator, and normalize each objective.

    Results are cached keyed by the rounded decision vector so near-duplicate
    proposals do not re-run an expensive evaluator.
    """
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size != ctx.n_blocks:
        raise DomainError(f"decision vector has {arr.size} entries, expected {ctx.n_blocks}")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise DomainError("decision vector entries must lie in [0, 1]")

    key = tuple(np.round(arr, CACHE_DECIMALS))
    if key in ctx.cache:
        values, raw = ctx.cache[key]
        return values.copy(), dict(raw)

    weights = decision_vector_to_weights(arr, ctx.n_blocks)
    merged = block_wise_merge(ctx.models, ctx.base, ctx.partition, ctx.index, weights)
    try:
        raw = ctx.evaluator(merged, arr)
    except (EvaluationError, TimeoutError, FormatError):
        raise
    except Exception as exc:  # pragma: no cover - evaluator-defined failures
        raise EvaluationError(f"evaluator raised {type(exc).__name__}: {exc}") from exc

    raw = {str(k): float(v) for k, v in raw.items()}
    if any(not np.isfinite(v) for v in raw.values()):
        bad = {k: v for k, v in raw.items() if not np.isfinite(v)}
        raise InvalidScoreError(f"evaluator produced non-finite scores: {bad}")
    values = np.array([normalize_objective(spec, raw) for spec in ctx.specs])
    ctx.cache[key] = (values.copy(), dict(raw))
    return values, raw


def synthetic_conflicting_evaluator(
    anchor_a, anchor_b, benchmarks: tuple[str, str] = ("quad-a", "quad-b")
):
    """Two conflicting quadratic scores with a closed-form Pareto set.

    Scores are s_1(x) = 1 - |x - a|^2 / D and s_2(x) = 1 - |x - b|^2 / D;
    the exact Pareto set is the segment {(1-t) a + t b : t in [0, 1]}, which
    gives tests a ground-truth front.
    """
    a = np.asarray(anchor_a, dtype=float).ravel()
    b = np.asarray(anchor_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise DomainError("anchor vectors must share a dimension")
    if np.array_equal(a, b):
        raise DegenerateError("anchor vectors must differ")
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise DomainError("anchor vectors must lie in [0, 1]^D")
    d = a.size

    def evaluator(merged: TensorMap, x) -> RawScores:
        xv = np.asarray(x, dtype=float).ravel()
        if xv.size != d:
            raise DomainError(f"decision vector has {xv.size} entries, expected {d}")
        return {
            benchmarks[0]: 1.0 - float(np.sum((xv - a) ** 2)) / d,
            benchmarks[1]: 1.0 - float(np.sum((xv - b) ** 2)) / d,
        }

    return evaluator


def synthetic_objective_specs(
    anchor_a, anchor_b, benchmarks: tuple[str, str] = ("quad-a", "quad-b")
) -> list[ObjectiveSpec]:
    """Anchor each synthetic score on its own optimum vs the opposing one."""
    a = np.asarray(anchor_a, dtype=float).ravel()
    b = np.asarray(anchor_b, dtype=float).ravel()
    d = a.size
    s1_at_b = 1.0 - float(np.sum((b - a) ** 2)) / d
    s2_at_a = 1.0 - float(np.sum((a - b) ** 2)) / d
    return [
        ObjectiveSpec(
            name="toward-a",
            benchmarks=(benchmarks[0],),
            expert_scores={benchmarks[0]: 1.0},
            base_scores={benchmarks[0]: s1_at_b},
        ),
        ObjectiveSpec(
            name="toward-b",
            benchmarks=(benchmarks[1],),
            expert_scores={benchmarks[1]: 1.0},
            base_scores={benchmarks[1]: s2_at_a},
        ),
    ]


def external_command_evaluator(cmd_template: str, timeout: float = 3600.0):
    """Evaluator that shells out to a scoring command.

    The template must contain ``{model}`` and ``{output}`` placeholders; the
    merged model is written to a temporary container file, the command runs,
    and its output JSON ``{"scores": {benchmark: number}}`` is parsed.
    Temporary files are removed on success and kept for diagnosis on failure.
    """
    if "{model}" not in cmd_template or "{output}" not in cmd_template:
        raise ConfigError("command template needs {model} and {output} placeholders")

    def evaluator(merged: TensorMap, x) -> RawScores:
        workdir = Path(tempfile.mkdtemp(prefix="mergefront-eval-"))
        model_path = workdir / "merged.btc"
        output_path = workdir / "scores.json"
        save_tensor_map(merged, model_path)
        argv = [
            tok.replace("{model}", str(model_path)).replace("{output}", str(output_path))
            for tok in shlex.split(cmd_template)
        ]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise TimeoutError(f"evaluator exceeded {timeout} s: {argv}") from exc
        if proc.returncode != 0:
            raise EvaluationError(
                f"evaluator exited {proc.returncode}: {argv}",
                stdout=proc.stdout,
                stderr=proc.stderr,
            )
        try:
            payload = json.loads(output_path.read_text())
        except FileNotFoundError as exc:
            raise FormatError(f"evaluator wrote no output file {output_path}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"evaluator output is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("scores"), dict):
            raise FormatError('evaluator output must be {"scores": {benchmark: number}}')
        scores = {}
        for k, v in payload["scores"].items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise FormatError(f"score for {k!r} is not a number: {v!r}")
            scores[str(k)] = float(v)
        for p in (model_path, output_path):
            p.unlink(missing_ok=True)
        workdir.rmdir()
        return scores

    return evaluator


def timed_evaluate(x, ctx: EvaluationContext) -> tuple[np.ndarray, RawScores, float]:
    """evaluate() plus wall-clock seconds, for run-state bookkeeping."""
    start = time.perf_counter()
    values, raw = evaluate(x, ctx)
    return values, raw, time.perf_counter() - start
