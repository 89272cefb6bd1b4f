"""Model merging: block-wise interpolation plus model-level baselines.

Block-wise merging assigns one fusion weight per contiguous layer block
(and per boundary block); the model-level strategies (task arithmetic,
top-k sign-elected merging, random drop-and-rescale, percentile masking,
magnitude-ranked pruning) operate on whole task vectors per tensor.
Accumulation happens in float64 and results are cast back to float32, so
the w=1/w=0 and alpha=0 identities are bit-exact.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArityError,
    ConfigError,
    ConstraintError,
    DegenerateError,
    DomainError,
    ShapeError,
)
from .partition import BlockPartition
from .tensormap import LayerIndex, TensorEntry, TensorMap

SIMPLEX_TOL = 1e-6

MODEL_LEVEL_STRATEGIES = ("TA", "TIES", "DARE-TA", "DARE-TIES", "Breadcrumbs", "DELLA")


@dataclass(frozen=True)
class BlockWeights:
    """Per-model, per-block fusion weights.

    ``interpolation`` rows mix the models directly (each column on the
    simplex); ``task-arithmetic`` rows scale task vectors added to a base.
    """

    values: np.ndarray  # (n_models, n_blocks)
    mode: str = "interpolation"
    w_max: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 2:
            raise ArityError("weights must be a (models x blocks) matrix")
        object.__setattr__(self, "values", arr)
        if self.mode not in ("interpolation", "task-arithmetic"):
            raise ConfigError(f"unknown weight mode {self.mode!r}")
        if self.mode == "interpolation":
            if np.any(arr < -SIMPLEX_TOL) or np.any(arr > 1 + SIMPLEX_TOL):
                raise ConstraintError("interpolation weights must lie in [0, 1]")
            col_sums = arr.sum(axis=0)
            if np.any(np.abs(col_sums - 1.0) > SIMPLEX_TOL):
                raise ConstraintError(
                    f"interpolation weights must sum to 1 per block, got {col_sums}"
                )
        else:
            if np.any(arr < 0) or np.any(arr > self.w_max):
                raise ConstraintError(
                    f"task-arithmetic weights must lie in [0, {self.w_max}]"
                )

    @property
    def n_models(self) -> int:
        return self.values.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MergeRecipe:
    """Strategy and parameters for a model-level merge."""

    strategy: str
    alpha: float = 1.0
    top_k_fraction: float = 0.2
    drop_p: float = 0.5
    mask_low_pct: float = 0.01
    mask_high_pct: float = 0.99
    della_lambda: float = 1.0
    della_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("top_k_fraction", "drop_p", "mask_low_pct", "mask_high_pct", "della_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.mask_low_pct >= self.mask_high_pct:
            raise ConfigError("mask_low_pct must be below mask_high_pct")


def decision_vector_to_weights(x, n_blocks: int) -> BlockWeights:
    """Two-model interpolation weights from a decision vector in [0,1]^D.

    Row 0 (model A) gets x, row 1 (model B) gets 1-x, so every block column
    sums to one by construction.
    """
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size != n_blocks:
        raise ArityError(f"decision vector has {arr.size} entries, expected {n_blocks}")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise DomainError("decision vector entries must lie in [0, 1]")
    return BlockWeights(np.stack([arr, 1.0 - arr]), mode="interpolation")


def _tensor_block_columns(
    partition: BlockPartition, index: LayerIndex
) -> dict[str, int]:
    """Map every tensor name to its weight column.

    Column order: embedding block (when present), attention blocks in layer
    order, head block last.
    """
    if partition.num_layers != index.num_layers:
        raise ShapeError(
            f"partition covers {partition.num_layers} layers, index has {index.num_layers}"
        )
    if partition.has_embedding_block != bool(index.embedding_names):
        raise ConfigError("partition embedding flag disagrees with the layer index")
    if partition.has_head_block != bool(index.head_names):
        raise ConfigError("partition head flag disagrees with the layer index")
    offset = int(partition.has_embedding_block)
    columns: dict[str, int] = {}
    for name in index.embedding_names:
        columns[name] = 0
    for layer_id, names in index.layer_groups:
        col = offset + partition.block_of_layer(layer_id)
        for name in names:
            columns[name] = col
    head_col = offset + len(partition.blocks)
    for name in index.head_names:
        columns[name] = head_col
    return columns


def _check_same_layout(models: list[TensorMap], base: TensorMap | None = None) -> None:
    reference = models[0]
    others = list(models[1:]) + ([base] if base is not None else [])
    for other in others:
        for e in reference.entries:
            if e.name not in other:
                raise ShapeError(f"tensor {e.name!r} missing from one of the inputs")
            if other.entry(e.name).shape != e.shape:
                raise ShapeError(
                    f"tensor {e.name!r}: shape {other.entry(e.name).shape} != {e.shape}"
                )


def block_wise_merge(
    models: list[TensorMap],
    base: TensorMap | None,
    partition: BlockPartition,
    index: LayerIndex,
    weights: BlockWeights,
) -> TensorMap:
    """Merge per block: each tensor is combined with its block's weights.

    Interpolation mode returns sum_i w_ij * M_i per tensor; task-arithmetic
    mode returns base + sum_i w_ij * (M_i - base). Output tensor names,
    shapes, and order follow model 0.
    """
    if weights.n_models != len(models):
        raise ArityError(
            f"weight matrix has {weights.n_models} rows for {len(models)} models"
        )
    expected_cols = partition.num_weight_columns
    if weights.n_blocks != expected_cols:
        raise ArityError(
            f"weight matrix has {weights.n_blocks} columns, partition needs {expected_cols}"
        )
    if weights.mode == "task-arithmetic" and base is None:
        raise ConfigError("task-arithmetic block merge requires a base model")
    _check_same_layout(models, base)

    columns = _tensor_block_columns(partition, index)
    out_entries = []
    for e in models[0].entries:
        if e.name not in columns:
            raise ShapeError(f"tensor {e.name!r} is not covered by the layer index")
        col = columns[e.name]
        if weights.mode == "interpolation":
            acc = np.zeros(e.shape, dtype=np.float64)
            for i, model in enumerate(models):
                acc += weights.values[i, col] * model.tensor(e.name).astype(np.float64)
        else:
            base_t = base.tensor(e.name).astype(np.float64)
            acc = base_t.copy()
            for i, model in enumerate(models):
                tv = model.tensor(e.name).astype(np.float64) - base_t
                acc += weights.values[i, col] * tv
        out_entries.append(TensorEntry(e.name, e.shape, acc.astype(np.float32)))
    return TensorMap(out_entries, models[0].metadata)


def _tensor_rng(seed: int, model_index: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, model, tensor name).

    Philox keys are derived from the triple, so per-tensor draws are
    reproducible regardless of evaluation order.
    """
    key = np.random.SeedSequence([seed, model_index, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))


def _top_k_sparsify(tv: np.ndarray, fraction: float) -> np.ndarray:
    """Zero all but the ceil(fraction * n) largest-magnitude entries."""
    n = tv.size
    keep = int(np.ceil(fraction * n))
    if keep >= n:
        return tv
    out = np.zeros_like(tv)
    if keep == 0:
        return out
    flat = tv.ravel()
    idx = np.argpartition(np.abs(flat), n - keep)[n - keep :]
    out.ravel()[idx] = flat[idx]
    return out


def _elect_and_fuse(deltas: list[np.ndarray]) -> np.ndarray:
    """Sign election followed by matching-entry averaging.

    The elected sign per entry is the sign of the summed deltas (ties to +);
    surviving entries whose sign matches are averaged over their count.
    """
    stacked = np.stack(deltas)
    total = stacked.sum(axis=0)
    elected = np.where(total >= 0, 1.0, -1.0)
    matches = (np.sign(stacked) == elected) & (stacked != 0)
    contributions = np.where(matches, stacked, 0.0)
    counts = matches.sum(axis=0)
    return contributions.sum(axis=0) / np.maximum(counts, 1)


def _dare_mask(tv: np.ndarray, drop_p: float, rng: np.random.Generator) -> np.ndarray:
    """Randomly drop entries with probability drop_p, rescale survivors."""
    if drop_p == 0.0:
        return tv
    kept = rng.random(tv.shape) >= drop_p
    return np.where(kept, tv / (1.0 - drop_p), 0.0)


def _breadcrumb_mask(tv: np.ndarray, low_pct: float, high_pct: float) -> np.ndarray:
    """Keep entries whose |tv| falls between the two magnitude percentiles."""
    mag = np.abs(tv)
    lo = np.quantile(mag, low_pct)
    hi = np.quantile(mag, high_pct)
    return np.where((mag >= lo) & (mag <= hi), tv, 0.0)


def _magnitude_ranked_drop(
    tv: np.ndarray, mean_p: float, rng: np.random.Generator
) -> np.ndarray:
    """Drop with probability decreasing in magnitude rank, mean mean_p.

    Probabilities ramp linearly over the magnitude ranking (smallest
    magnitudes get the highest drop rate), centered at mean_p and clipped to
    [0.01, 0.99]; survivors are rescaled by 1/(1-p) entrywise.
    """
    n = tv.size
    flat = tv.ravel()
    order = np.argsort(np.abs(flat), kind="stable")
    probs = np.empty(n)
    if n == 1:
        probs[:] = mean_p
    else:
        half_range = max(min(mean_p - 0.01, 0.99 - mean_p), 0.0)
        ramp = half_range * (1.0 - 2.0 * np.arange(n) / (n - 1))  # +half .. -half
        probs[order] = np.clip(mean_p + ramp, 0.01, 0.99)
    kept = rng.random(n) >= probs
    out = np.where(kept, flat / (1.0 - probs), 0.0)
    return out.reshape(tv.shape)


def merge_model_level(
    models: list[TensorMap], base: TensorMap, recipe: MergeRecipe
) -> TensorMap:
    """Apply one of the model-level merge strategies per tensor."""
    if not models:
        raise ArityError("need at least one model to merge")
    if recipe.strategy not in MODEL_LEVEL_STRATEGIES:
        raise ConfigError(f"unknown merge strategy {recipe.strategy!r}")
    if recipe.strategy.startswith("DARE") and recipe.drop_p >= 1.0:
        raise DegenerateError("drop_p = 1 drops every parameter")
    _check_same_layout(models, base)

    out_entries = []
    for e in base.entries:
        base_t = e.data.astype(np.float64)
        tvs = [m.tensor(e.name).astype(np.float64) - base_t for m in models]

        if recipe.strategy.startswith("DARE"):
            tvs = [
                _dare_mask(tv, recipe.drop_p, _tensor_rng(recipe.seed, i, e.name))
                for i, tv in enumerate(tvs)
            ]

        if recipe.strategy in ("TA", "DARE-TA"):
            delta = np.sum(tvs, axis=0)
            scale = recipe.alpha
        elif recipe.strategy in ("TIES", "DARE-TIES"):
            sparse = [_top_k_sparsify(tv, recipe.top_k_fraction) for tv in tvs]
            delta = _elect_and_fuse(sparse)
            scale = recipe.alpha
        elif recipe.strategy == "Breadcrumbs":
            masked = [
                _breadcrumb_mask(tv, recipe.mask_low_pct, recipe.mask_high_pct)
                for tv in tvs
            ]
            delta = np.sum(masked, axis=0)
            scale = recipe.alpha
        else:  # DELLA
            pruned = [
                _magnitude_ranked_drop(tv, recipe.della_p, _tensor_rng(recipe.seed, i, e.name))
                for i, tv in enumerate(tvs)
            ]
            delta = _elect_and_fuse(pruned)
            scale = recipe.della_lambda

        merged = (base_t + scale * delta).astype(np.float32)
        out_entries.append(TensorEntry(e.name, e.shape, merged))
    return TensorMap(out_entries, base.metadata)
