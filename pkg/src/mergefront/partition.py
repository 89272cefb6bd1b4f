"""Layer-difference profiles and optimal contiguous block partitioning.

The partition minimizes, over all ways to cut the layer sequence into K
contiguous blocks, the sum of per-block costs

    cost(B) = w_var * sum_{l in B} (d_l - mean(B))^2
            + lambda * (sum_{l in B} d_l - total/K)^2

i.e. within-block scatter plus squared deviation of the block's mass from
the balanced target. The cost is additive over blocks, so a dynamic program
over (blocks used, prefix length) finds the global optimum in O(K * L^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .errors import (
    ArityError,
    BudgetError,
    ConfigError,
    InfeasibleError,
    ShapeError,
)
from .tensormap import LayerIndex, TensorMap

BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True)
class DiffProfile:
    """Per-layer difference magnitudes d_1..d_L."""

    d: np.ndarray
    norm_order: int

    def __post_init__(self):
        arr = np.asarray(self.d, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ConfigError("difference profile must be a non-empty 1-D sequence")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ConfigError("difference profile entries must be finite and non-negative")
        if self.norm_order not in (1, 2):
            raise ConfigError(f"norm_order must be 1 or 2, got {self.norm_order}")
        object.__setattr__(self, "d", arr)

    @property
    def num_layers(self) -> int:
        return self.d.size

    @property
    def total(self) -> float:
        return float(self.d.sum())

    def normalized(self) -> "DiffProfile":
        """Rescale so the profile mass equals the layer count (total == L).

        Makes the balance weight comparable across models; a zero profile is
        returned unchanged.
        """
        total = self.total
        if total == 0.0:
            return self
        return DiffProfile(self.d * (self.num_layers / total), self.norm_order)


@dataclass(frozen=True)
class PartitionConfig:
    K: int
    lam: float = 1.0
    variance_weight: float = 1.0
    tie_break: str = "smallest-split"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"block count must be >= 1, got {self.K}")
        if self.lam < 0 or self.variance_weight < 0:
            raise ConfigError("cost weights must be non-negative")
        if self.lam == 0 and self.variance_weight == 0:
            raise ConfigError("variance_weight and lambda cannot both be zero")
        if self.tie_break not in ("smallest-split", "most-balanced"):
            raise ConfigError(f"unknown tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous blocks [(start, end)] over layers 0..L-1, inclusive ends."""

    blocks: tuple[tuple[int, int], ...]
    cost: float
    has_embedding_block: bool = False
    has_head_block: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "blocks", tuple((int(s), int(e)) for s, e in self.blocks)
        )
        prev_end = -1
        for s, e in self.blocks:
            if s != prev_end + 1 or e < s:
                raise ConfigError(f"blocks {self.blocks} are not a contiguous cover")
            prev_end = e

    @property
    def num_layers(self) -> int:
        return self.blocks[-1][1] + 1

    @property
    def num_weight_columns(self) -> int:
        """Decision dimensions: one per block plus one per boundary block."""
        return len(self.blocks) + int(self.has_embedding_block) + int(self.has_head_block)

    def block_of_layer(self, layer: int) -> int:
        for j, (s, e) in enumerate(self.blocks):
            if s <= layer <= e:
                return j
        raise IndexError(f"layer {layer} not covered by {self.blocks}")


def compute_layer_diffs(
    models: list[TensorMap],
    base: TensorMap | None,
    index: LayerIndex,
    norm_order: int = 2,
) -> DiffProfile:
    """Per-layer spread of the models' task vectors around their mean.

    d_l sums, over models, the p-norm of (TV_i - TV_mean) taken over the
    concatenation of layer l's tensors. The task-vector differences cancel
    the base reference, so the result does not depend on ``base``; it is
    accepted only to validate shape compatibility.
    """
    if len(models) < 2:
        raise ArityError(f"need at least 2 models, got {len(models)}")
    if norm_order not in (1, 2):
        raise ConfigError(f"norm_order must be 1 or 2, got {norm_order}")
    reference = models[0]
    check_against = list(models[1:]) + ([base] if base is not None else [])
    for other in check_against:
        for e in reference.entries:
            if e.name not in other:
                raise ShapeError(f"tensor {e.name!r} missing from one of the inputs")
            if other.entry(e.name).shape != e.shape:
                raise ShapeError(
                    f"tensor {e.name!r}: shape {other.entry(e.name).shape} != {e.shape}"
                )

    d = np.zeros(index.num_layers)
    for layer_id, names in index.layer_groups:
        stacked = np.stack(
            [
                np.concatenate([m.tensor(n).ravel().astype(np.float64) for n in names])
                for m in models
            ]
        )
        deviations = stacked - stacked.mean(axis=0, keepdims=True)
        d[layer_id] = np.linalg.norm(deviations, ord=norm_order, axis=1).sum()
    return DiffProfile(d, norm_order)


class _SegmentCosts:
    """O(1) segment costs from prefix sums of d and d^2."""

    def __init__(self, profile: DiffProfile, cfg: PartitionConfig):
        d = profile.d
        self.L = d.size
        self.prefix = np.concatenate(([0.0], np.cumsum(d)))
        self.prefix_sq = np.concatenate(([0.0], np.cumsum(d * d)))
        self.target = self.prefix[-1] / cfg.K
        self.w_var = cfg.variance_weight
        self.lam = cfg.lam

    def cost(self, i: int, j: int) -> float:
        if not (0 <= i <= j < self.L):
            raise IndexError(f"segment [{i}, {j}] out of range for L={self.L}")
        n = j - i + 1
        seg_sum = self.prefix[j + 1] - self.prefix[i]
        seg_sq = self.prefix_sq[j + 1] - self.prefix_sq[i]
        scatter = seg_sq - seg_sum * seg_sum / n
        deviation = seg_sum - self.target
        return self.w_var * max(scatter, 0.0) + self.lam * deviation * deviation

    def matrix(self) -> np.ndarray:
        """Full (L, L) cost table; entry [i, j] valid for i <= j."""
        p, q = self.prefix, self.prefix_sq
        i = np.arange(self.L)[:, None]
        j = np.arange(self.L)[None, :]
        n = j - i + 1
        seg_sum = p[j + 1] - p[i]
        seg_sq = q[j + 1] - q[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            scatter = seg_sq - seg_sum * seg_sum / np.maximum(n, 1)
        deviation = seg_sum - self.target
        cost = self.w_var * np.maximum(scatter, 0.0) + self.lam * deviation**2
        return np.where(n >= 1, cost, np.inf)


def segment_cost(profile: DiffProfile, i: int, j: int, cfg: PartitionConfig) -> float:
    """Cost of a single block covering layers i..j inclusive."""
    return _SegmentCosts(profile, cfg).cost(i, j)


def _blocks_from_splits(splits: tuple[int, ...], L: int) -> tuple[tuple[int, int], ...]:
    bounds = (0,) + splits + (L,)
    return tuple((bounds[k], bounds[k + 1] - 1) for k in range(len(bounds) - 1))


def optimal_partition(profile: DiffProfile, cfg: PartitionConfig) -> BlockPartition:
    """Globally optimal K-block partition by dynamic programming.

    DP[k][j] is the minimum cost of splitting the first j layers into k
    blocks; each state scans all previous split points, so the table fills
    in O(K * L^2) with O(1) segment costs. Ties under the strict-improvement
    comparison keep the earliest split; the "most-balanced" tie-break
    instead prefers, among equal-cost splits, the final block whose length
    is closest to L/K.
    """
    L, K = profile.num_layers, cfg.K
    if K > L:
        raise InfeasibleError(f"cannot split {L} layers into {K} non-empty blocks")
    costs = _SegmentCosts(profile, cfg)
    cost = costs.matrix()

    dp = np.full((K + 1, L + 1), np.inf)
    split = np.zeros((K + 1, L + 1), dtype=int)
    dp[0, 0] = 0.0
    balanced_len = L / K
    for k in range(1, K + 1):
        # block k covers layers m..j-1 for some previous prefix length m
        for j in range(k, L - (K - k) + 1):
            cands = dp[k - 1, k - 1 : j] + cost[k - 1 : j, j - 1]
            if cfg.tie_break == "smallest-split":
                best = int(np.argmin(cands))  # first occurrence == earliest m
            else:
                ties = np.flatnonzero(cands == cands.min())
                lengths = j - (ties + k - 1)
                # argmin keeps the first (smallest m) among balance ties
                best = int(ties[np.argmin(np.abs(lengths - balanced_len))])
            dp[k, j] = cands[best]
            split[k, j] = best + k - 1

    blocks = []
    j = L
    for k in range(K, 0, -1):
        m = int(split[k, j])
        blocks.append((m, j - 1))
        j = m
    blocks.reverse()
    return BlockPartition(tuple(blocks), cost=float(dp[K, L]))


def brute_force_partition(profile: DiffProfile, cfg: PartitionConfig) -> BlockPartition:
    """Exhaustive enumeration of every contiguous K-partition (test oracle)."""
    L, K = profile.num_layers, cfg.K
    if K > L:
        raise InfeasibleError(f"cannot split {L} layers into {K} non-empty blocks")
    n_candidates = math.comb(L - 1, K - 1)
    if n_candidates > BRUTE_FORCE_LIMIT:
        raise BudgetError(
            f"{n_candidates} candidate partitions exceed the {BRUTE_FORCE_LIMIT} budget"
        )
    costs = _SegmentCosts(profile, cfg)
    best_cost, best_blocks = np.inf, None
    for splits in combinations(range(1, L), K - 1):
        blocks = _blocks_from_splits(splits, L)
        total = sum(costs.cost(s, e) for s, e in blocks)
        if total < best_cost:
            best_cost, best_blocks = total, blocks
    return BlockPartition(best_blocks, cost=float(best_cost))


def attach_boundary_blocks(partition: BlockPartition, index: LayerIndex) -> BlockPartition:
    """Flag an embedding block and a head block when the index names them."""
    return replace(
        partition,
        has_embedding_block=bool(index.embedding_names),
        has_head_block=bool(index.head_names),
    )


def partition_to_dict(profile: DiffProfile, cfg: PartitionConfig, partition: BlockPartition) -> dict:
    """JSON-ready summary matching the partition.json interface."""
    return {
        "d": [float(v) for v in profile.d],
        "norm_order": profile.norm_order,
        "K": cfg.K,
        "lambda": cfg.lam,
        "blocks": [[s, e] for s, e in partition.blocks],
        "cost": partition.cost,
        "embedding_block": partition.has_embedding_block,
        "head_block": partition.has_head_block,
    }
