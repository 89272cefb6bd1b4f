"""Pareto-set construction for merged models.

Partition layers into blocks by dynamic programming, merge tensor maps
block-wise under searchable weights, and drive a multi-objective Bayesian
optimization loop over the block weights with pluggable evaluators.
"""

from .driver import (
    RunConfig,
    RunState,
    das_dennis,
    resume,
    run,
    select_solutions,
    warm_start,
)
from .merge import (
    BlockWeights,
    MergeRecipe,
    block_wise_merge,
    decision_vector_to_weights,
    merge_model_level,
)
from .mobo import (
    BaseSamples,
    ParetoFront,
    ReferencePoint,
    draw_base_samples,
    hypervolume,
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
    normalize_objective,
    synthetic_conflicting_evaluator,
    synthetic_objective_specs,
)
from .partition import (
    BlockPartition,
    DiffProfile,
    PartitionConfig,
    attach_boundary_blocks,
    brute_force_partition,
    compute_layer_diffs,
    optimal_partition,
    segment_cost,
)
from .surrogate import GPHyperparams, GPModel, fit_gp, gp_posterior, matern52_ard
from .tensormap import (
    LayerIndex,
    TensorEntry,
    TensorMap,
    infer_layer_index,
    load_tensor_map,
    save_tensor_map,
)

__version__ = "0.1.0"
