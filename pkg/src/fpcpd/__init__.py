"""Block-parallel SGD CP decomposition with momentum and perturbation, plus baselines and an SHM pipeline."""

from .blocks import Block, BlockPlan, Entry, build_plan, run_block_parallel, verify_plan
from .ocsvm import OcsvmModel, ocsvm_decision, ocsvm_train
from .shm import (
    EventMatrix,
    PipelineConfig,
    PipelineReport,
    evaluate_pipeline,
    extract_features,
    f_score,
    load_events,
    localization_scores,
    project_event,
    save_events,
)
from .solvers import (
    SOLVERS,
    DivergenceError,
    FitResult,
    SolverConfig,
    TraceRecord,
    als_fit,
    corcondia,
    fpcpd_fit,
    mode_gradient,
    psgd_fit,
    run_solver,
    sals_fit,
    select_rank,
    sgd_fit,
)
from .synthetic import AnomalySpec, ShmSpec, SyntheticSpec, generate_shm_events, generate_synthetic
from .tensor import (
    DenseTensor3,
    FactorModel,
    fold,
    khatri_rao,
    load_tensor,
    loss,
    reconstruct,
    rmse,
    save_tensor,
    unfold,
)

__all__ = [
    "Block",
    "BlockPlan",
    "Entry",
    "build_plan",
    "run_block_parallel",
    "verify_plan",
    "OcsvmModel",
    "ocsvm_decision",
    "ocsvm_train",
    "EventMatrix",
    "PipelineConfig",
    "PipelineReport",
    "evaluate_pipeline",
    "extract_features",
    "f_score",
    "load_events",
    "localization_scores",
    "project_event",
    "save_events",
    "SOLVERS",
    "DivergenceError",
    "FitResult",
    "SolverConfig",
    "TraceRecord",
    "als_fit",
    "corcondia",
    "fpcpd_fit",
    "mode_gradient",
    "psgd_fit",
    "run_solver",
    "sals_fit",
    "select_rank",
    "sgd_fit",
    "AnomalySpec",
    "ShmSpec",
    "SyntheticSpec",
    "generate_shm_events",
    "generate_synthetic",
    "DenseTensor3",
    "FactorModel",
    "fold",
    "khatri_rao",
    "load_tensor",
    "loss",
    "reconstruct",
    "rmse",
    "save_tensor",
    "unfold",
]

__version__ = "0.1.0"
