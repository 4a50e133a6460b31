"""
`pyMDL` builds, trains and evaluates multi-domain image classifiers that share
a convolutional backbone at the granularity of single filters: every domain
owns a private copy of a chosen set of filters, its own batch normalization
and its own classifier head, and shares everything else.
"""

from pyMDL.mdl_archspec import (
    ArchitectureError,
    ArchitectureSpec,
    ConvLayerSpec,
    HeadSpec,
    LayerGlue,
    PlanMismatchError,
    count_conv_params,
    load_architecture,
    param_breakdown,
    per_filter_params,
    save_architecture,
    total_model_params,
)
from pyMDL.mdl_zoo import (
    BUILTIN_ARCHITECTURES,
    desk_cnn,
    mobilenet_v2,
    resnet50,
    resnet_tiny,
    resolve_architecture,
    toy_t,
)
from pyMDL.mdl_planner import (
    STRATEGIES,
    SharingPlan,
    build_plan,
    enumerate_filters,
    load_plan,
    plan_digest,
    plan_param_count,
    save_plan,
)
from pyMDL.mdl_net import (
    MultiDomainModel,
    UnknownDomainError,
    assemble,
    forward,
    live_filter_mask,
    merged_weights,
    trainable_params,
)
from pyMDL.mdl_checkpoint import load_checkpoint, save_checkpoint
from pyMDL.mdl_trainer import (
    DivergenceError,
    InitSpec,
    MetricsHistory,
    ShapeMismatchError,
    TrainConfig,
    initialize,
    train_joint,
)
from pyMDL.mdl_data import DomainDataset, DomainSource, build_datasets
from pyMDL.mdl_design import full_grid, fullfact
from pyMDL.mdl_eval import evaluate
from pyMDL.mdl_bench import (
    ConfigError,
    ExperimentConfig,
    ResultRow,
    ResultsTable,
    load_config,
    read_results,
    run_matrix,
    write_results,
)
from pyMDL.mdl_report import emit_report

__all__ = [
    "ArchitectureError",
    "ArchitectureSpec",
    "ConvLayerSpec",
    "HeadSpec",
    "LayerGlue",
    "PlanMismatchError",
    "count_conv_params",
    "load_architecture",
    "param_breakdown",
    "per_filter_params",
    "save_architecture",
    "total_model_params",
    "BUILTIN_ARCHITECTURES",
    "resolve_architecture",
    "toy_t",
    "desk_cnn",
    "resnet_tiny",
    "mobilenet_v2",
    "resnet50",
    "STRATEGIES",
    "SharingPlan",
    "build_plan",
    "enumerate_filters",
    "load_plan",
    "plan_digest",
    "plan_param_count",
    "save_plan",
    "MultiDomainModel",
    "UnknownDomainError",
    "assemble",
    "forward",
    "live_filter_mask",
    "merged_weights",
    "trainable_params",
    "load_checkpoint",
    "save_checkpoint",
    "DivergenceError",
    "InitSpec",
    "MetricsHistory",
    "ShapeMismatchError",
    "TrainConfig",
    "initialize",
    "train_joint",
    "DomainDataset",
    "DomainSource",
    "build_datasets",
    "full_grid",
    "fullfact",
    "evaluate",
    "ConfigError",
    "ExperimentConfig",
    "ResultRow",
    "ResultsTable",
    "load_config",
    "read_results",
    "run_matrix",
    "write_results",
    "emit_report",
]

try:
    from ._version import __version__  # noqa
except ImportError:  # not built by hatch-vcs
    __version__ = "0.0.0"
