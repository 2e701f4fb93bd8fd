"""metaforge: a composable meta-learning toolkit with a self-contained
higher-order autodiff core, episodic task engine, interchangeable bi-level
optimization strategies, and compatibility-checked pipeline composition."""

from .autograd import Tensor, apply, backward, constant, finite_diff, tape, tensor_of
from .learners import LossSpec, backbone_build, forward, loss
from .metalearners import (
    adapt,
    anil_adapt,
    clone,
    maml_wrap,
    matchingnet_classify,
    meta_step_maml,
    metasgd_wrap,
    protonet_classify,
    reptile_step,
)
from .registry import (
    PipelineConfig,
    check_compat,
    emit_command,
    parse_config,
    registry_list,
    serialize_config,
)
from .runner import RunReport, device_check, run
from .strategies import (
    OuterOptimizer,
    SearchSpace,
    StrategySpec,
    es_gradient,
    first_order_gradient,
    implicit_gradient,
    param_search,
    unrolled_gradient,
)
from .tasks import Episode, TaskDataset, meta_dataset_wrap, sampler_select, synth_tasks

__version__ = "0.1.0"
