"""Dual-resolution video backbone with learned temporal aggregation.

The package builds and executes the architecture family (single-path
baseline, dual-branch with local fusion, and the aggregation-equipped
variant), differentiates it at desk scale with a built-in reverse-mode
engine, and reproduces the family's parameter/compute/memory figures with a
static analyzer.
"""

from .arch import ArchSpec, RoutingPlan, parse_arch_name, parse_frames_flag, route_frames
from .analyzer import CostReport, activation_memory, analyze, count_macs, count_params
from .dataio import (ClipSource, MotionTaskConfig, PreprocessConfig, SamplePlan,
                     augment_train, load_clips, preprocess_infer, save_clips,
                     synth_motion_dataset, uniform_sample)
from .gradcheck import GradcheckReport, gradcheck
from .network import (Network, bl_module_forward, build_network, forward_video,
                      load_checkpoint, save_checkpoint)
from .tam import (FrameBatch, TamParams, channel_shift, tam_forward, tam_init,
                  tam_oracle, tsm_params)
from .tensor import (Tensor, TensorError, AutodiffError, load_array, load_tensor,
                     save_array, save_tensor, set_finite_checks)
from .trainer import (SgdNesterov, TrainConfig, cross_entropy, lr_schedule,
                      sgd_nesterov_step, train_toy)

__version__ = "0.1.0"
