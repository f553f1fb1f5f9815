"""Action-aware diffusion for procedure planning, in numpy.

Submodules: ``autodiff`` (tape engine), ``schedule``, ``noise``, ``layout``,
``model`` (denoiser U-Net), ``training``, ``planner``, ``dataset``,
``metrics`` and ``cli``.
"""

from .dataset import ProcedureDataset, SyntheticSpec, build_dataset, preset, split
from .layout import ProblemDims, assemble_x0, decode_actions
from .metrics import EvalReport, evaluate, mean_accuracy, mean_siou, success_rate
from .model import Denoiser, DenoiserConfig, predict_x0
from .noise import MaskMode, NoiseStats, build_mask, estimate_noise_stats, q_sample
from .planner import TaskClassifier, infer_plan, infer_plans, train_denoiser, train_task_classifier
from .schedule import NoiseSchedule, build_cosine_schedule
from .training import TrainingConfig

__version__ = "0.1.0"

__all__ = [
    "Denoiser", "DenoiserConfig", "EvalReport", "MaskMode", "NoiseSchedule", "NoiseStats", "ProblemDims",
    "ProcedureDataset", "SyntheticSpec", "TaskClassifier", "TrainingConfig", "assemble_x0", "build_cosine_schedule",
    "build_dataset", "build_mask", "decode_actions", "estimate_noise_stats", "evaluate", "infer_plan",
    "infer_plans", "mean_accuracy", "mean_siou", "predict_x0", "preset", "q_sample", "split", "success_rate",
    "train_denoiser", "train_task_classifier",
]
