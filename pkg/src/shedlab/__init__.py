"""Pruning laboratory for observing cascade weight shedding at desk scale."""

from .analysis import fit_exponential, iou, kept_block_l0_pmf, shed_attribution
from .blocks import BlockMaskState, block_gmp_topup, build_partition, selective_decay
from .config import ExperimentConfig, parse_config
from .harness import evaluate, momentum_sweep, run_experiment, sweep_summary
from .pruning import MaskState, detect_degenerate, gmp_topup, keep_ratio, random_topup
from .schedules import KeepRatioScheduleSpec, LrScheduleSpec, RunClock, keep_ratio_value, lr_value

__version__ = "0.1.0"

__all__ = [
    "BlockMaskState", "ExperimentConfig", "KeepRatioScheduleSpec", "LrScheduleSpec", "MaskState", "RunClock",
    "block_gmp_topup", "build_partition", "detect_degenerate", "evaluate", "fit_exponential", "gmp_topup",
    "iou", "keep_ratio", "keep_ratio_value", "kept_block_l0_pmf", "lr_value", "momentum_sweep", "parse_config",
    "random_topup", "run_experiment", "selective_decay", "shed_attribution", "sweep_summary",
]
