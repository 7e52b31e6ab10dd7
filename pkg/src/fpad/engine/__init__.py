from .config import EvalConfig, TrainConfig
from .evaluation import EvalReport, evaluate
from .inference import detect
from .metrics import Detection, TIOU_THRESHOLDS, ap_at_tiou, average_map, map_at_tiou
from .studies import compare_shots, compare_splits, sweep_lambda, sweep_proposal_threshold
from .training import LossRecord, final_adaptation_loss, train

__all__ = [
    "EvalConfig", "TrainConfig", "EvalReport", "evaluate", "detect", "Detection",
    "TIOU_THRESHOLDS", "ap_at_tiou", "average_map", "map_at_tiou", "LossRecord",
    "final_adaptation_loss", "train", "compare_shots", "compare_splits", "sweep_lambda",
    "sweep_proposal_threshold",
]
