"""Training, inference and fold evaluation."""
from .augment import ANGLES, AugmentSpec, augment_volume, rotate_stack, transform_stack
from .evaluation import (
    FoldReport,
    eval_config_for,
    evaluate_fold,
    fold_predictor,
    evaluate_predictions,
    oracle_report,
    predict_fold,
    write_prediction,
)
from .inference import coverage_counts, predict_volume, sliding_window_predict, window_starts
from .training import BEST, LAST, RUNLOG, RunLog, TrainConfig, TrainResult, default_batch_size, fit, train
