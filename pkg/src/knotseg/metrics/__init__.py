"""Volume segmentation metrics: Dice, Cohen's kappa, anisotropic Hausdorff distance."""
from .core import (
    AggregateRow,
    ConfusionCounts,
    EvalConfig,
    VolumeMetrics,
    aggregate,
    binarize,
    confusion,
    dice,
    evaluate_volume,
    hausdorff_mm,
    kappa,
    kappa_distribution,
)
from .edt import directed_sq_hausdorff, squared_edt
from .report import kappa_csv, species_rows, text_table, tree_rows, write_reports
