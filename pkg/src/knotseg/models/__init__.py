from .architectures import (
    ConvLSTMNet,
    SegNetLite,
    SegmentationNet,
    UNetLite,
    build_model,
    crnn_forward,
    segnet_forward,
    unet_forward,
)
from .config import ModelConfig, VARIANTS
from .convlstm import BiConvLSTM, ConvLSTMCell, biconvlstm_block, convlstm_cell_step, encoder_parameter_count

__all__ = [
    "BiConvLSTM", "ConvLSTMCell", "ConvLSTMNet", "ModelConfig", "SegNetLite", "SegmentationNet",
    "UNetLite", "VARIANTS", "biconvlstm_block", "build_model", "convlstm_cell_step", "crnn_forward",
    "encoder_parameter_count", "segnet_forward", "unet_forward",
]
from .checkpoint import (
    Checkpoint,
    ConfigMismatchError,
    load_checkpoint,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
