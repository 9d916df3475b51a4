"""GME-Net: two-branch low-resolution expression recognition with attention distillation."""
from .attention import DBAM, DCAM, DSAM, MAB, AttentionMaps
from .degradation import DegradationSpec, bicubic_resize, gaussian_blur, prepare_student_input
from .errors import (
    AlignmentError,
    ConfigurationError,
    DataError,
    GMENetError,
    TrainingError,
    ValidationError,
)
from .global_extraction import MCB
from .losses import LossBreakdown, cosine_similarity, cross_entropy, kd_loss, total_loss
from .network import (
    ForwardOutput,
    GMENet,
    NetworkConfig,
    build_network,
    count_multiply_accumulates,
    count_parameters,
)

__version__ = "0.1.0"
