"""Dynamic-depth recursive convolutional networks on a numpy tape engine.

The core layer feeds its own output back as extra input channels and
iterates to a fixed point, stopping per sample once consecutive states
are closer than a threshold; parameter-matched plain and fixed-unroll
variants make the three architectures directly comparable.
"""

from .checkpoint import CheckpointError, apply_parameters, load_checkpoint, save_checkpoint
from .data import (
    AugmentPolicy,
    DataError,
    Dataset,
    LabeledImage,
    Normalizer,
    augment,
    batches,
    load_cifar10,
    load_raw,
    save_raw,
    synth_shapes,
)
from .layers import ConvLayer, LinearLayer
from .models import (
    REFERENCE_WIDTH_PAIRS,
    ArchitectureConfig,
    Model,
    build,
    count_parameters,
    match_width,
)
from .optim import (
    AdamConfig,
    AdamState,
    EvalResult,
    RunMetrics,
    TrainConfig,
    adam_step,
    evaluate,
    train,
)
from .recursive import (
    CfrpnConvLayer,
    ConvergenceConfig,
    FrpnDenseLayer,
    IterationTrace,
    cfrpn_conv_forward,
    frpn_dense_forward,
    frpn_dense_step,
    unroll_explicit,
)
from .tape import Parameter, Tape, backward, grad_check
from .tensor import ConvSpec, LrnSpec, NumericError, PoolSpec, ShapeError

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "AdamState", "ArchitectureConfig", "AugmentPolicy",
    "CfrpnConvLayer", "CheckpointError", "ConvLayer", "ConvSpec",
    "ConvergenceConfig", "DataError", "Dataset", "EvalResult",
    "FrpnDenseLayer", "IterationTrace", "LabeledImage", "LinearLayer",
    "LrnSpec", "Model", "Normalizer", "NumericError", "Parameter",
    "PoolSpec", "REFERENCE_WIDTH_PAIRS", "RunMetrics", "ShapeError",
    "Tape", "TrainConfig", "adam_step", "apply_parameters", "augment",
    "backward", "batches", "build", "cfrpn_conv_forward", "count_parameters",
    "evaluate", "frpn_dense_forward", "frpn_dense_step", "grad_check",
    "load_checkpoint", "load_cifar10", "load_raw", "match_width",
    "save_checkpoint", "save_raw", "synth_shapes", "train", "unroll_explicit",
]
