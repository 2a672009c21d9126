"""Zeroth-order fine-tuning of quantized models via their continuous scales."""

__version__ = "0.1.0"

from .quant import (  # noqa: F401
    CodebookLinear,
    QuantizedLinear,
    dequantize,
    forward_quantized,
    load_layer,
    quantize_codebook,
    quantize_scalar,
    save_layer,
)
from .rng import SeededNormalStream, derive_seed  # noqa: F401
from .tensor import DenseMatrix, axpy, matvec  # noqa: F401
from .zo import (  # noqa: F401
    DirectionalDerivative,
    DivergenceError,
    GradEstimate,
    PerturbSpec,
    ScaleSpace,
    clip_directional,
    perturb_scales,
    qspsa_estimate,
    spsa_estimate,
)
from .optim import TrainConfig, schedule_lr, zo_sgd_step  # noqa: F401
