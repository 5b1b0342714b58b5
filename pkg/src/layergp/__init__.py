"""Post-hoc classifier confidence calibration with layerwise Gaussian processes."""

__version__ = "0.1.0"

from .calibration import (
    CalibratedConfidence,
    CalibratorConfig,
    calibrate,
    train_calibrator,
)
from .dumps import (
    CalibrationSample,
    DumpError,
    FeatureDump,
    LayerTensor,
    Standardizer,
    build_samples,
    load_dump,
    pool_channels,
    write_dump,
)
from .gp import (
    GPFitError,
    GPModel,
    PosteriorPrediction,
    fit,
    log_marginal_likelihood,
    predict_global,
    predict_local,
)
from .kernels import (
    HyperParams,
    KernelSpec,
    base_kernel,
    hierarchical_layer_kernel,
    icm_kernel,
    kernel_matrix,
    kernel_param_gradients,
    multilayer_additive_kernel,
    single_sum_kernel,
)
from .metrics import (
    MetricsReport,
    ReliabilityDiagram,
    brier_binary,
    ece,
    mce,
    nll_binary,
    reliability,
    report_from_pairs,
)
from .synthetic import SyntheticSpec, generate
from .temperature import TemperatureModel, apply_temperature, fit_temperature

__all__ = [
    "CalibratedConfidence",
    "CalibratorConfig",
    "CalibrationSample",
    "DumpError",
    "FeatureDump",
    "GPFitError",
    "GPModel",
    "HyperParams",
    "KernelSpec",
    "LayerTensor",
    "MetricsReport",
    "PosteriorPrediction",
    "ReliabilityDiagram",
    "Standardizer",
    "SyntheticSpec",
    "TemperatureModel",
    "apply_temperature",
    "base_kernel",
    "brier_binary",
    "build_samples",
    "calibrate",
    "ece",
    "fit",
    "fit_temperature",
    "generate",
    "hierarchical_layer_kernel",
    "icm_kernel",
    "kernel_matrix",
    "kernel_param_gradients",
    "load_dump",
    "log_marginal_likelihood",
    "mce",
    "multilayer_additive_kernel",
    "nll_binary",
    "pool_channels",
    "predict_global",
    "predict_local",
    "reliability",
    "report_from_pairs",
    "single_sum_kernel",
    "train_calibrator",
    "write_dump",
]
