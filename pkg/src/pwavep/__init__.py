"""Graph-wavelet purification of adversarial point clouds."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapacityError,
    ConditioningError,
    ConfigError,
    DataError,
    GraphError,
    InvalidParameterError,
    NumericError,
    OracleError,
    ParseError,
    PWavePError,
    UnsupportedModeError,
)
from .gwavelets import (  # noqa: E402
    KernelBank,
    WaveletCoefficients,
    WaveletOperators,
    build_operators_chebyshev,
    build_operators_exact,
    design_kernel_bank,
    frame_bounds,
    gwt,
    igwt,
)
from .metrics import cd_bound_check, chamfer, emd, sinkhorn  # noqa: E402
from .oracle import ExternalOracle, OracleConfig, ToyClassifier, evaluate, train_toy_classifier  # noqa: E402
from .pcgeom import (  # noqa: E402
    KnnGraph,
    LaplacianPair,
    PointCloud,
    build_knn_graph,
    build_laplacians,
    load_cloud,
    save_cloud,
)
from .purify import PurificationResult, pwavep, ror, sor  # noqa: E402
from .saliency import PurificationConfig, hybrid_saliency, local_sparsity_scores, partition  # noqa: E402
from .spectral import SpectralBasis, eigendecompose, gft_lowpass, inject_band_perturbation  # noqa: E402

__all__ = [
    "CapacityError",
    "ConditioningError",
    "ConfigError",
    "DataError",
    "ExternalOracle",
    "GraphError",
    "InvalidParameterError",
    "KernelBank",
    "KnnGraph",
    "LaplacianPair",
    "NumericError",
    "OracleConfig",
    "OracleError",
    "PWavePError",
    "ParseError",
    "PointCloud",
    "PurificationConfig",
    "PurificationResult",
    "SpectralBasis",
    "ToyClassifier",
    "UnsupportedModeError",
    "WaveletCoefficients",
    "WaveletOperators",
    "build_knn_graph",
    "build_laplacians",
    "build_operators_chebyshev",
    "build_operators_exact",
    "cd_bound_check",
    "chamfer",
    "design_kernel_bank",
    "eigendecompose",
    "emd",
    "evaluate",
    "frame_bounds",
    "gft_lowpass",
    "gwt",
    "hybrid_saliency",
    "igwt",
    "inject_band_perturbation",
    "load_cloud",
    "local_sparsity_scores",
    "partition",
    "pwavep",
    "ror",
    "save_cloud",
    "sinkhorn",
    "sor",
    "train_toy_classifier",
]
