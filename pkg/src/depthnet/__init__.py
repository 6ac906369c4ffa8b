"""LiDAR depth completion: DT coarse fill plus a lightweight encoder-decoder CNN."""

from .core import ACCUM_FORMAT, FEATURE_FORMAT, DimensionError, QFormat, Tensor, dequantize, quantize
from .graph import (
    FixedPointConfig,
    NetworkSpec,
    Weights,
    WeightsError,
    build_depthnet,
    count_ops,
    count_params,
    forward,
    random_init,
    zero_weights,
)
from .kernels import (
    DWKernel,
    MulCounter,
    PWKernel,
    TileConfig,
    dw_conv3x3,
    dw_deconv3x3_fast,
    dw_deconv3x3_naive,
    pw_conv,
    tiled_execute,
)
from .metrics import MetricReport, evaluate
from .preprocess import (
    Calibration,
    CalibrationError,
    DepthMap,
    InputError,
    PointCloud,
    combine,
    dt_fill,
    normalize,
    project,
    run_pipeline,
    top_fill,
)

__version__ = "0.1.0"
