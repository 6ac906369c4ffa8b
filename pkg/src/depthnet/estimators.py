"""scikit-learn style wrappers around the completion pipeline.

Both estimators take depth maps in integer millimetres, either one (H, W)
map or a stack (n, H, W). Nothing is learned here: ``fit`` only builds the
network and loads or draws its weights.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import QFormat
from .graph import FixedPointConfig, build_depthnet, forward, random_init
from .kernels import TileConfig
from .metrics import evaluate
from .preprocess import DEFAULT_SCALE_MM, InputError, combine, dt_fill, normalize, top_fill


def check_depth_maps(X, shape: tuple[int, int] | None = None) -> tuple[np.ndarray, bool]:
    """Validate depth maps and return them as an (n, H, W) int64 stack.

    The flag tells whether the input was a single map.
    """
    arr = np.asarray(X)
    if arr.dtype == object or not (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating)):
        raise InputError(f"depth maps must be numeric, got dtype {arr.dtype}")
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or 0 in arr.shape:
        raise InputError(f"expected (H, W) or (n, H, W) depth maps, got shape {np.shape(X)}")
    if not np.all(np.isfinite(arr)):
        raise InputError("depth maps contain NaN or infinity")
    if np.any(arr < 0):
        raise InputError("depth values must be non-negative")
    if np.issubdtype(arr.dtype, np.floating) and np.any(arr != np.round(arr)):
        raise InputError("depth maps hold whole millimetres")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise InputError(f"depth maps must be {shape[0]}x{shape[1]}, got {arr.shape[1]}x{arr.shape[2]}")
    return arr.astype(np.int64), single


def _unstack(maps: list[np.ndarray], single: bool) -> np.ndarray:
    return maps[0] if single else np.stack(maps)


class DistanceTransformFill(TransformerMixin, BaseEstimator):
    """Nearest-valid-pixel hole filling, optionally after filling above the scan."""

    def __init__(self, top_fill: bool = True):
        self.top_fill = top_fill

    def fit(self, X, y=None):
        check_depth_maps(X)
        self.is_fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        stack, single = check_depth_maps(X)
        out = [dt_fill(top_fill(m) if self.top_fill else m).values for m in stack]
        return _unstack(out, single)


class DepthCompleter(BaseEstimator):
    """Sparse-to-dense completion: DT coarse map plus a CNN residual.

    Parameters
    ----------
    ds : use the depthwise separable network.
    fixed : run the CNN in fixed point with feature format ``qformat``.
    weights_path : weight file; seeded random weights when None.
    tile : channel partition for tiled execution, 0 to disable.
    """

    def __init__(self, ds: bool = False, fixed: bool = False, qformat: str = "16:8",
                 scale_mm: float = DEFAULT_SCALE_MM, seed: int = 0, weights_path: str | None = None,
                 height: int = 256, width: int = 1216, tile: int = 0):
        self.ds = ds
        self.fixed = fixed
        self.qformat = qformat
        self.scale_mm = scale_mm
        self.seed = seed
        self.weights_path = weights_path
        self.height = height
        self.width = width
        self.tile = tile

    def fit(self, X=None, y=None):
        if X is not None:
            check_depth_maps(X, (self.height, self.width))
        self.net_ = build_depthnet(self.ds, self.height, self.width)
        if self.weights_path is None:
            self.weights_ = random_init(self.net_, self.seed)
        else:
            from .weights_io import load_weights

            self.weights_ = load_weights(self.weights_path, self.net_)
        if self.fixed:
            q = QFormat.parse(self.qformat) if isinstance(self.qformat, str) else self.qformat
            self.fixed_config_ = FixedPointConfig(q, QFormat(32, min(2 * q.frac_bits, 31)))
        else:
            self.fixed_config_ = None
        self.tile_config_ = TileConfig(channel_partition=self.tile) if self.tile else None
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        stack, single = check_depth_maps(X, (self.height, self.width))
        out = []
        for sparse in stack:
            coarse = dt_fill(top_fill(sparse))
            residual = forward(self.net_, self.weights_, normalize(coarse, self.scale_mm),
                               fixed=self.fixed_config_, tile=self.tile_config_)
            out.append(combine(coarse, residual, self.scale_mm).values)
        return _unstack(out, single)

    def score(self, X, y):
        """Negative RMSE in mm (higher is better)."""
        pred, _ = check_depth_maps(self.predict(X))
        gt, _ = check_depth_maps(y, (self.height, self.width))
        if len(gt) != len(pred):
            raise InputError(f"{len(pred)} predictions for {len(gt)} ground-truth maps")
        sq = np.concatenate([(p[g > 0] - g[g > 0]).astype(np.float64) ** 2 for p, g in zip(pred, gt)])
        if sq.size == 0:
            evaluate(pred[0], gt[0])  # raises the no-valid-pixels error
        return -float(np.sqrt(sq.mean()))
