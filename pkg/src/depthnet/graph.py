"""DepthNet encoder-decoder: layer graph, forward pass and cost counters.

Block layout (H x W x C, input 256 x 1216 x 1):

    In conv    1 -> 32
    E block 1  32 -> 32
    E block 2  32 -> 32    /2
    E block 3  32 -> 64    /2
    E block 4  64 -> 128   /2   (no shortcuts)
    D block 1  128 -> 64   x2   skip from E3
    D block 2  64 -> 32    x2   skip from E2
    D block 3  32 -> 32    x2   skip from E1
    Out conv1  32 -> 32
    Out conv2  32 -> 1          (no activation: the residual may be negative)

An encoder block is a ResNet-18 stage: ``encoder_units`` residual units, the
first of which downsamples via conv_a (3x3) and the conv_a_extra 1x1
projection shortcut; later units use identity shortcuts. A decoder block
upsamples with a 3x3 deconvolution, adds the skip, and runs
``decoder_convs`` 3x3 convolutions. With ``ds=True`` every 3x3
convolution/deconvolution becomes a depthwise 3x3 stage followed by a
pointwise stage, with the activation after the pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ACCUM_FORMAT, FEATURE_FORMAT, DimensionError, QFormat, Tensor, quantize
from .kernels import (
    ConvKernel,
    DWKernel,
    PWKernel,
    TileConfig,
    add,
    conv3x3,
    deconv3x3,
    dw_conv3x3,
    dw_deconv3x3_fast,
    leaky_relu,
    pw_conv,
    tiled_execute,
)

INPUT_HEIGHT = 256
INPUT_WIDTH = 1216


class WeightsError(ValueError):
    """Missing or mis-shaped parameters for a network."""


@dataclass(frozen=True)
class LayerSpec:
    """One parameterised operation: conv3x3, conv1x1 or deconv3x3."""

    path: str
    op: str
    cin: int
    cout: int
    stride: int
    ds: bool
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    def entries(self) -> dict[str, tuple[int, ...]]:
        """Weight-store entries (path -> shape) backing this layer."""
        p, ci, co = self.path, self.cin, self.cout
        if self.op == "conv1x1":
            return {p: (co, ci), f"{p}/bias": (co,)}
        if self.ds:
            return {f"{p}/dw": (ci, 3, 3), f"{p}/dw/bias": (ci,),
                    f"{p}/pw": (co, ci), f"{p}/pw/bias": (co,)}
        return {p: (co, ci, 3, 3), f"{p}/bias": (co,)}

    def taps(self) -> int:
        return sum(int(np.prod(s)) for k, s in self.entries().items() if not k.endswith("/bias"))

    def params(self) -> int:
        return sum(int(np.prod(s)) for s in self.entries().values())

    def ops(self) -> int:
        """Multiply-accumulates x 2 at this layer's sizes."""
        (ih, iw), (oh, ow) = self.in_hw, self.out_hw
        ci, co = self.cin, self.cout
        if self.op == "conv1x1":
            return 2 * oh * ow * ci * co
        if self.op == "conv3x3":
            if self.ds:
                return 2 * oh * ow * 9 * ci + 2 * oh * ow * ci * co
            return 2 * oh * ow * 9 * ci * co
        # zero-skipping deconvolution: 9 products per input window
        if self.ds:
            return 2 * ih * iw * 9 * ci + 2 * oh * ow * ci * co
        return 2 * ih * iw * 9 * ci * co


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str  # InConv | Encoder | Decoder | OutConv1 | OutConv2
    m: int
    n: int
    k: int
    stride: int
    has_feedforward: bool
    ds: bool
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    units: int = 1
    convs: int = 1

    def layers(self) -> list[LayerSpec]:
        h, w, _ = self.in_shape
        oh, ow, _ = self.out_shape
        if self.kind in ("InConv", "OutConv1", "OutConv2"):
            return [LayerSpec(self.name, "conv3x3", self.m, self.n, 1, self.ds, (h, w), (oh, ow))]
        out = []
        if self.kind == "Encoder":
            for u in range(self.units):
                p = f"{self.name}/u{u}"
                cin, s, ihw = (self.m, self.stride, (h, w)) if u == 0 else (self.n, 1, (oh, ow))
                out.append(LayerSpec(f"{p}/conv_a", "conv3x3", cin, self.n, s, self.ds, ihw, (oh, ow)))
                out.append(LayerSpec(f"{p}/conv_b", "conv3x3", self.n, self.n, 1, self.ds, (oh, ow), (oh, ow)))
                if u == 0 and self.has_feedforward:
                    out.append(LayerSpec(f"{p}/conv_a_extra", "conv1x1", cin, self.n, s, self.ds, ihw, (oh, ow)))
            return out
        out.append(LayerSpec(f"{self.name}/upsample", "deconv3x3", self.m, self.n, 1, self.ds, (h, w), (oh, ow)))
        for i in range(self.convs):
            out.append(LayerSpec(f"{self.name}/conv{i}", "conv3x3", self.n, self.n, 1, self.ds, (oh, ow), (oh, ow)))
        return out


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple[BlockSpec, ...]
    input_shape: tuple[int, int, int]
    ds: bool

    def layers(self) -> list[LayerSpec]:
        return [layer for b in self.blocks for layer in b.layers()]

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers():
            shapes.update(layer.entries())
        return shapes

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


def build_depthnet(
    ds: bool = False,
    height: int = INPUT_HEIGHT,
    width: int = INPUT_WIDTH,
    encoder_units: int = 2,
    decoder_convs: int = 2,
) -> NetworkSpec:
    """The ten-block DepthNet graph.

    ``height``/``width`` must be divisible by 8 (three stride-2 stages).
    ``encoder_units=1, decoder_convs=1`` gives the minimal single-unit
    wiring; the defaults give about 9.5e5 (standard) and 1.25e5 (DS) parameters.
    """
    if height % 8 or width % 8:
        raise DimensionError("input height and width must be multiples of 8")
    rows = [  # name, kind, m, n, k, stride
        ("in_conv", "InConv", 1, 32, 0, 1),
        ("e1", "Encoder", 32, 32, 0, 1),
        ("e2", "Encoder", 32, 32, 0, 2),
        ("e3", "Encoder", 32, 64, 0, 2),
        ("e4", "Encoder", 64, 128, 0, 2),
        ("d1", "Decoder", 128, 64, 64, 1),
        ("d2", "Decoder", 64, 32, 32, 1),
        ("d3", "Decoder", 32, 32, 32, 1),
        ("out_conv1", "OutConv1", 32, 32, 0, 1),
        ("out_conv2", "OutConv2", 32, 1, 0, 1),
    ]
    h, w = height, width
    blocks = []
    for name, kind, m, n, k, stride in rows:
        in_shape = (h, w, m)
        if kind == "Encoder":
            h, w = h // stride, w // stride
        elif kind == "Decoder":
            h, w = h * 2, w * 2
        blocks.append(BlockSpec(
            name=name, kind=kind, m=m, n=n, k=k, stride=stride,
            has_feedforward=(name != "e4") if kind == "Encoder" else False,
            ds=ds, in_shape=in_shape, out_shape=(h, w, n),
            units=encoder_units if kind == "Encoder" else 1,
            convs=decoder_convs if kind == "Decoder" else 1,
        ))
    return NetworkSpec(tuple(blocks), (height, width, 1), ds)


def count_params(net: NetworkSpec) -> int:
    """Taps plus biases over every layer."""
    return sum(layer.params() for layer in net.layers())


def count_ops(net: NetworkSpec) -> int:
    """Operations for one forward pass, a multiply-accumulate counting as 2."""
    return sum(layer.ops() for layer in net.layers())


# ------------------------------------------------------------------- weights


class Weights(dict):
    """Parameter store: canonical layer path -> float32 array."""

    def validate(self, net: NetworkSpec) -> None:
        for path, shape in net.weight_shapes().items():
            if path not in self:
                raise WeightsError(f"missing weights for layer {path!r}")
            if tuple(self[path].shape) != tuple(shape):
                raise WeightsError(f"layer {path!r} has shape {tuple(self[path].shape)}, expected {tuple(shape)}")

    def equals(self, other: "Weights") -> bool:
        return self.keys() == other.keys() and all(
            self[k].dtype == other[k].dtype and np.array_equal(self[k], other[k]) for k in self)


def _fan_in(path: str, shape) -> int:
    if path.endswith("/dw") or path.endswith("/dw/bias"):
        return 9
    if len(shape) == 4:
        return shape[1] * 9
    return shape[1] if len(shape) == 2 else 1


def random_init(net: NetworkSpec, seed: int = 0) -> Weights:
    """Uniform(-1, 1) taps and biases scaled by 1/sqrt(fan-in); deterministic per seed."""
    rng = np.random.default_rng(seed)
    w = Weights()
    tap_shapes = {}
    for path, shape in net.weight_shapes().items():
        if path.endswith("/bias"):
            fan = _fan_in(path, tap_shapes[path[:-5]])
        else:
            fan = _fan_in(path, shape)
            tap_shapes[path] = shape
        w[path] = (rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan)).astype(np.float32)
    return w


def zero_weights(net: NetworkSpec) -> Weights:
    return Weights({p: np.zeros(s, dtype=np.float32) for p, s in net.weight_shapes().items()})


# ------------------------------------------------------------------ forward


@dataclass(frozen=True)
class FixedPointConfig:
    """Number formats of the fixed-point engine.

    ``wide_pointwise=False`` accumulates pointwise sums in the feature format
    instead of the wide accumulator (a single-precision datapath).
    """

    feature: QFormat = FEATURE_FORMAT
    accum: QFormat = ACCUM_FORMAT
    wide_pointwise: bool = True

    def __post_init__(self):
        if self.accum.total_bits < self.feature.total_bits + 8:
            raise ValueError("accumulator needs at least 8 more bits than the feature format")

    @property
    def pointwise_accum(self) -> QFormat:
        return self.accum if self.wide_pointwise else self.feature


@dataclass
class Engine:
    """Executes layers with a given weight set and arithmetic mode."""

    weights: Weights
    fixed: FixedPointConfig | None = None
    tile: TileConfig | None = None
    activation: Callable[[Tensor], Tensor] = leaky_relu
    shapes: list = field(default_factory=list)

    def _w(self, path):
        return self.weights[path].astype(np.float64)

    def dw(self, x, kernel, stride=1):
        if self.tile:
            return tiled_execute(x, dw_conv3x3, kernel, self.tile, stride=stride)
        return dw_conv3x3(x, kernel, stride)

    def dw_up(self, x, kernel):
        if self.tile:
            return tiled_execute(x, dw_deconv3x3_fast, kernel, self.tile)
        return dw_deconv3x3_fast(x, kernel)

    def pw(self, x, kernel, stride=1):
        accum = self.fixed.pointwise_accum if self.fixed else None
        if self.tile:
            return tiled_execute(x, pw_conv, kernel, self.tile, stride=stride, accum=accum)
        return pw_conv(x, kernel, stride, accum=accum)

    def layer(self, x: Tensor, spec: LayerSpec) -> Tensor:
        p = spec.path
        if spec.op == "conv1x1":
            return self.pw(x, PWKernel(self._w(p), self._w(f"{p}/bias")), spec.stride)
        if spec.ds:
            dw = DWKernel(self._w(f"{p}/dw"), self._w(f"{p}/dw/bias"))
            y = self.dw(x, dw, spec.stride) if spec.op == "conv3x3" else self.dw_up(x, dw)
            return self.pw(y, PWKernel(self._w(f"{p}/pw"), self._w(f"{p}/pw/bias")))
        k = ConvKernel(self._w(p), self._w(f"{p}/bias"))
        if spec.op == "conv3x3":
            return conv3x3(x, k, spec.stride)
        return deconv3x3(x, k)


def _check_shape(t: Tensor, expected, what):
    if tuple(t.shape) != tuple(expected):
        raise DimensionError(f"{what}: got {tuple(t.shape)}, expected {tuple(expected)}")


def encoder_block(x: Tensor, spec: BlockSpec, w: Weights, engine: Engine | None = None) -> Tensor:
    """Residual units; the first downsamples on both conv_a and conv_a_extra."""
    eng = engine or Engine(w)
    if x.channels != spec.m:
        raise DimensionError(f"{spec.name}: expected {spec.m} input channels, got {x.channels}")
    layers = {layer.path: layer for layer in spec.layers()}
    for u in range(spec.units):
        p = f"{spec.name}/u{u}"
        main = eng.activation(eng.layer(x, layers[f"{p}/conv_a"]))
        main = eng.layer(main, layers[f"{p}/conv_b"])
        if spec.has_feedforward:
            extra = layers.get(f"{p}/conv_a_extra")
            shortcut = eng.layer(x, extra) if extra is not None else x
            main = add(main, shortcut)
        x = eng.activation(main)
    return x


def decoder_block(x: Tensor, skip: Tensor, spec: BlockSpec, w: Weights, engine: Engine | None = None) -> Tensor:
    """Deconvolution x2, add the skip, then 3x3 convolutions."""
    eng = engine or Engine(w)
    if x.channels != spec.m:
        raise DimensionError(f"{spec.name}: expected {spec.m} input channels, got {x.channels}")
    if skip.channels != spec.k or skip.shape[:2] != (2 * x.height, 2 * x.width):
        raise DimensionError(f"{spec.name}: skip {tuple(skip.shape)} does not match upsampled "
                             f"{(2 * x.height, 2 * x.width, spec.n)}")
    layers = spec.layers()
    up = eng.activation(eng.layer(x, layers[0]))
    y = add(up, skip)
    for layer in layers[1:]:
        y = eng.activation(eng.layer(y, layer))
    return y


def forward(
    net: NetworkSpec,
    w: Weights,
    x: Tensor,
    fixed: FixedPointConfig | None = None,
    tile: TileConfig | None = None,
    activation: Callable[[Tensor], Tensor] = leaky_relu,
) -> Tensor:
    """Residual map for a normalized coarse depth input.

    Every block output is checked against the shape chain of ``net``. With
    ``fixed`` set, a real input is quantized to the feature format and the
    result stays fixed-point.
    """
    w.validate(net)
    _check_shape(x, net.input_shape, "network input")
    if fixed is not None and not x.is_fixed:
        x = quantize(x, fixed.feature)
    eng = Engine(w, fixed, tile, activation)
    skips = {}
    for b in net.blocks:
        if b.kind == "Encoder":
            x = encoder_block(x, b, w, eng)
            skips[b.name] = x
        elif b.kind == "Decoder":
            source = {"d1": "e3", "d2": "e2", "d3": "e1"}[b.name]
            x = decoder_block(x, skips[source], b, w, eng)
        else:
            x = eng.layer(x, b.layers()[0])
            if b.kind != "OutConv2":
                x = eng.activation(x)
        _check_shape(x, b.out_shape, f"block {b.name} output")
    return x


def layer_table(net: NetworkSpec) -> list[dict]:
    """Per-block rows (plus per-layer sub-rows) for reporting."""
    rows = []
    for b in net.blocks:
        layers = b.layers()
        rows.append({
            "name": b.name, "input": b.in_shape, "output": b.out_shape, "mnk": (b.m, b.n, b.k),
            "params": sum(layer.params() for layer in layers),
            "ops": sum(layer.ops() for layer in layers),
            "layers": [{"path": layer.path, "op": layer.op + ("/ds" if layer.ds and layer.op != "conv1x1" else ""),
                        "params": layer.params(), "ops": layer.ops()} for layer in layers],
        })
    return rows
