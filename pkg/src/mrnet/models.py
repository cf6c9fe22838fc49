"""Declarative model specs: MRNet and the three baselines.

A :class:`ModelSpec` is an ordered, immutable list of :class:`LayerSpec`.
Layers are applied in sequence; a ``concat-skip`` layer concatenates the
running activation with the output of an earlier layer (by index), which
is how the U-Net skip connections are wired.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYER_KINDS = ("conv", "maxpool", "upconv", "relu", "dense", "softmax",
               "concat-skip", "global-avg-pool", "flatten")
BASELINES = ("alexnet-mini", "mobilenet-mini", "vgg16-mini")
ARCHITECTURES = ("mrnet",) + BASELINES

# channel-wise standardisation applied ahead of the encoder (ImageNet statistics)
INPUT_MEAN = (0.485, 0.456, 0.406)
INPUT_STD = (0.229, 0.224, 0.225)

VGG_WIDTHS = (64, 128, 256, 512, 512)
VGG_DEPTHS = (2, 2, 3, 3, 3)
HDC_RATES = (1, 2, 5)
MIN_CHANNELS = 4


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    depthwise: bool = False
    skip: int | None = None
    tag: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.dilation < 1 or self.stride < 1 or self.kernel < 1 or self.padding < 0:
            raise ValueError(f"{self.kind}: invalid geometry {self}")
        if self.kind in ("conv", "upconv", "dense") and not self.depthwise and self.channels <= 0:
            raise ValueError(f"{self.kind}: channels must be positive")


def parse_scale(value) -> Fraction:
    """Accept 1, 0.125, '1/8', Fraction(1, 8)."""
    scale = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1 << 16)
    if scale <= 0:
        raise ValueError(f"width scale must be positive, got {value}")
    return scale


def scaled(base: int, scale: Fraction) -> int:
    return max(MIN_CHANNELS, math.ceil(base * scale))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    classes: int
    input_resolution: int
    width_scale: Fraction
    layers: tuple[LayerSpec, ...]
    input_channels: int = 3
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("classes must be positive")
        object.__setattr__(self, "width_scale", parse_scale(self.width_scale))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = infer_shapes(self.layers, self.input_resolution, self.input_channels)
        if shapes[-1] != (self.classes,):
            raise ShapeError(f"{self.name}: final layer yields {shapes[-1]}, expected ({self.classes},)")
        object.__setattr__(self, "shapes", tuple(shapes))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "classes": self.classes,
            "input_resolution": self.input_resolution,
            "width_scale": str(self.width_scale),
            "layers": [asdict(layer) for layer in self.layers],
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], int(d["classes"]), int(d["input_resolution"]),
                   Fraction(d["width_scale"]), tuple(LayerSpec(**layer) for layer in d["layers"]),
                   int(d.get("input_channels", 3)))


def infer_shapes(layers: Iterable[LayerSpec], resolution: int, channels: int = 3) -> list[tuple[int, ...]]:
    """Per-layer output shape (without batch) for a square input."""
    if resolution < 1 or channels < 1:
        raise ValueError("input resolution and channels must be positive")
    cur: tuple[int, ...] = (channels, resolution, resolution)
    out = []
    for i, layer in enumerate(layers):
        k = layer.kind
        where = f"layer {i} ({k})"
        if k in ("conv", "maxpool", "upconv", "concat-skip", "global-avg-pool", "flatten") and len(cur) != 3:
            raise ShapeError(f"{where}: needs a C x H x W input, got {cur}")
        if k == "conv":
            c, h, w = cur
            span = layer.dilation * (layer.kernel - 1) + 1
            if h + 2 * layer.padding < span:
                raise ShapeError(f"{where}: padded extent {h + 2 * layer.padding} < kernel extent {span}")
            ho = ad.conv_output_size(h, layer.kernel, layer.stride, layer.padding, layer.dilation)
            wo = ad.conv_output_size(w, layer.kernel, layer.stride, layer.padding, layer.dilation)
            cout = c if layer.depthwise else layer.channels
            if layer.depthwise and layer.channels not in (0, c):
                raise ShapeError(f"{where}: depthwise channels {layer.channels} != input channels {c}")
            cur = (cout, ho, wo)
        elif k == "maxpool":
            c, h, w = cur
            if h % 2 or w % 2:
                raise ShapeError(f"{where}: odd spatial extent {h}x{w}")
            cur = (c, h // 2, w // 2)
        elif k == "upconv":
            c, h, w = cur
            cur = (layer.channels, 2 * h, 2 * w)
        elif k == "concat-skip":
            if layer.skip is None or not 0 <= layer.skip < i:
                raise ShapeError(f"{where}: skip source {layer.skip} must name an earlier layer")
            src = out[layer.skip]
            if len(src) != 3 or src[1:] != cur[1:]:
                raise ShapeError(f"{where}: skip source layer {layer.skip} has shape {src}, "
                                 f"spatial extents must match {cur[1:]}")
            cur = (cur[0] + src[0],) + cur[1:]
        elif k == "global-avg-pool":
            cur = (cur[0],)
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        elif k == "dense":
            if len(cur) != 1:
                raise ShapeError(f"{where}: needs a flat input, got {cur}")
            cur = (layer.channels,)
        elif k == "softmax":
            if len(cur) != 1:
                raise ShapeError(f"{where}: needs a flat input, got {cur}")
        out.append(cur)
    return out


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes derived from the spec."""
    shapes: dict[str, tuple[int, ...]] = {}
    prev = (spec.input_channels, spec.input_resolution, spec.input_resolution)
    for i, (layer, cur) in enumerate(zip(spec.layers, spec.shapes)):
        if layer.kind == "conv":
            cin = 1 if layer.depthwise else prev[0]
            shapes[f"{i}.kernel"] = (cur[0], cin, layer.kernel, layer.kernel)
            shapes[f"{i}.bias"] = (cur[0],)
        elif layer.kind == "upconv":
            shapes[f"{i}.kernel"] = (prev[0], cur[0], 2, 2)
            shapes[f"{i}.bias"] = (cur[0],)
        elif layer.kind == "dense":
            shapes[f"{i}.weight"] = (prev[0], cur[0])
            shapes[f"{i}.bias"] = (cur[0],)
        prev = cur
    return shapes


@dataclass
class ModelInstance:
    spec: ModelSpec
    params: dict[str, Tensor]
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float64)


def param_count(model: ModelSpec | ModelInstance) -> int:
    if isinstance(model, ModelInstance):
        return int(sum(t.size for t in model.params.values()))
    return int(sum(math.prod(s) for s in param_shapes(model).values()))


def init_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelInstance:
    """He-normal kernels (fan-in scaling), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            layer = spec.layers[int(name.split(".")[0])]
            if layer.kind == "upconv":
                fan_in = shape[0]
            elif layer.kind == "dense":
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            arr = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(arr, name=name)
    return ModelInstance(spec, params, seed)


def normalize_input(batch: np.ndarray) -> np.ndarray:
    mean = np.asarray(INPUT_MEAN, dtype=batch.dtype).reshape(1, 3, 1, 1)
    std = np.asarray(INPUT_STD, dtype=batch.dtype).reshape(1, 3, 1, 1)
    return (batch - mean) / std


def forward(model: ModelInstance, batch) -> Tensor:
    """Class probabilities for a B x 3 x R x R batch of [0, 1] images."""
    spec = model.spec
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    r, c = spec.input_resolution, spec.input_channels
    if data.ndim != 4 or data.shape[1:] != (c, r, r):
        raise ShapeError(f"{spec.name}: expected batch of shape (B, {c}, {r}, {r}), got {data.shape}")
    if data.shape[0] == 0:
        return Tensor(np.zeros((0, spec.classes), dtype=model.dtype))
    data = data.astype(model.dtype, copy=False)
    x = Tensor(normalize_input(data) if c == 3 else data)
    p = model.params
    outputs: list[Tensor] = []
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        if k == "conv":
            x = ad.conv2d(x, p[f"{i}.kernel"], p[f"{i}.bias"], stride=layer.stride, padding=layer.padding,
                          dilation=layer.dilation, groups=x.shape[1] if layer.depthwise else 1)
        elif k == "relu":
            x = ad.relu(x)
        elif k == "maxpool":
            x = ad.maxpool2d(x)
        elif k == "upconv":
            x = ad.upconv2x(x, p[f"{i}.kernel"], p[f"{i}.bias"])
        elif k == "concat-skip":
            x = ad.concat_channels(x, outputs[layer.skip])
        elif k == "global-avg-pool":
            x = ad.global_avg_pool(x)
        elif k == "flatten":
            x = ad.flatten(x)
        elif k == "dense":
            x = ad.dense(x, p[f"{i}.weight"], p[f"{i}.bias"])
        elif k == "softmax":
            x = ad.softmax(x)
        outputs.append(x)
    return x


# -- builders -------------------------------------------------------------------------


def _vgg_encoder(scale: Fraction) -> tuple[list[LayerSpec], list[int]]:
    """Five conv blocks, 2x2 pooling after the first four; returns layers and block-output indices."""
    layers: list[LayerSpec] = []
    block_out = []
    for b, (base, depth) in enumerate(zip(VGG_WIDTHS, VGG_DEPTHS)):
        for j in range(depth):
            layers.append(LayerSpec("conv", scaled(base, scale), kernel=3, padding=1, tag=f"block{b + 1}_conv{j + 1}"))
            layers.append(LayerSpec("relu"))
        block_out.append(len(layers) - 1)
        if b < 4:
            layers.append(LayerSpec("maxpool", tag=f"block{b + 1}_pool"))
    return layers, block_out


def _check_resolution(name: str, resolution: int, factor: int) -> None:
    if resolution < factor or resolution % factor:
        raise ValueError(f"{name}: input resolution {resolution} must be a positive multiple of {factor}")


def build_mrnet(classes: int = 3, input_resolution: int = 512, width_scale=1) -> ModelSpec:
    """VGG16 encoder -> hybrid dilated block -> four U-Net up-stages -> GAP/dense/softmax."""
    _check_resolution("mrnet", input_resolution, 16)
    scale = parse_scale(width_scale)
    layers, block_out = _vgg_encoder(scale)
    for rate in HDC_RATES:
        layers.append(LayerSpec("conv", scaled(512, scale), kernel=3, padding=rate, dilation=rate,
                                tag=f"hdc_d{rate}"))
        layers.append(LayerSpec("relu"))
    for level in (3, 2, 1, 0):
        width = scaled(VGG_WIDTHS[level], scale)
        layers.append(LayerSpec("upconv", width, kernel=2, stride=2, tag=f"up{level + 1}"))
        layers.append(LayerSpec("concat-skip", skip=block_out[level], tag=f"skip_block{level + 1}"))
        for j in range(2):
            layers.append(LayerSpec("conv", width, kernel=3, padding=1, tag=f"dec{level + 1}_conv{j + 1}"))
            layers.append(LayerSpec("relu"))
    layers += [LayerSpec("global-avg-pool"), LayerSpec("dense", classes, tag="head"), LayerSpec("softmax")]
    return ModelSpec("mrnet", classes, input_resolution, scale, tuple(layers))


def _vgg16_mini(classes, resolution, scale):
    _check_resolution("vgg16-mini", resolution, 16)
    layers, _ = _vgg_encoder(scale)
    layers += [LayerSpec("flatten"), LayerSpec("dense", classes, tag="head"), LayerSpec("softmax")]
    return layers


def _alexnet_mini(classes, resolution, scale):
    _check_resolution("alexnet-mini", resolution, 32)
    L = LayerSpec
    return [
        L("conv", scaled(96, scale), kernel=11, stride=4, padding=5, tag="conv1"), L("relu"), L("maxpool"),
        L("conv", scaled(256, scale), kernel=5, padding=2, tag="conv2"), L("relu"), L("maxpool"),
        L("conv", scaled(384, scale), kernel=3, padding=1, tag="conv3"), L("relu"),
        L("conv", scaled(384, scale), kernel=3, padding=1, tag="conv4"), L("relu"),
        L("conv", scaled(256, scale), kernel=3, padding=1, tag="conv5"), L("relu"), L("maxpool"),
        L("global-avg-pool"),
        L("dense", scaled(4096, scale), tag="fc6"), L("relu"),
        L("dense", scaled(4096, scale), tag="fc7"), L("relu"),
        L("dense", classes, tag="head"), L("softmax"),
    ]


MOBILENET_STACK = ((64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
                   (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1))


def _mobilenet_mini(classes, resolution, scale):
    _check_resolution("mobilenet-mini", resolution, 32)
    width = scaled(32, scale)
    layers = [LayerSpec("conv", width, kernel=3, stride=2, padding=1, tag="stem"), LayerSpec("relu")]
    for n, (base, stride) in enumerate(MOBILENET_STACK):
        layers += [
            LayerSpec("conv", width, kernel=3, stride=stride, padding=1, depthwise=True, tag=f"dw{n + 1}"),
            LayerSpec("relu"),
            LayerSpec("conv", scaled(base, scale), kernel=1, tag=f"pw{n + 1}"),
            LayerSpec("relu"),
        ]
        width = scaled(base, scale)
    layers += [LayerSpec("global-avg-pool"), LayerSpec("dense", classes, tag="head"), LayerSpec("softmax")]
    return layers


_BASELINE_BUILDERS = {
    "alexnet-mini": _alexnet_mini,
    "mobilenet-mini": _mobilenet_mini,
    "vgg16-mini": _vgg16_mini,
}


def build_baseline(name: str, classes: int = 3, input_resolution: int = 512, width_scale=1) -> ModelSpec:
    if name not in _BASELINE_BUILDERS:
        raise ValueError(f"unknown baseline {name!r}; expected one of {', '.join(BASELINES)}")
    scale = parse_scale(width_scale)
    layers = _BASELINE_BUILDERS[name](classes, input_resolution, scale)
    return ModelSpec(name, classes, input_resolution, scale, tuple(layers))


def build(arch: str, classes: int = 3, input_resolution: int = 512, width_scale=1) -> ModelSpec:
    """Any architecture by name: ``mrnet`` or one of the baselines."""
    if arch in ("mrnet", "mrnet-mini"):
        return build_mrnet(classes, input_resolution, width_scale)
    if arch in _BASELINE_BUILDERS:
        return build_baseline(arch, classes, input_resolution, width_scale)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCHITECTURES)}")


def receptive_extent(layers: Iterable[LayerSpec]) -> int:
    """Receptive-field extent of a stride-1 conv stack along one axis."""
    extent = 1
    for layer in layers:
        if layer.kind == "conv":
            if layer.stride != 1:
                raise ValueError("receptive_extent handles stride-1 stacks only")
            extent += layer.dilation * (layer.kernel - 1)
    return extent


def summary(spec: ModelSpec) -> str:
    lines = [f"{spec.name}  classes={spec.classes}  resolution={spec.input_resolution}  "
             f"width_scale={spec.width_scale}"]
    pshapes = param_shapes(spec)
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes)):
        n = sum(math.prod(s) for name, s in pshapes.items() if name.split(".")[0] == str(i))
        extra = []
        if layer.kind == "conv":
            extra.append(f"k={layer.kernel} s={layer.stride} p={layer.padding} d={layer.dilation}")
            if layer.depthwise:
                extra.append("depthwise")
        if layer.kind == "concat-skip":
            extra.append(f"from={layer.skip}")
        label = f"{layer.kind}{'[' + layer.tag + ']' if layer.tag else ''}"
        lines.append(f"{i:4d}  {label:<28} {' '.join(extra):<24} {'x'.join(map(str, shape)):<14} {n:>12,d}")
    lines.append(f"Total parameters: {param_count(spec):,d}")
    return "\n".join(lines)
