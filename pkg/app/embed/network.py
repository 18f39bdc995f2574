# app/embed/network.py
"""
Embedding network: a bias-free stack of conv + ReLU blocks with manual backprop.

Default layout is conv3x3 blocks where the first two layers use stride 2 (downsample 4) and
the final layer is linear (no ReLU) so prototypes keep signed coordinates.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app.numerics.kernels import conv2d, conv2d_backward, relu, relu_backward
from app.utils.rng import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedSpec:
    """Architecture of the embedding network. widths[0] is the image channel count."""
    widths: Tuple[int, ...]
    kernel_sizes: Tuple[int, ...] = ()
    strides: Tuple[int, ...] = ()
    dilations: Tuple[int, ...] = ()
    final_relu: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("embed spec needs at least an input width and one layer width")
        if any(w < 1 for w in widths):
            raise ValueError(f"embed widths must be >= 1, got {widths}")
        n_layers = len(widths) - 1
        kernel_sizes = tuple(self.kernel_sizes) or (3,) * n_layers
        strides = tuple(self.strides) or tuple(2 if i < 2 else 1 for i in range(n_layers))
        dilations = tuple(self.dilations) or (1,) * n_layers
        for name, values in (("kernel_sizes", kernel_sizes), ("strides", strides), ("dilations", dilations)):
            if len(values) != n_layers:
                raise ValueError(f"{name} has {len(values)} entries but the spec has {n_layers} layers")
            if any(v < 1 for v in values):
                raise ValueError(f"{name} must be >= 1, got {values}")
        if any(k % 2 == 0 for k in kernel_sizes):
            raise ValueError(f"kernel sizes must be odd, got {kernel_sizes}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in kernel_sizes))
        object.__setattr__(self, "strides", tuple(int(s) for s in strides))
        object.__setattr__(self, "dilations", tuple(int(d) for d in dilations))
        object.__setattr__(self, "final_relu", bool(self.final_relu))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    def padding(self, layer: int) -> int:
        return self.dilations[layer] * (self.kernel_sizes[layer] // 2)

    def feature_size(self, h: int, w: int) -> Tuple[int, int]:
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"image size {h}x{w} is not divisible by the downsample factor {self.downsample}")
        return h // self.downsample, w // self.downsample


@dataclass
class EmbedParams:
    spec: EmbedSpec
    kernels: List[np.ndarray]

    def __post_init__(self):
        if len(self.kernels) != self.spec.n_layers:
            raise ValueError(f"expected {self.spec.n_layers} kernels, got {len(self.kernels)}")
        for layer, k in enumerate(self.kernels):
            expected = self.expected_shape(layer)
            if k.shape != expected:
                raise ValueError(f"layer {layer} kernel has shape {k.shape}, expected {expected}")
            if not np.all(np.isfinite(k)):
                raise ValueError(f"layer {layer} kernel has non-finite entries")

    def expected_shape(self, layer: int) -> Tuple[int, int, int, int]:
        k = self.spec.kernel_sizes[layer]
        return (k, k, self.spec.widths[layer], self.spec.widths[layer + 1])


@dataclass
class EmbedGrads:
    kernels: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: EmbedParams) -> "EmbedGrads":
        return cls([np.zeros_like(k) for k in params.kernels])

    def add_(self, other: "EmbedGrads") -> "EmbedGrads":
        for mine, theirs in zip(self.kernels, other.kernels):
            mine += theirs
        return self

    def scaled(self, factor: float) -> "EmbedGrads":
        return EmbedGrads([k * factor for k in self.kernels])


@dataclass
class EmbedCache:
    """Intermediates kept by embed_forward for the backward pass."""
    params: EmbedParams
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_acts: List[np.ndarray] = field(default_factory=list)
    output_shape: Optional[Tuple[int, ...]] = None


def embed_init(spec: EmbedSpec, seed: int) -> EmbedParams:
    """Fan-in scaled uniform init: entries drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    if spec is None or spec.n_layers < 1:
        raise ValueError("embed spec is empty")
    kernels = []
    for layer in range(spec.n_layers):
        k = spec.kernel_sizes[layer]
        cin, cout = spec.widths[layer], spec.widths[layer + 1]
        bound = math.sqrt(6.0 / (k * k * cin))
        rng = make_rng(seed, "embed", layer)
        kernels.append(rng.uniform(-bound, bound, size=(k, k, cin, cout)))
    logger.debug("initialized %d-layer embed net (widths=%s, seed=%d)", spec.n_layers, spec.widths, seed)
    return EmbedParams(spec, kernels)


def embed_forward(img: np.ndarray, params: EmbedParams) -> Tuple[np.ndarray, EmbedCache]:
    """Map an H x W x Cin image to an (H/d) x (W/d) x C feature map."""
    img = np.asarray(img, dtype=np.float64)
    spec = params.spec
    if img.ndim != 3 or img.shape[2] != spec.widths[0]:
        raise ValueError(f"image must be H x W x {spec.widths[0]}, got shape {img.shape}")
    spec.feature_size(img.shape[0], img.shape[1])

    cache = EmbedCache(params=params)
    h = img
    for layer, kernel in enumerate(params.kernels):
        cache.inputs.append(h)
        z = conv2d(h, kernel, stride=spec.strides[layer], pad=spec.padding(layer), dilation=spec.dilations[layer])
        cache.pre_acts.append(z)
        last = layer == spec.n_layers - 1
        h = relu(z) if (not last or spec.final_relu) else z
    cache.output_shape = h.shape
    return h, cache


def embed_backward(cache: EmbedCache, grad_feat: np.ndarray) -> EmbedGrads:
    """Gradient of <grad_feat, embed_forward(img)> with respect to every kernel."""
    grad_feat = np.asarray(grad_feat, dtype=np.float64)
    params = cache.params
    spec = params.spec
    if cache.output_shape is None or len(cache.inputs) != spec.n_layers:
        raise ValueError("embed cache is incomplete; run embed_forward first")
    if grad_feat.shape != cache.output_shape:
        raise ValueError(f"grad_feat shape {grad_feat.shape} does not match forward output {cache.output_shape}")

    grads: List[Optional[np.ndarray]] = [None] * spec.n_layers
    g = grad_feat
    for layer in reversed(range(spec.n_layers)):
        last = layer == spec.n_layers - 1
        if not last or spec.final_relu:
            g = relu_backward(cache.pre_acts[layer], g)
        g, grads[layer] = conv2d_backward(
            cache.inputs[layer],
            params.kernels[layer],
            g,
            stride=spec.strides[layer],
            pad=spec.padding(layer),
            dilation=spec.dilations[layer],
        )
    return EmbedGrads(grads)

