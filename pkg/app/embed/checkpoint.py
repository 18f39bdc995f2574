# app/embed/checkpoint.py
"""
Checkpoint file: little-endian binary.

    magic        8 bytes  b"BIOPTCK1"
    n_layers     u32
    final_relu   u8
    per layer    6 x u32  (kernel_size, cin, cout, stride, dilation, reserved=0)
    kernels      float64 data in layer order, each kh x kw x cin x cout row-major
    generator    4 bytes  b"WGEN", u32 C, then W (2C x C) and b (C) as float64
"""
import logging
import os
import struct
from typing import Tuple

import numpy as np

from app.embed.network import EmbedParams, EmbedSpec
from app.errors import FormatError
from app.initmod.init_module import WeightGenerator

logger = logging.getLogger(__name__)

MAGIC = b"BIOPTCK1"
GEN_MAGIC = b"WGEN"
_F8 = np.dtype("<f8")


def save_checkpoint(path: str, params: EmbedParams, gen: WeightGenerator) -> None:
    spec = params.spec
    if gen.channels != spec.out_channels:
        raise ValueError(f"generator has {gen.channels} channels but the network outputs {spec.out_channels}")
    parts = [MAGIC, struct.pack("<IB", spec.n_layers, int(spec.final_relu))]
    for layer in range(spec.n_layers):
        parts.append(struct.pack(
            "<6I",
            spec.kernel_sizes[layer],
            spec.widths[layer],
            spec.widths[layer + 1],
            spec.strides[layer],
            spec.dilations[layer],
            0,
        ))
    for kernel in params.kernels:
        parts.append(np.ascontiguousarray(kernel, dtype=_F8).tobytes())
    parts.append(GEN_MAGIC + struct.pack("<I", gen.channels))
    parts.append(np.ascontiguousarray(gen.W, dtype=_F8).tobytes())
    parts.append(np.ascontiguousarray(gen.b, dtype=_F8).tobytes())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(count * _F8.itemsize), dtype=_F8).reshape(shape)
        return arr.astype(np.float64)


def load_checkpoint(path: str) -> Tuple[EmbedParams, WeightGenerator]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e

    reader = _Reader(data, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    n_layers, final_relu = reader.unpack("<IB")
    if n_layers < 1:
        raise FormatError(f"{path}: checkpoint declares {n_layers} layers")
    layers = [reader.unpack("<6I") for _ in range(n_layers)]
    widths = [layers[0][1]]
    for layer, (k, cin, cout, _, _, _) in enumerate(layers):
        if cin != widths[-1]:
            raise FormatError(f"{path}: layer {layer} input width {cin} does not follow previous width {widths[-1]}")
        widths.append(cout)
    try:
        spec = EmbedSpec(
            widths=tuple(widths),
            kernel_sizes=tuple(l[0] for l in layers),
            strides=tuple(l[3] for l in layers),
            dilations=tuple(l[4] for l in layers),
            final_relu=bool(final_relu),
        )
    except ValueError as e:
        raise FormatError(f"{path}: invalid architecture header: {e}") from e

    kernels = [reader.floats((k, k, cin, cout)) for (k, cin, cout, _, _, _) in layers]
    if reader.take(len(GEN_MAGIC)) != GEN_MAGIC:
        raise FormatError(f"{path}: missing weight generator section")
    (channels,) = reader.unpack("<I")
    if channels != spec.out_channels:
        raise FormatError(f"{path}: generator has {channels} channels, network outputs {spec.out_channels}")
    W = reader.floats((2 * channels, channels))
    b = reader.floats((channels,))
    if reader.pos != len(data):
        raise FormatError(f"{path}: {len(data) - reader.pos} trailing bytes after generator section")
    try:
        params = EmbedParams(spec, kernels)
        gen = WeightGenerator(W, b)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    logger.debug("loaded checkpoint %s (%d layers, C=%d)", path, n_layers, channels)
    return params, gen
