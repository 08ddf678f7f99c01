"""Parameterized building blocks: ResNeXt-style scale blocks, the ConvNeXt-style
aligner, 1x1 foreground estimators, the detection head, and synthetic frozen
encoder families."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, conv2d, group_norm


def derive_rng(seed, *tags):
    """Deterministic, platform-stable RNG derived from a seed and string tags."""
    h = hashlib.sha256(("/".join([str(seed)] + [str(t) for t in tags])).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def conv_init(rng, cout, cin, kh, kw):
    """He-style init for a conv weight."""
    fan_in = cin * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(np.float32)


def _gn_groups(channels, want=4):
    g = min(want, channels)
    while channels % g:
        g -= 1
    return g


class ConvLayer:
    """conv + optional groupnorm + activation, parameters registered in a store."""

    def __init__(self, store, name, cin, cout, k=3, stride=1, groups=1,
                 norm=True, act="relu", rng=None, zero_init=False, frozen=False,
                 bias=True):
        pad = k // 2
        if zero_init:
            wdata = np.zeros((cout, cin // groups, k, k), dtype=np.float32)
        else:
            wdata = conv_init(rng, cout, cin // groups, k, k)
        self.w = store.add(f"{name}.w", wdata, frozen=frozen)
        self.b = None
        if bias:
            self.b = store.add(f"{name}.b", np.zeros(cout, dtype=np.float32), frozen=frozen)
        self.stride = stride
        self.pad = pad
        self.act = act
        self.norm = None
        self.beta = None
        if norm:
            self.norm_groups = _gn_groups(cout)
            self.gamma = store.add(f"{name}.gamma", np.ones(cout, dtype=np.float32), frozen=frozen)
            if bias:
                self.beta = store.add(f"{name}.beta", np.zeros(cout, dtype=np.float32), frozen=frozen)
            self.norm = True

    def __call__(self, x):
        y = conv2d(x, self.w.tensor, self.b.tensor if self.b else None,
                   stride=self.stride, padding=self.pad)
        if self.norm:
            beta = (self.beta.tensor if self.beta
                    else T.Tensor(np.zeros(self.gamma.data.size, dtype=y.data.dtype)))
            y = group_norm(y, self.norm_groups, self.gamma.tensor, beta)
        if self.act:
            y = T.activation(self.act, y)
        return y

    def param_count(self):
        n = self.w.data.size + (self.b.data.size if self.b else 0)
        if self.norm:
            n += self.gamma.data.size + (self.beta.data.size if self.beta else 0)
        return n


class ResNeXtBlock:
    """Bottleneck with grouped 3x3 conv: 1x1 reduce, grouped 3x3 (stride here),
    1x1 expand, residual with a strided 1x1 projection when shapes change."""

    def __init__(self, store, name, cin, cout, stride=1, cardinality=4, rng=None,
                 frozen=False):
        cmid = max(cout // 2, cardinality)
        while cmid % cardinality:
            cmid += 1
        self.reduce = ConvLayer(store, f"{name}.reduce", cin, cmid, k=1, rng=rng, frozen=frozen)
        self.grouped = ConvLayer(store, f"{name}.grouped", cmid, cmid, k=3, stride=stride,
                                 groups=cardinality, rng=rng, frozen=frozen)
        self.expand = ConvLayer(store, f"{name}.expand", cmid, cout, k=1, act=None,
                                rng=rng, frozen=frozen)
        self.project = None
        if cin != cout or stride != 1:
            self.project = ConvLayer(store, f"{name}.project", cin, cout, k=1, stride=stride,
                                     act=None, rng=rng, frozen=frozen)

    def __call__(self, x):
        y = self.expand(self.grouped(self.reduce(x)))
        short = self.project(x) if self.project is not None else x
        return T.relu(y + short)


class AlignerBlock:
    """ConvNeXt-style block: depthwise 7x7, norm, 1x1 expand 4x, gelu, 1x1
    project, residual."""

    def __init__(self, store, name, c, rng=None, frozen=False):
        self.dw = ConvLayer(store, f"{name}.dw", c, c, k=7, groups=c, norm=True, act=None,
                            rng=rng, frozen=frozen)
        self.expand = ConvLayer(store, f"{name}.expand", c, 4 * c, k=1, norm=False,
                                act="gelu", rng=rng, frozen=frozen)
        self.project = ConvLayer(store, f"{name}.project", 4 * c, c, k=1, norm=False,
                                 act=None, rng=rng, frozen=frozen)

    def __call__(self, x):
        return self.project(self.expand(self.dw(x))) + x


class Aligner:
    """Maps a family's (C_k,H,W) feature map into the unified (C,H,W) space:
    `depth` ConvNeXt-style blocks at C_k followed by a 1x1 channel projection."""

    def __init__(self, store, name, c_in, c_out, depth=1, rng=None, frozen=False):
        self.c_in = c_in
        self.c_out = c_out
        self.blocks = [AlignerBlock(store, f"{name}.block{i}", c_in, rng=rng, frozen=frozen)
                       for i in range(depth)]
        self.proj = ConvLayer(store, f"{name}.proj", c_in, c_out, k=1, norm=False, act=None,
                              rng=rng, frozen=frozen)

    def __call__(self, x):
        if x.data.shape[0] != self.c_in:
            raise ValueError(f"aligner expects {self.c_in} channels, got {x.data.shape[0]}")
        for b in self.blocks:
            x = b(x)
        return self.proj(x)


class ForegroundEstimator:
    """Single 1x1 conv producing a per-cell occupancy logit."""

    def __init__(self, store, name, cin, rng=None, frozen=False):
        self.conv = ConvLayer(store, name, cin, 1, k=1, norm=False, act=None,
                              rng=rng, frozen=frozen)

    def __call__(self, x):
        return self.conv(x)


class DetectionHead:
    """Three 1x1 conv branches over the fused map: class logit (1), box
    regression (5: dx, dy, log w, log l, theta residual), direction logits (2)."""

    def __init__(self, store, name, cin, rng=None, frozen=False):
        self.cls = ConvLayer(store, f"{name}.cls", cin, 1, k=1, norm=False, act=None, rng=rng,
                             frozen=frozen)
        self.reg = ConvLayer(store, f"{name}.reg", cin, 5, k=1, norm=False, act=None, rng=rng,
                             frozen=frozen)
        self.dir = ConvLayer(store, f"{name}.dir", cin, 2, k=1, norm=False, act=None, rng=rng,
                             frozen=frozen)

    def __call__(self, h):
        return self.cls(h), self.reg(h), self.dir(h)


@dataclass
class FamilySpec:
    """Synthetic frozen encoder family: a small convnet plus a sensor signature."""
    type_id: str
    out_channels: int
    hidden: list = field(default_factory=lambda: [8])
    kernel: int = 3
    activation: str = "relu"
    seed: int = 0
    noise: float = 0.0           # additive gaussian sigma on the raster
    blur: int = 0                # uniform blur kernel size (0 = none)
    range_m: float = 1e9         # sensing radius; farther cells are zeroed
    fpn: float = 0.0             # fixed-pattern noise amplitude (per-family
                                 # deterministic additive field, sensor-frame)


class EncoderFamily:
    """Frozen convnet built deterministically from a FamilySpec."""

    IN_CHANNELS = 2

    def __init__(self, store, spec: FamilySpec, frozen=True):
        self.spec = spec
        self.type_id = spec.type_id
        rng = derive_rng(spec.seed, "encoder", spec.type_id)
        widths = [self.IN_CHANNELS] + list(spec.hidden) + [spec.out_channels]
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.layers.append(ConvLayer(
                store, f"enc.{spec.type_id}.layer{i}", a, b, k=spec.kernel,
                norm=not last, act=None if last else spec.activation,
                rng=rng, frozen=frozen))

    def __call__(self, raw):
        x = raw
        for layer in self.layers:
            x = layer(x)
        return x
