"""Multi-scale backbone, top-down fusion, context enhancement, and heads.

The backbone is a small stack of conv blocks, one per pyramid level: a
stride-2 stem followed by [3x3 conv -> ReLU -> 3x3 stride-s conv -> ReLU]
blocks whose second conv steps down to each level's stride.  Enabled by
config, a top-down pathway enriches each level with the one above it
(1x1 smooth then 2x transposed-conv upsample, fused by addition), and a
context module widens the receptive field by splitting channels into three
branches of 1/2/3 stacked 3x3 convolutions with dilations 1/2/3.

Two parallel head subnets (classification and box regression), shared
across levels, map each feature map to per-cell logits and 4-vector
regression deltas.

Forward passes optionally record every primitive's input in a cache dict;
the hand-written backward passes replay the chain in reverse from that
cache.  Parameters live in a flat name -> array dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import (ConvSpec, ShapeError, add_elementwise, concat_channels,
                      conv_backward, conv_forward, relu_backward, relu_forward,
                      split_channels)


@dataclass(frozen=True)
class PyramidConfig:
    input_size: int = 128
    strides: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    channels: int = 96
    backbone_channels: int = 48
    head_channels: int = 32
    num_classes: int = 1
    cem_enabled: bool = True
    fpn_enabled: bool = True

    def __post_init__(self) -> None:
        if self.input_size < 1:
            raise ShapeError(f"input_size must be positive, got {self.input_size}")
        if not self.strides:
            raise ShapeError("strides must be non-empty")
        prev = 0
        for s in self.strides:
            if s <= prev:
                raise ShapeError(f"strides must be strictly increasing, got {self.strides}")
            if self.input_size % s != 0:
                raise ShapeError(f"input_size {self.input_size} not divisible by stride {s}")
            prev = s
        if self.strides[0] % 2 != 0:
            raise ShapeError(f"first stride must be even (stem halves once), got {self.strides[0]}")
        prev = 2
        for s in self.strides:
            if s % prev != 0:
                raise ShapeError(f"stride {s} not an integer multiple of previous level {prev}")
            prev = s
        for name in ("channels", "backbone_channels", "head_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.backbone_channels % 2 != 0:
            raise ShapeError(f"backbone_channels must be even, got {self.backbone_channels}")
        if self.cem_enabled and self.channels % 3 != 0:
            raise ShapeError(f"channels must divide into 3 CEM branches, got {self.channels}")

    @property
    def k(self) -> int:
        return len(self.strides)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in self.strides)


@dataclass
class HeadOutputs:
    cls: list[np.ndarray]   # per level (n, num_classes, H, W)
    reg: list[np.ndarray]   # per level (n, 4, H, W)


def layer_specs(cfg: PyramidConfig) -> dict[str, ConvSpec]:
    """Every named convolution of the network as a ConvSpec."""
    bc, ch, hc = cfg.backbone_channels, cfg.channels, cfg.head_channels
    specs: dict[str, ConvSpec] = {}
    specs["stem"] = ConvSpec(3, bc // 2, 3, stride=2, padding=1)
    prev_c, prev_s = bc // 2, 2
    for l, s in enumerate(cfg.strides):
        specs[f"block{l}.c1"] = ConvSpec(prev_c, bc, 3, stride=1, padding=1)
        specs[f"block{l}.c2"] = ConvSpec(bc, ch, 3, stride=s // prev_s, padding=1)
        prev_c, prev_s = ch, s
    if cfg.fpn_enabled:
        for i in range(cfg.k - 1):
            specs[f"fuse{i}.smooth"] = ConvSpec(ch, ch, 1)
            specs[f"fuse{i}.up"] = ConvSpec(ch, ch, 4, stride=2, padding=1,
                                            transposed=True)
    if cfg.cem_enabled:
        b3 = ch // 3
        for b in (1, 2, 3):
            for j in range(b):
                specs[f"cem.b{b}.c{j}"] = ConvSpec(b3, b3, 3, padding=b, dilation=b)
    for sub, out in (("cls", cfg.num_classes), ("reg", 4)):
        specs[f"head.{sub}.c0"] = ConvSpec(ch, hc, 3, padding=1)
        specs[f"head.{sub}.c1"] = ConvSpec(hc, hc, 3, padding=1)
        specs[f"head.{sub}.out"] = ConvSpec(hc, out, 1)
    return specs


def init_params(cfg: PyramidConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform weights, zero biases, and a low-prior
    classification output bias to keep early focal loss stable."""
    params: dict[str, np.ndarray] = {}
    for name, spec in layer_specs(cfg).items():
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        a = 1.0 / math.sqrt(fan_in)
        params[name + ".w"] = rng.uniform(-a, a, spec.weight_shape).astype(dtype)
        params[name + ".b"] = np.zeros(spec.out_channels, dtype=dtype)
    prior = 0.01
    params["head.cls.out.b"][:] = math.log(prior / (1.0 - prior))
    return params


def param_count(cfg: PyramidConfig) -> int:
    return sum(spec.in_channels * spec.out_channels * spec.kernel ** 2
               + spec.out_channels for spec in layer_specs(cfg).values())


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in params.items()}


# -- primitive wrappers that thread the backward cache ----------------------

def _conv(params, specs, pname, x, cache, ckey):
    if cache is not None:
        cache[ckey] = x
    return conv_forward(x, params[pname + ".w"], params[pname + ".b"], specs[pname])


def _conv_bwd(params, specs, grads, pname, gy, cache, ckey):
    gx, gw, gb = conv_backward(cache[ckey], params[pname + ".w"], specs[pname], gy)
    grads[pname + ".w"] += gw
    grads[pname + ".b"] += gb
    return gx


def _relu(x, cache, ckey):
    if cache is not None:
        cache[ckey] = x
    return relu_forward(x)


def _relu_bwd(gy, cache, ckey):
    return relu_backward(cache[ckey], gy)


# -- backbone ----------------------------------------------------------------

def backbone_forward(image: np.ndarray, params: dict, cfg: PyramidConfig,
                     cache: dict | None = None) -> list[np.ndarray]:
    n, c, h, w = image.shape
    if (h, w) != (cfg.input_size, cfg.input_size) or c != 3:
        raise ShapeError(f"backbone expects (n, 3, {cfg.input_size}, "
                         f"{cfg.input_size}) input, got {tuple(image.shape)}")
    specs = layer_specs(cfg)
    x = _relu(_conv(params, specs, "stem", image, cache, "stem"), cache, "stem#r")
    levels = []
    for l in range(cfg.k):
        x = _relu(_conv(params, specs, f"block{l}.c1", x, cache, f"block{l}.c1"),
                  cache, f"block{l}.c1#r")
        x = _relu(_conv(params, specs, f"block{l}.c2", x, cache, f"block{l}.c2"),
                  cache, f"block{l}.c2#r")
        levels.append(x)
    return levels


def backbone_backward(g_levels: list[np.ndarray], params: dict,
                      cfg: PyramidConfig, cache: dict, grads: dict) -> None:
    specs = layer_specs(cfg)
    gx = None
    for l in range(cfg.k - 1, -1, -1):
        g = g_levels[l] if gx is None else g_levels[l] + gx
        g = _relu_bwd(g, cache, f"block{l}.c2#r")
        g = _conv_bwd(params, specs, grads, f"block{l}.c2", g, cache, f"block{l}.c2")
        g = _relu_bwd(g, cache, f"block{l}.c1#r")
        gx = _conv_bwd(params, specs, grads, f"block{l}.c1", g, cache, f"block{l}.c1")
    g = _relu_bwd(gx, cache, "stem#r")
    _conv_bwd(params, specs, grads, "stem", g, cache, "stem")


# -- top-down fusion ---------------------------------------------------------

def topdown_fuse(levels: list[np.ndarray], params: dict, cfg: PyramidConfig,
                 cache: dict | None = None) -> list[np.ndarray]:
    """Enrich each level with the raw level above: smooth (1x1), upsample
    (2x transposed conv), then add.  The top level passes through."""
    if not cfg.fpn_enabled:
        raise ShapeError("topdown_fuse called with fpn disabled")
    for lo, hi in zip(levels[:-1], levels[1:]):
        if lo.shape[2] != 2 * hi.shape[2] or lo.shape[3] != 2 * hi.shape[3]:
            raise ShapeError(f"adjacent levels must differ by exactly 2x, got "
                             f"{lo.shape[2:]} vs {hi.shape[2:]}")
    specs = layer_specs(cfg)
    fused = [None] * cfg.k
    fused[cfg.k - 1] = levels[cfg.k - 1]
    for i in range(cfg.k - 2, -1, -1):
        u = _conv(params, specs, f"fuse{i}.smooth", levels[i + 1], cache,
                  f"fuse{i}.smooth")
        u = _conv(params, specs, f"fuse{i}.up", u, cache, f"fuse{i}.up")
        fused[i] = add_elementwise(levels[i], u)
    return fused


def topdown_fuse_backward(g_fused: list[np.ndarray], params: dict,
                          cfg: PyramidConfig, cache: dict, grads: dict
                          ) -> list[np.ndarray]:
    specs = layer_specs(cfg)
    g_levels = [g.copy() for g in g_fused]
    for i in range(cfg.k - 2, -1, -1):
        g = _conv_bwd(params, specs, grads, f"fuse{i}.up", g_fused[i], cache,
                      f"fuse{i}.up")
        g = _conv_bwd(params, specs, grads, f"fuse{i}.smooth", g, cache,
                      f"fuse{i}.smooth")
        g_levels[i + 1] += g
    return g_levels


# -- context enhancement -----------------------------------------------------

def cem_forward(x: np.ndarray, params: dict, cfg: PyramidConfig,
                cache: dict | None = None, tag: str = "") -> np.ndarray:
    """Split channels into three branches of increasingly deep dilated
    convolutions, then concatenate.  Shape-preserving."""
    if not cfg.cem_enabled:
        raise ShapeError("cem_forward called with cem disabled")
    specs = layer_specs(cfg)
    parts = split_channels(x, 3)
    outs = []
    for b, part in zip((1, 2, 3), parts):
        y = _conv(params, specs, f"cem.b{b}.c0", part, cache, f"{tag}cem.b{b}.c0")
        for j in range(1, b):
            y = _relu(y, cache, f"{tag}cem.b{b}.c{j}#r")
            y = _conv(params, specs, f"cem.b{b}.c{j}", y, cache, f"{tag}cem.b{b}.c{j}")
        outs.append(y)
    return concat_channels(outs)


def cem_backward(gy: np.ndarray, params: dict, cfg: PyramidConfig,
                 cache: dict, grads: dict, tag: str = "") -> np.ndarray:
    specs = layer_specs(cfg)
    g_parts = split_channels(gy, 3)
    g_ins = []
    for b, g in zip((1, 2, 3), g_parts):
        for j in range(b - 1, 0, -1):
            g = _conv_bwd(params, specs, grads, f"cem.b{b}.c{j}", g, cache,
                          f"{tag}cem.b{b}.c{j}")
            g = _relu_bwd(g, cache, f"{tag}cem.b{b}.c{j}#r")
        g = _conv_bwd(params, specs, grads, f"cem.b{b}.c0", g, cache,
                      f"{tag}cem.b{b}.c0")
        g_ins.append(g)
    return concat_channels(g_ins)


# -- detection heads ----------------------------------------------------------

def heads_forward(levels: list[np.ndarray], params: dict, cfg: PyramidConfig,
                  cache: dict | None = None) -> HeadOutputs:
    """Run the shared classification / regression subnets on every level."""
    specs = layer_specs(cfg)
    cls_out, reg_out = [], []
    for l, x in enumerate(levels):
        for sub, sink in (("cls", cls_out), ("reg", reg_out)):
            t = _relu(_conv(params, specs, f"head.{sub}.c0", x, cache,
                            f"L{l}.head.{sub}.c0"), cache, f"L{l}.head.{sub}.c0#r")
            t = _relu(_conv(params, specs, f"head.{sub}.c1", t, cache,
                            f"L{l}.head.{sub}.c1"), cache, f"L{l}.head.{sub}.c1#r")
            sink.append(_conv(params, specs, f"head.{sub}.out", t, cache,
                              f"L{l}.head.{sub}.out"))
    return HeadOutputs(cls=cls_out, reg=reg_out)


def heads_backward(g_cls: list[np.ndarray], g_reg: list[np.ndarray],
                   params: dict, cfg: PyramidConfig, cache: dict, grads: dict
                   ) -> list[np.ndarray]:
    specs = layer_specs(cfg)
    g_levels = []
    for l in range(cfg.k):
        g_level = None
        for sub, gy in (("cls", g_cls[l]), ("reg", g_reg[l])):
            g = _conv_bwd(params, specs, grads, f"head.{sub}.out", gy, cache,
                          f"L{l}.head.{sub}.out")
            g = _relu_bwd(g, cache, f"L{l}.head.{sub}.c1#r")
            g = _conv_bwd(params, specs, grads, f"head.{sub}.c1", g, cache,
                          f"L{l}.head.{sub}.c1")
            g = _relu_bwd(g, cache, f"L{l}.head.{sub}.c0#r")
            g = _conv_bwd(params, specs, grads, f"head.{sub}.c0", g, cache,
                          f"L{l}.head.{sub}.c0")
            g_level = g if g_level is None else g_level + g
        g_levels.append(g_level)
    return g_levels


# -- whole network ------------------------------------------------------------

def network_forward(image: np.ndarray, params: dict, cfg: PyramidConfig,
                    want_cache: bool = False
                    ) -> tuple[HeadOutputs, dict | None]:
    cache: dict | None = {} if want_cache else None
    levels = backbone_forward(image, params, cfg, cache)
    if cfg.fpn_enabled:
        levels = topdown_fuse(levels, params, cfg, cache)
    if cfg.cem_enabled:
        levels = [cem_forward(x, params, cfg, cache, tag=f"L{l}.")
                  for l, x in enumerate(levels)]
    return heads_forward(levels, params, cfg, cache), cache


def network_backward(g_cls: list[np.ndarray], g_reg: list[np.ndarray],
                     params: dict, cfg: PyramidConfig, cache: dict
                     ) -> dict[str, np.ndarray]:
    grads = zero_grads(params)
    g_levels = heads_backward(g_cls, g_reg, params, cfg, cache, grads)
    if cfg.cem_enabled:
        g_levels = [cem_backward(g, params, cfg, cache, grads, tag=f"L{l}.")
                    for l, g in enumerate(g_levels)]
    if cfg.fpn_enabled:
        g_levels = topdown_fuse_backward(g_levels, params, cfg, cache, grads)
    backbone_backward(g_levels, params, cfg, cache, grads)
    return grads
