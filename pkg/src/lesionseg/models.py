"""UNet 2D and UNet++ 2D graph builders.

Channel plan: level ``i`` has ``base_channels * 2**i`` channels.  Every
node is the usual pair of 3x3 same-padded conv + relu, upsampling is a 2x2
stride-2 transposed convolution and the head is a 1x1 conv followed by a
sigmoid.  UNet++ has a single head on ``X(0, depth)`` (no deep supervision).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Concat, Conv, ConvTranspose, Graph, MaxPool, ParamStore, ReLU, Sigmoid, forward

ARCHITECTURES = ("unet", "unetpp")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("base_channels and in_channels must be >= 1")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level


# ~800k-parameter configuration: 758,571 parameters for unet, 884,001 for unetpp
LARGE = ModelConfig(depth=4, base_channels=10)


def _conv_block(g: Graph, name: str, src: str, c_in: int, c_out: int) -> str:
    a = g.add(f"{name}.conv1", Conv(c_in, c_out), src)
    a = g.add(f"{name}.relu1", ReLU(), a)
    a = g.add(f"{name}.conv2", Conv(c_out, c_out), a)
    return g.add(f"{name}.relu2", ReLU(), a)


def _encoder(g: Graph, cfg: ModelConfig) -> list[str]:
    """Encoder column X(i, 0) for i = 0..depth (the last one is the bottleneck)."""
    outs = []
    src, c_in = "input", cfg.in_channels
    for i in range(cfg.depth + 1):
        if i:
            src = g.add(f"pool{i - 1}", MaxPool(), outs[-1])
        outs.append(_conv_block(g, f"X{i}_0", src, c_in, cfg.width(i)))
        c_in = cfg.width(i)
    return outs


def _head(g: Graph, src: str, c_in: int) -> Graph:
    h = g.add("head.conv", Conv(c_in, 1, k=1), src)
    g.add("head.sigmoid", Sigmoid(), h)
    return g.freeze()


def build_unet2d(cfg: ModelConfig) -> Graph:
    if cfg.arch != "unet":
        raise ValueError(f"build_unet2d needs arch='unet', got {cfg.arch!r}")
    g = Graph(cfg.in_channels, cfg.depth, "unet")
    enc = _encoder(g, cfg)
    up_src = enc[cfg.depth]
    for i in range(cfg.depth - 1, -1, -1):
        j = cfg.depth - i
        up = g.add(f"up{i + 1}_{j - 1}", ConvTranspose(cfg.width(i + 1), cfg.width(i)), up_src)
        cat = g.add(f"cat{i}_{j}", Concat(), enc[i], up)
        up_src = _conv_block(g, f"X{i}_{j}", cat, 2 * cfg.width(i), cfg.width(i))
    return _head(g, up_src, cfg.width(0))


def build_unetpp2d(cfg: ModelConfig) -> Graph:
    """Nested UNet: ``X(i,j) = block(concat(X(i,0..j-1), up(X(i+1,j-1))))``."""
    if cfg.arch != "unetpp":
        raise ValueError(f"build_unetpp2d needs arch='unetpp', got {cfg.arch!r}")
    g = Graph(cfg.in_channels, cfg.depth, "unetpp")
    X = {(i, 0): name for i, name in enumerate(_encoder(g, cfg))}
    for j in range(1, cfg.depth + 1):
        for i in range(cfg.depth - j + 1):
            w = cfg.width(i)
            up = g.add(f"up{i + 1}_{j - 1}", ConvTranspose(cfg.width(i + 1), w), X[(i + 1, j - 1)])
            cat = g.add(f"cat{i}_{j}", Concat(), *[X[(i, k)] for k in range(j)], up)
            X[(i, j)] = _conv_block(g, f"X{i}_{j}", cat, (j + 1) * w, w)
    return _head(g, X[(0, cfg.depth)], cfg.width(0))


def build(cfg: ModelConfig) -> Graph:
    return build_unet2d(cfg) if cfg.arch == "unet" else build_unetpp2d(cfg)


def count_params(params: ParamStore) -> int:
    """Number of scalar weights and biases (momentum buffers excluded)."""
    return int(sum(e.weight.size + e.bias.size for e in params))


def count_params_for(cfg: ModelConfig) -> int:
    """Parameter count of ``cfg`` computed from layer shapes alone."""
    total = 0
    for node in build(cfg).param_nodes():
        w, b = node.layer.param_shapes()
        total += int(np.prod(w)) + int(np.prod(b))
    return total


def predict(model, params: ParamStore, batch: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask (uint8): 1 where the probability is >= ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    prob = forward(model, params, batch, keep_cache=False)
    return (prob >= threshold).astype(np.uint8)
