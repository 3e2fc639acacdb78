"""Layers, parameter storage, SGD with momentum and the training loop.

A network is a static :class:`Graph` of named nodes evaluated in insertion
order.  Graphs are immutable; everything that changes during training lives
in a :class:`ParamStore` (weights, momentum buffers and the activation cache
left behind by the last forward pass).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)


class BackwardBeforeForward(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# -- layers -------------------------------------------------------------------
# Layers exchange channels-last [n, h, w, c] activations.


class Layer:
    """Base class; ``param_shapes`` is None for parameter-free layers."""

    kind = "layer"

    def param_shapes(self):
        return None

    def fan_in(self) -> int:
        return 1

    def forward(self, inputs, p):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, cache, upstream, p, need_input=True):
        """Return ``(input_grads, (grad_weight, grad_bias) or None)``."""
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"

    def __init__(self, c_in, c_out, k=3):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.padding = k // 2

    def param_shapes(self):
        return (self.c_out, self.c_in, self.k, self.k), (self.c_out,)

    def fan_in(self):
        return self.c_in * self.k * self.k

    def forward(self, inputs, p):
        (x,) = inputs
        out, rows = T.conv2d_forward_nhwc(x, T.KernelParams(p[0], p[1], 1, self.padding))
        return out, (x.shape, rows)

    def backward(self, cache, upstream, p, need_input=True):
        x_shape, rows = cache
        kp = T.KernelParams(p[0], p[1], 1, self.padding)
        gx, gw, gb = T.conv2d_backward_nhwc(x_shape, rows, kp, upstream, need_input)
        return [gx], (gw, gb)


class ConvTranspose(Layer):
    kind = "convtranspose"

    def __init__(self, c_in, c_out):
        self.c_in, self.c_out = c_in, c_out

    def param_shapes(self):
        return (self.c_out, self.c_in, 2, 2), (self.c_out,)

    def fan_in(self):
        # 2x2 stride-2 windows do not overlap: each output sees c_in inputs
        return self.c_in

    def forward(self, inputs, p):
        (x,) = inputs
        return T.convtranspose2_forward_nhwc(x, T.KernelParams(p[0], p[1], 2, 0)), x

    def backward(self, cache, upstream, p, need_input=True):
        gx, gw, gb = T.convtranspose2_backward_nhwc(cache, T.KernelParams(p[0], p[1], 2, 0), upstream)
        return [gx], (gw, gb)


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, inputs, p):
        return T.maxpool2_forward_nhwc(inputs[0])

    def backward(self, cache, upstream, p, need_input=True):
        return [T.maxpool2_backward_nhwc(cache, upstream)], None


class ReLU(Layer):
    kind = "relu"

    def forward(self, inputs, p):
        out = np.maximum(inputs[0], 0)
        return out, out

    def backward(self, cache, upstream, p, need_input=True):
        # relu(x) > 0 exactly where x > 0, so the output doubles as the mask
        return [upstream * (cache > 0)], None


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, inputs, p):
        out = T.sigmoid(inputs[0])
        return out, out

    def backward(self, cache, upstream, p, need_input=True):
        return [upstream * cache * (1 - cache)], None


class Concat(Layer):
    kind = "concat"

    def forward(self, inputs, p):
        return T.concat_channels(inputs, axis=3), [t.shape[3] for t in inputs]

    def backward(self, cache, upstream, p, need_input=True):
        return T.split_channels(upstream, cache, axis=3), None


# -- graph --------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]


class Graph:
    """Static DAG of layers.  The input is the pseudo-node ``"input"``."""

    def __init__(self, in_channels: int, depth: int, arch: str = ""):
        self.in_channels = in_channels
        self.depth = depth
        self.arch = arch
        self.nodes: list[Node] = []
        self._names = {"input"}
        self._frozen = False

    def add(self, name: str, layer: Layer, *inputs: str) -> str:
        if self._frozen:
            raise RuntimeError("graph is frozen")
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        for i in inputs:
            if i not in self._names:
                raise ValueError(f"node {name!r} consumes unknown node {i!r}")
        self.nodes.append(Node(name, layer, tuple(inputs)))
        self._names.add(name)
        return name

    def freeze(self) -> "Graph":
        self._frozen = True
        return self

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def param_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.layer.param_shapes() is not None]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


# -- parameters ---------------------------------------------------------------


@dataclass
class ParamEntry:
    layer_id: str
    weight: np.ndarray
    bias: np.ndarray
    vel_weight: np.ndarray
    vel_bias: np.ndarray


@dataclass
class ParamStore:
    entries: list[ParamEntry] = field(default_factory=list)
    cache: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def index(self) -> dict[str, ParamEntry]:
        return {e.layer_id: e for e in self.entries}

    @property
    def dtype(self):
        return self.entries[0].weight.dtype if self.entries else np.dtype(np.float64)

    def copy(self) -> "ParamStore":
        return ParamStore(
            [
                ParamEntry(e.layer_id, e.weight.copy(), e.bias.copy(), e.vel_weight.copy(), e.vel_bias.copy())
                for e in self.entries
            ]
        )

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(
            [
                ParamEntry(
                    e.layer_id,
                    e.weight.astype(dtype),
                    e.bias.astype(dtype),
                    e.vel_weight.astype(dtype),
                    e.vel_bias.astype(dtype),
                )
                for e in self.entries
            ]
        )

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of weights and biases."""
        if len(self) != len(other):
            return False
        return all(
            a.layer_id == b.layer_id
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self, other)
        )


def init_params(model, seed: int, dtype=np.float32, head_prior: float | None = None) -> ParamStore:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases.

    ``model`` is a :class:`Graph` or anything :func:`lesionseg.models.build`
    accepts.  ``head_prior`` sets the last layer's bias to ``logit(head_prior)``
    so the initial output is that foreground probability everywhere.
    """
    graph = _as_graph(model)
    rng = np.random.default_rng(seed)
    entries = []
    for node in graph.param_nodes():
        wshape, bshape = node.layer.param_shapes()
        std = math.sqrt(2.0 / node.layer.fan_in())
        w = (rng.standard_normal(wshape) * std).astype(dtype)
        b = np.zeros(bshape, dtype=dtype)
        entries.append(ParamEntry(node.name, w, b, np.zeros_like(w), np.zeros_like(b)))
    if head_prior is not None and entries:
        entries[-1].bias[...] = math.log(head_prior / (1 - head_prior))
    return ParamStore(entries)


def _as_graph(model) -> Graph:
    if isinstance(model, Graph):
        return model
    from .models import build

    return build(model)


# -- forward / backward -------------------------------------------------------


def forward(model, params: ParamStore, batch: np.ndarray, keep_cache: bool = True) -> np.ndarray:
    """Run the network; returns the ``[n, 1, h, w]`` probability map."""
    graph = _as_graph(model)
    x = T.as_tensor(batch, dtype=params.dtype)
    mult = 2**graph.depth
    if x.shape[2] % mult or x.shape[3] % mult:
        raise T.ShapeError(
            f"spatial dims {x.shape[2]}x{x.shape[3]} must be multiples of {mult} (2**depth)"
        )
    if x.shape[1] != graph.in_channels:
        raise T.ShapeError(f"batch has {x.shape[1]} channels, model expects {graph.in_channels}")
    pidx = params.index()
    values = {"input": T.to_nhwc(x)}
    caches = {}
    for node in graph.nodes:
        p = None
        if node.layer.param_shapes() is not None:
            e = pidx[node.name]
            p = (e.weight, e.bias)
        out, cache = node.layer.forward([values[i] for i in node.inputs], p)
        values[node.name] = out
        caches[node.name] = cache
    params.cache = {"graph": id(graph), "caches": caches} if keep_cache else None
    return T.to_nchw(values[graph.output])


def backward(model, params: ParamStore, loss_grad: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Chain-rule gradients for every entry of ``params``, in store order.

    ``loss_grad`` is d(loss)/d(probability map) from the last :func:`forward`.
    """
    graph = _as_graph(model)
    if not params.cache or params.cache["graph"] != id(graph):
        raise BackwardBeforeForward("backward() called without a preceding forward() on these params")
    caches = params.cache["caches"]
    pidx = params.index()
    grads = {graph.output: T.to_nhwc(T.as_tensor(loss_grad, dtype=params.dtype))}
    pgrads = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node.name, None)
        if g is None:
            continue
        p = None
        if node.layer.param_shapes() is not None:
            e = pidx[node.name]
            p = (e.weight, e.bias)
        need_input = node.inputs != ("input",)
        in_grads, pg = node.layer.backward(caches[node.name], g, p, need_input)
        if pg is not None:
            pgrads[node.name] = pg
        for src, gi in zip(node.inputs, in_grads):
            if src == "input":
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    out = []
    for e in params:
        gw, gb = pgrads.get(e.layer_id, (np.zeros_like(e.weight), np.zeros_like(e.bias)))
        out.append((gw.astype(e.weight.dtype, copy=False), gb.astype(e.bias.dtype, copy=False)))
    return out


# -- optimisation -------------------------------------------------------------


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    clip_norm: float | None = 0.25  # global gradient-norm cap applied by train(); None disables
    lr_schedule: str = "constant"  # constant | cosine (decay to 0 over all steps)
    warmup_epochs: int = 3  # linear ramp from lr/steps up to lr over the first epochs
    head_prior: float | None = 0.01  # initial foreground probability; None keeps a zero head bias

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 or None")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.head_prior is not None and not 0 < self.head_prior < 1:
            raise ValueError("head_prior must be in (0, 1) or None")

    def lr_at(self, step: int, total: int, warmup: int = 0) -> float:
        """Learning rate for 0-based optimiser ``step`` out of ``total``; ``warmup`` steps ramp up first."""
        lr = self.learning_rate
        if step < warmup:
            return lr * (step + 1) / warmup
        if self.lr_schedule == "cosine" and total > warmup:
            return lr * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total - warmup)))
        return lr


def sgd_step(params: ParamStore, grads: Sequence, cfg: TrainConfig, lr: float | None = None) -> None:
    """``v <- momentum*v + g; theta <- theta - lr*v`` for every entry, in order.

    ``lr`` overrides ``cfg.learning_rate`` (used by scheduled training).
    """
    if len(grads) != len(params):
        raise T.ShapeError(f"{len(grads)} gradients for {len(params)} parameter entries")
    for e, (gw, gb) in zip(params, grads):
        if gw.shape != e.weight.shape or gb.shape != e.bias.shape:
            raise T.ShapeError(
                f"{e.layer_id}: gradient shapes {gw.shape}/{gb.shape} != "
                f"parameter shapes {e.weight.shape}/{e.bias.shape}"
            )
    lr = params.dtype.type(cfg.learning_rate if lr is None else lr)
    mom = params.dtype.type(cfg.momentum)
    for e, (gw, gb) in zip(params, grads):
        e.vel_weight *= mom
        e.vel_weight += gw
        e.weight -= lr * e.vel_weight
        e.vel_bias *= mom
        e.vel_bias += gb
        e.bias -= lr * e.vel_bias
    params.cache = None


def clip_gradients(grads, max_norm: float | None):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, norm)`` where ``norm`` is the pre-clipping norm.
    """
    norm = math.sqrt(sum(float(np.vdot(gw, gw)) + float(np.vdot(gb, gb)) for gw, gb in grads))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return [(gw * gw.dtype.type(scale), gb * gb.dtype.type(scale)) for gw, gb in grads], norm


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_dice: float


def _stack(dataset):
    if isinstance(dataset, tuple):
        images, masks = dataset
    else:
        samples = list(dataset)
        if not samples:
            raise ValueError("dataset is empty")
        images = np.concatenate([s.image for s in samples])
        masks = np.concatenate([s.mask for s in samples])
    images = np.asarray(images)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if images.shape != masks.shape:
        raise T.ShapeError(f"image stack {images.shape} != mask stack {masks.shape}")
    return images, masks


def train(model, dataset, loss, cfg: TrainConfig, val=None, params: ParamStore | None = None,
          dtype=np.float32, callback=None, threshold: float = 0.5, pooling: str = "slice"):
    """Train from a fresh He initialisation (seeded by ``cfg.seed``, head bias at ``cfg.head_prior``).

    ``dataset`` / ``val`` are sequences of samples with ``image``/``mask``
    attributes or ``(images, masks)`` array pairs.  Without ``val`` the
    training set is evaluated instead (at ``threshold`` with ``pooling``).
    ``callback(epoch, params)`` runs once per epoch.  Returns ``(params, [EpochLog, ...])``.
    """
    from .losses import compute_loss
    from .metrics import evaluate_arrays

    graph = _as_graph(model)
    images, masks = _stack(dataset)
    val_images, val_masks = _stack(val) if val is not None else (images, masks)
    images = images.astype(dtype, copy=False)
    if params is None:
        params = init_params(graph, cfg.seed, dtype=dtype, head_prior=cfg.head_prior)
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(images)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = min(cfg.warmup_epochs, cfg.epochs) * steps_per_epoch
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            prob = forward(graph, params, images[idx])
            value, grad = compute_loss(loss, masks[idx], prob)
            if not math.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            grads, _ = clip_gradients(backward(graph, params, grad), cfg.clip_norm)
            lr = cfg.lr_at(epoch * steps_per_epoch + step, total_steps, warmup_steps)
            sgd_step(params, grads, cfg, lr)
            total += value * len(idx)
            count += len(idx)
        dice = evaluate_arrays(graph, params, val_images, val_masks, threshold, pooling)[0]
        history.append(EpochLog(epoch + 1, total / count, dice))
        log.debug("epoch %d loss %.5f val dice %.4f", epoch + 1, total / count, dice)
        if callback is not None:
            callback(epoch + 1, params)
    return params, history
