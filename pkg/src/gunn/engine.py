"""Gradually updated layers: channel-partitioned sequential feature updates.

A :class:`GunnLayer` owns an ordered :class:`ChannelPartition` and one
:class:`UpdateUnit` per segment. In ``"gradual"`` mode segment ``i`` is
recomputed from the current mixed state (segments before ``i`` already
updated, the rest original) and written back in place; in
``"simultaneous"`` mode every unit reads the original input. Both modes share
the same parameters.

The gradual backward pass keeps only the layer input. Walking the segments in
reverse, each segment's channels are restored from that saved input, which
reproduces the exact state the unit saw during the forward pass, and the
unit's activations are recomputed for just that stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import layers as L
from .tensor import ShapeError

GRADUAL = "gradual"
SIMULTANEOUS = "simultaneous"
MODES = (GRADUAL, SIMULTANEOUS)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


# ----------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class ChannelPartition:
    """Ordered, disjoint channel segments covering ``range(n)``."""

    n: int
    segments: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for seg in self.segments:
            if not seg:
                raise ValueError("empty segment in channel partition")
            overlap = seen.intersection(seg)
            if overlap or len(set(seg)) != len(seg):
                raise ValueError(f"channel partition segments overlap on {sorted(overlap) or seg}")
            seen.update(seg)
        if seen != set(range(self.n)):
            missing = sorted(set(range(self.n)) - seen)
            extra = sorted(seen - set(range(self.n)))
            raise ValueError(f"partition does not cover 0..{self.n - 1}: missing {missing}, extra {extra}")

    @classmethod
    def even(cls, n: int, p: int) -> "ChannelPartition":
        if p < 1 or n % p:
            raise ValueError(f"cannot split {n} channels into {p} equal segments")
        size = n // p
        return cls(n, tuple(tuple(range(i * size, (i + 1) * size)) for i in range(p)))

    def __len__(self) -> int:
        return len(self.segments)

    def index(self, i: int) -> Union[slice, np.ndarray]:
        return _segment_index(self.segments[i])


def _segment_index(seg: tuple) -> Union[slice, np.ndarray]:
    # contiguous segments index as views
    if seg == tuple(range(seg[0], seg[0] + len(seg))):
        return slice(seg[0], seg[0] + len(seg))
    return np.asarray(seg)


# ----------------------------------------------------------------------------
# update units


@dataclass
class Bottleneck:
    """1x1 -> 3x3 -> 1x1 convolutions with BN after each and ReLU after the first two."""

    conv1: L.ConvParams
    bn1: L.BatchNormParams
    conv2: L.ConvParams
    bn2: L.BatchNormParams
    conv3: L.ConvParams
    bn3: L.BatchNormParams

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    def activation_channels(self) -> int:
        """Channels held in the cache for one evaluation (see ``forward``)."""
        hidden = self.conv1.out_channels
        return 6 * hidden + self.out_channels

    def forward(self, x, training: bool, update_stats: bool):
        z1 = L.conv2d_forward(x, self.conv1)
        a1, c1 = L.batchnorm_forward(z1, self.bn1, training, update_stats)
        r1 = L.relu_forward(a1)
        z2 = L.conv2d_forward(r1, self.conv2)
        a2, c2 = L.batchnorm_forward(z2, self.bn2, training, update_stats)
        r2 = L.relu_forward(a2)
        z3 = L.conv2d_forward(r2, self.conv3)
        out, c3 = L.batchnorm_forward(z3, self.bn3, training, update_stats)
        return out, (x, c1, a1, r1, c2, a2, r2, c3)

    def backward(self, cache, g):
        x, c1, a1, r1, c2, a2, r2, c3 = cache
        grads = {}
        g, gr = L.batchnorm_backward(c3, self.bn3, g)
        _put(grads, "bn3", gr)
        g, gr = L.conv2d_backward(r2, self.conv3, g)
        _put(grads, "conv3", gr)
        g, gr = L.batchnorm_backward(c2, self.bn2, L.relu_backward(a2, g))
        _put(grads, "bn2", gr)
        g, gr = L.conv2d_backward(r1, self.conv2, g)
        _put(grads, "conv2", gr)
        g, gr = L.batchnorm_backward(c1, self.bn1, L.relu_backward(a1, g))
        _put(grads, "bn1", gr)
        g, gr = L.conv2d_backward(x, self.conv1, g)
        _put(grads, "conv1", gr)
        return g, grads

    def named_parameters(self, prefix: str):
        for name in ("conv1", "bn1", "conv2", "bn2", "conv3", "bn3"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str):
        for name in ("bn1", "bn2", "bn3"):
            yield from getattr(self, name).named_buffers(f"{prefix}.{name}")


@dataclass
class LinearBlock:
    """A bare 1x1 convolution: the linear update used by the singularity models."""

    conv: L.ConvParams

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def activation_channels(self) -> int:
        return self.out_channels

    def forward(self, x, training: bool, update_stats: bool):
        return L.conv2d_forward(x, self.conv), x

    def backward(self, cache, g):
        gx, gr = L.conv2d_backward(cache, self.conv, g)
        grads = {}
        _put(grads, "conv", gr)
        return gx, grads

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(f"{prefix}.conv")

    def named_buffers(self, prefix: str):
        return iter(())


Block = Union[Bottleneck, LinearBlock]


@dataclass
class UpdateUnit:
    """Computes one segment's new values from the layer state.

    The first block maps the full state to the segment width; further stacked
    blocks map the segment to itself. With ``residual`` each block's output is
    added onto its own input (the segment channels for the first block).
    """

    blocks: list
    residual: bool = True

    @property
    def repeat_count(self) -> int:
        return len(self.blocks)

    @property
    def in_channels(self) -> int:
        return self.blocks[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    def named_parameters(self, prefix: str):
        for m, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}.blocks.{m}")

    def named_buffers(self, prefix: str):
        for m, blk in enumerate(self.blocks):
            yield from blk.named_buffers(f"{prefix}.blocks.{m}")


def _put(grads: dict, prefix: str, sub: dict) -> None:
    for k, v in sub.items():
        grads[f"{prefix}.{k}"] = v


def _unit_apply(unit: UpdateUnit, state, index, training: bool, update_stats: bool):
    """New segment values and the per-block caches."""
    inp = state
    h = None
    caches = []
    for m, blk in enumerate(unit.blocks):
        g, cache = blk.forward(inp, training, update_stats)
        caches.append(cache)
        if unit.residual:
            h = (state[:, index] if m == 0 else h) + g
        else:
            h = g
        inp = h
    return h, caches


def _unit_backward(unit: UpdateUnit, caches, g_out):
    """Adjoint of :func:`_unit_apply`.

    Returns ``(g_state, g_segment, grads)`` where ``g_state`` flows through the
    first block into every state channel and ``g_segment`` is the residual
    path onto the segment channels (``None`` without residual learning).
    """
    grads = {}
    g = g_out
    for m in range(len(unit.blocks) - 1, 0, -1):
        gin, gr = unit.blocks[m].backward(caches[m], g)
        _put(grads, f"blocks.{m}", gr)
        g = g + gin if unit.residual else gin
    g_state, gr = unit.blocks[0].backward(caches[0], g)
    _put(grads, "blocks.0", gr)
    return g_state, (g if unit.residual else None), grads


# ----------------------------------------------------------------------------
# layers


@dataclass
class GunnLayer:
    partition: ChannelPartition
    units: list
    mode: str = GRADUAL

    def __post_init__(self):
        check_mode(self.mode)
        if len(self.units) != len(self.partition):
            raise ValueError(f"{len(self.units)} units for {len(self.partition)} segments")
        for i, (seg, unit) in enumerate(zip(self.partition.segments, self.units)):
            if unit.out_channels != len(seg):
                raise ShapeError(f"unit {i} writes {unit.out_channels} channels into a segment of {len(seg)}")
            if unit.in_channels != self.partition.n:
                raise ShapeError(f"unit {i} reads {unit.in_channels} channels, layer has {self.partition.n}")

    @property
    def n_channels(self) -> int:
        return self.partition.n

    def named_parameters(self, prefix: str = ""):
        pre = f"{prefix}." if prefix else ""
        for i, unit in enumerate(self.units):
            yield from unit.named_parameters(f"{pre}units.{i}")

    def named_buffers(self, prefix: str = ""):
        pre = f"{prefix}." if prefix else ""
        for i, unit in enumerate(self.units):
            yield from unit.named_buffers(f"{pre}units.{i}")

    def with_mode(self, mode: str) -> "GunnLayer":
        """Same units (shared arrays), different evaluation order."""
        return GunnLayer(self.partition, self.units, check_mode(mode))


@dataclass
class StageTape:
    """What a gradual forward retains for its backward pass."""

    saved_input: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None
    mode: str = GRADUAL
    training: bool = True
    scratch: dict = field(default_factory=dict)


def _check_input(x, layer: GunnLayer):
    if x.ndim != 4 or x.shape[1] != layer.n_channels:
        raise ShapeError(f"GUNN layer expects {layer.n_channels} channels, got input shape {x.shape}")


def update_unit_forward(state, unit: UpdateUnit, segment: Sequence[int], training: bool = True,
                        update_stats: bool = False):
    """Residual delta a unit adds onto ``segment`` given the current state."""
    segment = tuple(segment)
    if unit.out_channels != len(segment):
        raise ShapeError(f"unit writes {unit.out_channels} channels, segment has {len(segment)}")
    if state.shape[1] != unit.in_channels:
        raise ShapeError(f"unit reads {unit.in_channels} channels, state shape {state.shape}")
    index = _segment_index(segment)
    new, _ = _unit_apply(unit, state, index, training, update_stats)
    return new - state[:, index]


def gunn_forward(x, layer: GunnLayer, tape: Optional[StageTape] = None, training: bool = True,
                 update_stats: bool = True):
    """Evaluate the layer in its mode; fill ``tape`` for a later backward."""
    _check_input(x, layer)
    y = x.copy()
    src = y if layer.mode == GRADUAL else x
    for i, unit in enumerate(layer.units):
        idx = layer.partition.index(i)
        new, _ = _unit_apply(unit, src, idx, training, update_stats)
        y[:, idx] = new
    if tape is not None:
        tape.saved_input = x
        tape.output = y
        tape.mode = layer.mode
        tape.training = training
    return y


def gunn_backward(tape: StageTape, layer: GunnLayer, grad_out, in_place: bool = False):
    """Memory-efficient backward pass of a gradual layer.

    Segments are visited last to first. Each step restores the segment from
    the saved input, recomputes that unit on the restored state, and folds
    its adjoint into the running input gradient. With residual units the
    gradient update for every channel is a single accumulate.

    ``in_place`` lets the pass use ``tape.output`` as its working buffer,
    which destroys the forward output.
    """
    if tape.saved_input is None or tape.output is None:
        raise ValueError("empty stage tape")
    if tape.mode != GRADUAL:
        raise ValueError(f"tape was recorded in {tape.mode!r} mode; use sunn_backward")
    x = tape.saved_input
    _check_input(x, layer)
    if tape.output.shape != x.shape or grad_out.shape != x.shape:
        raise ShapeError(f"tape/grad shapes {tape.output.shape}, {grad_out.shape} vs input {x.shape}")
    y = tape.output if in_place else tape.output.copy()
    gx = grad_out.copy()
    grads = {}
    for i in range(len(layer.units) - 1, -1, -1):
        unit = layer.units[i]
        idx = layer.partition.index(i)
        y[:, idx] = x[:, idx]
        _, caches = _unit_apply(unit, y, idx, tape.training, update_stats=False)
        g_state, g_seg, gr = _unit_backward(unit, caches, gx[:, idx])
        _put(grads, f"units.{i}", gr)
        if unit.residual:
            if unit.repeat_count > 1:
                gx[:, idx] = g_seg
            gx += g_state
        else:
            gx[:, idx] = 0
            gx += g_state
    return gx, grads


def sunn_backward(x, layer: GunnLayer, grad_out, training: bool = True):
    """Adjoint of the simultaneous forward: every unit saw the original ``x``."""
    _check_input(x, layer)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} vs input {x.shape}")
    gx = np.zeros_like(x)
    grads = {}
    for i, unit in enumerate(layer.units):
        idx = layer.partition.index(i)
        _, caches = _unit_apply(unit, x, idx, training, update_stats=False)
        g_state, g_seg, gr = _unit_backward(unit, caches, grad_out[:, idx])
        _put(grads, f"units.{i}", gr)
        gx += g_state
        if g_seg is not None:
            gx[:, idx] += g_seg
    return gx, grads


def layer_backward(tape: StageTape, layer: GunnLayer, grad_out, in_place: bool = False):
    """Dispatch on the mode the tape was recorded in."""
    if tape.mode == GRADUAL:
        return gunn_backward(tape, layer, grad_out, in_place=in_place)
    return sunn_backward(tape.saved_input, layer, grad_out, tape.training)


# ----------------------------------------------------------------------------
# memory accounting

NAIVE = "naive"


def stage_activation_channels(unit_or_config, segment_size: Optional[int] = None) -> int:
    """Channels of transient storage one unit evaluation keeps for its backward."""
    if isinstance(unit_or_config, UpdateUnit):
        unit = unit_or_config
        extra = unit.out_channels * (unit.repeat_count - 1)
        return sum(b.activation_channels() for b in unit.blocks) + extra
    k, m = unit_or_config.K, unit_or_config.M
    n = segment_size
    return m * (6 * k * n + n) + (m - 1) * n


def peak_activation_bytes(layer, input_shape, mode: str, itemsize: int = 8) -> int:
    """Accounted peak activation storage for one forward+backward of a layer.

    ``layer`` is a :class:`GunnLayer` or anything with ``N, P, K, M``.
    ``mode`` is ``"gradual"`` (saved input plus one recomputed stage),
    ``"simultaneous"`` (conventional backprop: saved input plus every unit's
    intermediates) or ``"naive"`` (gradual evaluation with every intermediate
    state and every unit's intermediates retained). The layer output belongs
    to the consumer and is not counted.
    """
    b, c, h, w = input_shape
    if isinstance(layer, GunnLayer):
        n, l = layer.n_channels, len(layer.units)
        stages = [stage_activation_channels(u) for u in layer.units]
    else:
        n, l = layer.N, layer.P
        stages = [stage_activation_channels(layer, n // l)] * l
    if c != n:
        raise ShapeError(f"input shape {tuple(input_shape)} vs layer width {n}")
    if mode == GRADUAL:
        channels = n + max(stages)
    elif mode == SIMULTANEOUS:
        channels = n + sum(stages)
    elif mode == NAIVE:
        channels = l * n + sum(stages)
    else:
        raise ValueError(f"unknown accounting mode {mode!r}")
    return int(channels) * b * h * w * itemsize
