"""Executable networks instantiated from a :class:`~gunn.arch.NetworkSpec`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import layers as L
from .arch import GunnStage, NetworkSpec, Transition, validate
from .engine import Bottleneck, ChannelPartition, GunnLayer, StageTape, UpdateUnit, gunn_forward, layer_backward
from .tensor import ShapeError, resolve_dtype


def he_normal(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    """Zero-mean normal with std sqrt(2 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def make_conv(rng, cin: int, cout: int, k: int, stride: int = 1, dtype=np.float64) -> L.ConvParams:
    return L.ConvParams(he_normal(rng, (cout, cin, k, k), dtype), None, stride, k // 2)


def make_bottleneck(rng, n_in: int, n_out: int, K: int, dtype=np.float64) -> Bottleneck:
    h = K * n_out
    return Bottleneck(
        make_conv(rng, n_in, h, 1, dtype=dtype), L.BatchNormParams.identity(h, dtype),
        make_conv(rng, h, h, 3, dtype=dtype), L.BatchNormParams.identity(h, dtype),
        make_conv(rng, h, n_out, 1, dtype=dtype), L.BatchNormParams.identity(n_out, dtype),
    )


def make_gunn_layer(rng, N: int, P: int, K: int = 2, M: int = 1, mode: str = "gradual",
                    residual: bool = True, dtype=np.float64) -> GunnLayer:
    part = ChannelPartition.even(N, P)
    n = N // P
    units = []
    for _ in range(P):
        blocks = [make_bottleneck(rng, N, n, K, dtype)]
        blocks += [make_bottleneck(rng, n, n, K, dtype) for _ in range(M - 1)]
        units.append(UpdateUnit(blocks, residual))
    return GunnLayer(part, units, mode)


@dataclass
class ConvBNReLU:
    conv: L.ConvParams
    bn: L.BatchNormParams
    pool: str = "none"  # "none" | "avg" | "max"

    def forward(self, x, training: bool, update_stats: bool = True):
        z = L.conv2d_forward(x, self.conv)
        a, bnc = L.batchnorm_forward(z, self.bn, training, update_stats)
        r = L.relu_forward(a)
        pc = None
        if self.pool == "avg":
            out = L.avgpool2x2_forward(r)
        elif self.pool == "max":
            out, pc = L.maxpool_forward(r)
        else:
            out = r
        return out, (x, bnc, a, pc)

    def backward(self, cache, g):
        x, bnc, a, pc = cache
        if self.pool == "avg":
            g = L.avgpool2x2_backward(g)
        elif self.pool == "max":
            g = L.maxpool_backward(pc, g)
        grads = {}
        g, gr = L.batchnorm_backward(bnc, self.bn, L.relu_backward(a, g))
        grads.update({f"bn.{k}": v for k, v in gr.items()})
        g, gr = L.conv2d_backward(x, self.conv, g)
        grads.update({f"conv.{k}": v for k, v in gr.items()})
        return g, grads

    def named_parameters(self, prefix):
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield from self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix):
        yield from self.bn.named_buffers(f"{prefix}.bn")


@dataclass
class Head:
    weight: np.ndarray  # (classes, features)
    bias: np.ndarray

    def forward(self, x, training: bool, update_stats: bool = True):
        pooled = L.global_avgpool_forward(x)
        return L.linear_forward(pooled, self.weight, self.bias), (x.shape, pooled)

    def backward(self, cache, g):
        shape, pooled = cache
        gp, gr = L.linear_backward(pooled, self.weight, g)
        return L.global_avgpool_backward(gp, shape), gr

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix):
        return iter(())


@dataclass
class GunnModule:
    layer: GunnLayer

    def forward(self, x, training: bool, update_stats: bool = True):
        tape = StageTape()
        y = gunn_forward(x, self.layer, tape, training, update_stats)
        return y, tape

    def backward(self, tape, g):
        # the output buffer is dead once the downstream backward has run
        return layer_backward(tape, self.layer, g, in_place=True)

    def named_parameters(self, prefix):
        yield from self.layer.named_parameters(prefix)

    def named_buffers(self, prefix):
        yield from self.layer.named_buffers(prefix)


class Network:
    """A feed-forward chain of modules with flat, dotted parameter names."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, precision="f64"):
        validate(spec)
        self.spec = spec
        self.dtype = resolve_dtype(precision)
        rng = np.random.default_rng(seed)
        dt = self.dtype
        s = spec.stem
        self.modules: list[tuple[str, object]] = []
        self.modules.append(("stem", ConvBNReLU(make_conv(rng, spec.in_channels, s.out, s.kernel, s.stride, dt),
                                                L.BatchNormParams.identity(s.out, dt), s.pool)))
        ch = s.out
        if s.expand_to:
            self.modules.append(("expand", ConvBNReLU(make_conv(rng, ch, s.expand_to, 1, dtype=dt),
                                                      L.BatchNormParams.identity(s.expand_to, dt))))
            ch = s.expand_to
        for i, st in enumerate(spec.stages):
            if isinstance(st, GunnStage):
                c = st.config
                layer = make_gunn_layer(rng, c.N, c.P, c.K, c.M, st.mode, st.residual, dt)
                self.modules.append((f"stages.{i}", GunnModule(layer)))
            else:
                self.modules.append((f"stages.{i}", ConvBNReLU(make_conv(rng, ch, st.out, 1, dtype=dt),
                                                               L.BatchNormParams.identity(st.out, dt), st.pool)))
                ch = st.out
        w = he_normal(rng, (spec.head.classes, spec.head.features), dt)
        self.modules.append(("head", Head(w, np.zeros(spec.head.classes, dt))))

    # -- parameters -----------------------------------------------------------

    def named_parameters(self):
        for name, mod in self.modules:
            yield from mod.named_parameters(name)

    def named_buffers(self):
        for name, mod in self.modules:
            yield from mod.named_buffers(name)

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.named_parameters()}
        out.update({f"buffer.{k}": v for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state_dict()
        if set(mine) != set(state):
            missing = sorted(set(mine) - set(state))[:5]
            extra = sorted(set(state) - set(mine))[:5]
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, dst in mine.items():
            src = state[k]
            if src.shape != dst.shape:
                raise ShapeError(f"{k}: checkpoint shape {src.shape} vs model shape {dst.shape}")
            dst[...] = src

    def set_mode(self, mode: str) -> None:
        """Switch every GUNN stage's evaluation order, keeping its parameters."""
        from .arch import convert_mode

        self.spec = convert_mode(self.spec, mode)
        for name, mod in self.modules:
            if isinstance(mod, GunnModule):
                mod.layer = mod.layer.with_mode(mode)

    # -- evaluation ----------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, update_stats: bool = True):
        """Logits and the per-module caches needed by :meth:`backward`."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"network expects {self.spec.in_channels} input channels, got shape {x.shape}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for _, mod in self.modules:
            x, cache = mod.forward(x, training, update_stats)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        g = grad_logits.astype(self.dtype, copy=False)
        grads = {}
        for (name, mod), cache in zip(reversed(self.modules), reversed(caches)):
            g, gr = mod.backward(cache, g)
            for k, v in gr.items():
                grads[f"{name}.{k}"] = v
        return grads

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch):
            logits, _ = self.forward(x[i : i + batch], training=False)
            outs.append(logits)
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.classes), self.dtype)

    def gunn_layers(self) -> list[tuple[str, GunnLayer]]:
        return [(name, mod.layer) for name, mod in self.modules if isinstance(mod, GunnModule)]

    def gunn_inputs(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Inference-mode input of every GUNN stage for images ``x``."""
        x = x.astype(self.dtype, copy=False)
        out = {}
        for name, mod in self.modules:
            if isinstance(mod, GunnModule):
                out[name] = x
            x, _ = mod.forward(x, False, False)
        return out
